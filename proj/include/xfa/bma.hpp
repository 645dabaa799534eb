#pragma once

#include "xfa/estep.hpp"
#include "xfa/init.hpp"
#include "xfa/mstep.hpp"
#include "xfa/parallel.hpp"
#include "xfa/prior.hpp"
#include "xfa/types.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numbers>
#include <optional>
#include <string>
#include <utility>
#include <vector>

namespace xfa {

/// rho-delta grid. Cells are fitted row by row: delta ascending, and within
/// a row rho descending (dense, lasso-like fits first).
struct GridSpec
{
    std::vector<double> rho_values;   // strictly descending, positive
    std::vector<double> delta_values; // strictly ascending, all > 2
    Condition condition = Condition::I;
    RateVariant rate_variant;
    Index K = 1;

    std::size_t size() const { return rho_values.size() * delta_values.size(); }
};

inline void validate(const GridSpec& grid)
{
    require(!grid.rho_values.empty() && !grid.delta_values.empty(), "grid must be non-empty");
    require(grid.K >= 1, "grid K must be positive");
    for (std::size_t i = 0; i < grid.rho_values.size(); ++i) {
        require(grid.rho_values[i] > 0.0, "rho values must be positive");
        if (i > 0) require(grid.rho_values[i] < grid.rho_values[i - 1], "rho values must be strictly descending");
    }
    for (std::size_t i = 0; i < grid.delta_values.size(); ++i) {
        require(grid.delta_values[i] > 2.0, "delta values must exceed 2");
        if (i > 0) require(grid.delta_values[i] > grid.delta_values[i - 1], "delta values must be strictly ascending");
    }
}

inline std::vector<double> log_spaced(double lo, double hi, std::size_t n)
{
    require(lo > 0.0 && hi > 0.0 && n >= 1, "log_spaced needs positive bounds");
    std::vector<double> out(n);
    if (n == 1) {
        out[0] = lo;
        return out;
    }
    const double a = std::log(lo);
    const double b = std::log(hi);
    for (std::size_t i = 0; i < n; ++i)
        out[i] = std::exp(a + (b - a) * static_cast<double>(i) / static_cast<double>(n - 1));
    out.front() = lo;
    out.back() = hi;
    return out;
}

/// 8 x 8 default grid: delta log-spaced on [2.1, 12], rho log-spaced on
/// [1e-2, 10] (capped at 0.9 under condition II and at 2 under III so every
/// cell satisfies the condition's constraint).
inline GridSpec default_grid(Index K, Condition condition = Condition::I, RateVariant rate = {})
{
    double rho_hi = 10.0;
    if (condition == Condition::II) rho_hi = 0.9;
    if (condition == Condition::III) rho_hi = 2.0;
    GridSpec g;
    g.delta_values = log_spaced(2.1, 12.0, 8);
    g.rho_values = log_spaced(1e-2, rho_hi, 8);
    std::reverse(g.rho_values.begin(), g.rho_values.end());
    g.condition = condition;
    g.rate_variant = rate;
    g.K = K;
    return g;
}

struct GridCell
{
    double rho = 0.0;
    double delta = 0.0;
    HyperSchedule schedule;
    ModelFit fit;
};

/// Warm-started traversal of the grid. The first cell starts from mle_init;
/// each later cell in a delta-row starts (and anchors) at the previous rho's
/// fit, and each row's first cell at the previous row's first fit. A cell that
/// throws is recorded with converged = false and the chain continues from the
/// last good state.
inline std::vector<GridCell> fit_grid(const SampleCov& s, const GridSpec& grid, const FitOptions& opts,
                                      int init_iters = 50)
{
    validate(grid);
    validate(opts);
    const FactorModelState init = mle_init(s, grid.K, init_iters);

    std::vector<GridCell> cells;
    cells.reserve(grid.size());
    FactorModelState row_start = init;
    for (double delta : grid.delta_values) {
        FactorModelState warm = row_start;
        std::optional<FactorModelState> next_row_start;
        for (double rho : grid.rho_values) {
            GridCell cell;
            cell.rho = rho;
            cell.delta = delta;
            cell.schedule = make_schedule(delta, rho, s.n_samples(), grid.K, grid.condition, grid.rate_variant);
            try {
                cell.fit = fit_one(s, warm, warm.loadings, cell.schedule, opts);
                warm = cell.fit.state;
                if (!next_row_start) next_row_start = cell.fit.state;
            } catch (const NumericalError& err) {
                cell.fit = ModelFit{};
                cell.fit.state = warm;
                cell.fit.active_sets = active_sets(warm.loadings);
                cell.fit.objective = std::numeric_limits<double>::quiet_NaN();
                cell.fit.converged = false;
                cell.fit.failure = err.what();
            }
            cells.push_back(std::move(cell));
        }
        if (next_row_start) row_start = *next_row_start;
    }
    return cells;
}

/// Laplace information block of row p restricted to its active set:
/// N Psi_AA / sigma2_p + diag{(alpha_k + 1) / (|lambda_pk| (eta_k + |lambda_pk|))}.
/// Empty active sets give a 0 x 0 block.
inline Matrix laplace_hessian_block(const FactorModelState& state, const Matrix& psi, const HyperSchedule& schedule,
                                    Index n_samples, Index p)
{
    require(p >= 0 && p < state.p_vars(), "variable index out of range");
    require(psi.rows() == state.k_factors(), "Psi does not match the number of factors");
    std::vector<Index> active;
    for (Index k = 0; k < state.k_factors(); ++k)
        if (state.loadings(p, k) != 0.0) active.push_back(k);

    const auto m = static_cast<Index>(active.size());
    const double scale = static_cast<double>(n_samples) / state.resid_vars(p);
    Matrix h(m, m);
    for (Index i = 0; i < m; ++i) {
        for (Index j = 0; j < m; ++j) h(i, j) = scale * psi(active[i], active[j]);
        const Index k = active[static_cast<std::size_t>(i)];
        const double a = std::abs(state.loadings(p, k));
        h(i, i) += (schedule.alphas(k) + 1.0) / (a * (schedule.etas(k) + a));
    }
    return h;
}

/// Log marginal likelihood by integrated nested Laplace approximation:
///   log p(Y | Lambda, Sigma) + log p(Lambda)
///   + (log 2 pi / 2) sum_p |A_p| - 1/2 sum_p log det H_p.
/// log p(Lambda) runs over all P K entries; zeros contribute log(alpha/(2 eta)).
/// `psi` is the E-step Psi at the fitted state.
inline double log_marginal(const FactorModelState& state, const Matrix& psi, const SampleCov& s,
                           const HyperSchedule& schedule)
{
    const double loglik = log_likelihood(s, state);
    const double log_prior = mgdp_log_density(state.loadings, schedule);
    double active_total = 0.0;
    double logdet_total = 0.0;
    for (Index p = 0; p < state.p_vars(); ++p) {
        const Matrix h = laplace_hessian_block(state, psi, schedule, s.n_samples(), p);
        if (h.rows() == 0) continue;
        Eigen::LLT<Matrix> llt(h);
        if (llt.info() != Eigen::Success)
            throw NumericalError("Laplace Hessian block of variable " + std::to_string(p) + " is not positive definite");
        const Matrix l = llt.matrixL();
        logdet_total += 2.0 * l.diagonal().array().log().sum();
        active_total += static_cast<double>(h.rows());
    }
    return loglik + log_prior + 0.5 * std::log(2.0 * std::numbers::pi) * active_total - 0.5 * logdet_total;
}

inline double log_marginal(const ModelFit& fit, const SampleCov& s, const HyperSchedule& schedule)
{
    const EStepQuantities e = estep(s, fit.state);
    return log_marginal(fit.state, e.psi, s, schedule);
}

/// Normalized log posterior model weights by max-shifted log-sum-exp.
/// Entries of -inf (excluded models) get weight exactly zero. Empty
/// `log_priors` means a uniform prior over the grid.
inline Vector model_weights(const Vector& log_marginals, const Vector& log_priors = Vector())
{
    const Index G = log_marginals.size();
    require(G >= 1, "no models to weight");
    require(log_priors.size() == 0 || log_priors.size() == G, "log prior length differs from the number of models");
    Vector total(G);
    for (Index g = 0; g < G; ++g) {
        const double lp = log_priors.size() == 0 ? -std::log(static_cast<double>(G)) : log_priors(g);
        const double v = log_marginals(g) + lp;
        require(!std::isnan(v) && v != std::numeric_limits<double>::infinity(),
                "log marginals and priors must be finite or -inf");
        total(g) = v;
    }
    const double top = total.maxCoeff();
    require(std::isfinite(top), "every model has log weight -inf");
    double sum = 0.0;
    for (Index g = 0; g < G; ++g) sum += std::exp(total(g) - top);
    const double log_norm = top + std::log(sum);
    Vector out(G);
    for (Index g = 0; g < G; ++g)
        out(g) = std::isfinite(total(g)) ? total(g) - log_norm : -std::numeric_limits<double>::infinity();
    return out;
}

/// Weighted average of the cells' loadings and residual variances. Cells with
/// zero weight are skipped, so a cell that is zero in every weighted model
/// stays exactly zero.
inline std::pair<Matrix, Vector> model_average(const std::vector<GridCell>& cells, const Vector& weights)
{
    require(!cells.empty(), "no models to average");
    require(weights.size() == static_cast<Index>(cells.size()), "weights and models disagree in length");
    const FactorModelState& first = cells.front().fit.state;
    Matrix loadings = Matrix::Zero(first.p_vars(), first.k_factors());
    Vector resid = Vector::Zero(first.p_vars());
    for (std::size_t g = 0; g < cells.size(); ++g) {
        const double w = weights(static_cast<Index>(g));
        require(w >= 0.0 && std::isfinite(w), "weights must be finite and non-negative");
        if (w == 0.0) continue;
        loadings += w * cells[g].fit.state.loadings;
        resid += w * cells[g].fit.state.resid_vars;
    }
    return {loadings, resid};
}

struct CredibleIntervals
{
    Matrix lower;
    Matrix upper;
    /// (cell index, variable) pairs whose Hessian block was singular; their
    /// loadings entered the mixture as point masses.
    std::vector<std::pair<std::size_t, Index>> flagged;
};

namespace detail {

struct MixtureComponent
{
    double weight;
    double mean;
    double sd; // 0 means a point mass
};

inline double normal_cdf(double z) { return 0.5 * std::erfc(-z / std::numbers::sqrt2); }

/// Smallest x with F(x) >= q for a mixture of normals and point masses.
inline double mixture_quantile(const std::vector<MixtureComponent>& comps, double q)
{
    auto cdf = [&](double x, bool left_limit) {
        double f = 0.0;
        for (const auto& c : comps) {
            if (c.sd > 0.0) f += c.weight * normal_cdf((x - c.mean) / c.sd);
            else if (left_limit ? c.mean < x : c.mean <= x) f += c.weight;
        }
        return f;
    };

    // a point mass location that straddles q is the exact answer
    for (const auto& c : comps) {
        if (c.sd > 0.0) continue;
        if (cdf(c.mean, true) < q && cdf(c.mean, false) >= q) return c.mean;
    }

    double lo = std::numeric_limits<double>::infinity();
    double hi = -lo;
    for (const auto& c : comps) {
        lo = std::min(lo, c.mean - 40.0 * c.sd);
        hi = std::max(hi, c.mean + 40.0 * c.sd);
    }
    for (int it = 0; it < 200 && lo < hi; ++it) {
        const double mid = 0.5 * (lo + hi);
        if (mid <= lo || mid >= hi) break;
        if (cdf(mid, false) >= q) hi = mid;
        else lo = mid;
    }
    return hi;
}

} // namespace detail

/// Equal-tailed intervals of the weighted mixture over grid cells. In each
/// cell an active loading is N(estimate, [H_p^-1]_kk) with H_p the Laplace
/// block; an inactive loading is a point mass at zero.
inline CredibleIntervals credible_intervals(const std::vector<GridCell>& cells, const Vector& weights,
                                            const std::vector<Matrix>& psis, Index n_samples, double level)
{
    require(level > 0.0 && level < 1.0, "credible level must lie in (0, 1)");
    require(!cells.empty(), "no models");
    require(weights.size() == static_cast<Index>(cells.size()) && psis.size() == cells.size(),
            "weights, Psi blocks and models disagree in length");
    const Index P = cells.front().fit.state.p_vars();
    const Index K = cells.front().fit.state.k_factors();

    std::vector<std::vector<detail::MixtureComponent>> comps(static_cast<std::size_t>(P * K));
    CredibleIntervals out;
    for (std::size_t g = 0; g < cells.size(); ++g) {
        const double w = weights(static_cast<Index>(g));
        if (w <= 0.0) continue;
        const FactorModelState& st = cells[g].fit.state;
        for (Index p = 0; p < P; ++p) {
            std::vector<double> sd(static_cast<std::size_t>(K), 0.0);
            const Matrix h = laplace_hessian_block(st, psis[g], cells[g].schedule, n_samples, p);
            if (h.rows() > 0) {
                Eigen::LLT<Matrix> llt(h);
                bool ok = llt.info() == Eigen::Success;
                Matrix cov;
                if (ok) {
                    cov = llt.solve(Matrix::Identity(h.rows(), h.cols()));
                    ok = cov.allFinite() && (cov.diagonal().array() > 0.0).all();
                }
                if (ok) {
                    Index i = 0;
                    for (Index k = 0; k < K; ++k)
                        if (st.loadings(p, k) != 0.0) sd[static_cast<std::size_t>(k)] = std::sqrt(cov(i, i)), ++i;
                } else {
                    out.flagged.emplace_back(g, p);
                }
            }
            for (Index k = 0; k < K; ++k)
                comps[static_cast<std::size_t>(p * K + k)].push_back({w, st.loadings(p, k), sd[static_cast<std::size_t>(k)]});
        }
    }

    const double tail = 0.5 * (1.0 - level);
    out.lower.resize(P, K);
    out.upper.resize(P, K);
    for (Index p = 0; p < P; ++p) {
        for (Index k = 0; k < K; ++k) {
            auto& c = comps[static_cast<std::size_t>(p * K + k)];
            double total = 0.0;
            for (const auto& x : c) total += x.weight;
            for (auto& x : c) x.weight /= total;
            out.lower(p, k) = detail::mixture_quantile(c, tail);
            out.upper(p, k) = detail::mixture_quantile(c, 1.0 - tail);
        }
    }
    return out;
}

/// Zeroes every entry whose interval contains zero.
inline Matrix threshold_by_intervals(const Matrix& loadings, const CredibleIntervals& ci)
{
    Matrix out = loadings;
    for (Index p = 0; p < out.rows(); ++p)
        for (Index k = 0; k < out.cols(); ++k)
            if (ci.lower(p, k) <= 0.0 && ci.upper(p, k) >= 0.0) out(p, k) = 0.0;
    return out;
}

struct GridResult
{
    std::vector<GridCell> cells;
    std::vector<Matrix> psis;  // converged E-step Psi per cell
    Vector log_marginals;      // -inf for excluded cells
    Vector log_weights;
    Matrix averaged_loadings;
    Vector averaged_resid;
    std::vector<std::string> excluded; // per-cell reason, empty if included
};

/// Grid fit, Laplace marginals, weights and model average. Cells that did
/// not converge (or whose marginal cannot be evaluated) get weight zero.
inline GridResult run_bma(const SampleCov& s, const GridSpec& grid, const FitOptions& opts, int init_iters = 50,
                          const Vector& log_priors = Vector())
{
    GridResult r;
    r.cells = fit_grid(s, grid, opts, init_iters);
    const auto G = static_cast<Index>(r.cells.size());
    r.psis.resize(r.cells.size());
    r.log_marginals = Vector::Constant(G, -std::numeric_limits<double>::infinity());
    r.excluded.assign(r.cells.size(), std::string());

    parallel_for(G, opts.threads, [&](Index begin, Index end) {
        for (Index g = begin; g < end; ++g) {
            auto& cell = r.cells[static_cast<std::size_t>(g)];
            auto& why = r.excluded[static_cast<std::size_t>(g)];
            try {
                const EStepQuantities e = estep(s, cell.fit.state);
                r.psis[static_cast<std::size_t>(g)] = e.psi;
                if (!cell.fit.converged) {
                    why = cell.fit.failure.empty() ? "not converged" : cell.fit.failure;
                    continue;
                }
                r.log_marginals(g) = log_marginal(cell.fit.state, e.psi, s, cell.schedule);
            } catch (const NumericalError& err) {
                why = err.what();
                if (r.psis[static_cast<std::size_t>(g)].size() == 0)
                    r.psis[static_cast<std::size_t>(g)] = Matrix::Identity(grid.K, grid.K);
            }
        }
    });

    bool any = false;
    for (Index g = 0; g < G; ++g) any = any || std::isfinite(r.log_marginals(g));
    if (!any) throw NumericalError("no grid cell converged");

    r.log_weights = model_weights(r.log_marginals, log_priors);
    for (Index g = 0; g < G; ++g) {
        auto& fit = r.cells[static_cast<std::size_t>(g)].fit;
        if (std::isfinite(r.log_marginals(g))) fit.log_marginal = r.log_marginals(g);
        fit.log_weight = r.log_weights(g);
    }
    const Vector w = r.log_weights.array().exp();
    std::tie(r.averaged_loadings, r.averaged_resid) = model_average(r.cells, w);
    return r;
}

inline CredibleIntervals credible_intervals(const GridResult& r, Index n_samples, double level)
{
    return credible_intervals(r.cells, r.log_weights.array().exp().matrix(), r.psis, n_samples, level);
}

} // namespace xfa
