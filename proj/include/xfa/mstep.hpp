#pragma once

#include "xfa/estep.hpp"
#include "xfa/parallel.hpp"
#include "xfa/prior.hpp"
#include "xfa/types.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <optional>
#include <string>
#include <vector>

namespace xfa {

struct FitOptions
{
    int max_outer_iters = 200; // EM refinements
    int max_inner_iters = 100; // coordinate-descent sweeps per M-step
    double inner_tol = 1e-6;   // max |d lambda| / (1 + |lambda|)
    double outer_tol = 1e-8;   // relative change of the log posterior
    bool one_step = false;     // single refinement with the supplied anchor
    bool accelerate = true;    // safeguarded squared extrapolation between EM steps
    int threads = 1;
};

inline void validate(const FitOptions& o)
{
    require(o.max_outer_iters >= 1 && o.max_inner_iters >= 1, "iteration caps must be at least 1");
    require(o.inner_tol > 0.0 && o.outer_tol > 0.0, "tolerances must be positive");
    require(o.threads >= 1, "thread count must be at least 1");
}

/// One converged (or abandoned) fit of a single grid cell.
struct ModelFit
{
    FactorModelState state;
    std::vector<std::vector<Index>> active_sets;
    double objective = 0.0;
    int n_outer_iters = 0;
    bool converged = false;
    std::optional<double> log_marginal;
    std::optional<double> log_weight;
    /// Log posterior before the first refinement and after each one.
    std::vector<double> objective_trace;
    /// Variables whose residual variance hit the floor in the last update.
    std::vector<Index> floored;
    std::string failure;
};

/// sign(z) * max(|z| - c, 0); ties at |z| == c give exactly zero.
inline double soft_threshold(double z, double c)
{
    if (std::abs(z) <= c) return 0.0;
    return z > 0.0 ? z - c : z + c;
}

/// Per-cell thresholds c_pk = (alpha_k + 1) sigma2_p / (N (eta_k + |anchor_pk|)).
inline Matrix lla_thresholds(const Vector& resid_vars, const Matrix& anchor, const HyperSchedule& schedule,
                             Index n_samples)
{
    require(schedule.size() >= anchor.cols(), "schedule shorter than the number of loadings columns");
    require(resid_vars.size() == anchor.rows(), "anchor rows and residual variances disagree");
    const double n = static_cast<double>(n_samples);
    Matrix c(anchor.rows(), anchor.cols());
    for (Index k = 0; k < anchor.cols(); ++k) {
        const double a1 = schedule.alphas(k) + 1.0;
        const double eta = schedule.etas(k);
        for (Index p = 0; p < anchor.rows(); ++p)
            c(p, k) = a1 * resid_vars(p) / (n * (eta + std::abs(anchor(p, k))));
    }
    return c;
}

/// Solves, for every row p, the weighted-l1 problem
///   min_l  0.5 l^T Psi l - lambda_hat_p^T l + sum_k c_pk |l_k|
/// by cyclic coordinate descent in column order k = 1..K, starting from the
/// current loadings. Rows are independent and may be split across threads;
/// each row stops once a sweep changes no entry by more than inner_tol
/// relative to (1 + |lambda|).
inline Matrix coordinate_descent_lambda(const EStepQuantities& e, const SampleCov& s, const FactorModelState& state,
                                        const Matrix& anchor, const HyperSchedule& schedule, const FitOptions& opts,
                                        int* sweeps_used = nullptr)
{
    const Index P = state.p_vars();
    const Index K = state.k_factors();
    require(anchor.rows() == P && anchor.cols() == K, "anchor shape differs from loadings");
    require(e.psi.rows() == K && e.lambda_hat.rows() == P, "E-step quantities do not match the state");

    const Matrix c = lla_thresholds(state.resid_vars, anchor, schedule, s.n_samples());
    const Matrix& psi = e.psi;
    Matrix lambda = state.loadings;
    std::vector<int> used(static_cast<std::size_t>(P), 0);

    parallel_for(P, opts.threads, [&](Index begin, Index end) {
        Vector row(K);
        for (Index p = begin; p < end; ++p) {
            row = lambda.row(p).transpose();
            int sweep = 0;
            while (sweep < opts.max_inner_iters) {
                ++sweep;
                double max_change = 0.0;
                for (Index k = 0; k < K; ++k) {
                    const double partial = e.lambda_hat(p, k) - psi.col(k).dot(row) + psi(k, k) * row(k);
                    const double updated = soft_threshold(partial, c(p, k)) / psi(k, k);
                    if (!std::isfinite(updated))
                        throw NumericalError("coordinate descent diverged at cell (" + std::to_string(p) + ", " +
                                             std::to_string(k) + ")");
                    max_change = std::max(max_change, std::abs(updated - row(k)) / (1.0 + std::abs(updated)));
                    row(k) = updated == 0.0 ? 0.0 : updated;
                }
                if (max_change < opts.inner_tol) break;
            }
            lambda.row(p) = row.transpose();
            used[static_cast<std::size_t>(p)] = sweep;
        }
    });
    if (sweeps_used) *sweeps_used = P > 0 ? *std::max_element(used.begin(), used.end()) : 0;
    return lambda;
}

struct SigmaUpdate
{
    Vector values;
    std::vector<Index> floored;
};

/// sigma2_p = N/(N+2) {S_pp + l_p^T Psi l_p - 2 lambda_hat_p^T l_p}, floored at
/// max(1e-6 S_pp, 1e-12).
inline SigmaUpdate update_sigma(const SampleCov& s, const EStepQuantities& e, const Matrix& loadings)
{
    const Index P = loadings.rows();
    require(P == s.p_vars() && loadings.cols() == e.psi.rows(), "dimension mismatch in sigma update");
    const double n = static_cast<double>(s.n_samples());
    const double factor = n / (n + 2.0);
    const Matrix lp = loadings * e.psi;

    SigmaUpdate out;
    out.values.resize(P);
    for (Index p = 0; p < P; ++p) {
        const double spp = s.matrix()(p, p);
        const double raw =
            factor * (spp + lp.row(p).dot(loadings.row(p)) - 2.0 * e.lambda_hat.row(p).dot(loadings.row(p)));
        const double floor = std::max(1e-6 * spp, 1e-12);
        if (!(raw >= floor)) {
            out.values(p) = floor;
            out.floored.push_back(p);
        } else {
            out.values(p) = raw;
        }
    }
    return out;
}

/// Gaussian log likelihood -N/2 {log det Omega + tr(Omega^-1 S)} - NP/2 log 2 pi,
/// Omega = Lambda Lambda^T + Sigma.
///
/// With B = Sigma^-1/2 Lambda = QR (thin QR, rank min(P, K)) and S~ = Sigma^-1/2 S Sigma^-1/2,
///   tr(Omega^-1 S) = tr(S~) - tr(G) + tr((I + R R^T)^-1 G),  G = Q^T S~ Q,
///   log det Omega  = sum log sigma2 + log det(I + R R^T).
/// Unlike the plain Woodbury form this never builds Lambda^T Sigma^-1 S
/// Sigma^-1 Lambda, whose entries reach 1/sigma2^2 and lose several digits
/// when some sigma2_p sits near its floor.
inline double log_likelihood(const SampleCov& s, const FactorModelState& state)
{
    validate(state);
    require(state.p_vars() == s.p_vars(), "state and sample covariance disagree on P");
    const Index P = state.p_vars();
    const Index K = state.k_factors();
    const double n = static_cast<double>(s.n_samples());
    const double pdim = static_cast<double>(P);
    const Vector inv_sd = state.resid_vars.array().rsqrt();

    const Matrix whitened = state.loadings.array().colwise() * inv_sd.array();
    const Eigen::HouseholderQR<Matrix> qr(whitened);
    const Index m = std::min(P, K);
    const Matrix q = qr.householderQ() * Matrix::Identity(P, m);
    const Matrix r = qr.matrixQR().topRows(m).triangularView<Eigen::Upper>();

    Matrix core = Matrix::Identity(m, m);
    core.noalias() += r * r.transpose();
    const Eigen::LLT<Matrix> llt(core);
    if (llt.info() != Eigen::Success) throw NumericalError("covariance is not positive definite");
    const Matrix l = llt.matrixL();
    const double logdet = state.resid_vars.array().log().sum() + 2.0 * l.diagonal().array().log().sum();

    const double whitened_trace = (s.matrix().diagonal().array() / state.resid_vars.array()).sum();
    const Matrix g = s.quadratic(q.array().colwise() * inv_sd.array());
    const double trace = whitened_trace - g.trace() + llt.solve(g).trace();
    return -0.5 * n * (logdet + trace) - 0.5 * n * pdim * std::log(2.0 * std::numbers::pi);
}

/// Log posterior: log likelihood, minus the GDP log penalty, minus the
/// Jeffreys term sum_p log sigma2_p (prior 1/sigma2).
inline double objective(const SampleCov& s, const FactorModelState& state, const HyperSchedule& schedule)
{
    require(schedule.size() >= state.k_factors(), "schedule shorter than the number of loadings columns");
    double penalty = 0.0;
    for (Index k = 0; k < state.k_factors(); ++k) {
        const double a1 = schedule.alphas(k) + 1.0;
        const double eta = schedule.etas(k);
        for (Index p = 0; p < state.p_vars(); ++p) penalty += a1 * std::log1p(std::abs(state.loadings(p, k)) / eta);
    }
    return log_likelihood(s, state) - penalty - state.resid_vars.array().log().sum();
}

namespace detail {

struct EmStep
{
    FactorModelState state;
    std::vector<Index> floored;
    double objective = 0.0;
};

/// One refinement: estep -> coordinate descent (weights at `anchor`) -> sigma.
inline EmStep em_step(const SampleCov& s, const FactorModelState& from, const Matrix& anchor,
                      const HyperSchedule& schedule, const FitOptions& opts)
{
    const EStepQuantities e = estep(s, from);
    EmStep out;
    out.state.loadings = coordinate_descent_lambda(e, s, from, anchor, schedule, opts);
    SigmaUpdate sigma = update_sigma(s, e, out.state.loadings);
    out.state.resid_vars = std::move(sigma.values);
    out.floored = std::move(sigma.floored);
    out.objective = objective(s, out.state, schedule);
    if (!std::isfinite(out.objective)) throw NumericalError("log posterior became non-finite");
    return out;
}

/// theta0 - 2 a r + a^2 v on (Lambda, log sigma2), r = theta1 - theta0,
/// v = theta2 - 2 theta1 + theta0, a = -|r|/|v| clamped to [-max_step, -1].
inline FactorModelState extrapolate(const SampleCov& s, const FactorModelState& t0, const FactorModelState& t1,
                                    const FactorModelState& t2, double max_step)
{
    const Vector l0 = t0.resid_vars.array().log();
    const Vector l1 = t1.resid_vars.array().log();
    const Vector l2 = t2.resid_vars.array().log();
    const Matrix r_lam = t1.loadings - t0.loadings;
    const Matrix v_lam = t2.loadings - 2.0 * t1.loadings + t0.loadings;
    const Vector r_sig = l1 - l0;
    const Vector v_sig = l2 - 2.0 * l1 + l0;
    const double rn = std::sqrt(r_lam.squaredNorm() + r_sig.squaredNorm());
    const double vn = std::sqrt(v_lam.squaredNorm() + v_sig.squaredNorm());
    const double a = vn > 0.0 ? std::clamp(-rn / vn, -max_step, -1.0) : -1.0;

    FactorModelState out;
    out.loadings = t0.loadings - 2.0 * a * r_lam + a * a * v_lam;
    const Vector logs = l0 - 2.0 * a * r_sig + a * a * v_sig;
    out.resid_vars.resize(logs.size());
    for (Index p = 0; p < logs.size(); ++p) {
        const double spp = s.matrix()(p, p);
        out.resid_vars(p) = std::max(std::exp(logs(p)), std::max(1e-6 * spp, 1e-12));
    }
    return out;
}

} // namespace detail

/// EM with local linear approximation of the GDP penalty. Each refinement runs
/// estep -> coordinate_descent_lambda -> update_sigma (with the new loadings).
/// Unless one_step is set the anchor is moved to the current loadings before
/// every refinement, which makes the log posterior non-decreasing.
///
/// With `accelerate`, every two refinements are followed by a squared
/// extrapolation along the last two steps and one refinement from the
/// extrapolated point; that iterate is kept only if it beats the second
/// refinement, so the recorded trace stays monotone and fixed points are
/// unchanged. This matters when a residual variance decays geometrically
/// towards its floor, which plain EM approaches very slowly.
inline ModelFit fit_one(const SampleCov& s, const FactorModelState& init, const Matrix& anchor,
                        const HyperSchedule& schedule, const FitOptions& opts)
{
    validate(opts);
    validate(init);
    require(init.p_vars() == s.p_vars(), "initial state and sample covariance disagree on P");
    require(anchor.rows() == init.p_vars() && anchor.cols() == init.k_factors(), "anchor shape differs from init");

    ModelFit fit;
    fit.state = init;
    double previous = objective(s, fit.state, schedule);
    fit.objective_trace.push_back(previous);

    if (opts.one_step) {
        detail::EmStep step = detail::em_step(s, fit.state, anchor, schedule, opts);
        fit.state = std::move(step.state);
        fit.floored = std::move(step.floored);
        fit.objective = step.objective;
        fit.objective_trace.push_back(step.objective);
        fit.n_outer_iters = 1;
        fit.converged = true;
        fit.active_sets = active_sets(fit.state.loadings);
        return fit;
    }

    // Records an accepted iterate; true once the relative change is small.
    auto accept = [&](detail::EmStep&& step) {
        const double change = std::abs(step.objective - previous);
        const bool done = change <= opts.outer_tol * std::abs(previous);
        fit.state = std::move(step.state);
        fit.floored = std::move(step.floored);
        fit.objective_trace.push_back(step.objective);
        previous = step.objective;
        ++fit.n_outer_iters;
        return done;
    };

    double max_step = 4.0;
    while (fit.n_outer_iters < opts.max_outer_iters) {
        const FactorModelState t0 = fit.state;
        if (accept(detail::em_step(s, fit.state, fit.state.loadings, schedule, opts))) {
            fit.converged = true;
            break;
        }
        if (!opts.accelerate) continue;
        if (fit.n_outer_iters >= opts.max_outer_iters) break;

        const FactorModelState t1 = fit.state;
        if (accept(detail::em_step(s, fit.state, fit.state.loadings, schedule, opts))) {
            fit.converged = true;
            break;
        }
        if (fit.n_outer_iters >= opts.max_outer_iters) break;

        const FactorModelState jump = detail::extrapolate(s, t0, t1, fit.state, max_step);
        std::optional<detail::EmStep> candidate;
        try {
            candidate = detail::em_step(s, jump, jump.loadings, schedule, opts);
        } catch (const NumericalError&) {
            candidate.reset();
        }
        if (candidate && candidate->objective >= previous) {
            max_step = std::min(max_step * 4.0, 1e6);
            if (accept(std::move(*candidate))) {
                fit.converged = true;
                break;
            }
        } else {
            max_step = std::max(max_step / 4.0, 1.0);
        }
    }
    fit.objective = previous;
    fit.active_sets = active_sets(fit.state.loadings);
    return fit;
}

} // namespace xfa
