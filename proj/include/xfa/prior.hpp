#pragma once

#include "xfa/types.hpp"

#include <algorithm>
#include <cmath>
#include <random>
#include <string>
#include <vector>

namespace xfa {

/// Which sequence carries the column index: alpha (I), eta (II) or both (III).
enum class Condition { I, II, III };

enum class RateKind { LogN, PowerGamma };

/// How alpha_k grows with the sample size: log N or N^(gamma/2).
struct RateVariant
{
    RateKind kind = RateKind::LogN;
    double gamma = 0.5; // only read for PowerGamma
};

/// Parameters of one generalized double Pareto density
/// alpha/(2 eta) * (1 + |x|/eta)^-(alpha+1).
struct GdpParams
{
    double alpha;
    double eta;
};

/// Per-column shrinkage sequences alpha_{1:K}, eta_{1:K} of the multiscale prior.
struct HyperSchedule
{
    Condition condition = Condition::I;
    RateVariant rate_variant;
    double delta = 0.0;
    double rho = 0.0;
    Index n_samples = 0;
    Vector alphas;
    Vector etas;

    Index size() const { return alphas.size(); }
    GdpParams column(Index k) const { return {alphas(k), etas(k)}; }
};

inline std::string to_string(Condition c)
{
    switch (c) {
    case Condition::I: return "I";
    case Condition::II: return "II";
    case Condition::III: return "III";
    }
    return "?";
}

inline Condition parse_condition(const std::string& s)
{
    if (s == "I" || s == "1") return Condition::I;
    if (s == "II" || s == "2") return Condition::II;
    if (s == "III" || s == "3") return Condition::III;
    throw InvalidArgument("unknown condition '" + s + "' (expected I, II or III)");
}

namespace detail {

inline void check_delta_rho(double delta, double rho, Condition condition)
{
    require(std::isfinite(delta) && delta > 2.0, "delta must exceed 2 (finite prior variance)");
    require(std::isfinite(rho) && rho > 0.0, "rho must be positive");
    if (condition == Condition::II) require(rho < 1.0, "condition II requires rho < 1");
    if (condition == Condition::III) require(rho < delta, "condition III requires rho < delta");
}

} // namespace detail

/// Column sequences of the unscaled prior (no sample-size dependence):
/// I: (delta^k, rho), II: (delta, rho^k), III: (delta^k, rho^k), k = 1..K.
inline std::vector<GdpParams> base_sequences(double delta, double rho, Condition condition, Index K)
{
    detail::check_delta_rho(delta, rho, condition);
    require(K >= 1, "number of columns must be positive");
    std::vector<GdpParams> out;
    out.reserve(static_cast<std::size_t>(K));
    for (Index k = 1; k <= K; ++k) {
        const double dk = std::pow(delta, static_cast<double>(k));
        const double rk = std::pow(rho, static_cast<double>(k));
        switch (condition) {
        case Condition::I: out.push_back({dk, rho}); break;
        case Condition::II: out.push_back({delta, rk}); break;
        case Condition::III: out.push_back({dk, rk}); break;
        }
    }
    return out;
}

/// Sample-size dependent schedule for a real-valued effective sample size n
/// (n > e so that log n > 1): alpha_k picks up a log n (or n^(gamma/2))
/// factor and eta_k is divided by sqrt(n).
inline HyperSchedule schedule_for_size(double delta, double rho, double n, Index K, Condition condition,
                                       RateVariant rate = {})
{
    require(std::isfinite(n) && std::log(n) > 1.0 - 1e-12, "sample size must satisfy log N > 1");
    if (rate.kind == RateKind::PowerGamma)
        require(rate.gamma > 0.0 && rate.gamma < 1.0, "gamma must lie in (0, 1)");
    const auto base = base_sequences(delta, rho, condition, K);

    const double alpha_scale = rate.kind == RateKind::LogN ? std::log(n) : std::pow(n, rate.gamma / 2.0);
    const double eta_scale = 1.0 / std::sqrt(n);

    HyperSchedule s;
    s.condition = condition;
    s.rate_variant = rate;
    s.delta = delta;
    s.rho = rho;
    s.n_samples = static_cast<Index>(std::llround(n));
    s.alphas.resize(K);
    s.etas.resize(K);
    for (Index k = 0; k < K; ++k) {
        s.alphas(k) = base[static_cast<std::size_t>(k)].alpha * alpha_scale;
        s.etas(k) = base[static_cast<std::size_t>(k)].eta * eta_scale;
    }
    return s;
}

inline HyperSchedule make_schedule(double delta, double rho, Index n_samples, Index K, Condition condition,
                                   RateVariant rate = {})
{
    require(n_samples >= 3, "sample size must be at least 3 so that log N > 1");
    return schedule_for_size(delta, rho, static_cast<double>(n_samples), K, condition, rate);
}

inline double gdp_log_density(double x, GdpParams g)
{
    return std::log(g.alpha / (2.0 * g.eta)) - (g.alpha + 1.0) * std::log1p(std::abs(x) / g.eta);
}

inline double gdp_variance(GdpParams g)
{
    require(g.alpha > 2.0, "GDP variance is undefined for alpha <= 2");
    require(g.eta > 0.0, "GDP scale must be positive");
    return 2.0 * g.eta * g.eta / ((g.alpha - 1.0) * (g.alpha - 2.0));
}

/// E|x| under GDP(alpha, eta).
inline double gdp_mean_abs(GdpParams g)
{
    require(g.alpha > 1.0, "GDP mean is undefined for alpha <= 1");
    return g.eta / (g.alpha - 1.0);
}

/// One draw through the scale mixture xi ~ Gamma(alpha, rate eta),
/// tau ~ Exp(rate xi^2 / 2), x ~ N(0, tau).
template <class Rng>
double gdp_sample(GdpParams g, Rng& rng)
{
    std::gamma_distribution<double> gamma(g.alpha, 1.0 / g.eta);
    const double xi = gamma(rng);
    std::exponential_distribution<double> expo(xi * xi / 2.0);
    const double tau = expo(rng);
    std::normal_distribution<double> normal(0.0, 1.0);
    return std::sqrt(tau) * normal(rng);
}

/// P x K draw of loadings with column k ~ GDP(params[k]).
template <class Rng>
Matrix sample_mgdp_loadings(Index P, const std::vector<GdpParams>& params, Rng& rng)
{
    Matrix out(P, static_cast<Index>(params.size()));
    for (Index k = 0; k < out.cols(); ++k)
        for (Index p = 0; p < P; ++p)
            out(p, k) = gdp_sample(params[static_cast<std::size_t>(k)], rng);
    return out;
}

/// Truncation level after which the rank-K covariance is within epsilon
/// (entrywise max) of the full model with prior probability at least
/// 1 - epsilon: ceil(log(P^2 / eps^2) / (2 log b)), b = delta, 1/rho or delta/rho.
inline Index compute_k0(double P, double delta, double rho, Condition condition, double epsilon)
{
    require(std::isfinite(P) && P >= 1.0, "P must be at least 1");
    require(epsilon > 0.0 && epsilon <= 1.0, "epsilon must lie in (0, 1]");
    double b = 0.0;
    switch (condition) {
    case Condition::I: b = delta; break;
    case Condition::II: b = 1.0 / rho; break;
    case Condition::III: b = delta / rho; break;
    }
    require(std::isfinite(b) && b > 1.0, "truncation base must exceed 1");
    const double raw = std::log(P * P / (epsilon * epsilon)) / (2.0 * std::log(b));
    // guard against 0.9999999 style round-off below an integer
    const double k0 = std::ceil(raw - 1e-12);
    return std::max<Index>(1, static_cast<Index>(k0));
}

/// Entrywise max |Omega - Omega^K| = max_ij |sum_{k > K} lambda_ik lambda_jk|.
inline double truncation_distance(const Matrix& loadings, Index K)
{
    if (K >= loadings.cols()) return 0.0;
    const Matrix tail = loadings.rightCols(loadings.cols() - K);
    return (tail * tail.transpose()).cwiseAbs().maxCoeff();
}

/// Sum of per-entry GDP log densities; column k uses the schedule's k-th pair.
inline double mgdp_log_density(const Matrix& loadings, const HyperSchedule& schedule)
{
    require(schedule.size() >= loadings.cols(), "schedule shorter than the number of loadings columns");
    double total = 0.0;
    for (Index k = 0; k < loadings.cols(); ++k) {
        const GdpParams g = schedule.column(k);
        for (Index p = 0; p < loadings.rows(); ++p) total += gdp_log_density(loadings(p, k), g);
    }
    return total;
}

} // namespace xfa
