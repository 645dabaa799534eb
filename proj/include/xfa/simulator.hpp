#pragma once

#include "xfa/types.hpp"

#include <cmath>
#include <cstdint>
#include <random>
#include <string>
#include <utility>

namespace xfa {

enum class Sparsity { Sparse, Dense };
enum class Snr { High, Low };
enum class TruthPrior { MGP, Uniform };

/// Ground-truth generator settings. Defaults follow the simulation study:
/// multiplicative gamma process shapes (2, 3, 3/2), uniform magnitudes in
/// [0.6, 1.4] with random sign, residual variances ~ Uniform(0.5, 1.5).
struct ScenarioSpec
{
    Sparsity sparsity = Sparsity::Sparse;
    Snr snr = Snr::High;
    TruthPrior truth_prior = TruthPrior::MGP;
    Index P = 500;
    Index K = 5;
    Index N = 0; // 0 means ceil(P log P)
    std::uint64_t seed = 0;

    double mgp_first_shape = 2.0;
    double mgp_later_shape = 3.0;
    double mgp_local_shape = 1.5;
    double uniform_low = 0.6;
    double uniform_high = 1.4;
    double resid_low = 0.5;
    double resid_high = 1.5;
    double high_snr = 4.0; // column signal variance >= high_snr * mean residual variance
    double low_snr = 0.5;  // column signal variance <= low_snr * mean residual variance

    Index n_samples() const
    {
        if (N > 0) return N;
        const double p = static_cast<double>(P);
        return static_cast<Index>(std::ceil(p * std::log(p)));
    }
};

inline void validate(const ScenarioSpec& spec)
{
    require(spec.P >= 1 && spec.K >= 1, "P and K must be positive");
    require(spec.K <= spec.P, "K must not exceed P");
    if (spec.sparsity == Sparsity::Sparse)
        require(spec.P >= spec.K + 9, "Sparse scenario requires P >= K + 9 (ten nonzero rows per column)");
    require(spec.n_samples() >= 2, "N must be at least 2");
    require(spec.uniform_low > 0.0 && spec.uniform_high > spec.uniform_low, "invalid uniform loading range");
    require(spec.resid_low > 0.0 && spec.resid_high > spec.resid_low, "invalid residual variance range");
    require(spec.mgp_first_shape > 0.0 && spec.mgp_later_shape > 0.0 && spec.mgp_local_shape > 0.0,
            "gamma process shapes must be positive");
}

inline std::string scenario_name(const ScenarioSpec& spec)
{
    return std::string(spec.sparsity == Sparsity::Sparse ? "sparse" : "dense") + "-" +
           (spec.snr == Snr::High ? "high" : "low");
}

inline void parse_scenario(const std::string& name, ScenarioSpec& spec)
{
    if (name == "sparse-high") { spec.sparsity = Sparsity::Sparse; spec.snr = Snr::High; }
    else if (name == "sparse-low") { spec.sparsity = Sparsity::Sparse; spec.snr = Snr::Low; }
    else if (name == "dense-high") { spec.sparsity = Sparsity::Dense; spec.snr = Snr::High; }
    else if (name == "dense-low") { spec.sparsity = Sparsity::Dense; spec.snr = Snr::Low; }
    else throw InvalidArgument("unknown scenario '" + name + "'");
}

inline TruthPrior parse_truth_prior(const std::string& name)
{
    if (name == "mgp" || name == "MGP") return TruthPrior::MGP;
    if (name == "uniform" || name == "Uniform") return TruthPrior::Uniform;
    throw InvalidArgument("unknown truth prior '" + name + "'");
}

inline std::string to_string(TruthPrior t) { return t == TruthPrior::MGP ? "mgp" : "uniform"; }

/// Rows [first, last] carrying nonzeros in column k (0-based).
inline std::pair<Index, Index> support_rows(const ScenarioSpec& spec, Index k)
{
    if (spec.sparsity == Sparsity::Sparse) return {k, k + 9};
    return {k, spec.P - 1};
}

/// Mean of lambda_pk^2 over the column's support.
inline double column_signal_variance(const Matrix& loadings, const ScenarioSpec& spec, Index k)
{
    const auto [first, last] = support_rows(spec, k);
    return loadings.col(k).segment(first, last - first + 1).squaredNorm() / static_cast<double>(last - first + 1);
}

template <class Rng>
Vector simulate_resid(const ScenarioSpec& spec, Rng& rng)
{
    std::uniform_real_distribution<double> u(spec.resid_low, spec.resid_high);
    Vector out(spec.P);
    for (Index p = 0; p < spec.P; ++p) out(p) = u(rng);
    return out;
}

/// Lower-triangular-patterned truth. Column k is supported on rows k..k+9
/// (Sparse) or k..P (Dense); each column is rescaled so its signal variance is
/// at least high_snr (High) or at most low_snr (Low) times `noise_level`, and
/// its sign is flipped so the diagonal entry is positive.
template <class Rng>
Matrix simulate_loadings(const ScenarioSpec& spec, Rng& rng, double noise_level = 1.0)
{
    validate(spec);
    require(noise_level > 0.0, "noise level must be positive");
    Matrix out = Matrix::Zero(spec.P, spec.K);

    if (spec.truth_prior == TruthPrior::MGP) {
        std::gamma_distribution<double> first(spec.mgp_first_shape, 1.0);
        std::gamma_distribution<double> later(spec.mgp_later_shape, 1.0);
        std::gamma_distribution<double> local(spec.mgp_local_shape, 1.0 / spec.mgp_local_shape);
        std::normal_distribution<double> normal(0.0, 1.0);
        double tau = 1.0;
        for (Index k = 0; k < spec.K; ++k) {
            tau *= k == 0 ? first(rng) : later(rng);
            const auto [lo, hi] = support_rows(spec, k);
            for (Index p = lo; p <= hi; ++p) {
                const double phi = local(rng);
                out(p, k) = normal(rng) / std::sqrt(phi * tau);
            }
        }
    } else {
        std::uniform_real_distribution<double> mag(spec.uniform_low, spec.uniform_high);
        std::bernoulli_distribution flip(0.5);
        for (Index k = 0; k < spec.K; ++k) {
            const auto [lo, hi] = support_rows(spec, k);
            for (Index p = lo; p <= hi; ++p) {
                const double m = mag(rng);
                out(p, k) = flip(rng) ? -m : m;
            }
        }
    }

    for (Index k = 0; k < spec.K; ++k) {
        const double ratio = column_signal_variance(out, spec, k) / noise_level;
        if (ratio > 0.0) {
            if (spec.snr == Snr::High && ratio < spec.high_snr) out.col(k) *= std::sqrt(spec.high_snr / ratio);
            if (spec.snr == Snr::Low && ratio > spec.low_snr) out.col(k) *= std::sqrt(spec.low_snr / ratio);
        }
        if (out(k, k) < 0.0) out.col(k) = -out.col(k);
    }
    return out;
}

/// N draws of y = Lambda z + e, z ~ N(0, I_K), e ~ N(0, Sigma); one row per draw.
template <class Rng>
Matrix simulate_data(const Matrix& loadings, const Vector& resid_vars, Index N, Rng& rng)
{
    require(loadings.rows() == resid_vars.size(), "loadings and residual variances disagree on P");
    require((resid_vars.array() > 0.0).all(), "residual variances must be positive");
    require(N >= 1, "N must be positive");
    const Index P = loadings.rows();
    const Index K = loadings.cols();
    std::normal_distribution<double> normal(0.0, 1.0);
    const Vector sd = resid_vars.array().sqrt();

    Matrix z(N, K);
    Matrix e(N, P);
    for (Index n = 0; n < N; ++n) {
        for (Index k = 0; k < K; ++k) z(n, k) = normal(rng);
        for (Index p = 0; p < P; ++p) e(n, p) = sd(p) * normal(rng);
    }
    return z * loadings.transpose() + e;
}

struct SimulatedScenario
{
    Matrix loadings;
    Vector resid_vars;
    Matrix data;
};

/// Residual variances, then loadings scaled against their realized mean, then
/// data, all from one generator seeded with spec.seed.
inline SimulatedScenario simulate_scenario(const ScenarioSpec& spec)
{
    validate(spec);
    std::mt19937_64 rng(spec.seed);
    SimulatedScenario out;
    out.resid_vars = simulate_resid(spec, rng);
    out.loadings = simulate_loadings(spec, rng, out.resid_vars.mean());
    out.data = simulate_data(out.loadings, out.resid_vars, spec.n_samples(), rng);
    return out;
}

} // namespace xfa
