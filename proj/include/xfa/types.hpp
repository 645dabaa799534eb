#pragma once

#include <Eigen/Dense>

#include <stdexcept>
#include <string>
#include <vector>

namespace xfa {

using Index = Eigen::Index;
using Matrix = Eigen::MatrixXd;
using Vector = Eigen::VectorXd;

/// Base class of every error raised by the library.
class Error : public std::runtime_error
{
public:
    using std::runtime_error::runtime_error;
};

/// Precondition or input violation (bad shapes, out-of-range hyperparameters,
/// malformed files). The CLI maps it to exit code 2.
class InvalidArgument : public Error
{
public:
    using Error::Error;
};

/// Numerical breakdown: non-finite iterates, a factorization that cannot be
/// rescued by jitter. The CLI maps it to exit code 3.
class NumericalError : public Error
{
public:
    using Error::Error;
};

inline void require(bool ok, const std::string& what)
{
    if (!ok) throw InvalidArgument(what);
}

/// Current parameter value theta = {Lambda, diag(Sigma)}.
struct FactorModelState
{
    Matrix loadings;   // P x K, exact zeros are meaningful
    Vector resid_vars; // length P, strictly positive

    Index p_vars() const { return loadings.rows(); }
    Index k_factors() const { return loadings.cols(); }
};

inline void validate(const FactorModelState& state)
{
    require(state.loadings.rows() == state.resid_vars.size(),
            "loadings rows and residual variance length differ");
    require(state.loadings.allFinite(), "loadings contain non-finite values");
    require(state.resid_vars.allFinite() && (state.resid_vars.array() > 0.0).all(),
            "residual variances must be finite and strictly positive");
}

/// Per-row active sets A_p = {k : lambda_pk != 0}.
inline std::vector<std::vector<Index>> active_sets(const Matrix& loadings)
{
    std::vector<std::vector<Index>> sets(static_cast<std::size_t>(loadings.rows()));
    for (Index p = 0; p < loadings.rows(); ++p)
        for (Index k = 0; k < loadings.cols(); ++k)
            if (loadings(p, k) != 0.0) sets[static_cast<std::size_t>(p)].push_back(k);
    return sets;
}

} // namespace xfa
