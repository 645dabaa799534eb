#pragma once

#include "xfa/estep.hpp"
#include "xfa/mstep.hpp"
#include "xfa/types.hpp"

#include <Eigen/Eigenvalues>

#include <algorithm>
#include <cmath>
#include <vector>

namespace xfa {

/// LQ rotation to the lower-triangular identification form.
///
/// Householder QR of Lambda^T (K-1 reflections) gives Lambda = R^T Q^T, and
/// L = R^T is lower trapezoidal with L L^T = Lambda Lambda^T. Columns are then
/// sign-fixed so that diag(L) >= 0; when L_kk is exactly zero the first
/// nonzero entry below it decides, and an all-zero column is left alone.
inline Matrix lower_triangular_rotate(const Matrix& loadings)
{
    const Index P = loadings.rows();
    const Index K = loadings.cols();
    require(K <= P, "lower-triangular rotation needs K <= P");
    if (K == 0) return loadings;

    Eigen::HouseholderQR<Matrix> qr(loadings.transpose());
    Matrix lower = qr.matrixQR().triangularView<Eigen::Upper>().toDenseMatrix().transpose();

    for (Index k = 0; k < K; ++k) {
        double pivot = 0.0;
        for (Index p = k; p < P; ++p) {
            if (lower(p, k) != 0.0) {
                pivot = lower(p, k);
                break;
            }
        }
        if (pivot < 0.0) lower.col(k) = -lower.col(k);
    }
    return lower;
}

namespace detail {

/// Top-K eigenpairs of S, descending. Uses the N x N Gram of the data factor
/// when that is the smaller problem.
inline void top_eigenpairs(const SampleCov& s, Index K, Vector& values, Matrix& vectors)
{
    if (s.has_factor()) {
        const Matrix& f = s.factor();
        const Matrix gram = f * f.transpose();
        Eigen::SelfAdjointEigenSolver<Matrix> solver(gram);
        if (solver.info() != Eigen::Success) throw NumericalError("eigendecomposition of the data Gram failed");
        const Index r = std::min<Index>(K, gram.rows());
        values = Vector::Zero(K);
        vectors = Matrix::Zero(s.p_vars(), K);
        for (Index k = 0; k < r; ++k) {
            const Index j = gram.rows() - 1 - k;
            const double d = solver.eigenvalues()(j);
            if (d <= 0.0) continue;
            values(k) = d;
            vectors.col(k) = f.transpose() * solver.eigenvectors().col(j) / std::sqrt(d);
        }
        return;
    }
    Eigen::SelfAdjointEigenSolver<Matrix> solver(s.matrix());
    if (solver.info() != Eigen::Success) throw NumericalError("eigendecomposition of the sample covariance failed");
    values = solver.eigenvalues().tail(K).reverse();
    vectors = solver.eigenvectors().rightCols(K).rowwise().reverse();
}

inline Vector floor_variances(const Vector& raw, const Vector& spp)
{
    Vector out(raw.size());
    for (Index p = 0; p < raw.size(); ++p) {
        const double floor = std::max(1e-6 * spp(p), 1e-12);
        out(p) = raw(p) >= floor ? raw(p) : floor;
    }
    return out;
}

} // namespace detail

/// Unpenalized maximum-likelihood start: principal-axis loadings
/// v_k sqrt(max(d_k - mean residual, 0)) refined by `iters` EM steps
/// (Lambda <- Lambda_hat Psi^-1, sigma2_p <- S_pp - (Lambda Lambda_hat^T)_pp),
/// then rotated to lower-triangular form. When `trace` is given it receives the
/// log likelihood before and after every EM step.
inline FactorModelState mle_init(const SampleCov& s, Index K, int iters = 50, std::vector<double>* trace = nullptr)
{
    const Index P = s.p_vars();
    require(K >= 1, "number of factors must be positive");
    require(K <= P, "number of factors exceeds the number of variables");
    require(iters >= 1, "initializer needs at least one iteration");

    Vector values;
    Matrix vectors;
    detail::top_eigenpairs(s, K, values, vectors);
    const double rest = P > K ? (s.trace() - values.sum()) / static_cast<double>(P - K) : 0.0;
    const double mean_resid = std::max(rest, 0.0);

    const Vector spp = s.matrix().diagonal();
    FactorModelState state;
    state.loadings.resize(P, K);
    for (Index k = 0; k < K; ++k)
        state.loadings.col(k) = vectors.col(k) * std::sqrt(std::max(values(k) - mean_resid, 0.0));
    const Vector raw = spp - state.loadings.rowwise().squaredNorm();
    state.resid_vars.resize(P);
    for (Index p = 0; p < P; ++p)
        state.resid_vars(p) = std::max({raw(p), 0.05 * spp(p), 1e-12});

    if (trace) trace->push_back(log_likelihood(s, state));
    for (int it = 0; it < iters; ++it) {
        const EStepQuantities e = estep(s, state);
        Eigen::LLT<Matrix> psi_llt(e.psi);
        if (psi_llt.info() != Eigen::Success) throw NumericalError("initializer: Psi is not positive definite");
        state.loadings = psi_llt.solve(e.lambda_hat.transpose()).transpose();
        const Vector updated = spp - state.loadings.cwiseProduct(e.lambda_hat).rowwise().sum();
        state.resid_vars = detail::floor_variances(updated, spp);
        if (!state.loadings.allFinite()) throw NumericalError("initializer produced non-finite loadings");
        if (trace) trace->push_back(log_likelihood(s, state));
    }
    state.loadings = lower_triangular_rotate(state.loadings);
    return state;
}

} // namespace xfa
