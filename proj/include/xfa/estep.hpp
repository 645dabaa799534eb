#pragma once

#include "xfa/types.hpp"

#include <algorithm>
#include <cmath>
#include <string>

namespace xfa {

/// Sample covariance S_yy = Y^T Y / N of column-centered data.
///
/// Products S * G with a thin P x K matrix G are the only place the estimator
/// touches the data after construction. When N < P the centered data is kept
/// as a factor F = Y / sqrt(N) (S = F^T F) and the product is formed as
/// F^T (F G), which is linear in P; otherwise the dense P x P matrix is used.
class SampleCov
{
public:
    SampleCov() = default;

    /// Wrap an already formed covariance (no data factor is kept).
    SampleCov(Matrix cov, Index n_samples) : cov_(std::move(cov)), n_(n_samples)
    {
        require(cov_.rows() == cov_.cols(), "sample covariance must be square");
        require(n_ >= 1, "sample size must be positive");
        require(cov_.allFinite(), "sample covariance contains non-finite values");
        require((cov_ - cov_.transpose()).cwiseAbs().maxCoeff() <= 1e-12 * (1.0 + cov_.cwiseAbs().maxCoeff()),
                "sample covariance must be symmetric");
        require((cov_.diagonal().array() >= 0.0).all(), "sample covariance diagonal must be non-negative");
    }

    static SampleCov from_data(const Matrix& data)
    {
        require(data.rows() >= 2, "at least two observations are required");
        require(data.cols() >= 1, "data has no columns");
        require(data.allFinite(), "data contains non-finite values");

        const Index n = data.rows();
        const Eigen::RowVectorXd mean = data.colwise().mean();
        Matrix centered = data.rowwise() - mean;

        SampleCov s;
        s.n_ = n;
        const double scale = 1.0 / static_cast<double>(n);
        s.cov_ = Matrix::Zero(data.cols(), data.cols());
        s.cov_.selfadjointView<Eigen::Lower>().rankUpdate(centered.transpose(), scale);
        s.cov_ = s.cov_.selfadjointView<Eigen::Lower>();
        if (n < data.cols()) s.factor_ = centered * std::sqrt(scale);
        return s;
    }

    const Matrix& matrix() const { return cov_; }
    Index n_samples() const { return n_; }
    Index p_vars() const { return cov_.rows(); }
    bool has_factor() const { return factor_.size() > 0; }
    /// Centered data scaled by 1/sqrt(N); empty unless N < P.
    const Matrix& factor() const { return factor_; }
    double trace() const { return cov_.trace(); }

    /// S * rhs.
    Matrix times(const Matrix& rhs) const
    {
        if (has_factor()) return factor_.transpose() * (factor_ * rhs);
        return cov_.selfadjointView<Eigen::Lower>() * rhs;
    }

    /// rhs^T * S * rhs, symmetric K x K.
    Matrix quadratic(const Matrix& rhs) const
    {
        if (has_factor()) {
            const Matrix fr = factor_ * rhs;
            return fr.transpose() * fr;
        }
        const Matrix sr = cov_.selfadjointView<Eigen::Lower>() * rhs;
        Matrix q = rhs.transpose() * sr;
        return 0.5 * (q + q.transpose());
    }

private:
    Matrix cov_;
    Matrix factor_;
    Index n_ = 0;
};

inline SampleCov sample_cov(const Matrix& data) { return SampleCov::from_data(data); }

/// Conditional expectations for the current parameter value.
///   Gamma = Omega^-1 Lambda, Delta = I - Lambda^T Gamma,
///   Psi = Delta + Gamma^T S Gamma, Lambda_hat = S Gamma,
/// with chol_psi lower triangular and chol_psi chol_psi^T = psi.
struct EStepQuantities
{
    Matrix gamma;      // P x K
    Matrix delta;      // K x K
    Matrix psi;        // K x K, includes applied_jitter on the diagonal
    Matrix lambda_hat; // P x K
    Matrix chol_psi;   // K x K lower
    double applied_jitter = 0.0;
};

namespace detail {

inline bool try_cholesky(const Matrix& a, Matrix& lower)
{
    Eigen::LLT<Matrix> llt(a);
    if (llt.info() != Eigen::Success) return false;
    lower = llt.matrixL();
    return lower.allFinite() && (lower.diagonal().array() > 0.0).all();
}

} // namespace detail

/// E-step through the K-dimensional Woodbury identity
/// Omega^-1 Lambda = Sigma^-1 Lambda (I + Lambda^T Sigma^-1 Lambda)^-1; the
/// P x P inverse is never formed. Cost O(P K^2 + K^3) plus one S * Gamma product.
///
/// If Psi is numerically semidefinite, jitter * I is added, escalating from
/// 1e-10 tr(Psi)/K by factors of ten up to 1e-4 tr(Psi)/K.
inline EStepQuantities estep(const SampleCov& s, const FactorModelState& state, double jitter = 0.0)
{
    validate(state);
    require(state.p_vars() == s.p_vars(), "state and sample covariance disagree on P");
    require(jitter >= 0.0, "jitter must be non-negative");
    const Index K = state.k_factors();

    const Matrix scaled = state.loadings.array().colwise() / state.resid_vars.array(); // Sigma^-1 Lambda
    Matrix m = Matrix::Identity(K, K);
    m.noalias() += state.loadings.transpose() * scaled;
    Eigen::LLT<Matrix> m_llt(m);
    if (m_llt.info() != Eigen::Success) throw NumericalError("I + Lambda^T Sigma^-1 Lambda is not positive definite");
    const Matrix m_inv = m_llt.solve(Matrix::Identity(K, K));

    EStepQuantities e;
    e.gamma = scaled * m_inv;
    // I - Lambda^T Gamma = I - M0 M^-1 = (M - M0) M^-1 = M^-1
    e.delta = 0.5 * (m_inv + m_inv.transpose());
    e.lambda_hat = s.times(e.gamma);
    Matrix gsg = e.gamma.transpose() * e.lambda_hat;
    e.psi = e.delta + 0.5 * (gsg + gsg.transpose());
    if (!e.psi.allFinite()) throw NumericalError("E-step produced a non-finite Psi");

    const double base = K > 0 ? std::max(e.psi.trace() / static_cast<double>(K), 1e-300) : 1.0;
    double added = jitter;
    Matrix trial = e.psi;
    trial.diagonal().array() += added;
    if (!detail::try_cholesky(trial, e.chol_psi)) {
        bool ok = false;
        for (double rel = 1e-10; rel <= 1e-4 * (1.0 + 1e-9); rel *= 10.0) {
            added = jitter + rel * base;
            trial = e.psi;
            trial.diagonal().array() += added;
            if (detail::try_cholesky(trial, e.chol_psi)) {
                ok = true;
                break;
            }
        }
        if (!ok) throw NumericalError("Psi is degenerate: Cholesky failed after maximum jitter");
    }
    e.psi = trial;
    e.applied_jitter = added;
    return e;
}

/// Pseudo response w_p solving C w_p = lambda_hat_p, so X^T w_p = lambda_hat_p
/// for the pseudo design X = C^T (X^T X = Psi).
inline Vector pseudo_response(const EStepQuantities& e, Index p)
{
    require(p >= 0 && p < e.lambda_hat.rows(), "variable index out of range");
    return e.chol_psi.triangularView<Eigen::Lower>().solve(e.lambda_hat.row(p).transpose());
}

} // namespace xfa
