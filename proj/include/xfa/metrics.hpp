#pragma once

#include "xfa/estep.hpp"
#include "xfa/types.hpp"

#include <algorithm>
#include <cmath>
#include <utility>

namespace xfa {

namespace detail {

inline bool is_nonzero(double x, double threshold) { return threshold > 0.0 ? std::abs(x) > threshold : x != 0.0; }

} // namespace detail

/// Cumulative number of nonzero loadings in columns 1..k (k is 1-based).
/// With threshold 0 only exact zeros count as zero.
inline Index cnnl(const Matrix& loadings, Index k, double threshold = 0.0)
{
    require(k >= 1 && k <= loadings.cols(), "column index out of range");
    Index count = 0;
    for (Index l = 0; l < k; ++l)
        for (Index p = 0; p < loadings.rows(); ++p)
            if (detail::is_nonzero(loadings(p, l), threshold)) ++count;
    return count;
}

/// Cumulative proportion of explained variance ||Lambda_{1:k}||_F^2 / tr(S).
inline double cpev(const Matrix& loadings, const SampleCov& s, Index k)
{
    require(k >= 1 && k <= loadings.cols(), "column index out of range");
    require(loadings.rows() == s.p_vars(), "loadings and sample covariance disagree on P");
    const double total = s.trace();
    require(total > 0.0, "sample covariance has zero trace");
    return loadings.leftCols(k).squaredNorm() / total;
}

inline double rmse(const Matrix& estimate, const Matrix& truth)
{
    require(estimate.rows() == truth.rows() && estimate.cols() == truth.cols(), "shape mismatch in rmse");
    require(estimate.size() > 0, "rmse of an empty matrix");
    return std::sqrt((estimate - truth).squaredNorm() / static_cast<double>(estimate.size()));
}

/// Number of columns with at least one nonzero entry.
inline Index selected_factors(const Matrix& loadings, double threshold = 0.0)
{
    Index count = 0;
    for (Index k = 0; k < loadings.cols(); ++k) {
        for (Index p = 0; p < loadings.rows(); ++p) {
            if (detail::is_nonzero(loadings(p, k), threshold)) {
                ++count;
                break;
            }
        }
    }
    return count;
}

/// Zero-pads the narrower matrix so both have the same number of columns.
inline void pad_columns(Matrix& a, Matrix& b)
{
    require(a.rows() == b.rows(), "matrices disagree on the number of rows");
    const Index k = std::max(a.cols(), b.cols());
    auto pad = [k](Matrix& m) {
        if (m.cols() == k) return;
        Matrix wide = Matrix::Zero(m.rows(), k);
        wide.leftCols(m.cols()) = m;
        m = std::move(wide);
    };
    pad(a);
    pad(b);
}

} // namespace xfa
