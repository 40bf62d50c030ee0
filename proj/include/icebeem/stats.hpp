#pragma once

#include <algorithm>
#include <cmath>
#include <string>

#include "icebeem/linalg.hpp"
#include "icebeem/matrix.hpp"

namespace icebeem {

inline Vector column_means(const Matrix& x) {
    Vector mu(x.cols(), 0.0);
    for (std::size_t i = 0; i < x.rows(); ++i)
        for (std::size_t j = 0; j < x.cols(); ++j) mu[j] += x(i, j);
    for (double& v : mu) v /= static_cast<double>(x.rows());
    return mu;
}

inline Matrix centered(const Matrix& x, const Vector& mu) {
    Matrix c = x;
    for (std::size_t i = 0; i < c.rows(); ++i)
        for (std::size_t j = 0; j < c.cols(); ++j) c(i, j) -= mu[j];
    return c;
}

/// Sample covariance (denominator n-1) between columns of x and y.
inline Matrix cross_covariance(const Matrix& xc, const Matrix& yc) {
    if (xc.rows() != yc.rows()) throw std::invalid_argument("cross_covariance: row mismatch");
    Matrix c = matmul(transpose(xc), yc);
    const double f = 1.0 / static_cast<double>(xc.rows() - 1);
    for (std::size_t i = 0; i < c.size(); ++i) c.data()[i] *= f;
    return c;
}

/// Entry (i,j) = |corr(X column i, Y column j)|, clipped to [0,1].
inline Matrix pearson_abs_corr(const Matrix& x, const Matrix& y) {
    const std::size_t n = x.rows();
    if (y.rows() != n) throw std::invalid_argument("pearson_abs_corr: row count mismatch");
    if (n < 3) throw std::invalid_argument("pearson_abs_corr: need at least 3 rows");

    const Vector mx = column_means(x), my = column_means(y);
    const Matrix xc = centered(x, mx), yc = centered(y, my);

    Vector sx(x.cols(), 0.0), sy(y.cols(), 0.0);
    for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t j = 0; j < x.cols(); ++j) sx[j] += xc(i, j) * xc(i, j);
        for (std::size_t j = 0; j < y.cols(); ++j) sy[j] += yc(i, j) * yc(i, j);
    }
    for (std::size_t j = 0; j < x.cols(); ++j)
        if (sx[j] == 0.0)
            throw std::invalid_argument("pearson_abs_corr: zero-variance column " +
                                        std::to_string(j) + " in first argument");
    for (std::size_t j = 0; j < y.cols(); ++j)
        if (sy[j] == 0.0)
            throw std::invalid_argument("pearson_abs_corr: zero-variance column " +
                                        std::to_string(j) + " in second argument");

    Matrix out(x.cols(), y.cols());
    for (std::size_t i = 0; i < x.cols(); ++i)
        for (std::size_t j = 0; j < y.cols(); ++j) {
            double cov = 0.0;
            for (std::size_t r = 0; r < n; ++r) cov += xc(r, i) * yc(r, j);
            out(i, j) = std::min(1.0, std::abs(cov) / std::sqrt(sx[i] * sy[j]));
        }
    return out;
}

struct CcaResult {
    Matrix proj_x;  // p x k
    Matrix proj_y;  // q x k
    Vector corrs;   // k canonical correlations, descending in [0,1]
    Vector mean_x;  // centering offsets used by the fit
    Vector mean_y;
};

namespace detail {

// Symmetric inverse square root of an SPD matrix (ridge already applied).
inline Matrix inv_sqrt_spd(const Matrix& a, const char* who) {
    const SymEig eig = jacobi_eigen_sym(a);
    for (double v : eig.values)
        if (v <= 0.0) throw NumericalError(std::string(who) + ": covariance rank-deficient after ridge");
    Matrix scaled = eig.vectors;
    for (std::size_t j = 0; j < scaled.cols(); ++j) {
        const double f = 1.0 / std::sqrt(eig.values[j]);
        for (std::size_t i = 0; i < scaled.rows(); ++i) scaled(i, j) *= f;
    }
    return matmul(scaled, transpose(eig.vectors));
}

}  // namespace detail

/// Canonical correlation analysis by whitening both blocks and taking the
/// SVD of the whitened cross-covariance. A fixed ridge of 1e-8 is added to
/// both covariance diagonals.
inline CcaResult cca(const Matrix& x, const Matrix& y, std::size_t k) {
    const std::size_t n = x.rows(), p = x.cols(), q = y.cols();
    if (y.rows() != n) throw std::invalid_argument("cca: row count mismatch");
    if (n <= p + q) throw std::invalid_argument("cca: need n > p + q rows");
    if (k > std::min(p, q)) throw std::invalid_argument("cca: k exceeds min(p, q)");

    constexpr double kRidge = 1e-8;

    CcaResult out;
    out.mean_x = column_means(x);
    out.mean_y = column_means(y);
    const Matrix xc = centered(x, out.mean_x), yc = centered(y, out.mean_y);

    Matrix cxx = cross_covariance(xc, xc);
    Matrix cyy = cross_covariance(yc, yc);
    for (std::size_t i = 0; i < p; ++i) cxx(i, i) += kRidge;
    for (std::size_t i = 0; i < q; ++i) cyy(i, i) += kRidge;
    const Matrix cxy = cross_covariance(xc, yc);

    const Matrix wx = detail::inv_sqrt_spd(cxx, "cca");
    const Matrix wy = detail::inv_sqrt_spd(cyy, "cca");

    const SvdResult s = svd(matmul(wx, matmul(cxy, wy)));

    out.corrs.resize(k);
    for (std::size_t i = 0; i < k; ++i)
        out.corrs[i] = std::clamp(s.singular_values[i], 0.0, 1.0);

    out.proj_x = Matrix(p, k);
    out.proj_y = Matrix(q, k);
    const Matrix v = transpose(s.vt);
    for (std::size_t j = 0; j < k; ++j) {
        for (std::size_t i = 0; i < p; ++i) {
            double acc = 0.0;
            for (std::size_t r = 0; r < p; ++r) acc += wx(i, r) * s.u(r, j);
            out.proj_x(i, j) = acc;
        }
        for (std::size_t i = 0; i < q; ++i) {
            double acc = 0.0;
            for (std::size_t r = 0; r < q; ++r) acc += wy(i, r) * v(r, j);
            out.proj_y(i, j) = acc;
        }
    }
    return out;
}

/// Applies a fitted CCA projection: (rows - mean) * proj.
inline Matrix cca_project(const Matrix& data, const Vector& mean, const Matrix& proj) {
    if (data.cols() != mean.size() || data.cols() != proj.rows())
        throw std::invalid_argument("cca_project: dims mismatch");
    return matmul(centered(data, mean), proj);
}

}  // namespace icebeem
