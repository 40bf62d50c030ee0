#pragma once

#include <algorithm>
#include <cmath>
#include <numeric>
#include <tuple>

#include "icebeem/matrix.hpp"

namespace icebeem {

struct SvdResult {
    Matrix u;               // m x k
    Vector singular_values; // k, non-negative, descending
    Matrix vt;              // k x n
};

namespace detail {

// One-sided Jacobi on a tall matrix (m >= n): orthogonalizes column pairs
// until the Gram matrix is diagonal to working precision.
inline SvdResult svd_tall(const Matrix& a) {
    const std::size_t m = a.rows(), n = a.cols();
    Matrix b = a;
    Matrix v = Matrix::identity(n);

    constexpr int kMaxSweeps = 60;
    constexpr double kTol = 1e-14;

    bool converged = false;
    for (int sweep = 0; sweep < kMaxSweeps && !converged; ++sweep) {
        converged = true;
        for (std::size_t p = 0; p + 1 < n; ++p) {
            for (std::size_t q = p + 1; q < n; ++q) {
                double app = 0.0, aqq = 0.0, apq = 0.0;
                for (std::size_t i = 0; i < m; ++i) {
                    const double bp = b(i, p), bq = b(i, q);
                    app += bp * bp;
                    aqq += bq * bq;
                    apq += bp * bq;
                }
                if (std::abs(apq) <= kTol * std::sqrt(app * aqq) || apq == 0.0) continue;
                converged = false;
                const double zeta = (aqq - app) / (2.0 * apq);
                const double t = (zeta >= 0.0 ? 1.0 : -1.0) /
                                 (std::abs(zeta) + std::sqrt(1.0 + zeta * zeta));
                const double cs = 1.0 / std::sqrt(1.0 + t * t);
                const double sn = cs * t;
                for (std::size_t i = 0; i < m; ++i) {
                    const double bp = b(i, p), bq = b(i, q);
                    b(i, p) = cs * bp - sn * bq;
                    b(i, q) = sn * bp + cs * bq;
                }
                for (std::size_t i = 0; i < n; ++i) {
                    const double vp = v(i, p), vq = v(i, q);
                    v(i, p) = cs * vp - sn * vq;
                    v(i, q) = sn * vp + cs * vq;
                }
            }
        }
    }
    if (!converged) throw NumericalError("svd: Jacobi sweeps did not converge");

    Vector s(n);
    for (std::size_t j = 0; j < n; ++j) {
        double nrm = 0.0;
        for (std::size_t i = 0; i < m; ++i) nrm += b(i, j) * b(i, j);
        s[j] = std::sqrt(nrm);
    }

    // descending order
    std::vector<std::size_t> idx(n);
    std::iota(idx.begin(), idx.end(), 0);
    std::stable_sort(idx.begin(), idx.end(), [&](std::size_t i, std::size_t j) { return s[i] > s[j]; });

    Matrix u(m, n), vt(n, n);
    Vector s_sorted(n);
    const double smax = s.empty() ? 0.0 : s[idx[0]];
    for (std::size_t jj = 0; jj < n; ++jj) {
        const std::size_t j = idx[jj];
        s_sorted[jj] = s[j];
        if (s[j] > smax * 1e-300 && s[j] > 0.0) {
            for (std::size_t i = 0; i < m; ++i) u(i, jj) = b(i, j) / s[j];
        }
        for (std::size_t i = 0; i < n; ++i) vt(jj, i) = v(i, j);
    }

    // complete U's basis where columns vanished (zero singular values)
    for (std::size_t j = 0; j < n; ++j) {
        double nrm = 0.0;
        for (std::size_t i = 0; i < m; ++i) nrm += u(i, j) * u(i, j);
        if (nrm > 0.5) continue;
        for (std::size_t cand = 0; cand < m; ++cand) {
            Vector e(m, 0.0);
            e[cand] = 1.0;
            for (std::size_t k = 0; k < n; ++k) {
                if (k == j) continue;
                double proj = 0.0;
                for (std::size_t i = 0; i < m; ++i) proj += u(i, k) * e[i];
                for (std::size_t i = 0; i < m; ++i) e[i] -= proj * u(i, k);
            }
            const double enrm = norm2(e);
            if (enrm > 1e-3) {
                for (std::size_t i = 0; i < m; ++i) u(i, j) = e[i] / enrm;
                break;
            }
        }
    }

    return {std::move(u), std::move(s_sorted), std::move(vt)};
}

}  // namespace detail

/// Thin SVD, m = U diag(s) V^T with k = min(rows, cols).
inline SvdResult svd(const Matrix& m) {
    if (!m.all_finite()) throw std::invalid_argument("svd: non-finite input");
    if (m.rows() == 0 || m.cols() == 0) throw std::invalid_argument("svd: empty matrix");
    if (m.rows() >= m.cols()) return detail::svd_tall(m);
    SvdResult t = detail::svd_tall(transpose(m));
    return {transpose(t.vt), std::move(t.singular_values), transpose(t.u)};
}

/// Number of singular values above rel_tol * sigma_max.
inline std::size_t numerical_rank(const Matrix& m, double rel_tol) {
    if (rel_tol <= 0.0) throw std::invalid_argument("numerical_rank: rel_tol must be positive");
    const SvdResult r = svd(m);
    const double smax = r.singular_values.empty() ? 0.0 : r.singular_values.front();
    std::size_t rank = 0;
    for (double s : r.singular_values)
        if (s > rel_tol * smax) ++rank;
    return rank;
}

inline double smallest_singular_value(const Matrix& m) {
    return svd(m).singular_values.back();
}

/// Lower-triangular L with L L^T = spd.
inline Matrix cholesky(const Matrix& spd) {
    const std::size_t n = spd.rows();
    if (spd.cols() != n) throw std::invalid_argument("cholesky: matrix not square");
    const double scale = std::max(1.0, max_abs(spd));
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = i + 1; j < n; ++j)
            if (std::abs(spd(i, j) - spd(j, i)) > 1e-12 * scale)
                throw std::invalid_argument("cholesky: matrix not symmetric");

    Matrix l(n, n);
    for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t j = 0; j <= i; ++j) {
            double acc = spd(i, j);
            for (std::size_t k = 0; k < j; ++k) acc -= l(i, k) * l(j, k);
            if (i == j) {
                if (acc <= 0.0) throw NumericalError("cholesky: matrix not positive definite");
                l(i, i) = std::sqrt(acc);
            } else {
                l(i, j) = acc / l(j, j);
            }
        }
    }
    return l;
}

/// Solves L y = b, L lower-triangular.
inline Vector solve_lower(const Matrix& l, const Vector& b) {
    const std::size_t n = l.rows();
    if (b.size() != n) throw std::invalid_argument("solve_lower: dims mismatch");
    Vector y(n);
    for (std::size_t i = 0; i < n; ++i) {
        double acc = b[i];
        for (std::size_t j = 0; j < i; ++j) acc -= l(i, j) * y[j];
        if (l(i, i) == 0.0) throw NumericalError("solve_lower: zero diagonal");
        y[i] = acc / l(i, i);
    }
    return y;
}

/// Solves L^T x = b, L lower-triangular.
inline Vector solve_lower_t(const Matrix& l, const Vector& b) {
    const std::size_t n = l.rows();
    if (b.size() != n) throw std::invalid_argument("solve_lower_t: dims mismatch");
    Vector x(n);
    for (std::size_t ii = n; ii-- > 0;) {
        double acc = b[ii];
        for (std::size_t j = ii + 1; j < n; ++j) acc -= l(j, ii) * x[j];
        if (l(ii, ii) == 0.0) throw NumericalError("solve_lower_t: zero diagonal");
        x[ii] = acc / l(ii, ii);
    }
    return x;
}

/// General square solve by LU with partial pivoting.
inline Vector solve_lu(Matrix a, Vector b) {
    const std::size_t n = a.rows();
    if (a.cols() != n || b.size() != n) throw std::invalid_argument("solve_lu: dims mismatch");
    for (std::size_t col = 0; col < n; ++col) {
        std::size_t piv = col;
        for (std::size_t i = col + 1; i < n; ++i)
            if (std::abs(a(i, col)) > std::abs(a(piv, col))) piv = i;
        if (a(piv, col) == 0.0) throw NumericalError("solve_lu: singular matrix");
        if (piv != col) {
            for (std::size_t j = 0; j < n; ++j) std::swap(a(col, j), a(piv, j));
            std::swap(b[col], b[piv]);
        }
        for (std::size_t i = col + 1; i < n; ++i) {
            const double f = a(i, col) / a(col, col);
            if (f == 0.0) continue;
            for (std::size_t j = col; j < n; ++j) a(i, j) -= f * a(col, j);
            b[i] -= f * b[col];
        }
    }
    Vector x(n);
    for (std::size_t ii = n; ii-- > 0;) {
        double acc = b[ii];
        for (std::size_t j = ii + 1; j < n; ++j) acc -= a(ii, j) * x[j];
        x[ii] = acc / a(ii, ii);
    }
    return x;
}

struct SymEig {
    Vector values;  // descending
    Matrix vectors; // columns are eigenvectors
};

/// Cyclic Jacobi eigendecomposition of a symmetric matrix.
inline SymEig jacobi_eigen_sym(Matrix a) {
    const std::size_t n = a.rows();
    if (a.cols() != n) throw std::invalid_argument("jacobi_eigen_sym: matrix not square");
    Matrix v = Matrix::identity(n);

    constexpr int kMaxSweeps = 100;
    for (int sweep = 0; sweep < kMaxSweeps; ++sweep) {
        double off = 0.0;
        for (std::size_t i = 0; i < n; ++i)
            for (std::size_t j = i + 1; j < n; ++j) off += a(i, j) * a(i, j);
        if (off < 1e-30 * std::max(1.0, frobenius_norm(a))) break;
        if (sweep == kMaxSweeps - 1) throw NumericalError("jacobi_eigen_sym: did not converge");

        for (std::size_t p = 0; p + 1 < n; ++p) {
            for (std::size_t q = p + 1; q < n; ++q) {
                if (std::abs(a(p, q)) < 1e-300) continue;
                const double theta = (a(q, q) - a(p, p)) / (2.0 * a(p, q));
                const double t = (theta >= 0.0 ? 1.0 : -1.0) /
                                 (std::abs(theta) + std::sqrt(1.0 + theta * theta));
                const double c = 1.0 / std::sqrt(1.0 + t * t);
                const double s = c * t;
                for (std::size_t k = 0; k < n; ++k) {
                    const double akp = a(k, p), akq = a(k, q);
                    a(k, p) = c * akp - s * akq;
                    a(k, q) = s * akp + c * akq;
                }
                for (std::size_t k = 0; k < n; ++k) {
                    const double apk = a(p, k), aqk = a(q, k);
                    a(p, k) = c * apk - s * aqk;
                    a(q, k) = s * apk + c * aqk;
                }
                for (std::size_t k = 0; k < n; ++k) {
                    const double vkp = v(k, p), vkq = v(k, q);
                    v(k, p) = c * vkp - s * vkq;
                    v(k, q) = s * vkp + c * vkq;
                }
            }
        }
    }

    std::vector<std::size_t> idx(n);
    std::iota(idx.begin(), idx.end(), 0);
    std::stable_sort(idx.begin(), idx.end(),
                     [&](std::size_t i, std::size_t j) { return a(i, i) > a(j, j); });
    SymEig out{Vector(n), Matrix(n, n)};
    for (std::size_t jj = 0; jj < n; ++jj) {
        out.values[jj] = a(idx[jj], idx[jj]);
        for (std::size_t i = 0; i < n; ++i) out.vectors(i, jj) = v(i, idx[jj]);
    }
    return out;
}

}  // namespace icebeem
