#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <initializer_list>
#include <numeric>
#include <stdexcept>
#include <string>
#include <vector>

namespace icebeem {

/// Thrown when an algorithm fails for numerical reasons (non-convergence,
/// loss of positive definiteness, NaN in an objective, ...), as opposed to
/// a caller contract violation, which throws std::invalid_argument.
class NumericalError : public std::runtime_error {
public:
    explicit NumericalError(const std::string& what) : std::runtime_error(what) {}
};

using Vector = std::vector<double>;

/// Dense row-major double-precision matrix.
class Matrix {
public:
    Matrix() = default;

    Matrix(std::size_t rows, std::size_t cols)
        : rows_(rows), cols_(cols), data_(rows * cols, 0.0) {}

    /// Takes ownership of `data`; rejects size mismatch and non-finite entries.
    Matrix(std::size_t rows, std::size_t cols, Vector data)
        : rows_(rows), cols_(cols), data_(std::move(data)) {
        if (data_.size() != rows_ * cols_)
            throw std::invalid_argument("Matrix: data length " + std::to_string(data_.size()) +
                                        " != rows*cols " + std::to_string(rows_ * cols_));
        for (double v : data_)
            if (!std::isfinite(v)) throw std::invalid_argument("Matrix: non-finite entry");
    }

    Matrix(std::initializer_list<std::initializer_list<double>> rows) {
        rows_ = rows.size();
        cols_ = rows_ ? rows.begin()->size() : 0;
        data_.reserve(rows_ * cols_);
        for (const auto& r : rows) {
            if (r.size() != cols_) throw std::invalid_argument("Matrix: ragged initializer");
            for (double v : r) {
                if (!std::isfinite(v)) throw std::invalid_argument("Matrix: non-finite entry");
                data_.push_back(v);
            }
        }
    }

    std::size_t rows() const { return rows_; }
    std::size_t cols() const { return cols_; }
    std::size_t size() const { return data_.size(); }
    bool empty() const { return data_.empty(); }

    double& operator()(std::size_t i, std::size_t j) { return data_[i * cols_ + j]; }
    double operator()(std::size_t i, std::size_t j) const { return data_[i * cols_ + j]; }

    double* data() { return data_.data(); }
    const double* data() const { return data_.data(); }
    double* row_ptr(std::size_t i) { return data_.data() + i * cols_; }
    const double* row_ptr(std::size_t i) const { return data_.data() + i * cols_; }

    Vector row(std::size_t i) const {
        return Vector(row_ptr(i), row_ptr(i) + cols_);
    }
    Vector col(std::size_t j) const {
        Vector out(rows_);
        for (std::size_t i = 0; i < rows_; ++i) out[i] = (*this)(i, j);
        return out;
    }
    void set_row(std::size_t i, const Vector& v) {
        std::copy(v.begin(), v.end(), row_ptr(i));
    }

    bool all_finite() const {
        return std::all_of(data_.begin(), data_.end(), [](double v) { return std::isfinite(v); });
    }

    static Matrix identity(std::size_t n) {
        Matrix m(n, n);
        for (std::size_t i = 0; i < n; ++i) m(i, i) = 1.0;
        return m;
    }

    bool operator==(const Matrix& other) const = default;

private:
    std::size_t rows_ = 0, cols_ = 0;
    Vector data_;
};

// ---------------------------------------------------------------------------
// Vector helpers
// ---------------------------------------------------------------------------

inline double dot(const Vector& a, const Vector& b) {
    if (a.size() != b.size()) throw std::invalid_argument("dot: length mismatch");
    return std::inner_product(a.begin(), a.end(), b.begin(), 0.0);
}

inline double norm2(const Vector& a) { return std::sqrt(dot(a, a)); }

inline Vector& axpy(double alpha, const Vector& x, Vector& y) {
    if (x.size() != y.size()) throw std::invalid_argument("axpy: length mismatch");
    for (std::size_t i = 0; i < x.size(); ++i) y[i] += alpha * x[i];
    return y;
}

inline Vector operator+(Vector a, const Vector& b) { return axpy(1.0, b, a), a; }
inline Vector operator-(Vector a, const Vector& b) { return axpy(-1.0, b, a), a; }
inline Vector operator*(double s, Vector a) {
    for (double& v : a) v *= s;
    return a;
}

/// Elementwise product.
inline Vector hadamard(const Vector& a, const Vector& b) {
    if (a.size() != b.size()) throw std::invalid_argument("hadamard: length mismatch");
    Vector out(a.size());
    for (std::size_t i = 0; i < a.size(); ++i) out[i] = a[i] * b[i];
    return out;
}

// ---------------------------------------------------------------------------
// Matrix algebra
// ---------------------------------------------------------------------------

inline Matrix transpose(const Matrix& m) {
    Matrix t(m.cols(), m.rows());
    for (std::size_t i = 0; i < m.rows(); ++i)
        for (std::size_t j = 0; j < m.cols(); ++j) t(j, i) = m(i, j);
    return t;
}

inline Matrix matmul(const Matrix& a, const Matrix& b) {
    if (a.cols() != b.rows()) throw std::invalid_argument("matmul: inner dims mismatch");
    Matrix c(a.rows(), b.cols());
    for (std::size_t i = 0; i < a.rows(); ++i) {
        for (std::size_t k = 0; k < a.cols(); ++k) {
            const double aik = a(i, k);
            if (aik == 0.0) continue;
            const double* brow = b.row_ptr(k);
            double* crow = c.row_ptr(i);
            for (std::size_t j = 0; j < b.cols(); ++j) crow[j] += aik * brow[j];
        }
    }
    return c;
}

/// m * v
inline Vector matvec(const Matrix& m, const Vector& v) {
    if (m.cols() != v.size()) throw std::invalid_argument("matvec: dims mismatch");
    Vector out(m.rows(), 0.0);
    for (std::size_t i = 0; i < m.rows(); ++i) {
        const double* row = m.row_ptr(i);
        double acc = 0.0;
        for (std::size_t j = 0; j < m.cols(); ++j) acc += row[j] * v[j];
        out[i] = acc;
    }
    return out;
}

/// m^T * v
inline Vector matvec_t(const Matrix& m, const Vector& v) {
    if (m.rows() != v.size()) throw std::invalid_argument("matvec_t: dims mismatch");
    Vector out(m.cols(), 0.0);
    for (std::size_t i = 0; i < m.rows(); ++i) {
        const double* row = m.row_ptr(i);
        const double vi = v[i];
        for (std::size_t j = 0; j < m.cols(); ++j) out[j] += row[j] * vi;
    }
    return out;
}

/// a * b^T (outer product)
inline Matrix outer(const Vector& a, const Vector& b) {
    Matrix m(a.size(), b.size());
    for (std::size_t i = 0; i < a.size(); ++i)
        for (std::size_t j = 0; j < b.size(); ++j) m(i, j) = a[i] * b[j];
    return m;
}

inline Matrix operator+(Matrix a, const Matrix& b) {
    if (a.rows() != b.rows() || a.cols() != b.cols())
        throw std::invalid_argument("Matrix +: shape mismatch");
    for (std::size_t i = 0; i < a.size(); ++i) a.data()[i] += b.data()[i];
    return a;
}

inline Matrix operator-(Matrix a, const Matrix& b) {
    if (a.rows() != b.rows() || a.cols() != b.cols())
        throw std::invalid_argument("Matrix -: shape mismatch");
    for (std::size_t i = 0; i < a.size(); ++i) a.data()[i] -= b.data()[i];
    return a;
}

inline Matrix operator*(double s, Matrix a) {
    for (std::size_t i = 0; i < a.size(); ++i) a.data()[i] *= s;
    return a;
}

inline double frobenius_norm(const Matrix& m) {
    double s = 0.0;
    for (std::size_t i = 0; i < m.size(); ++i) s += m.data()[i] * m.data()[i];
    return std::sqrt(s);
}

inline double max_abs(const Matrix& m) {
    double s = 0.0;
    for (std::size_t i = 0; i < m.size(); ++i) s = std::max(s, std::abs(m.data()[i]));
    return s;
}

}  // namespace icebeem
