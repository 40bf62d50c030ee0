#pragma once

#include <cstdint>
#include <numeric>
#include <vector>

#include "icebeem/assignment.hpp"
#include "icebeem/rng.hpp"
#include "icebeem/stats.hpp"

namespace icebeem {

struct MccReport {
    double mcc = 0.0;                 // mean of per_component_corrs
    Assignment permutation;           // column matching that attains it
    Vector per_component_corrs;       // selected |corr| entries, in [0,1]
};

/// Mean of the absolute Pearson correlations under the best column matching:
/// identifiability up to permutation, sign and scale.
inline MccReport mcc_strong(const Matrix& a, const Matrix& b) {
    if (a.rows() != b.rows() || a.cols() != b.cols())
        throw std::invalid_argument("mcc_strong: shape mismatch");
    const Matrix corr = pearson_abs_corr(a, b);
    MccReport report;
    report.permutation = linear_sum_assignment(corr, /*maximize=*/true);
    report.per_component_corrs.resize(a.cols());
    for (std::size_t i = 0; i < a.cols(); ++i)
        report.per_component_corrs[i] = corr(i, report.permutation.permutation[i]);
    report.mcc = report.permutation.total / static_cast<double>(a.cols());
    return report;
}

namespace detail {

// Deterministic seeded shuffle of 0..n-1; fixes the weak-MCC fit/score split.
inline std::vector<std::size_t> shuffled_indices(std::size_t n, std::uint64_t seed) {
    std::vector<std::size_t> idx(n);
    std::iota(idx.begin(), idx.end(), 0);
    Rng rng(seed);
    for (std::size_t i = n; i-- > 1;) {
        const std::size_t j = rng.below(i + 1);
        std::swap(idx[i], idx[j]);
    }
    return idx;
}

inline Matrix take_rows(const Matrix& m, const std::vector<std::size_t>& rows, std::size_t from,
                        std::size_t to) {
    Matrix out(to - from, m.cols());
    for (std::size_t i = from; i < to; ++i) out.set_row(i - from, m.row(rows[i]));
    return out;
}

}  // namespace detail

constexpr std::uint64_t kWeakMccSplitSeed = 0x5EED5EEDULL;

/// Identifiability up to an invertible linear map: CCA is fitted on one half
/// of the rows (after a fixed seeded shuffle), both blocks are projected to k
/// canonical variates, and the held-out half is scored with mcc_strong.
inline MccReport mcc_weak(const Matrix& a, const Matrix& b, std::size_t k,
                          std::uint64_t split_seed = kWeakMccSplitSeed) {
    if (a.rows() != b.rows()) throw std::invalid_argument("mcc_weak: row count mismatch");
    const std::size_t n = a.rows();
    if (n < 8) throw std::invalid_argument("mcc_weak: too few rows to split");

    const std::vector<std::size_t> idx = detail::shuffled_indices(n, split_seed);
    const std::size_t half = n / 2;
    const Matrix a_fit = detail::take_rows(a, idx, 0, half);
    const Matrix b_fit = detail::take_rows(b, idx, 0, half);
    const Matrix a_score = detail::take_rows(a, idx, half, n);
    const Matrix b_score = detail::take_rows(b, idx, half, n);

    const CcaResult fit = cca(a_fit, b_fit, k);
    const Matrix u = cca_project(a_score, fit.mean_x, fit.proj_x);
    const Matrix v = cca_project(b_score, fit.mean_y, fit.proj_y);
    return mcc_strong(u, v);
}

enum class MccMode : std::uint8_t { strong = 0, weak = 1 };

inline const char* to_string(MccMode m) { return m == MccMode::strong ? "strong" : "weak"; }

inline MccMode mcc_mode_from_string(const std::string& s) {
    if (s == "strong") return MccMode::strong;
    if (s == "weak") return MccMode::weak;
    throw std::invalid_argument("unknown mcc mode: " + s);
}

/// Symmetric matrix of pairwise MCCs between feature dumps of identical
/// shape; diagonal is exactly 1.
inline Matrix consistency_matrix(const std::vector<Matrix>& dumps, MccMode mode) {
    if (dumps.size() < 2) throw std::invalid_argument("consistency_matrix: need at least 2 dumps");
    for (const Matrix& d : dumps)
        if (d.rows() != dumps.front().rows() || d.cols() != dumps.front().cols())
            throw std::invalid_argument("consistency_matrix: shape mismatch");

    const std::size_t k = dumps.front().cols();
    Matrix out(dumps.size(), dumps.size());
    for (std::size_t i = 0; i < dumps.size(); ++i) {
        out(i, i) = 1.0;
        for (std::size_t j = i + 1; j < dumps.size(); ++j) {
            const double m = mode == MccMode::strong ? mcc_strong(dumps[i], dumps[j]).mcc
                                                     : mcc_weak(dumps[i], dumps[j], k).mcc;
            out(i, j) = m;
            out(j, i) = m;
        }
    }
    return out;
}

inline double offdiagonal_mean(const Matrix& m) {
    double total = 0.0;
    std::size_t count = 0;
    for (std::size_t i = 0; i < m.rows(); ++i)
        for (std::size_t j = 0; j < m.cols(); ++j)
            if (i != j) {
                total += m(i, j);
                ++count;
            }
    return total / static_cast<double>(count);
}

// ---------------------------------------------------------------------------
// Multinomial logistic probe
// ---------------------------------------------------------------------------

struct LogRegModel {
    Matrix weights;  // classes x (features + 1), last column is the bias
};

/// Full-batch gradient descent on L2-regularized softmax cross-entropy:
/// convex, deterministic, no rng. Stops at the iteration cap or when the
/// gradient norm falls under 1e-8.
inline LogRegModel logreg_fit(const Matrix& features, const std::vector<std::size_t>& labels,
                              double l2 = 1e-4, std::size_t max_iters = 5000) {
    const std::size_t n = features.rows(), p = features.cols();
    if (labels.size() != n) throw std::invalid_argument("logreg_fit: label count mismatch");
    std::size_t classes = 0;
    for (std::size_t l : labels) classes = std::max(classes, l + 1);
    if (classes < 2) throw std::invalid_argument("logreg_fit: need at least 2 classes");

    LogRegModel model;
    model.weights = Matrix(classes, p + 1);
    Matrix grad(classes, p + 1);
    Vector logits(classes);

    const double step = 1.0;  // stable for softmax with L2; curvature <= 1/2
    for (std::size_t iter = 0; iter < max_iters; ++iter) {
        for (std::size_t i = 0; i < grad.size(); ++i) grad.data()[i] = 0.0;
        for (std::size_t i = 0; i < n; ++i) {
            const double* x = features.row_ptr(i);
            for (std::size_t c = 0; c < classes; ++c) {
                double acc = model.weights(c, p);
                for (std::size_t j = 0; j < p; ++j) acc += model.weights(c, j) * x[j];
                logits[c] = acc;
            }
            const double zmax = *std::max_element(logits.begin(), logits.end());
            double zsum = 0.0;
            for (double& z : logits) {
                z = std::exp(z - zmax);
                zsum += z;
            }
            for (std::size_t c = 0; c < classes; ++c) {
                const double delta = logits[c] / zsum - (labels[i] == c ? 1.0 : 0.0);
                for (std::size_t j = 0; j < p; ++j) grad(c, j) += delta * x[j];
                grad(c, p) += delta;
            }
        }
        double gnorm = 0.0;
        for (std::size_t i = 0; i < grad.size(); ++i) {
            grad.data()[i] = grad.data()[i] / static_cast<double>(n) + l2 * model.weights.data()[i];
            gnorm += grad.data()[i] * grad.data()[i];
        }
        if (std::sqrt(gnorm) < 1e-8) break;
        for (std::size_t i = 0; i < grad.size(); ++i)
            model.weights.data()[i] -= step * grad.data()[i];
    }
    if (!model.weights.all_finite()) throw NumericalError("logreg_fit: diverged");
    return model;
}

inline std::size_t logreg_predict(const LogRegModel& model, const double* x, std::size_t p) {
    std::size_t best = 0;
    double best_score = -std::numeric_limits<double>::infinity();
    for (std::size_t c = 0; c < model.weights.rows(); ++c) {
        double acc = model.weights(c, p);
        for (std::size_t j = 0; j < p; ++j) acc += model.weights(c, j) * x[j];
        if (acc > best_score) {
            best_score = acc;
            best = c;
        }
    }
    return best;
}

inline double logreg_accuracy(const LogRegModel& model, const Matrix& features,
                              const std::vector<std::size_t>& labels) {
    if (labels.size() != features.rows())
        throw std::invalid_argument("logreg_accuracy: label count mismatch");
    if (features.cols() + 1 != model.weights.cols())
        throw std::invalid_argument("logreg_accuracy: feature width mismatch");
    std::size_t correct = 0;
    for (std::size_t i = 0; i < features.rows(); ++i)
        correct += logreg_predict(model, features.row_ptr(i), features.cols()) == labels[i];
    return static_cast<double>(correct) / static_cast<double>(features.rows());
}

}  // namespace icebeem
