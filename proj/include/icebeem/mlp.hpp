#pragma once

#include <cmath>
#include <cstdint>
#include <limits>
#include <string>
#include <vector>

#include "icebeem/linalg.hpp"
#include "icebeem/matrix.hpp"
#include "icebeem/rng.hpp"

namespace icebeem {

enum class OutputActivation : std::uint8_t { none = 0, relu = 1 };

/// Architecture of a LeakyReLU multilayer perceptron. Hidden layers use
/// LeakyReLU(leaky_slope); the output layer is linear unless
/// output_activation is relu. Layer widths must be monotone (either
/// non-increasing or non-decreasing) unless allow_non_monotone is set:
/// monotone widths are what guarantees a full-rank input Jacobian.
struct MlpSpec {
    std::vector<std::size_t> dims;  // d0 .. dL
    double leaky_slope = 0.1;
    OutputActivation output_activation = OutputActivation::none;
    std::uint64_t seed = 0;
    bool allow_non_monotone = false;

    std::size_t input_dim() const { return dims.front(); }
    std::size_t output_dim() const { return dims.back(); }
    std::size_t num_layers() const { return dims.size() - 1; }

    void validate() const {
        if (dims.size() < 2) throw std::invalid_argument("MlpSpec: need at least input and output widths");
        for (std::size_t d : dims)
            if (d < 1) throw std::invalid_argument("MlpSpec: zero-width layer");
        if (!(leaky_slope > 0.0 && leaky_slope < 1.0))
            throw std::invalid_argument("MlpSpec: leaky_slope must be in (0,1)");
        if (!allow_non_monotone) {
            bool non_increasing = true, non_decreasing = true;
            for (std::size_t l = 0; l + 1 < dims.size(); ++l) {
                non_increasing &= dims[l] >= dims[l + 1];
                non_decreasing &= dims[l] <= dims[l + 1];
            }
            if (!non_increasing && !non_decreasing)
                throw std::invalid_argument(
                    "MlpSpec: widths must be monotone (set allow_non_monotone to override)");
        }
    }
};

/// MLP parameters. Weight l has shape dims[l+1] x dims[l]; all weights are
/// verified full rank at construction.
struct MlpNet {
    MlpSpec spec;
    std::vector<Matrix> weights;
    std::vector<Vector> biases;

    std::size_t input_dim() const { return spec.input_dim(); }
    std::size_t output_dim() const { return spec.output_dim(); }
    std::size_t num_layers() const { return spec.num_layers(); }

    std::size_t num_params() const {
        std::size_t n = 0;
        for (std::size_t l = 0; l < weights.size(); ++l) n += weights[l].size() + biases[l].size();
        return n;
    }
};

/// One forward evaluation with the activation pattern frozen: masks[l] holds
/// the local slope of layer l's activation (1 or leaky_slope on hidden
/// layers, 1 or 0 on a relu output, all ones on a linear output).
/// Pre-activations exactly at 0 take slope 1 on hidden layers so that
/// forward, JVP and VJP always agree.
struct ForwardTrace {
    Vector input;
    std::vector<Vector> pre_activations;
    std::vector<Vector> masks;
    Vector output;
};

/// Parameter gradients shaped like an MlpNet.
struct MlpGrads {
    std::vector<Matrix> d_weights;
    std::vector<Vector> d_biases;
};

inline MlpGrads zero_grads(const MlpNet& net) {
    MlpGrads g;
    g.d_weights.reserve(net.num_layers());
    g.d_biases.reserve(net.num_layers());
    for (std::size_t l = 0; l < net.num_layers(); ++l) {
        g.d_weights.emplace_back(net.weights[l].rows(), net.weights[l].cols());
        g.d_biases.emplace_back(net.biases[l].size(), 0.0);
    }
    return g;
}

// ---------------------------------------------------------------------------
// Construction
// ---------------------------------------------------------------------------

/// Gaussian init scaled by 1/sqrt(fan-in), zero biases. Every weight is
/// checked full rank (tol 1e-10) and redrawn if not, at most 10 times.
inline MlpNet build_mlp(const MlpSpec& spec, Rng& rng) {
    spec.validate();
    MlpNet net;
    net.spec = spec;
    for (std::size_t l = 0; l + 1 < spec.dims.size(); ++l) {
        const std::size_t out = spec.dims[l + 1], in = spec.dims[l];
        const double scale = 1.0 / std::sqrt(static_cast<double>(in));
        Matrix w(out, in);
        bool full_rank = false;
        for (int attempt = 0; attempt < 10 && !full_rank; ++attempt) {
            for (std::size_t i = 0; i < w.size(); ++i) w.data()[i] = scale * rng.normal();
            full_rank = numerical_rank(w, 1e-10) == std::min(out, in);
        }
        if (!full_rank)
            throw NumericalError("build_mlp: layer " + std::to_string(l) +
                                 " rank-deficient after 10 draws");
        net.weights.push_back(std::move(w));
        net.biases.emplace_back(out, 0.0);
    }
    return net;
}

// ---------------------------------------------------------------------------
// Evaluation and derivatives
// ---------------------------------------------------------------------------

namespace detail {

inline void check_trace(const MlpNet& net, const ForwardTrace& trace, const char* who) {
    if (trace.masks.size() != net.num_layers() || trace.input.size() != net.input_dim())
        throw std::invalid_argument(std::string(who) + ": trace does not match net");
    for (std::size_t l = 0; l < trace.masks.size(); ++l)
        if (trace.masks[l].size() != net.weights[l].rows())
            throw std::invalid_argument(std::string(who) + ": trace does not match net");
}

}  // namespace detail

inline ForwardTrace forward(const MlpNet& net, const Vector& x) {
    if (x.size() != net.input_dim()) throw std::invalid_argument("forward: input length mismatch");
    const std::size_t L = net.num_layers();
    const double alpha = net.spec.leaky_slope;

    ForwardTrace trace;
    trace.input = x;
    trace.pre_activations.resize(L);
    trace.masks.resize(L);

    Vector a = x;
    for (std::size_t l = 0; l < L; ++l) {
        Vector pre = matvec(net.weights[l], a);
        axpy(1.0, net.biases[l], pre);
        Vector mask(pre.size());
        const bool last = l + 1 == L;
        if (!last) {
            for (std::size_t i = 0; i < pre.size(); ++i) mask[i] = pre[i] < 0.0 ? alpha : 1.0;
        } else if (net.spec.output_activation == OutputActivation::relu) {
            for (std::size_t i = 0; i < pre.size(); ++i) mask[i] = pre[i] > 0.0 ? 1.0 : 0.0;
        } else {
            std::fill(mask.begin(), mask.end(), 1.0);
        }
        a = hadamard(mask, pre);
        trace.pre_activations[l] = std::move(pre);
        trace.masks[l] = std::move(mask);
    }
    trace.output = a;
    return trace;
}

/// J_f(x) u over the trace's frozen activation pattern.
inline Vector input_jvp(const MlpNet& net, const ForwardTrace& trace, const Vector& u) {
    detail::check_trace(net, trace, "input_jvp");
    if (u.size() != net.input_dim()) throw std::invalid_argument("input_jvp: length mismatch");
    Vector cur = u;
    for (std::size_t l = 0; l < net.num_layers(); ++l)
        cur = hadamard(trace.masks[l], matvec(net.weights[l], cur));
    return cur;
}

/// J_f(x)^T v over the trace's frozen activation pattern.
inline Vector input_vjp(const MlpNet& net, const ForwardTrace& trace, const Vector& v) {
    detail::check_trace(net, trace, "input_vjp");
    if (v.size() != net.output_dim()) throw std::invalid_argument("input_vjp: length mismatch");
    Vector cur = v;
    for (std::size_t l = net.num_layers(); l-- > 0;)
        cur = matvec_t(net.weights[l], hadamard(trace.masks[l], cur));
    return cur;
}

/// d(out_grad . f(x)) / d(weights, biases): plain reverse mode over the trace.
inline MlpGrads param_grad_scalar(const MlpNet& net, const ForwardTrace& trace,
                                  const Vector& out_grad) {
    detail::check_trace(net, trace, "param_grad_scalar");
    if (out_grad.size() != net.output_dim())
        throw std::invalid_argument("param_grad_scalar: out_grad length mismatch");

    const std::size_t L = net.num_layers();
    MlpGrads grads = zero_grads(net);

    Vector delta = hadamard(trace.masks[L - 1], out_grad);
    for (std::size_t l = L; l-- > 0;) {
        const Vector& below =
            l == 0 ? trace.input : hadamard(trace.masks[l - 1], trace.pre_activations[l - 1]);
        Matrix& dw = grads.d_weights[l];
        for (std::size_t i = 0; i < dw.rows(); ++i)
            for (std::size_t j = 0; j < dw.cols(); ++j) dw(i, j) = delta[i] * below[j];
        grads.d_biases[l] = delta;
        if (l > 0) delta = hadamard(trace.masks[l - 1], matvec_t(net.weights[l], delta));
    }
    return grads;
}

struct ScoreLossResult {
    double loss = 0.0;
    MlpGrads grads;      // d loss / d (weights, biases), v held fixed
    Vector v_grad;       // d loss / d v
    Vector score;        // -J_f(x)^T v
    ForwardTrace trace;  // forward pass at x, reusable by the caller
};

/// Loss ||-J_f(x)^T v - target||^2 and its exact parameter gradient.
///
/// Within the trace's activation region the score s = -J^T v is multilinear
/// in the weights: with u_l the reverse partial product (masked v pushed
/// down to layer l) and q_l the forward partial product of the residual
/// r = 2(s - target), the gradient of the loss w.r.t. W_l is -u_l q_{l-1}^T.
/// Bias gradients vanish identically, since the region's Jacobian does not
/// depend on the biases. v_grad = -J r closes the chain for condition
/// embeddings (and, in augmented mode, the dependence of v on f itself).
inline ScoreLossResult param_grad_score_loss_traced(const MlpNet& net, ForwardTrace trace,
                                                    const Vector& v, const Vector& target) {
    detail::check_trace(net, trace, "param_grad_score_loss");
    if (v.size() != net.output_dim())
        throw std::invalid_argument("param_grad_score_loss: v length mismatch");
    if (target.size() != net.input_dim())
        throw std::invalid_argument("param_grad_score_loss: target length mismatch");

    const std::size_t L = net.num_layers();
    ScoreLossResult res;
    res.trace = std::move(trace);

    // reverse partial products u_l, ending with the score
    std::vector<Vector> u(L);
    u[L - 1] = hadamard(res.trace.masks[L - 1], v);
    for (std::size_t l = L - 1; l-- > 0;)
        u[l] = hadamard(res.trace.masks[l], matvec_t(net.weights[l + 1], u[l + 1]));
    res.score = -1.0 * matvec_t(net.weights[0], u[0]);

    Vector residual = res.score - target;
    res.loss = dot(residual, residual);
    if (!std::isfinite(res.loss)) throw NumericalError("param_grad_score_loss: non-finite loss");
    Vector r = 2.0 * std::move(residual);

    // forward partial products q_l of the residual
    res.grads = zero_grads(net);
    Vector q = r;  // q_0
    for (std::size_t l = 0; l < L; ++l) {
        Matrix& dw = res.grads.d_weights[l];
        for (std::size_t i = 0; i < dw.rows(); ++i)
            for (std::size_t j = 0; j < dw.cols(); ++j) dw(i, j) = -u[l][i] * q[j];
        q = hadamard(res.trace.masks[l], matvec(net.weights[l], q));  // q_{l+1}
    }
    res.v_grad = -1.0 * std::move(q);  // -J r
    return res;
}

inline ScoreLossResult param_grad_score_loss(const MlpNet& net, const Vector& x, const Vector& v,
                                             const Vector& target) {
    return param_grad_score_loss_traced(net, forward(net, x), v, target);
}

// ---------------------------------------------------------------------------
// Architecture probes
// ---------------------------------------------------------------------------

struct JacobianProbeReport {
    std::size_t min_rank = 0;
    double min_sigma = 0.0;  // smallest sigma_min over probed points
};

/// Assembles J_f at Gaussian random points column by column and reports the
/// worst rank and smallest singular value seen.
inline JacobianProbeReport jacobian_rank_probe(const MlpNet& net, std::size_t n_points, Rng& rng) {
    if (n_points < 1) throw std::invalid_argument("jacobian_rank_probe: need n_points >= 1");
    const std::size_t d_in = net.input_dim(), d_out = net.output_dim();
    JacobianProbeReport report;
    report.min_rank = std::min(d_in, d_out) + 1;
    report.min_sigma = std::numeric_limits<double>::infinity();

    for (std::size_t p = 0; p < n_points; ++p) {
        const Vector x = rng.normal_vector(d_in);
        const ForwardTrace trace = forward(net, x);
        Matrix jac(d_out, d_in);
        Vector e(d_in, 0.0);
        for (std::size_t j = 0; j < d_in; ++j) {
            e[j] = 1.0;
            const Vector col = input_jvp(net, trace, e);
            for (std::size_t i = 0; i < d_out; ++i) jac(i, j) = col[i];
            e[j] = 0.0;
        }
        const SvdResult s = svd(jac);
        const double smax = s.singular_values.front();
        std::size_t rank = 0;
        for (double sv : s.singular_values)
            if (sv > 1e-10 * smax) ++rank;
        report.min_rank = std::min(report.min_rank, rank);
        report.min_sigma = std::min(report.min_sigma, s.singular_values.back());
    }
    return report;
}

struct SubmatrixCheckReport {
    bool all_invertible = true;
    double min_sigma = std::numeric_limits<double>::infinity();
    std::size_t failing_layer = 0;            // valid when !all_invertible
    std::vector<std::size_t> failing_subset;  // indices into the larger dimension
    std::size_t total_checked = 0;
};

namespace detail {

inline Matrix submatrix_rows(const Matrix& w, const std::vector<std::size_t>& rows) {
    Matrix s(rows.size(), w.cols());
    for (std::size_t i = 0; i < rows.size(); ++i)
        for (std::size_t j = 0; j < w.cols(); ++j) s(i, j) = w(rows[i], j);
    return s;
}

inline Matrix submatrix_cols(const Matrix& w, const std::vector<std::size_t>& cols) {
    Matrix s(w.rows(), cols.size());
    for (std::size_t i = 0; i < w.rows(); ++i)
        for (std::size_t j = 0; j < cols.size(); ++j) s(i, j) = w(i, cols[j]);
    return s;
}

inline double binomial_approx(std::size_t n, std::size_t k) {
    double v = 1.0;
    for (std::size_t i = 0; i < k; ++i) v *= static_cast<double>(n - i) / static_cast<double>(i + 1);
    return v;
}

}  // namespace detail

/// Checks the square submatrices of every non-square weight along its larger
/// dimension: all of them when there are at most 10^4, a uniform random
/// sample of n_samples subsets otherwise.
inline SubmatrixCheckReport check_submatrix_invertibility(const MlpNet& net, std::size_t n_samples,
                                                          Rng& rng) {
    SubmatrixCheckReport report;

    for (std::size_t l = 0; l < net.num_layers(); ++l) {
        const Matrix& w = net.weights[l];
        const std::size_t big = std::max(w.rows(), w.cols());
        const std::size_t small = std::min(w.rows(), w.cols());
        const bool rowwise = w.rows() > w.cols();
        if (w.rows() == w.cols()) continue;

        auto check_subset = [&](const std::vector<std::size_t>& subset) {
            const Matrix sub =
                rowwise ? detail::submatrix_rows(w, subset) : detail::submatrix_cols(w, subset);
            const SvdResult s = svd(sub);
            const double sigma = s.singular_values.back();
            report.min_sigma = std::min(report.min_sigma, sigma);
            ++report.total_checked;
            if (sigma <= 1e-10 * std::max(1.0, s.singular_values.front()) && report.all_invertible) {
                report.all_invertible = false;
                report.failing_layer = l;
                report.failing_subset = subset;
            }
        };

        if (detail::binomial_approx(big, small) <= 1e4) {
            // enumerate all subsets in lexicographic order
            std::vector<std::size_t> subset(small);
            for (std::size_t i = 0; i < small; ++i) subset[i] = i;
            while (true) {
                check_subset(subset);
                std::size_t i = small;
                while (i-- > 0) {
                    if (subset[i] + (small - i) < big) {
                        ++subset[i];
                        for (std::size_t j = i + 1; j < small; ++j) subset[j] = subset[j - 1] + 1;
                        break;
                    }
                    if (i == 0) goto done_layer;
                }
            }
        done_layer:;
        } else {
            for (std::size_t s = 0; s < n_samples; ++s) {
                // sample `small` distinct indices out of `big`
                std::vector<std::size_t> pool(big);
                std::iota(pool.begin(), pool.end(), 0);
                std::vector<std::size_t> subset(small);
                for (std::size_t i = 0; i < small; ++i) {
                    const std::size_t pick = i + rng.below(big - i);
                    std::swap(pool[i], pool[pick]);
                    subset[i] = pool[i];
                }
                std::sort(subset.begin(), subset.end());
                check_subset(subset);
            }
        }
    }
    return report;
}

// ---------------------------------------------------------------------------
// Flat parameter views (training and serialization work on these)
// ---------------------------------------------------------------------------

inline Vector flatten_params(const MlpNet& net) {
    Vector flat;
    flat.reserve(net.num_params());
    for (std::size_t l = 0; l < net.num_layers(); ++l) {
        const Matrix& w = net.weights[l];
        flat.insert(flat.end(), w.data(), w.data() + w.size());
        flat.insert(flat.end(), net.biases[l].begin(), net.biases[l].end());
    }
    return flat;
}

inline void set_params(MlpNet& net, const Vector& flat) {
    if (flat.size() != net.num_params()) throw std::invalid_argument("set_params: length mismatch");
    std::size_t off = 0;
    for (std::size_t l = 0; l < net.num_layers(); ++l) {
        Matrix& w = net.weights[l];
        std::copy(flat.begin() + off, flat.begin() + off + w.size(), w.data());
        off += w.size();
        std::copy(flat.begin() + off, flat.begin() + off + net.biases[l].size(),
                  net.biases[l].begin());
        off += net.biases[l].size();
    }
}

inline Vector flatten_grads(const MlpGrads& grads) {
    Vector flat;
    for (std::size_t l = 0; l < grads.d_weights.size(); ++l) {
        const Matrix& w = grads.d_weights[l];
        flat.insert(flat.end(), w.data(), w.data() + w.size());
        flat.insert(flat.end(), grads.d_biases[l].begin(), grads.d_biases[l].end());
    }
    return flat;
}

inline void accumulate(MlpGrads& into, const MlpGrads& from, double weight = 1.0) {
    for (std::size_t l = 0; l < into.d_weights.size(); ++l) {
        Matrix& w = into.d_weights[l];
        const Matrix& g = from.d_weights[l];
        for (std::size_t i = 0; i < w.size(); ++i) w.data()[i] += weight * g.data()[i];
        axpy(weight, from.d_biases[l], into.d_biases[l]);
    }
}

}  // namespace icebeem
