#pragma once

#include <cmath>
#include <cstdint>
#include <exception>
#include <string>
#include <thread>
#include <utility>
#include <vector>

#include "icebeem/dataset.hpp"
#include "icebeem/model.hpp"
#include "icebeem/optimizer.hpp"

namespace icebeem {

// ---------------------------------------------------------------------------
// Conditional denoising score matching
// ---------------------------------------------------------------------------

struct CdsmConfig {
    double sigma = 0.01;
    std::size_t batch_size = 63;
    std::size_t iterations = 5000;
    double lr = 1e-3;
    std::uint64_t seed = 0;
    bool freeze_f = false;
    bool freeze_g = false;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double adam_eps = 1e-8;
    // Worker threads for the within-batch gradient sum. The batch is split
    // into num_threads shards reduced in fixed order, so results depend on
    // this value but not on scheduling; it is echoed by experiment reports.
    std::size_t num_threads = 1;

    void validate() const {
        if (sigma <= 0.0) throw std::invalid_argument("CdsmConfig: sigma must be positive");
        if (batch_size < 1) throw std::invalid_argument("CdsmConfig: batch_size must be >= 1");
        if (num_threads < 1) throw std::invalid_argument("CdsmConfig: num_threads must be >= 1");
    }
};

struct BatchGrads {
    double loss = 0.0;
    Vector flat;  // layout of model_params()
};

namespace detail {

// Preallocated buffers for the per-sample CDSM gradient sweep; the training
// loop reuses one workspace across all samples and iterations.
struct CdsmWorkspace {
    std::vector<Vector> act;   // layer activations, act[0] is the input
    std::vector<Vector> pre;   // pre-activations
    std::vector<Vector> mask;  // frozen local slopes
    std::vector<Vector> u;     // reverse partial products of v_eff
    Vector q, q_next, v_eff, dv_diag, score, resid, delta, x_noisy, target, dg;

    static CdsmWorkspace create(const IceBeemModel& model) {
        CdsmWorkspace ws;
        const std::size_t L = model.f.num_layers();
        ws.act.resize(L + 1);
        ws.pre.resize(L);
        ws.mask.resize(L);
        ws.u.resize(L);
        ws.act[0].resize(model.f.input_dim());
        for (std::size_t l = 0; l < L; ++l) {
            const std::size_t w = model.f.weights[l].rows();
            ws.act[l + 1].resize(w);
            ws.pre[l].resize(w);
            ws.mask[l].resize(w);
            ws.u[l].resize(w);
        }
        const std::size_t d0 = model.f.input_dim(), dz = model.f.output_dim();
        ws.q.reserve(d0);
        ws.v_eff.resize(dz);
        ws.dv_diag.resize(dz);
        ws.score.resize(d0);
        ws.resid.resize(d0);
        ws.delta.resize(dz);
        ws.x_noisy.resize(d0);
        ws.target.resize(d0);
        ws.dg.resize(model.g.dim());
        return ws;
    }
};

// Fused per-sample CDSM loss and gradient accumulation (allocation-free for
// lookup embeddings). Same math as composing forward, effective_condition,
// param_grad_score_loss and the augmented chain rule; see test_estimator for
// the cross-check against that composition.
inline double cdsm_sample_grads(const IceBeemModel& model, CdsmWorkspace& ws, std::size_t y,
                                bool freeze_f, bool freeze_g, double weight, Vector& flat) {
    const MlpNet& f = model.f;
    const std::size_t L = f.num_layers();
    const double alpha = f.spec.leaky_slope;
    const bool relu_out = f.spec.output_activation == OutputActivation::relu;

    // forward with recorded masks
    ws.act[0] = ws.x_noisy;
    for (std::size_t l = 0; l < L; ++l) {
        const Matrix& w = f.weights[l];
        const Vector& below = ws.act[l];
        const std::size_t rows = w.rows(), cols = w.cols();
        for (std::size_t i = 0; i < rows; ++i) {
            const double* wrow = w.row_ptr(i);
            double acc = f.biases[l][i];
            for (std::size_t j = 0; j < cols; ++j) acc += wrow[j] * below[j];
            ws.pre[l][i] = acc;
            double m;
            if (l + 1 < L)
                m = acc < 0.0 ? alpha : 1.0;
            else
                m = relu_out ? (acc > 0.0 ? 1.0 : 0.0) : 1.0;
            ws.mask[l][i] = m;
            ws.act[l + 1][i] = m * acc;
        }
    }
    const Vector& f_out = ws.act[L];

    // v_eff and its diagonal f-sensitivity
    const std::size_t dz = f.output_dim();
    const double* g_row = nullptr;
    Vector g_embed;  // network-g fallback
    if (model.g.kind == ConditionEmbedding::Kind::lookup) {
        g_row = model.g.lookup.row_ptr(y);
    } else {
        g_embed = model.g.embed(y);
        g_row = g_embed.data();
    }
    switch (model.mode) {
        case ModelMode::plain:
        case ModelMode::positive:
            // the output mask applied in the sweeps below realizes the clamp
            for (std::size_t i = 0; i < dz; ++i) {
                ws.v_eff[i] = g_row[i];
                ws.dv_diag[i] = 0.0;
            }
            break;
        case ModelMode::augmented:
            for (std::size_t i = 0; i < dz; ++i) {
                ws.v_eff[i] = g_row[2 * i] + 2.0 * f_out[i] * g_row[2 * i + 1];
                ws.dv_diag[i] = 2.0 * g_row[2 * i + 1];
            }
            break;
    }

    // reverse partial products u_l = mask_l * (W_{l+1}^T u_{l+1}), u_L from v_eff
    for (std::size_t i = 0; i < dz; ++i) ws.u[L - 1][i] = ws.mask[L - 1][i] * ws.v_eff[i];
    for (std::size_t l = L - 1; l-- > 0;) {
        const Matrix& w = f.weights[l + 1];
        Vector& dst = ws.u[l];
        std::fill(dst.begin(), dst.end(), 0.0);
        for (std::size_t i = 0; i < w.rows(); ++i) {
            const double* wrow = w.row_ptr(i);
            const double ui = ws.u[l + 1][i];
            if (ui == 0.0) continue;
            for (std::size_t j = 0; j < w.cols(); ++j) dst[j] += wrow[j] * ui;
        }
        for (std::size_t j = 0; j < dst.size(); ++j) dst[j] *= ws.mask[l][j];
    }

    // score s = -W_1^T u_1, residual, loss
    {
        const Matrix& w0 = f.weights[0];
        std::fill(ws.score.begin(), ws.score.end(), 0.0);
        for (std::size_t i = 0; i < w0.rows(); ++i) {
            const double* wrow = w0.row_ptr(i);
            const double ui = ws.u[0][i];
            if (ui == 0.0) continue;
            for (std::size_t j = 0; j < w0.cols(); ++j) ws.score[j] -= wrow[j] * ui;
        }
    }
    double loss = 0.0;
    for (std::size_t j = 0; j < ws.score.size(); ++j) {
        const double r = ws.score[j] - ws.target[j];
        ws.resid[j] = 2.0 * r;
        loss += r * r;
    }
    if (!std::isfinite(loss)) throw NumericalError("cdsm_loss_and_grads: non-finite loss");

    const std::size_t nf = f.num_params();

    // forward partial products q_l of the residual; dW_l = -u_l q_{l-1}^T
    ws.q.assign(ws.resid.begin(), ws.resid.end());
    std::size_t off = 0;
    for (std::size_t l = 0; l < L; ++l) {
        const Matrix& w = f.weights[l];
        const std::size_t rows = w.rows(), cols = w.cols();
        if (!freeze_f) {
            for (std::size_t i = 0; i < rows; ++i) {
                const double c = -weight * ws.u[l][i];
                double* gout = flat.data() + off + i * cols;
                if (c != 0.0)
                    for (std::size_t j = 0; j < cols; ++j) gout[j] += c * ws.q[j];
            }
        }
        // q_{l+1} = mask_l * (W_l q_l); bias gradients of the frozen-region
        // score are identically zero
        ws.q_next.assign(rows, 0.0);
        for (std::size_t i = 0; i < rows; ++i) {
            const double* wrow = w.row_ptr(i);
            double acc = 0.0;
            for (std::size_t j = 0; j < cols; ++j) acc += wrow[j] * ws.q[j];
            ws.q_next[i] = ws.mask[l][i] * acc;
        }
        ws.q = ws.q_next;
        off += rows * cols + rows;
    }
    // v_grad = -q_L
    const Vector& q_final = ws.q;

    bool has_indirect = false;
    if (!freeze_f)
        for (std::size_t i = 0; i < dz; ++i) has_indirect |= ws.dv_diag[i] != 0.0;
    if (has_indirect) {
        // augmented chain: out_grad = dv_diag * v_grad pushed through plain
        // reverse mode, biases included
        ws.delta.resize(dz);
        for (std::size_t i = 0; i < dz; ++i)
            ws.delta[i] = ws.mask[L - 1][i] * (ws.dv_diag[i] * -q_final[i]);
        for (std::size_t l = L; l-- > 0;) {
            const Matrix& w = f.weights[l];
            const std::size_t rows = w.rows(), cols = w.cols();
            std::size_t layer_off = 0;
            for (std::size_t k = 0; k < l; ++k)
                layer_off += f.weights[k].size() + f.biases[k].size();
            const Vector& below = ws.act[l];
            for (std::size_t i = 0; i < rows; ++i) {
                const double c = weight * ws.delta[i];
                double* gout = flat.data() + layer_off + i * cols;
                if (c != 0.0)
                    for (std::size_t j = 0; j < cols; ++j) gout[j] += c * below[j];
                flat[layer_off + rows * cols + i] += c;
            }
            if (l > 0) {
                Vector& next = ws.q_next;
                next.assign(cols, 0.0);
                for (std::size_t i = 0; i < rows; ++i) {
                    const double* wrow = w.row_ptr(i);
                    const double di = ws.delta[i];
                    if (di == 0.0) continue;
                    for (std::size_t j = 0; j < cols; ++j) next[j] += wrow[j] * di;
                }
                ws.delta.assign(next.begin(), next.end());
                for (std::size_t j = 0; j < cols; ++j) ws.delta[j] *= ws.mask[l - 1][j];
            }
        }
    }

    if (!freeze_g) {
        // d loss / d g(y) via v_grad = -q_L
        switch (model.mode) {
            case ModelMode::plain:
                for (std::size_t i = 0; i < dz; ++i) ws.dg[i] = -q_final[i];
                break;
            case ModelMode::positive:
                for (std::size_t i = 0; i < dz; ++i) ws.dg[i] = -q_final[i] * ws.mask[L - 1][i];
                break;
            case ModelMode::augmented:
                for (std::size_t i = 0; i < dz; ++i) {
                    ws.dg[2 * i] = -q_final[i];
                    ws.dg[2 * i + 1] = 2.0 * f_out[i] * -q_final[i];
                }
                break;
        }
        if (model.g.kind == ConditionEmbedding::Kind::lookup) {
            const std::size_t row_off = nf + y * model.g.dim();
            for (std::size_t i = 0; i < ws.dg.size(); ++i) flat[row_off + i] += weight * ws.dg[i];
        } else {
            Vector onehot(model.g.network->input_dim(), 0.0);
            onehot[y] = 1.0;
            const ForwardTrace gt = forward(*model.g.network, onehot);
            const Vector g_flat = flatten_grads(param_grad_scalar(*model.g.network, gt, ws.dg));
            for (std::size_t i = 0; i < g_flat.size(); ++i) flat[nf + i] += weight * g_flat[i];
        }
    }
    return loss;
}

}  // namespace detail

/// Mean CDSM loss and parameter gradients over a batch. Each row is smoothed
/// with fresh Gaussian noise x~ = x + sigma * eps; the regression target is
/// the kernel score (x - x~) / sigma^2.
inline BatchGrads cdsm_loss_and_grads(const IceBeemModel& model, const Matrix& batch_x,
                                      const std::vector<std::size_t>& batch_y, double sigma,
                                      Rng& rng, bool freeze_f = false, bool freeze_g = false) {
    if (batch_x.rows() == 0) throw std::invalid_argument("cdsm_loss_and_grads: empty batch");
    if (batch_y.size() != batch_x.rows())
        throw std::invalid_argument("cdsm_loss_and_grads: label count mismatch");
    if (batch_x.cols() != model.input_dim())
        throw std::invalid_argument("cdsm_loss_and_grads: dimension mismatch");

    const std::size_t d = batch_x.cols();
    const double weight = 1.0 / static_cast<double>(batch_x.rows());
    BatchGrads out;
    out.flat.assign(num_model_params(model), 0.0);

    detail::CdsmWorkspace ws = detail::CdsmWorkspace::create(model);
    for (std::size_t i = 0; i < batch_x.rows(); ++i) {
        const double* row = batch_x.row_ptr(i);
        for (std::size_t j = 0; j < d; ++j) {
            const double eps = rng.normal();
            ws.x_noisy[j] = row[j] + sigma * eps;
            ws.target[j] = -eps / sigma;  // (x - x~) / sigma^2
        }
        out.loss += weight * detail::cdsm_sample_grads(model, ws, batch_y[i], freeze_f, freeze_g,
                                                       weight, out.flat);
    }
    if (!std::isfinite(out.loss)) throw NumericalError("cdsm_loss_and_grads: non-finite loss");
    return out;
}

struct TrainResult {
    IceBeemModel model;
    Vector loss_history;
};

/// Adam over minibatches drawn uniformly with replacement; bit-reproducible
/// for a fixed (model, data, config).
inline TrainResult train_cdsm(IceBeemModel model, const LabeledDataset& data,
                              const CdsmConfig& cfg) {
    cfg.validate();
    data.validate();
    model.validate();
    if (data.num_segments != model.num_segments())
        throw std::invalid_argument("train_cdsm: dataset segments do not match the model");

    Rng rng(cfg.seed);
    Vector params = model_params(model);
    AdamState adam = AdamState::create(params.size(), cfg.lr);
    adam.beta1 = cfg.beta1;
    adam.beta2 = cfg.beta2;
    adam.eps = cfg.adam_eps;

    TrainResult out;
    out.loss_history.reserve(cfg.iterations);

    const std::size_t d = data.dim();
    const std::size_t shards = std::min(cfg.num_threads, cfg.batch_size);
    const double weight = 1.0 / static_cast<double>(cfg.batch_size);

    // every shard owns an independent stream derived from (seed, iteration,
    // shard); the shard sums are reduced in fixed order, so the result is a
    // function of the config alone
    std::vector<detail::CdsmWorkspace> ws;
    std::vector<Vector> shard_grads;
    std::vector<Vector> heap_spacers;  // keep shard-local hot buffers off shared cache lines
    Vector shard_loss(shards);
    for (std::size_t s = 0; s < shards; ++s) {
        heap_spacers.emplace_back(2048, 0.0);
        ws.push_back(detail::CdsmWorkspace::create(model));
        shard_grads.emplace_back(params.size(), 0.0);
        heap_spacers.emplace_back(2048, 0.0);
    }

    Vector grads(params.size());
    for (std::size_t it = 0; it < cfg.iterations; ++it) {
        try {
            std::vector<std::exception_ptr> shard_error(shards);
            auto run_shard = [&](std::size_t s) {
                try {
                    Rng shard_rng = rng.split(it * shards + s);
                    const std::size_t lo = s * cfg.batch_size / shards;
                    const std::size_t hi = (s + 1) * cfg.batch_size / shards;
                    std::fill(shard_grads[s].begin(), shard_grads[s].end(), 0.0);
                    double loss = 0.0;
                    for (std::size_t b = lo; b < hi; ++b) {
                        const std::size_t idx = shard_rng.below(data.size());
                        const double* row = data.x.row_ptr(idx);
                        for (std::size_t j = 0; j < d; ++j) {
                            const double eps = shard_rng.normal();
                            ws[s].x_noisy[j] = row[j] + cfg.sigma * eps;
                            ws[s].target[j] = -eps / cfg.sigma;
                        }
                        loss += weight * detail::cdsm_sample_grads(model, ws[s], data.y[idx],
                                                                   cfg.freeze_f, cfg.freeze_g,
                                                                   weight, shard_grads[s]);
                    }
                    shard_loss[s] = loss;
                } catch (...) {
                    shard_error[s] = std::current_exception();
                }
            };
            if (shards == 1) {
                run_shard(0);
            } else {
                std::vector<std::thread> workers;
                workers.reserve(shards - 1);
                for (std::size_t s = 1; s < shards; ++s) workers.emplace_back(run_shard, s);
                run_shard(0);
                for (std::thread& t : workers) t.join();
            }
            for (std::size_t s = 0; s < shards; ++s)
                if (shard_error[s]) std::rethrow_exception(shard_error[s]);
            double loss = 0.0;
            std::fill(grads.begin(), grads.end(), 0.0);
            for (std::size_t s = 0; s < shards; ++s) {
                loss += shard_loss[s];
                for (std::size_t i = 0; i < grads.size(); ++i) grads[i] += shard_grads[s][i];
            }
            if (!std::isfinite(loss)) throw NumericalError("non-finite loss");
            adam_step(adam, params, grads);
            set_model_params(model, params);
            out.loss_history.push_back(loss);
        } catch (const NumericalError& e) {
            throw NumericalError("train_cdsm: iteration " + std::to_string(it) + ": " + e.what());
        }
    }
    out.model = std::move(model);
    return out;
}

/// Mean CDSM loss over the whole dataset with seeded noise; the comparison
/// metric of the transfer experiment.
inline double cdsm_eval_score(const IceBeemModel& model, const LabeledDataset& data, double sigma,
                              std::uint64_t seed) {
    if (data.size() == 0) throw std::invalid_argument("cdsm_eval_score: empty dataset");
    Rng rng(seed);
    const std::size_t d = data.dim();
    double total = 0.0;
    Vector x_noisy(d), target(d);
    for (std::size_t i = 0; i < data.size(); ++i) {
        const double* row = data.x.row_ptr(i);
        for (std::size_t j = 0; j < d; ++j) {
            const double eps = rng.normal();
            x_noisy[j] = row[j] + sigma * eps;
            target[j] = -eps / sigma;
        }
        const Vector s = score(model, x_noisy, data.y[i]);
        const Vector diff = s - target;
        total += dot(diff, diff);
    }
    return total / static_cast<double>(data.size());
}

// ---------------------------------------------------------------------------
// Conditional flow contrastive estimation with a Gaussian contrast family
// ---------------------------------------------------------------------------

/// Per-segment full-covariance Gaussian contrast: tractable to sample and to
/// evaluate, fitted once by moment matching.
struct ContrastNoise {
    std::vector<Vector> means;         // per segment
    std::vector<Matrix> chol_factors;  // lower-triangular, positive diagonal

    std::size_t num_segments() const { return means.size(); }
    std::size_t dim() const { return means.empty() ? 0 : means.front().size(); }

    double log_density(const Vector& x, std::size_t y) const {
        if (y >= num_segments()) throw std::invalid_argument("ContrastNoise: segment out of range");
        const Matrix& l = chol_factors[y];
        const Vector w = solve_lower(l, x - means[y]);
        double logdet = 0.0;
        for (std::size_t i = 0; i < l.rows(); ++i) logdet += std::log(l(i, i));
        constexpr double kLog2Pi = 1.8378770664093454836;
        return -0.5 * static_cast<double>(dim()) * kLog2Pi - logdet - 0.5 * dot(w, w);
    }

    Vector sample(std::size_t y, Rng& rng) const {
        if (y >= num_segments()) throw std::invalid_argument("ContrastNoise: segment out of range");
        const Matrix& l = chol_factors[y];
        const Vector eps = rng.normal_vector(dim());
        Vector x = means[y];
        for (std::size_t r = 0; r < l.rows(); ++r)
            for (std::size_t c = 0; c <= r; ++c) x[r] += l(r, c) * eps[c];
        return x;
    }
};

/// Empirical per-segment mean and covariance with ridge 1e-6 I.
inline ContrastNoise fit_contrast_noise(const LabeledDataset& data) {
    data.validate();
    const std::size_t d = data.dim();
    ContrastNoise noise;
    for (std::size_t seg = 0; seg < data.num_segments; ++seg) {
        const std::vector<std::size_t> rows = data.rows_of_segment(seg);
        if (rows.size() < d + 2)
            throw std::invalid_argument("fit_contrast_noise: segment " + std::to_string(seg) +
                                        " has fewer than d+2 samples");
        Vector mu(d, 0.0);
        for (std::size_t r : rows) axpy(1.0 / static_cast<double>(rows.size()), data.x.row(r), mu);
        Matrix cov(d, d);
        for (std::size_t r : rows) {
            const Vector c = data.x.row(r) - mu;
            for (std::size_t i = 0; i < d; ++i)
                for (std::size_t j = 0; j < d; ++j) cov(i, j) += c[i] * c[j];
        }
        const double f = 1.0 / static_cast<double>(rows.size() - 1);
        for (std::size_t i = 0; i < cov.size(); ++i) cov.data()[i] *= f;
        for (std::size_t i = 0; i < d; ++i) cov(i, i) += 1e-6;
        noise.means.push_back(std::move(mu));
        noise.chol_factors.push_back(cholesky(cov));
    }
    return noise;
}

namespace detail {

inline double softplus(double t) { return std::log1p(std::exp(-std::abs(t))) + std::max(t, 0.0); }
inline double sigmoid(double t) { return t >= 0.0 ? 1.0 / (1.0 + std::exp(-t)) : std::exp(t) / (1.0 + std::exp(t)); }

}  // namespace detail

/// Logistic discrimination loss of one (data, noise) pair given each side's
/// log-odds l = log p_model - log q_noise. Chance level (l = 0) is 2 log 2.
inline double cfce_pair_loss(double log_odds_data, double log_odds_noise) {
    return detail::softplus(-log_odds_data) + detail::softplus(log_odds_noise);
}

struct CfceConfig {
    std::size_t batch_size = 63;
    std::size_t iterations = 5000;
    double lr = 3e-4;
    std::uint64_t seed = 0;
    bool freeze_f = false;
    bool freeze_g = false;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double adam_eps = 1e-8;
};

struct CfceResult {
    IceBeemModel model;
    Vector offsets;  // per-segment log-normalization c_y, learned
    Vector loss_history;
};

namespace detail {

// log p_model(x|y) proxy = -E(x|y) + c_y; accumulates d(log p)/d(params)
// scaled by `coeff` into the flat gradient [model params | offsets].
inline double cfce_model_logp_grads(const IceBeemModel& model, const Vector& offsets,
                                    const Vector& x, std::size_t y, double coeff, bool freeze_f,
                                    bool freeze_g, Vector& flat) {
    const ForwardTrace trace = forward(model.f, x);
    const EffectiveCondition ec = effective_condition(model, trace, y);
    const Vector h = feature_from_output(model, trace.output);
    const Vector gy = model.g.embed(y);
    const double e = dot(h, gy);

    const std::size_t nf = model.f.num_params();
    if (!freeze_f && coeff != 0.0) {
        // d(-E)/d theta_f = -param_grad_scalar with out_grad = dE/df = v_eff
        const Vector f_flat = flatten_grads(param_grad_scalar(model.f, trace, ec.v));
        for (std::size_t i = 0; i < nf; ++i) flat[i] -= coeff * f_flat[i];
    }
    if (!freeze_g && coeff != 0.0) {
        if (model.g.kind == ConditionEmbedding::Kind::lookup) {
            const std::size_t row_off = nf + y * model.g.dim();
            for (std::size_t i = 0; i < h.size(); ++i) flat[row_off + i] -= coeff * h[i];
        } else {
            Vector onehot(model.g.network->input_dim(), 0.0);
            onehot[y] = 1.0;
            const ForwardTrace gt = forward(*model.g.network, onehot);
            Vector minus_h = -1.0 * h;
            const Vector g_flat = flatten_grads(param_grad_scalar(*model.g.network, gt, minus_h));
            for (std::size_t i = 0; i < g_flat.size(); ++i) flat[nf + i] += coeff * g_flat[i];
        }
    }
    const std::size_t n_model = num_model_params(model);
    flat[n_model + y] += coeff;  // d(c_y)/d c_y = 1
    return -e + offsets[y];
}

}  // namespace detail

/// Minibatch logistic discrimination between data pairs and contrast pairs.
/// Only the EBM side is trained; the Gaussian contrast stays fixed. The
/// per-segment offsets c_y absorb the unnormalized model's log Z(y).
inline CfceResult train_cfce(IceBeemModel model, const LabeledDataset& data,
                             const ContrastNoise& noise, const CfceConfig& cfg) {
    data.validate();
    model.validate();
    if (noise.num_segments() != model.num_segments())
        throw std::invalid_argument("train_cfce: contrast noise segments do not match the model");
    if (data.num_segments != model.num_segments())
        throw std::invalid_argument("train_cfce: dataset segments do not match the model");

    const std::size_t n_model = num_model_params(model);
    const std::size_t m = model.num_segments();
    Vector params = model_params(model);
    params.resize(n_model + m, 0.0);  // offsets c_y start at 0

    Rng rng(cfg.seed);
    AdamState adam = AdamState::create(params.size(), cfg.lr);
    adam.beta1 = cfg.beta1;
    adam.beta2 = cfg.beta2;
    adam.eps = cfg.adam_eps;

    CfceResult out;
    out.loss_history.reserve(cfg.iterations);

    for (std::size_t it = 0; it < cfg.iterations; ++it) {
        Vector grads(params.size(), 0.0);
        const Vector offsets(params.begin() + n_model, params.end());
        const double w = 1.0 / static_cast<double>(cfg.batch_size);
        double loss = 0.0;
        try {
            for (std::size_t b = 0; b < cfg.batch_size; ++b) {
                // data side
                const std::size_t idx = rng.below(data.size());
                const Vector xd = data.x.row(idx);
                const std::size_t yd = data.y[idx];
                {
                    Vector probe(params.size(), 0.0);
                    const double logp =
                        detail::cfce_model_logp_grads(model, offsets, xd, yd, 1.0, cfg.freeze_f,
                                                      cfg.freeze_g, probe);
                    const double l = logp - noise.log_density(xd, yd);
                    loss += w * detail::softplus(-l);
                    const double coeff = detail::sigmoid(l) - 1.0;  // d softplus(-l) / d l
                    axpy(w * coeff, probe, grads);
                }
                // noise side
                const std::size_t yn = rng.below(m);
                const Vector xn = noise.sample(yn, rng);
                {
                    Vector probe(params.size(), 0.0);
                    const double logp =
                        detail::cfce_model_logp_grads(model, offsets, xn, yn, 1.0, cfg.freeze_f,
                                                      cfg.freeze_g, probe);
                    const double l = logp - noise.log_density(xn, yn);
                    loss += w * detail::softplus(l);
                    axpy(w * detail::sigmoid(l), probe, grads);
                }
            }
            if (!std::isfinite(loss)) throw NumericalError("non-finite loss");
            adam_step(adam, params, grads);
            set_model_params(model, Vector(params.begin(), params.begin() + n_model));
            out.loss_history.push_back(loss);
        } catch (const NumericalError& e) {
            throw NumericalError("train_cfce: iteration " + std::to_string(it) + ": " + e.what());
        }
    }
    out.model = std::move(model);
    out.offsets = Vector(params.begin() + n_model, params.end());
    return out;
}

/// Accuracy of the fitted discriminator on held-out (data, noise) pairs.
inline double cfce_discrimination_accuracy(const IceBeemModel& model, const Vector& offsets,
                                           const ContrastNoise& noise, const LabeledDataset& data,
                                           std::uint64_t seed) {
    Rng rng(seed);
    std::size_t correct = 0, total = 0;
    for (std::size_t i = 0; i < data.size(); ++i) {
        const Vector xd = data.x.row(i);
        const double ld = -energy(model, xd, data.y[i]) + offsets[data.y[i]] -
                          noise.log_density(xd, data.y[i]);
        correct += ld > 0.0;
        const std::size_t yn = rng.below(data.num_segments);
        const Vector xn = noise.sample(yn, rng);
        const double ln = -energy(model, xn, yn) + offsets[yn] - noise.log_density(xn, yn);
        correct += ln < 0.0;
        total += 2;
    }
    return static_cast<double>(correct) / static_cast<double>(total);
}

// ---------------------------------------------------------------------------
// TCL baseline: surrogate segment classification
// ---------------------------------------------------------------------------

enum class TclOptimizer : std::uint8_t { adam = 0, momentum_sgd = 1 };

struct TclConfig {
    std::size_t batch_size = 63;
    std::size_t iterations = 5000;
    double lr = 1e-3;
    std::uint64_t seed = 0;
    TclOptimizer optimizer = TclOptimizer::adam;
    double sgd_momentum = 0.9;
    double sgd_lr = 0.01;
    double sgd_decay = 0.1;
};

struct TclResult {
    MlpNet feature_net;     // s(x) = |feature_net(x)|
    Matrix classifier_w;    // M x d_feat
    Vector classifier_b;    // M
    Vector accuracy_history;
};

/// Features used for identifiability evaluation: absolute value of the last
/// hidden layer, as in the original method.
inline Vector tcl_feature(const MlpNet& net, const Vector& x) {
    Vector f = forward(net, x).output;
    for (double& v : f) v = std::abs(v);
    return f;
}

inline Matrix tcl_features(const MlpNet& net, const Matrix& x) {
    Matrix out(x.rows(), net.output_dim());
    for (std::size_t i = 0; i < x.rows(); ++i) out.set_row(i, tcl_feature(net, x.row(i)));
    return out;
}

/// Multinomial logistic regression of the segment index on |mlp(x)|,
/// minimized by Adam (or momentum SGD with exponential decay, per the
/// original recipe) on softmax cross-entropy.
inline TclResult train_tcl(const LabeledDataset& data, const MlpSpec& spec, const TclConfig& cfg) {
    data.validate();
    spec.validate();
    if (spec.input_dim() != data.dim())
        throw std::invalid_argument("train_tcl: feature net input width mismatch");

    Rng rng(cfg.seed);
    Rng init_rng = rng.split(1);
    MlpNet net = build_mlp(spec, init_rng);
    const std::size_t d_feat = net.output_dim();
    const std::size_t m = data.num_segments;

    TclResult out;
    out.classifier_w = Matrix(m, d_feat);
    out.classifier_b.assign(m, 0.0);
    out.accuracy_history.reserve(cfg.iterations);

    const std::size_t n_net = net.num_params();
    Vector params = flatten_params(net);
    params.resize(n_net + m * d_feat + m, 0.0);

    AdamState adam = AdamState::create(params.size(), cfg.lr);
    MomentumSgdState sgd = MomentumSgdState::create(params.size(), cfg.sgd_lr, cfg.iterations);
    sgd.momentum = cfg.sgd_momentum;
    sgd.decay = cfg.sgd_decay;

    for (std::size_t it = 0; it < cfg.iterations; ++it) {
        Vector grads(params.size(), 0.0);
        const double w = 1.0 / static_cast<double>(cfg.batch_size);
        std::size_t correct = 0;
        try {
            for (std::size_t b = 0; b < cfg.batch_size; ++b) {
                const std::size_t idx = rng.below(data.size());
                const Vector x = data.x.row(idx);
                const std::size_t label = data.y[idx];

                const ForwardTrace trace = forward(net, x);
                Vector s = trace.output;
                Vector sign(s.size());
                for (std::size_t i = 0; i < s.size(); ++i) {
                    sign[i] = s[i] >= 0.0 ? 1.0 : -1.0;
                    s[i] = std::abs(s[i]);
                }

                // softmax cross-entropy
                Vector logits = out.classifier_b;
                for (std::size_t c = 0; c < m; ++c) logits[c] += dot(out.classifier_w.row(c), s);
                const double zmax = *std::max_element(logits.begin(), logits.end());
                double zsum = 0.0;
                for (double& z : logits) zsum += std::exp(z - zmax);
                std::size_t argmax = 0;
                for (std::size_t c = 0; c < m; ++c)
                    if (logits[c] > logits[argmax]) argmax = c;
                correct += argmax == label;

                Vector dlogits(m);
                for (std::size_t c = 0; c < m; ++c)
                    dlogits[c] = std::exp(logits[c] - zmax) / zsum - (c == label ? 1.0 : 0.0);

                // classifier grads
                for (std::size_t c = 0; c < m; ++c) {
                    const std::size_t row_off = n_net + c * d_feat;
                    for (std::size_t j = 0; j < d_feat; ++j)
                        grads[row_off + j] += w * dlogits[c] * s[j];
                    grads[n_net + m * d_feat + c] += w * dlogits[c];
                }

                // feature net grads through the absolute value
                Vector ds(d_feat, 0.0);
                for (std::size_t c = 0; c < m; ++c)
                    axpy(dlogits[c], out.classifier_w.row(c), ds);
                const Vector df = hadamard(sign, ds);
                const Vector net_flat = flatten_grads(param_grad_scalar(net, trace, df));
                for (std::size_t i = 0; i < n_net; ++i) grads[i] += w * net_flat[i];
            }
            if (cfg.optimizer == TclOptimizer::adam)
                adam_step(adam, params, grads);
            else
                momentum_sgd_step(sgd, params, grads);
        } catch (const NumericalError& e) {
            throw NumericalError("train_tcl: iteration " + std::to_string(it) + ": " + e.what());
        }

        set_params(net, Vector(params.begin(), params.begin() + n_net));
        for (std::size_t c = 0; c < m; ++c)
            for (std::size_t j = 0; j < d_feat; ++j)
                out.classifier_w(c, j) = params[n_net + c * d_feat + j];
        std::copy(params.begin() + n_net + m * d_feat, params.end(), out.classifier_b.begin());
        out.accuracy_history.push_back(static_cast<double>(correct) /
                                       static_cast<double>(cfg.batch_size));
    }
    out.feature_net = std::move(net);
    return out;
}

// ---------------------------------------------------------------------------
// Transfer: fit a fresh condition vector for an unseen segment, f frozen
// ---------------------------------------------------------------------------

struct FitGResult {
    Vector g_vector;
    double cdsm_score = 0.0;   // seeded eval score of the returned vector
    double init_score = 0.0;   // same eval of the initialization
};

/// Optimizes one condition vector by CDSM with f frozen. The returned vector
/// is whichever of {initialization, final iterate} evaluates better under the
/// seeded score, so the result never regresses below its starting point.
/// Both evaluations share one noise stream: eval_seed when given, otherwise a
/// stream derived from the training seed.
inline FitGResult fit_g_new_segment(const IceBeemModel& model, const Matrix& x_new,
                                    const CdsmConfig& cfg, const Vector* g_init = nullptr,
                                    const std::uint64_t* eval_seed_in = nullptr) {
    if (x_new.rows() == 0) throw std::invalid_argument("fit_g_new_segment: empty data");

    IceBeemModel single = model;
    Vector init(model.feature_dim(), 1.0);
    if (g_init) {
        if (g_init->size() != model.feature_dim())
            throw std::invalid_argument("fit_g_new_segment: init length mismatch");
        init = *g_init;
    }
    Matrix table(1, model.feature_dim());
    table.set_row(0, init);
    single.g = ConditionEmbedding::make_lookup(std::move(table));

    LabeledDataset ds;
    ds.x = x_new;
    ds.y.assign(x_new.rows(), 0);
    ds.num_segments = 1;

    CdsmConfig fit_cfg = cfg;
    fit_cfg.freeze_f = true;
    fit_cfg.freeze_g = false;

    const std::uint64_t eval_seed =
        eval_seed_in ? *eval_seed_in : Rng(cfg.seed).split(9001).seed();
    FitGResult out;
    out.init_score = cdsm_eval_score(single, ds, cfg.sigma, eval_seed);

    const TrainResult trained = train_cdsm(single, ds, fit_cfg);
    const double final_score = cdsm_eval_score(trained.model, ds, cfg.sigma, eval_seed);

    if (final_score <= out.init_score) {
        out.g_vector = trained.model.g.lookup.row(0);
        out.cdsm_score = final_score;
    } else {
        out.g_vector = init;
        out.cdsm_score = out.init_score;
    }
    return out;
}

}  // namespace icebeem
