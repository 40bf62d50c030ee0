#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "icebeem/dataset.hpp"
#include "icebeem/linalg.hpp"
#include "icebeem/mlp.hpp"
#include "icebeem/rng.hpp"
#include "icebeem/stats.hpp"

namespace icebeem {

enum class LatentModel : std::uint8_t { ica = 0, imca = 1 };

inline const char* to_string(LatentModel m) { return m == LatentModel::ica ? "ica" : "imca"; }

inline LatentModel latent_model_from_string(const std::string& s) {
    if (s == "ica") return LatentModel::ica;
    if (s == "imca") return LatentModel::imca;
    throw std::invalid_argument("unknown latent model: " + s);
}

struct ImcaConfig {
    std::size_t d = 5;               // latent = observed dimension
    std::size_t segments = 8;        // M
    std::size_t n_per_segment = 2000;
    std::size_t mixing_layers = 2;   // L
    LatentModel mode = LatentModel::ica;
    double lambda_lo = 0.5;          // modulation range
    double lambda_hi = 3.0;
    double sigma0_eig_lo = 0.5;      // base-measure covariance spectrum (imca)
    double sigma0_eig_hi = 2.0;
    bool appendix_precision_form = false;  // Sigma(y)^-1 = Sigma0^-1 + diag(lambda)^-1
    std::uint64_t seed = 0;

    void validate() const {
        if (d < 2) throw std::invalid_argument("ImcaConfig: d must be >= 2");
        if (segments < 2) throw std::invalid_argument("ImcaConfig: need at least 2 segments");
        if (n_per_segment < 1) throw std::invalid_argument("ImcaConfig: empty segments");
        if (mixing_layers < 1) throw std::invalid_argument("ImcaConfig: need at least 1 layer");
        if (!(lambda_lo > 0.0 && lambda_lo < lambda_hi))
            throw std::invalid_argument("ImcaConfig: need 0 < lambda_lo < lambda_hi");
        if (!(sigma0_eig_lo > 0.0 && sigma0_eig_lo <= sigma0_eig_hi))
            throw std::invalid_argument("ImcaConfig: bad sigma0 eigenvalue range");
    }
};

/// Everything an oracle needs: true latents, modulation parameters, base
/// covariance, and the exact mixing network.
struct GroundTruth {
    Matrix z;                    // n x d true latents
    std::vector<std::size_t> y;  // n segment indices
    Matrix lambdas;              // M x d per-segment modulations
    Matrix sigma0;               // d x d base covariance; identity in ica mode
    bool factorial_base = true;  // true in ica mode
    MlpNet mixing;
};

/// Per-segment modulation strengths, i.i.d. uniform on [lo, hi); rows must
/// come out pairwise distinct.
inline Matrix generate_modulations(std::size_t segments, std::size_t d, double lo, double hi,
                                   Rng& rng) {
    if (lo > hi) throw std::invalid_argument("generate_modulations: bad range");
    Matrix lambdas(segments, d);
    for (std::size_t i = 0; i < lambdas.size(); ++i) lambdas.data()[i] = rng.uniform(lo, hi);
    for (std::size_t a = 0; a < segments; ++a)
        for (std::size_t b = a + 1; b < segments; ++b) {
            bool same = true;
            for (std::size_t j = 0; j < d && same; ++j) same = lambdas(a, j) == lambdas(b, j);
            if (same)
                throw std::invalid_argument("generate_modulations: segments " + std::to_string(a) +
                                            " and " + std::to_string(b) +
                                            " have identical modulations");
        }
    return lambdas;
}

/// Row i ~ N(0, diag(lambda(y_i))^-1): conditionally independent components
/// with segment-specific precisions.
inline Matrix sample_ica_latents(const Matrix& lambdas, const std::vector<std::size_t>& y,
                                 Rng& rng) {
    const std::size_t d = lambdas.cols();
    Matrix z(y.size(), d);
    for (std::size_t i = 0; i < y.size(); ++i) {
        if (y[i] >= lambdas.rows())
            throw std::invalid_argument("sample_ica_latents: segment out of range");
        for (std::size_t j = 0; j < d; ++j)
            z(i, j) = rng.normal() / std::sqrt(lambdas(y[i], j));
    }
    return z;
}

/// Random SPD matrix Q diag(e) Q^T with Q orthogonal (Gram-Schmidt of a
/// Gaussian draw) and eigenvalues uniform in [lo, hi].
inline Matrix random_spd(std::size_t d, double eig_lo, double eig_hi, Rng& rng) {
    if (!(eig_lo > 0.0 && eig_lo <= eig_hi)) throw std::invalid_argument("random_spd: bad range");
    Matrix q(d, d);
    for (std::size_t i = 0; i < q.size(); ++i) q.data()[i] = rng.normal();
    for (std::size_t j = 0; j < d; ++j) {  // orthonormalize columns
        for (std::size_t k = 0; k < j; ++k) {
            double proj = 0.0;
            for (std::size_t i = 0; i < d; ++i) proj += q(i, j) * q(i, k);
            for (std::size_t i = 0; i < d; ++i) q(i, j) -= proj * q(i, k);
        }
        double nrm = 0.0;
        for (std::size_t i = 0; i < d; ++i) nrm += q(i, j) * q(i, j);
        nrm = std::sqrt(nrm);
        if (nrm < 1e-12) throw NumericalError("random_spd: degenerate draw");
        for (std::size_t i = 0; i < d; ++i) q(i, j) /= nrm;
    }
    Vector eigs(d);
    for (double& e : eigs) e = rng.uniform(eig_lo, eig_hi);
    Matrix spd(d, d);
    for (std::size_t i = 0; i < d; ++i)
        for (std::size_t j = 0; j < d; ++j) {
            double acc = 0.0;
            for (std::size_t k = 0; k < d; ++k) acc += q(i, k) * eigs[k] * q(j, k);
            spd(i, j) = acc;
        }
    // exact symmetry
    for (std::size_t i = 0; i < d; ++i)
        for (std::size_t j = i + 1; j < d; ++j) spd(j, i) = spd(i, j);
    return spd;
}

/// Per-segment latent covariance. Main-text form (default):
/// Sigma(y) = (Sigma0^-1 + diag(lambda(y)))^-1. The appendix variant inverts
/// the diagonal term instead.
inline Matrix segment_covariance(const Matrix& sigma0, const Vector& lambda_row,
                                 bool appendix_precision_form = false) {
    const std::size_t d = sigma0.rows();
    // precision = Sigma0^-1 + diag(term)
    const Matrix l0 = cholesky(sigma0);
    Matrix precision(d, d);
    for (std::size_t j = 0; j < d; ++j) {  // Sigma0^-1 column by column
        Vector e(d, 0.0);
        e[j] = 1.0;
        const Vector col = solve_lower_t(l0, solve_lower(l0, e));
        for (std::size_t i = 0; i < d; ++i) precision(i, j) = col[i];
    }
    for (std::size_t i = 0; i < d; ++i)
        precision(i, i) += appendix_precision_form ? 1.0 / lambda_row[i] : lambda_row[i];
    // invert the precision
    const Matrix lp = cholesky(0.5 * (precision + transpose(precision)));
    Matrix cov(d, d);
    for (std::size_t j = 0; j < d; ++j) {
        Vector e(d, 0.0);
        e[j] = 1.0;
        const Vector col = solve_lower_t(lp, solve_lower(lp, e));
        for (std::size_t i = 0; i < d; ++i) cov(i, j) = col[i];
    }
    return 0.5 * (cov + transpose(cov));
}

/// Row i ~ N(0, Sigma(y_i)): latents share the non-diagonal base measure yet
/// are independently modulated per segment.
inline Matrix sample_imca_latents(const Matrix& sigma0, const Matrix& lambdas,
                                  const std::vector<std::size_t>& y, Rng& rng,
                                  bool appendix_precision_form = false) {
    const std::size_t d = sigma0.rows();
    std::vector<Matrix> factors(lambdas.rows());
    for (std::size_t s = 0; s < lambdas.rows(); ++s)
        factors[s] = cholesky(segment_covariance(sigma0, lambdas.row(s), appendix_precision_form));
    Matrix z(y.size(), d);
    Vector eps(d);
    for (std::size_t i = 0; i < y.size(); ++i) {
        if (y[i] >= lambdas.rows())
            throw std::invalid_argument("sample_imca_latents: segment out of range");
        const Matrix& l = factors[y[i]];
        for (std::size_t k = 0; k < d; ++k) eps[k] = rng.normal();
        for (std::size_t r = 0; r < d; ++r) {
            double acc = 0.0;
            for (std::size_t c = 0; c <= r; ++c) acc += l(r, c) * eps[c];
            z(i, r) = acc;
        }
    }
    return z;
}

/// Square LeakyReLU(0.1) MLP with all widths d, invertible weights, zero
/// biases.
inline MlpNet build_mixing(std::size_t d, std::size_t layers, Rng& rng) {
    if (layers < 1) throw std::invalid_argument("build_mixing: need at least 1 layer");
    MlpSpec spec;
    spec.dims.assign(layers + 1, d);
    spec.leaky_slope = 0.1;
    return build_mlp(spec, rng);
}

/// Exact inverse of a square full-rank LeakyReLU MLP: walk the layers
/// backwards, inverting the activation pointwise and solving each linear
/// system.
inline Vector invert_mixing(const MlpNet& net, const Vector& x) {
    if (net.input_dim() != net.output_dim())
        throw std::invalid_argument("invert_mixing: network not square");
    const double alpha = net.spec.leaky_slope;
    if (net.spec.output_activation != OutputActivation::none)
        throw std::invalid_argument("invert_mixing: output activation is not invertible");

    Vector cur = x;
    for (std::size_t l = net.num_layers(); l-- > 0;) {
        if (l + 1 < net.num_layers()) {
            // undo the hidden LeakyReLU
            for (double& v : cur) v = v >= 0.0 ? v : v / alpha;
        }
        cur = solve_lu(net.weights[l], cur - net.biases[l]);
    }
    return cur;
}

/// Synthetic nonlinear ICA / IMCA dataset plus full ground truth, a pure
/// function of the config. IMCA mode redraws Sigma0 until the base measure
/// visibly couples the latents (max per-segment off-diagonal correlation at
/// least 0.15).
inline std::pair<LabeledDataset, GroundTruth> generate_dataset(const ImcaConfig& cfg) {
    cfg.validate();
    Rng root(cfg.seed);
    Rng lambda_rng = root.split(0);
    Rng sigma_rng = root.split(1);
    Rng latent_rng = root.split(2);
    Rng mixing_rng = root.split(3);

    const std::size_t n = cfg.segments * cfg.n_per_segment;

    GroundTruth truth;
    truth.lambdas = generate_modulations(cfg.segments, cfg.d, cfg.lambda_lo, cfg.lambda_hi,
                                         lambda_rng);
    truth.y.resize(n);
    for (std::size_t s = 0; s < cfg.segments; ++s)
        for (std::size_t i = 0; i < cfg.n_per_segment; ++i) truth.y[s * cfg.n_per_segment + i] = s;

    if (cfg.mode == LatentModel::ica) {
        truth.sigma0 = Matrix::identity(cfg.d);
        truth.factorial_base = true;
        truth.z = sample_ica_latents(truth.lambdas, truth.y, latent_rng);
    } else {
        truth.factorial_base = false;
        // reject base measures that barely couple the components
        for (int attempt = 0;; ++attempt) {
            if (attempt >= 200)
                throw NumericalError("generate_dataset: no suitable Sigma0 in 200 draws");
            truth.sigma0 = random_spd(cfg.d, cfg.sigma0_eig_lo, cfg.sigma0_eig_hi, sigma_rng);
            double max_offdiag_corr = 0.0;
            for (std::size_t s = 0; s < cfg.segments; ++s) {
                const Matrix cov = segment_covariance(truth.sigma0, truth.lambdas.row(s),
                                                      cfg.appendix_precision_form);
                for (std::size_t i = 0; i < cfg.d; ++i)
                    for (std::size_t j = i + 1; j < cfg.d; ++j)
                        max_offdiag_corr =
                            std::max(max_offdiag_corr,
                                     std::abs(cov(i, j)) / std::sqrt(cov(i, i) * cov(j, j)));
            }
            if (max_offdiag_corr >= 0.15) break;
        }
        truth.z = sample_imca_latents(truth.sigma0, truth.lambdas, truth.y, latent_rng,
                                      cfg.appendix_precision_form);
    }

    truth.mixing = build_mixing(cfg.d, cfg.mixing_layers, mixing_rng);

    LabeledDataset data;
    data.num_segments = cfg.segments;
    data.y = truth.y;
    data.x = Matrix(n, cfg.d);
    for (std::size_t i = 0; i < n; ++i)
        data.x.set_row(i, forward(truth.mixing, truth.z.row(i)).output);
    return {std::move(data), std::move(truth)};
}

}  // namespace icebeem
