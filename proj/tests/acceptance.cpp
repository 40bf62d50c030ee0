// Acceptance suite: one self-contained check per criterion, each printing a
// [PASS]/[FAIL] line. Runs everything by default; pass criterion numbers as
// arguments to run a subset. Exits non-zero if any selected criterion fails.

#include <algorithm>
#include <chrono>
#include <cstdio>
#include <functional>
#include <numeric>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "icebeem/experiment.hpp"

using namespace icebeem;

namespace {

// ---------------------------------------------------------------------------
// helpers
// ---------------------------------------------------------------------------

Matrix random_gaussian(std::size_t rows, std::size_t cols, Rng& rng, double scale = 1.0) {
    Matrix m(rows, cols);
    for (std::size_t i = 0; i < m.size(); ++i) m.data()[i] = scale * rng.normal();
    return m;
}

Matrix random_orthogonal(std::size_t d, Rng& rng) {
    Matrix a = random_gaussian(d, d, rng);
    for (std::size_t j = 0; j < d; ++j) {
        for (std::size_t k = 0; k < j; ++k) {
            double proj = 0.0;
            for (std::size_t i = 0; i < d; ++i) proj += a(i, j) * a(i, k);
            for (std::size_t i = 0; i < d; ++i) a(i, j) -= proj * a(i, k);
        }
        double nrm = 0.0;
        for (std::size_t i = 0; i < d; ++i) nrm += a(i, j) * a(i, j);
        nrm = std::sqrt(nrm);
        for (std::size_t i = 0; i < d; ++i) a(i, j) /= nrm;
    }
    return a;
}

IceBeemModel sample_model(const std::vector<std::size_t>& dims, ModelMode mode,
                          std::size_t segments, std::uint64_t seed) {
    MlpSpec spec;
    spec.dims = dims;
    spec.allow_non_monotone = true;
    spec.seed = seed;
    if (mode == ModelMode::positive) spec.output_activation = OutputActivation::relu;
    Rng rng(seed);
    IceBeemModel model;
    model.f = build_mlp(spec, rng);
    const std::size_t dg = (mode == ModelMode::augmented ? 2 : 1) * dims.back();
    model.g = ConditionEmbedding::make_lookup(random_gaussian(segments, dg, rng));
    model.mode = mode;
    model.validate();
    return model;
}

double min_preactivation_margin(const MlpNet& net, const Vector& x) {
    const ForwardTrace t = forward(net, x);
    double margin = std::numeric_limits<double>::infinity();
    for (const Vector& pre : t.pre_activations)
        for (double p : pre) margin = std::min(margin, std::abs(p));
    return margin;
}

std::vector<std::size_t> shuffled(std::size_t n, std::uint64_t seed) {
    return icebeem::detail::shuffled_indices(n, seed);
}

// exhaustive assignment oracle
Assignment brute_force_assignment(const Matrix& cost, bool maximize) {
    const std::size_t n = cost.rows();
    std::vector<std::size_t> perm(n);
    std::iota(perm.begin(), perm.end(), 0);
    Assignment best;
    best.total = maximize ? -1e300 : 1e300;
    do {
        double total = 0.0;
        for (std::size_t i = 0; i < n; ++i) total += cost(i, perm[i]);
        if (maximize ? total > best.total : total < best.total) {
            best.total = total;
            best.permutation = perm;
        }
    } while (std::next_permutation(perm.begin(), perm.end()));
    return best;
}

// ---------------------------------------------------------------------------
// criteria
// ---------------------------------------------------------------------------

// 1: CDSM parameter gradients match central finite differences on 50 random
//    instances across all modes, rel err < 1e-5, frozen noise.
bool criterion_gradients(std::string& detail) {
    const double sigma = 0.1;
    double worst = 0.0;
    int instance = 0;
    const ModelMode modes[] = {ModelMode::plain, ModelMode::positive, ModelMode::augmented};
    for (int k = 0; k < 50; ++k) {
        const ModelMode mode = modes[k % 3];
        IceBeemModel model;
        LabeledDataset batch;
        std::uint64_t noise_seed = 0;

        // keep every noisy point clear of activation boundaries so the FD
        // probes stay inside one linear region
        bool found = false;
        for (std::uint64_t attempt = 0; attempt < 100 && !found; ++attempt) {
            const std::uint64_t s = 10000 + 100 * k + attempt;
            model = sample_model({4, 7, 3}, mode, 3, s);
            Rng drng(s + 1);
            batch.x = random_gaussian(2, 4, drng);
            batch.y = {drng.below(3), drng.below(3)};
            batch.num_segments = 3;
            noise_seed = s + 2;
            Rng nrng(noise_seed);
            double margin = std::numeric_limits<double>::infinity();
            for (std::size_t i = 0; i < batch.x.rows(); ++i) {
                Vector noisy = batch.x.row(i);
                for (double& v : noisy) v += sigma * nrng.normal();
                margin = std::min(margin, min_preactivation_margin(model.f, noisy));
            }
            found = margin > 2e-3;
        }
        if (!found) {
            detail = "could not build a boundary-clear instance";
            return false;
        }
        ++instance;

        auto eval_loss = [&](const IceBeemModel& mm) {
            Rng noise(noise_seed);
            return cdsm_loss_and_grads(mm, batch.x, batch.y, sigma, noise).loss;
        };
        Rng noise(noise_seed);
        const BatchGrads analytic = cdsm_loss_and_grads(model, batch.x, batch.y, sigma, noise);

        Vector flat = model_params(model);
        const double h = 1e-4;  // losses are piecewise polynomial: no truncation,
                                // and the larger step keeps cancellation noise low
        for (std::size_t i = 0; i < flat.size(); ++i) {
            const double orig = flat[i];
            flat[i] = orig + h;
            set_model_params(model, flat);
            const double up = eval_loss(model);
            flat[i] = orig - h;
            set_model_params(model, flat);
            const double down = eval_loss(model);
            flat[i] = orig;
            const double fd = (up - down) / (2.0 * h);
            const double err =
                std::abs(analytic.flat[i] - fd) / std::max(std::abs(analytic.flat[i]), 1e-8);
            worst = std::max(worst, err);
        }
        set_model_params(model, flat);
    }
    std::ostringstream os;
    os << instance << " instances, worst rel err " << worst;
    detail = os.str();
    return worst < 1e-5;
}

// 2: score(x,y) = -FD(energy), rel err < 1e-6 on 100 points per mode.
bool criterion_score_identity(std::string& detail) {
    double worst = 0.0;
    for (ModelMode mode : {ModelMode::plain, ModelMode::positive, ModelMode::augmented}) {
        const IceBeemModel model =
            sample_model({5, 8, 8, 4}, mode, 6, 900 + static_cast<int>(mode));
        Rng rng(901 + static_cast<int>(mode));
        int tested = 0;
        while (tested < 100) {
            const Vector x = rng.normal_vector(5);
            if (min_preactivation_margin(model.f, x) < 1e-3) continue;
            ++tested;
            const std::size_t y = rng.below(6);
            const Vector s = score(model, x, y);
            const double h = 1e-5;  // energy is piecewise polynomial in x
            for (std::size_t i = 0; i < x.size(); ++i) {
                Vector xp = x, xm = x;
                xp[i] += h;
                xm[i] -= h;
                const double fd = -(energy(model, xp, y) - energy(model, xm, y)) / (2.0 * h);
                worst = std::max(worst, std::abs(s[i] - fd) / std::max(std::abs(fd), 1e-8));
            }
        }
    }
    std::ostringstream os;
    os << "300 points, worst rel err " << worst;
    detail = os.str();
    return worst < 1e-6;
}

// 3: assignment equals exhaustive search on 1000 random instances, n = 2..6.
bool criterion_assignment(std::string& detail) {
    Rng rng(7777);
    double worst_gap = 0.0;
    for (int trial = 0; trial < 1000; ++trial) {
        const std::size_t n = 2 + rng.below(5);
        const bool maximize = trial % 2 == 0;
        const Matrix cost = random_gaussian(n, n, rng);
        const Assignment got = linear_sum_assignment(cost, maximize);
        const Assignment want = brute_force_assignment(cost, maximize);
        std::vector<char> seen(n, 0);
        for (std::size_t i = 0; i < n; ++i) {
            if (got.permutation[i] >= n || seen[got.permutation[i]]) {
                detail = "invalid permutation";
                return false;
            }
            seen[got.permutation[i]] = 1;
        }
        worst_gap = std::max(worst_gap, std::abs(got.total - want.total));
    }
    std::ostringstream os;
    os << "1000 trials, worst optimality gap " << worst_gap;
    detail = os.str();
    return worst_gap < 1e-9;
}

// 4: MCC invariance under permutation/scale/offset, and its null level.
bool criterion_mcc(std::string& detail) {
    Rng rng(4242);
    double worst = 0.0;
    for (int trial = 0; trial < 100; ++trial) {
        const std::size_t d = 5;
        const Matrix z = random_gaussian(1000, d, rng);
        std::vector<std::size_t> perm(d);
        std::iota(perm.begin(), perm.end(), 0);
        for (std::size_t i = d; i-- > 1;) std::swap(perm[i], perm[rng.below(i + 1)]);
        Matrix w(z.rows(), d);
        for (std::size_t j = 0; j < d; ++j) {
            const double scale = (rng.uniform01() < 0.5 ? -1.0 : 1.0) * rng.uniform(0.2, 3.0);
            const double offset = rng.uniform(-5.0, 5.0);
            for (std::size_t i = 0; i < z.rows(); ++i)
                w(i, j) = scale * z(i, perm[j]) + offset;
        }
        worst = std::max(worst, std::abs(mcc_strong(z, w).mcc - 1.0));
    }

    const Matrix a = random_gaussian(10000, 5, rng);
    const Matrix b = random_gaussian(10000, 5, rng);
    const double null_level = mcc_strong(a, b).mcc;

    std::ostringstream os;
    os << "worst |mcc-1| " << worst << ", null " << null_level;
    detail = os.str();
    return worst < 1e-10 && null_level < 0.08;
}

// 5: IMCA latent covariance matches the analytic Sigma(y) entrywise within
//    0.03 at n = 1e5; mixing round trip under 1e-9.
bool criterion_generator(std::string& detail) {
    Rng rng(551);
    const std::size_t d = 5, segments = 2, n = 100000;
    const Matrix sigma0 = random_spd(d, 0.5, 2.0, rng);
    Rng lrng(552);
    const Matrix lambdas = generate_modulations(segments, d, 0.5, 3.0, lrng);
    std::vector<std::size_t> y(n * segments);
    for (std::size_t i = 0; i < y.size(); ++i) y[i] = i % segments;
    Rng zrng(553);
    const Matrix z = sample_imca_latents(sigma0, lambdas, y, zrng);

    double worst_cov = 0.0;
    for (std::size_t seg = 0; seg < segments; ++seg) {
        const Matrix expect = segment_covariance(sigma0, lambdas.row(seg));
        Matrix emp(d, d);
        std::size_t count = 0;
        for (std::size_t i = seg; i < y.size(); i += segments) {
            ++count;
            for (std::size_t a = 0; a < d; ++a)
                for (std::size_t b = 0; b < d; ++b) emp(a, b) += z(i, a) * z(i, b);
        }
        for (std::size_t k = 0; k < emp.size(); ++k) emp.data()[k] /= count;
        for (std::size_t k = 0; k < emp.size(); ++k)
            worst_cov = std::max(worst_cov, std::abs(emp.data()[k] - expect.data()[k]));
    }

    Rng mrng(554);
    const MlpNet mixing = build_mixing(d, 4, mrng);
    Rng prng(555);
    double worst_rt = 0.0;
    for (int i = 0; i < 1000; ++i) {
        const Vector zz = prng.normal_vector(d);
        const Vector back = invert_mixing(mixing, forward(mixing, zz).output);
        for (std::size_t j = 0; j < d; ++j) worst_rt = std::max(worst_rt, std::abs(back[j] - zz[j]));
    }

    std::ostringstream os;
    os << "worst covariance gap " << worst_cov << ", worst round trip " << worst_rt;
    detail = os.str();
    return worst_cov < 0.03 && worst_rt < 1e-9;
}

// 6: full-rank input Jacobian (sigma_min > 1e-8) at 100 points over 20 seeds
//    for widths (5,32,32,5) and (5,64,5).
bool criterion_rank_probe(std::string& detail) {
    double min_sigma = std::numeric_limits<double>::infinity();
    std::size_t min_rank = 5;
    for (const std::vector<std::size_t>& dims :
         {std::vector<std::size_t>{5, 32, 32, 5}, std::vector<std::size_t>{5, 64, 5}}) {
        for (std::uint64_t seed = 0; seed < 20; ++seed) {
            MlpSpec spec;
            spec.dims = dims;
            spec.allow_non_monotone = true;
            Rng rng(seed * 13 + 1);
            const MlpNet net = build_mlp(spec, rng);
            Rng prng(seed * 17 + 3);
            const JacobianProbeReport r = jacobian_rank_probe(net, 100, prng);
            min_sigma = std::min(min_sigma, r.min_sigma);
            min_rank = std::min(min_rank, r.min_rank);
        }
    }
    std::ostringstream os;
    os << "min rank " << min_rank << ", min sigma " << min_sigma;
    detail = os.str();
    return min_rank == 5 && min_sigma > 1e-8;
}

// 7: CDSM-trained linear-f (augmented) model on N(0, I_5) reaches RMS score
//    error < 0.05 against the analytic Gaussian score; sigma 0.01, lr 1e-3,
//    at most 5000 iterations.
bool criterion_quadratic_toy(std::string& detail) {
    const std::size_t d = 5;
    Rng mrng(41);
    IceBeemModel model;
    model.f.spec.dims = {d, d};
    model.f.weights = {random_orthogonal(d, mrng)};
    model.f.biases = {Vector(d, 0.0)};
    Matrix g0(1, 2 * d);
    for (std::size_t i = 0; i < d; ++i) g0(0, 2 * i + 1) = 0.25;
    model.g = ConditionEmbedding::make_lookup(std::move(g0));
    model.mode = ModelMode::augmented;

    LabeledDataset data;
    data.num_segments = 1;
    Rng drng(43);
    data.x = random_gaussian(100000, d, drng);
    data.y.assign(100000, 0);

    CdsmConfig cfg;
    cfg.sigma = 0.01;
    cfg.lr = 1e-3;
    cfg.iterations = 2500;
    cfg.batch_size = 131072;
    cfg.num_threads = 2;
    cfg.seed = 47;
    const TrainResult r = train_cdsm(model, data, cfg);

    Rng trng(49);
    double sq = 0.0;
    const int nt = 500;
    for (int i = 0; i < nt; ++i) {
        const Vector x = trng.normal_vector(d);
        const Vector s = score(r.model, x, 0);
        const Vector e = s + x;
        sq += dot(e, e);
    }
    const double rms = std::sqrt(sq / (nt * d));
    std::ostringstream os;
    os << "rms score error " << rms << " after " << cfg.iterations << " iterations";
    detail = os.str();
    return rms < 0.05;
}

// shared simulation recipe for criteria 8/9/11 (see configs/)
ExperimentConfig simulation_config(LatentModel mode, std::size_t mixing_layers) {
    ExperimentConfig cfg;
    cfg.experiment = ExperimentKind::simulation;
    cfg.data.d = 5;
    cfg.data.segments = 8;
    cfg.data.n_per_segment = 2000;
    cfg.data.mixing_layers = mixing_layers;
    cfg.data.mode = mode;
    cfg.data.seed = 100;
    cfg.model.d_z = 5;
    cfg.model.mode = ModelMode::augmented;
    cfg.training.objective = "cdsm";
    cfg.training.cdsm.sigma = 0.05;
    cfg.training.cdsm.iterations = 150000;
    cfg.training.cdsm.batch_size = 1024;
    cfg.training.cdsm.lr = 1e-3;
    cfg.training.cdsm.seed = 1;
    cfg.training.cdsm.num_threads = 1;
    cfg.training.tcl.iterations = 5000;
    cfg.eval.n_seeds = 3;
    cfg.eval.eval_fraction = 0.25;
    cfg.eval.runner_threads = 2;
    return cfg;
}

// 8: on IMCA data (L=4) the seed-averaged ICE-BeeM weak MCC beats TCL's, and
//    on the L=2 nonlinear-ICA config ICE-BeeM reaches weak MCC >= 0.75.
bool criterion_simulation(std::string& detail) {
    const ExperimentReport imca = run_simulation(simulation_config(LatentModel::imca, 4));
    const double ice_imca = imca.metrics.at("icebeem_mcc");
    const double tcl_imca = imca.metrics.at("tcl_mcc");

    const ExperimentReport ica = run_simulation(simulation_config(LatentModel::ica, 2));
    const double ice_ica = ica.metrics.at("icebeem_mcc");

    std::ostringstream os;
    os << "imca: icebeem " << ice_imca << " vs tcl " << tcl_imca << "; ica L=2 icebeem "
       << ice_ica;
    detail = os.str();
    return ice_imca > tcl_imca && ice_ica >= 0.75;
}

// 9: conditional mean pairwise strong MCC exceeds the unconditional
//    baseline's by at least 0.05, 5 seeds.
bool criterion_consistency(std::string& detail) {
    ExperimentConfig cfg = simulation_config(LatentModel::ica, 2);
    cfg.experiment = ExperimentKind::consistency;
    cfg.eval.n_seeds = 5;
    cfg.training.cdsm.iterations = 40000;
    const ExperimentReport report = run_consistency(cfg);
    const double cond = report.metrics.at("conditional_strong_mcc");
    const double uncond = report.metrics.at("unconditional_strong_mcc");
    const double cond_weak = report.metrics.at("conditional_weak_mcc");
    const double uncond_weak = report.metrics.at("unconditional_weak_mcc");
    std::ostringstream os;
    os << "strong: conditional " << cond << " vs unconditional " << uncond
       << "; weak: " << cond_weak << " vs " << uncond_weak;
    detail = os.str();
    return cond >= uncond + 0.05;
}

// 10: transfer orderings. Fitting g from the all-ones start never ends above
//     it, beats the fixed-ones arm, and self-transfer lands within 10% of a
//     freshly trained model.
bool criterion_transfer(std::string& detail) {
    ExperimentConfig cfg = simulation_config(LatentModel::ica, 2);
    cfg.experiment = ExperimentKind::transfer;
    cfg.eval.held_out_segments = {7};
    cfg.training.cdsm.iterations = 40000;
    const ExperimentReport report = run_transfer(cfg);
    const double f_g = report.metrics.at("transfer_f_gtheta");
    const double f_1 = report.metrics.at("transfer_f_ones");
    const double init = report.metrics.at("transfer_f_gtheta_init");
    const double fresh = report.metrics.at("transfer_ftheta_gtheta");

    // self-transfer: refit g for a segment the model already trained on
    ExperimentConfig self_cfg = cfg;
    self_cfg.eval.held_out_segments = {0};
    auto [data, truth] = generate_dataset(self_cfg.data);
    const LabeledDataset seg0 = data.restricted_to({0});
    ExperimentConfig full_cfg = self_cfg;
    const IceBeemModel full =
        icebeem::detail::train_run(full_cfg, data, icebeem::detail::run_seed(full_cfg, 0), false);
    CdsmConfig fit_cfg = self_cfg.training.cdsm;
    fit_cfg.seed = 12345;
    const std::uint64_t eval_seed = 999;
    const FitGResult self_fit = fit_g_new_segment(full, seg0.x, fit_cfg, nullptr, &eval_seed);

    ExperimentConfig seg_cfg = self_cfg;
    seg_cfg.data.segments = 1;
    const IceBeemModel fresh_seg0 =
        icebeem::detail::train_run(seg_cfg, seg0, icebeem::detail::run_seed(seg_cfg, 1), false);
    const double fresh_score = cdsm_eval_score(fresh_seg0, seg0, fit_cfg.sigma, eval_seed);
    const double self_gap = std::abs(self_fit.cdsm_score - fresh_score) /
                            std::max(std::abs(fresh_score), 1e-12);

    std::ostringstream os;
    os << "f.g " << f_g << " < f.1 " << f_1 << "; descent " << f_g << " <= " << init
       << "; fresh " << fresh << "; self-transfer gap " << self_gap;
    detail = os.str();
    return f_g < f_1 && f_g <= init + 1e-12 && self_gap <= 0.10;
}

// 11: conditional features classify held-out segments at least as well as
//     unconditional ones, averaged over seeds.
bool criterion_semisup(std::string& detail) {
    ExperimentConfig cfg = simulation_config(LatentModel::imca, 2);
    cfg.experiment = ExperimentKind::semisup;
    cfg.eval.held_out_segments = {6, 7};
    cfg.eval.n_seeds = 3;
    cfg.training.cdsm.iterations = 40000;
    const ExperimentReport report = run_semisup(cfg);
    const double cond = report.metrics.at("semisup_conditional_acc");
    const double uncond = report.metrics.at("semisup_unconditional_acc");
    std::ostringstream os;
    os << "conditional " << cond << " vs unconditional " << uncond << " (raw "
       << report.metrics.at("semisup_raw_acc") << ")";
    detail = os.str();
    return cond >= uncond;
}

// 12: rerunning every experiment kind from its echoed config reproduces the
//     metrics bit for bit.
bool criterion_determinism(std::string& detail) {
    ExperimentConfig base;
    base.data.d = 3;
    base.data.segments = 4;
    base.data.n_per_segment = 150;
    base.data.mixing_layers = 1;
    base.data.mode = LatentModel::imca;
    base.data.seed = 21;
    base.model.d_z = 3;
    base.model.f_hidden = {8};
    base.training.cdsm.iterations = 150;
    base.training.cdsm.batch_size = 32;
    base.training.cdsm.seed = 5;
    base.training.tcl.iterations = 150;
    base.training.tcl.batch_size = 32;
    base.eval.n_seeds = 2;
    base.eval.runner_threads = 2;

    int checked = 0;
    for (ExperimentKind kind : {ExperimentKind::simulation, ExperimentKind::consistency,
                                ExperimentKind::transfer, ExperimentKind::semisup}) {
        ExperimentConfig cfg = base;
        cfg.experiment = kind;
        if (kind == ExperimentKind::transfer) cfg.eval.held_out_segments = {3};
        if (kind == ExperimentKind::semisup) cfg.eval.held_out_segments = {2, 3};
        const ExperimentReport first = run_experiment(cfg);
        const ExperimentConfig echoed = experiment_config_from_json(first.config);
        const ExperimentReport second = run_experiment(echoed);
        if (first.metrics != second.metrics) {
            detail = std::string("metrics differ for ") + to_string(kind);
            return false;
        }
        ++checked;
    }
    std::ostringstream os;
    os << checked << " experiment kinds reproduced bit for bit";
    detail = os.str();
    return true;
}

struct Criterion {
    int number;
    const char* name;
    std::function<bool(std::string&)> run;
};

}  // namespace

int main(int argc, char** argv) {
    const std::vector<Criterion> criteria = {
        {1, "CDSM gradient correctness vs finite differences", criterion_gradients},
        {2, "score equals minus the energy gradient", criterion_score_identity},
        {3, "assignment matches exhaustive search", criterion_assignment},
        {4, "MCC invariance and null level", criterion_mcc},
        {5, "generator covariance fidelity and mixing round trip", criterion_generator},
        {6, "full-rank Jacobian probe across seeds", criterion_rank_probe},
        {7, "quadratic-toy score recovery", criterion_quadratic_toy},
        {8, "simulation ordering and ICA recovery level", criterion_simulation},
        {9, "consistency ordering, conditional vs unconditional", criterion_consistency},
        {10, "transfer orderings and self-transfer consistency", criterion_transfer},
        {11, "semi-supervised accuracy ordering", criterion_semisup},
        {12, "experiment determinism from echoed configs", criterion_determinism},
    };

    std::set<int> selected;
    for (int i = 1; i < argc; ++i) selected.insert(std::stoi(argv[i]));

    int failures = 0;
    for (const Criterion& c : criteria) {
        if (!selected.empty() && !selected.count(c.number)) continue;
        const auto t0 = std::chrono::steady_clock::now();
        std::string detail;
        bool ok = false;
        try {
            ok = c.run(detail);
        } catch (const std::exception& e) {
            detail = std::string("exception: ") + e.what();
        }
        const double secs =
            std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
        std::printf("[%s] criterion %2d: %s (%s; %.1f s)\n", ok ? "PASS" : "FAIL", c.number,
                    c.name, detail.c_str(), secs);
        std::fflush(stdout);
        failures += !ok;
    }
    if (failures) std::printf("%d criterion(s) failed\n", failures);
    return failures == 0 ? 0 : 1;
}
