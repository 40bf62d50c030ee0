#pragma once

#include <atomic>
#include <chrono>
#include <map>
#include <string>
#include <vector>

#include <json.hpp>

#include "icebeem/datagen.hpp"
#include "icebeem/estimator.hpp"
#include "icebeem/io.hpp"
#include "icebeem/metrics.hpp"
#include "icebeem/serialize.hpp"

namespace icebeem {

using nlohmann::json;

enum class ExperimentKind : std::uint8_t { simulation, consistency, transfer, semisup };

inline const char* to_string(ExperimentKind k) {
    switch (k) {
        case ExperimentKind::simulation: return "simulation";
        case ExperimentKind::consistency: return "consistency";
        case ExperimentKind::transfer: return "transfer";
        case ExperimentKind::semisup: return "semisup";
    }
    return "?";
}

inline ExperimentKind experiment_kind_from_string(const std::string& s) {
    if (s == "simulation") return ExperimentKind::simulation;
    if (s == "consistency") return ExperimentKind::consistency;
    if (s == "transfer") return ExperimentKind::transfer;
    if (s == "semisup") return ExperimentKind::semisup;
    throw std::invalid_argument("unknown experiment kind: " + s);
}

struct ModelConfig {
    std::size_t d_z = 5;
    ModelMode mode = ModelMode::plain;
    std::vector<std::size_t> f_hidden;  // empty: one width-32 layer per mixing layer
    bool g_network = false;             // lookup table by default
};

struct TrainingConfig {
    std::string objective = "cdsm";  // or "cfce"
    CdsmConfig cdsm;
    CfceConfig cfce;
    TclConfig tcl;
};

struct EvalConfig {
    std::vector<MccMode> mcc_modes{MccMode::weak, MccMode::strong};
    std::size_t n_seeds = 3;
    std::vector<std::size_t> held_out_segments;
    double eval_fraction = 0.5;          // rows reserved for feature evaluation
    double probe_train_fraction = 0.15;  // semi-supervised classifier split
    std::vector<std::size_t> transfer_sample_sizes;  // optional sweep
    std::size_t runner_threads = 2;      // independent runs in flight
};

struct ExperimentConfig {
    ExperimentKind experiment = ExperimentKind::simulation;
    ImcaConfig data;
    ModelConfig model;
    TrainingConfig training;
    EvalConfig eval;
    std::string output_dir;  // empty: no files written

    void validate() const {
        data.validate();
        training.cdsm.validate();
        if (training.objective != "cdsm" && training.objective != "cfce")
            throw std::invalid_argument("ExperimentConfig: unknown objective " + training.objective);
        if (experiment == ExperimentKind::consistency && eval.n_seeds < 2)
            throw std::invalid_argument("ExperimentConfig: consistency needs n_seeds >= 2");
        if (experiment == ExperimentKind::transfer || experiment == ExperimentKind::semisup) {
            if (eval.held_out_segments.empty())
                throw std::invalid_argument("ExperimentConfig: need held_out_segments");
            for (std::size_t s : eval.held_out_segments)
                if (s >= data.segments)
                    throw std::invalid_argument("ExperimentConfig: held-out segment out of range");
        }
        if (experiment == ExperimentKind::semisup && eval.held_out_segments.size() < 2)
            throw std::invalid_argument("ExperimentConfig: semisup needs >= 2 held-out segments");
        if (!(eval.eval_fraction > 0.0 && eval.eval_fraction < 1.0))
            throw std::invalid_argument("ExperimentConfig: eval_fraction must be in (0,1)");
        if (eval.n_seeds < 1) throw std::invalid_argument("ExperimentConfig: n_seeds must be >= 1");
    }
};

// ---------------------------------------------------------------------------
// JSON round trip
// ---------------------------------------------------------------------------

inline json to_json(const ExperimentConfig& cfg) {
    json j;
    j["experiment"] = to_string(cfg.experiment);
    j["data"] = {{"d", cfg.data.d},
                 {"segments", cfg.data.segments},
                 {"n_per_segment", cfg.data.n_per_segment},
                 {"mixing_layers", cfg.data.mixing_layers},
                 {"mode", to_string(cfg.data.mode)},
                 {"lambda_lo", cfg.data.lambda_lo},
                 {"lambda_hi", cfg.data.lambda_hi},
                 {"sigma0_eig_lo", cfg.data.sigma0_eig_lo},
                 {"sigma0_eig_hi", cfg.data.sigma0_eig_hi},
                 {"appendix_precision_form", cfg.data.appendix_precision_form},
                 {"seed", cfg.data.seed}};
    j["model"] = {{"d_z", cfg.model.d_z},
                  {"mode", to_string(cfg.model.mode)},
                  {"f_hidden", cfg.model.f_hidden},
                  {"g_network", cfg.model.g_network}};
    j["training"] = {{"objective", cfg.training.objective},
                     {"sigma", cfg.training.cdsm.sigma},
                     {"batch_size", cfg.training.cdsm.batch_size},
                     {"iterations", cfg.training.cdsm.iterations},
                     {"lr", cfg.training.cdsm.lr},
                     {"seed", cfg.training.cdsm.seed},
                     {"num_threads", cfg.training.cdsm.num_threads},
                     {"cfce_lr", cfg.training.cfce.lr},
                     {"cfce_batch_size", cfg.training.cfce.batch_size},
                     {"cfce_iterations", cfg.training.cfce.iterations},
                     {"tcl_lr", cfg.training.tcl.lr},
                     {"tcl_batch_size", cfg.training.tcl.batch_size},
                     {"tcl_iterations", cfg.training.tcl.iterations},
                     {"tcl_optimizer",
                      cfg.training.tcl.optimizer == TclOptimizer::adam ? "adam" : "momentum_sgd"},
                     {"tcl_sgd_lr", cfg.training.tcl.sgd_lr},
                     {"tcl_sgd_momentum", cfg.training.tcl.sgd_momentum},
                     {"tcl_sgd_decay", cfg.training.tcl.sgd_decay}};
    std::vector<std::string> modes;
    for (MccMode m : cfg.eval.mcc_modes) modes.push_back(to_string(m));
    j["eval"] = {{"mcc_modes", modes},
                 {"n_seeds", cfg.eval.n_seeds},
                 {"held_out_segments", cfg.eval.held_out_segments},
                 {"eval_fraction", cfg.eval.eval_fraction},
                 {"probe_train_fraction", cfg.eval.probe_train_fraction},
                 {"transfer_sample_sizes", cfg.eval.transfer_sample_sizes},
                 {"runner_threads", cfg.eval.runner_threads}};
    j["output_dir"] = cfg.output_dir;
    return j;
}

inline ExperimentConfig experiment_config_from_json(const json& j) {
    ExperimentConfig cfg;
    try {
        cfg.experiment = experiment_kind_from_string(j.at("experiment").get<std::string>());
        const json& d = j.at("data");
        cfg.data.d = d.at("d").get<std::size_t>();
        cfg.data.segments = d.at("segments").get<std::size_t>();
        cfg.data.n_per_segment = d.at("n_per_segment").get<std::size_t>();
        cfg.data.mixing_layers = d.at("mixing_layers").get<std::size_t>();
        cfg.data.mode = latent_model_from_string(d.at("mode").get<std::string>());
        cfg.data.lambda_lo = d.value("lambda_lo", cfg.data.lambda_lo);
        cfg.data.lambda_hi = d.value("lambda_hi", cfg.data.lambda_hi);
        cfg.data.sigma0_eig_lo = d.value("sigma0_eig_lo", cfg.data.sigma0_eig_lo);
        cfg.data.sigma0_eig_hi = d.value("sigma0_eig_hi", cfg.data.sigma0_eig_hi);
        cfg.data.appendix_precision_form =
            d.value("appendix_precision_form", cfg.data.appendix_precision_form);
        cfg.data.seed = d.at("seed").get<std::uint64_t>();

        if (j.contains("model")) {
            const json& m = j.at("model");
            cfg.model.d_z = m.value("d_z", cfg.model.d_z);
            cfg.model.mode = model_mode_from_string(m.value("mode", std::string("plain")));
            cfg.model.f_hidden = m.value("f_hidden", cfg.model.f_hidden);
            cfg.model.g_network = m.value("g_network", cfg.model.g_network);
        }
        if (j.contains("training")) {
            const json& t = j.at("training");
            cfg.training.objective = t.value("objective", cfg.training.objective);
            cfg.training.cdsm.sigma = t.value("sigma", cfg.training.cdsm.sigma);
            cfg.training.cdsm.batch_size = t.value("batch_size", cfg.training.cdsm.batch_size);
            cfg.training.cdsm.iterations = t.value("iterations", cfg.training.cdsm.iterations);
            cfg.training.cdsm.lr = t.value("lr", cfg.training.cdsm.lr);
            cfg.training.cdsm.seed = t.value("seed", cfg.training.cdsm.seed);
            cfg.training.cdsm.num_threads = t.value("num_threads", cfg.training.cdsm.num_threads);
            cfg.training.cfce.lr = t.value("cfce_lr", cfg.training.cfce.lr);
            cfg.training.cfce.batch_size =
                t.value("cfce_batch_size", cfg.training.cfce.batch_size);
            cfg.training.cfce.iterations =
                t.value("cfce_iterations", cfg.training.cfce.iterations);
            cfg.training.cfce.seed = cfg.training.cdsm.seed;
            cfg.training.tcl.lr = t.value("tcl_lr", cfg.training.tcl.lr);
            cfg.training.tcl.batch_size = t.value("tcl_batch_size", cfg.training.tcl.batch_size);
            cfg.training.tcl.iterations = t.value("tcl_iterations", cfg.training.tcl.iterations);
            cfg.training.tcl.optimizer =
                t.value("tcl_optimizer", std::string("adam")) == "momentum_sgd"
                    ? TclOptimizer::momentum_sgd
                    : TclOptimizer::adam;
            cfg.training.tcl.sgd_lr = t.value("tcl_sgd_lr", cfg.training.tcl.sgd_lr);
            cfg.training.tcl.sgd_momentum =
                t.value("tcl_sgd_momentum", cfg.training.tcl.sgd_momentum);
            cfg.training.tcl.sgd_decay = t.value("tcl_sgd_decay", cfg.training.tcl.sgd_decay);
            cfg.training.tcl.seed = cfg.training.cdsm.seed;
        }
        if (j.contains("eval")) {
            const json& e = j.at("eval");
            if (e.contains("mcc_modes")) {
                cfg.eval.mcc_modes.clear();
                for (const auto& m : e.at("mcc_modes"))
                    cfg.eval.mcc_modes.push_back(mcc_mode_from_string(m.get<std::string>()));
            }
            cfg.eval.n_seeds = e.value("n_seeds", cfg.eval.n_seeds);
            cfg.eval.held_out_segments =
                e.value("held_out_segments", cfg.eval.held_out_segments);
            cfg.eval.eval_fraction = e.value("eval_fraction", cfg.eval.eval_fraction);
            cfg.eval.probe_train_fraction =
                e.value("probe_train_fraction", cfg.eval.probe_train_fraction);
            cfg.eval.transfer_sample_sizes =
                e.value("transfer_sample_sizes", cfg.eval.transfer_sample_sizes);
            cfg.eval.runner_threads = e.value("runner_threads", cfg.eval.runner_threads);
        }
        cfg.output_dir = j.value("output_dir", std::string());
    } catch (const json::exception& e) {
        throw std::invalid_argument(std::string("experiment config: ") + e.what());
    }
    cfg.validate();
    return cfg;
}

struct ExperimentReport {
    json config;  // exact echo; rerunning it must reproduce `metrics`
    std::map<std::string, double> metrics;
    std::map<std::string, Matrix> matrices;
    std::vector<std::uint64_t> run_seeds;
    double wall_clock_sec = 0.0;
    std::vector<std::string> artifacts;
};

inline json to_json(const ExperimentReport& report) {
    json j;
    j["config"] = report.config;
    j["metrics"] = report.metrics;
    json mats = json::object();
    for (const auto& [name, m] : report.matrices) {
        json rows = json::array();
        for (std::size_t i = 0; i < m.rows(); ++i) {
            json row = json::array();
            for (std::size_t c = 0; c < m.cols(); ++c) row.push_back(m(i, c));
            rows.push_back(std::move(row));
        }
        mats[name] = std::move(rows);
    }
    j["matrices"] = std::move(mats);
    j["run_seeds"] = report.run_seeds;
    j["wall_clock_sec"] = report.wall_clock_sec;
    j["artifacts"] = report.artifacts;
    return j;
}

inline ExperimentReport report_from_json(const json& j) {
    ExperimentReport report;
    report.config = j.at("config");
    for (const auto& [k, v] : j.at("metrics").items()) report.metrics[k] = v.get<double>();
    for (const auto& [k, v] : j.at("matrices").items()) {
        const std::size_t rows = v.size();
        const std::size_t cols = rows ? v.at(0).size() : 0;
        Matrix m(rows, cols);
        for (std::size_t i = 0; i < rows; ++i)
            for (std::size_t c = 0; c < cols; ++c) m(i, c) = v.at(i).at(c).get<double>();
        report.matrices[k] = std::move(m);
    }
    report.run_seeds = j.at("run_seeds").get<std::vector<std::uint64_t>>();
    report.wall_clock_sec = j.at("wall_clock_sec").get<double>();
    report.artifacts = j.at("artifacts").get<std::vector<std::string>>();
    return report;
}

// ---------------------------------------------------------------------------
// Shared machinery
// ---------------------------------------------------------------------------

namespace detail {

struct SplitData {
    LabeledDataset train;
    LabeledDataset eval;
    Matrix z_eval;  // ground-truth latents for the eval rows
};

// Seeded shuffle split; eval rows carry their ground-truth latents along.
inline SplitData split_for_eval(const LabeledDataset& data, const GroundTruth& truth,
                                double eval_fraction, std::uint64_t seed) {
    const std::vector<std::size_t> idx = shuffled_indices(data.size(), seed);
    const std::size_t n_eval = static_cast<std::size_t>(eval_fraction * data.size());
    const std::size_t n_train = data.size() - n_eval;
    std::vector<std::size_t> train_rows(idx.begin(), idx.begin() + n_train);
    std::vector<std::size_t> eval_rows(idx.begin() + n_train, idx.end());
    SplitData out;
    out.train = data.subset(train_rows);
    out.eval = data.subset(eval_rows);
    out.z_eval = Matrix(eval_rows.size(), truth.z.cols());
    for (std::size_t i = 0; i < eval_rows.size(); ++i)
        out.z_eval.set_row(i, truth.z.row(eval_rows[i]));
    return out;
}

inline std::vector<std::size_t> model_dims(const ExperimentConfig& cfg) {
    std::vector<std::size_t> dims{cfg.data.d};
    if (cfg.model.f_hidden.empty()) {
        for (std::size_t l = 0; l < cfg.data.mixing_layers; ++l) dims.push_back(32);
    } else {
        dims.insert(dims.end(), cfg.model.f_hidden.begin(), cfg.model.f_hidden.end());
    }
    dims.push_back(cfg.model.d_z);
    return dims;
}

// Fresh ICE-BeeM for one run. The unconditional baseline is the same model
// with g pinned at the all-ones vector.
inline IceBeemModel build_run_model(const ExperimentConfig& cfg, std::uint64_t seed,
                                    bool unconditional) {
    MlpSpec spec;
    spec.dims = model_dims(cfg);
    spec.leaky_slope = 0.1;
    spec.seed = seed;
    spec.allow_non_monotone = true;  // the width-32 simulation net is a bottleneck shape
    if (cfg.model.mode == ModelMode::positive) spec.output_activation = OutputActivation::relu;

    Rng rng(seed);
    IceBeemModel model;
    model.f = build_mlp(spec, rng);
    const std::size_t dg =
        (cfg.model.mode == ModelMode::augmented ? 2 : 1) * cfg.model.d_z;
    if (unconditional) {
        model.g = ConditionEmbedding::make_lookup(Matrix(cfg.data.segments, dg,
                                                         Vector(cfg.data.segments * dg, 1.0)));
    } else if (cfg.model.g_network) {
        MlpSpec gs;
        gs.dims = {cfg.data.segments, dg, dg};
        gs.seed = seed + 1;
        gs.allow_non_monotone = true;
        Rng grng(seed + 1);
        model.g = ConditionEmbedding::make_network(build_mlp(gs, grng));
    } else {
        Matrix table(cfg.data.segments, dg);
        for (std::size_t i = 0; i < table.size(); ++i) table.data()[i] = 0.1 * rng.normal();
        model.g = ConditionEmbedding::make_lookup(std::move(table));
    }
    model.mode = cfg.model.mode;
    model.validate();
    return model;
}

// Trains one ICE-BeeM run with the configured objective.
inline IceBeemModel train_run(const ExperimentConfig& cfg, const LabeledDataset& train,
                              std::uint64_t seed, bool unconditional,
                              Vector* history_out = nullptr) {
    IceBeemModel model = build_run_model(cfg, seed, unconditional);
    if (cfg.training.objective == "cfce") {
        const ContrastNoise noise = fit_contrast_noise(train);
        CfceConfig ccfg = cfg.training.cfce;
        ccfg.seed = seed;
        ccfg.freeze_g = unconditional;
        CfceResult r = train_cfce(std::move(model), train, noise, ccfg);
        if (history_out) *history_out = std::move(r.loss_history);
        return std::move(r.model);
    }
    CdsmConfig tcfg = cfg.training.cdsm;
    tcfg.seed = seed;
    tcfg.freeze_g = unconditional;
    TrainResult r = train_cdsm(std::move(model), train, tcfg);
    if (history_out) *history_out = std::move(r.loss_history);
    return std::move(r.model);
}

inline Matrix feature_matrix(const IceBeemModel& model, const Matrix& x) {
    Matrix out(x.rows(), model.feature_dim());
    for (std::size_t i = 0; i < x.rows(); ++i) out.set_row(i, feature(model, x.row(i)));
    return out;
}

// Runs jobs 0..count-1 on a bounded pool; results land in caller-owned slots,
// so aggregation order is fixed regardless of scheduling.
template <typename Job>
void run_indexed_jobs(std::size_t count, std::size_t threads, Job&& job) {
    if (threads <= 1 || count <= 1) {
        for (std::size_t i = 0; i < count; ++i) job(i);
        return;
    }
    std::atomic<std::size_t> next{0};
    std::vector<std::exception_ptr> errors(count);
    auto worker = [&] {
        while (true) {
            const std::size_t i = next.fetch_add(1);
            if (i >= count) return;
            try {
                job(i);
            } catch (...) {
                errors[i] = std::current_exception();
            }
        }
    };
    std::vector<std::thread> pool;
    for (std::size_t t = 1; t < std::min(threads, count); ++t) pool.emplace_back(worker);
    worker();
    for (std::thread& t : pool) t.join();
    for (auto& e : errors)
        if (e) std::rethrow_exception(e);
}

inline std::uint64_t run_seed(const ExperimentConfig& cfg, std::size_t run_index) {
    return Rng(cfg.training.cdsm.seed).split(run_index).seed();
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Experiments
// ---------------------------------------------------------------------------

namespace detail {

inline void emit_report(ExperimentReport& report, const ExperimentConfig& cfg) {
    for (const auto& [name, value] : report.metrics)
        if (!std::isfinite(value))
            throw NumericalError("experiment: metric " + name + " is not finite");
    if (cfg.output_dir.empty()) return;
    std::filesystem::create_directories(cfg.output_dir);
    for (const auto& [name, m] : report.matrices) {
        const std::string path = cfg.output_dir + "/" + name + ".csv";
        std::vector<std::string> header(m.cols());
        for (std::size_t j = 0; j < m.cols(); ++j) header[j] = "c" + std::to_string(j);
        write_matrix_csv(m, header, path);
        report.artifacts.push_back(path);
    }
    write_file_atomic(cfg.output_dir + "/report.json", to_json(report).dump(2) + "\n");
}

}  // namespace detail

/// Fig. 1e/f analog: ICE-BeeM and TCL trained on the same synthetic data,
/// evaluated by MCC of their features against the true latents on held-out
/// rows, averaged over n_seeds independent initializations.
inline ExperimentReport run_simulation(const ExperimentConfig& cfg) {
    cfg.validate();
    const auto t0 = std::chrono::steady_clock::now();
    auto [data, truth] = generate_dataset(cfg.data);
    const detail::SplitData split =
        detail::split_for_eval(data, truth, cfg.eval.eval_fraction, cfg.data.seed ^ 0xA5A5A5A5ULL);

    ExperimentReport report;
    report.config = to_json(cfg);

    const std::size_t n = cfg.eval.n_seeds;
    std::vector<double> ice_weak(n), ice_strong(n), tcl_weak(n), tcl_strong(n);
    std::vector<Vector> ice_hist(n);
    for (std::size_t i = 0; i < n; ++i) report.run_seeds.push_back(detail::run_seed(cfg, i));

    detail::run_indexed_jobs(n, cfg.eval.runner_threads, [&](std::size_t i) {
        const std::uint64_t seed = report.run_seeds[i];

        const IceBeemModel model = detail::train_run(cfg, split.train, seed, false, &ice_hist[i]);
        const Matrix ice_features = detail::feature_matrix(model, split.eval.x);
        ice_weak[i] = mcc_weak(ice_features, split.z_eval,
                               std::min(split.z_eval.cols(), ice_features.cols())).mcc;
        ice_strong[i] = ice_features.cols() == split.z_eval.cols()
                            ? mcc_strong(ice_features, split.z_eval).mcc
                            : std::numeric_limits<double>::quiet_NaN();

        MlpSpec tcl_spec;
        tcl_spec.dims = detail::model_dims(cfg);
        tcl_spec.dims.back() = cfg.data.d;  // TCL features match the data dimension
        tcl_spec.allow_non_monotone = true;
        TclConfig tcfg = cfg.training.tcl;
        tcfg.seed = seed;
        const TclResult tcl = train_tcl(split.train, tcl_spec, tcfg);
        const Matrix tcl_feats = tcl_features(tcl.feature_net, split.eval.x);
        tcl_weak[i] = mcc_weak(tcl_feats, split.z_eval,
                               std::min(split.z_eval.cols(), tcl_feats.cols())).mcc;
        tcl_strong[i] = tcl_feats.cols() == split.z_eval.cols()
                            ? mcc_strong(tcl_feats, split.z_eval).mcc
                            : std::numeric_limits<double>::quiet_NaN();
    });

    double ice_weak_mean = 0.0, tcl_weak_mean = 0.0, ice_strong_mean = 0.0, tcl_strong_mean = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
        report.metrics["icebeem_weak_mcc_run" + std::to_string(i)] = ice_weak[i];
        report.metrics["tcl_weak_mcc_run" + std::to_string(i)] = tcl_weak[i];
        ice_weak_mean += ice_weak[i] / n;
        tcl_weak_mean += tcl_weak[i] / n;
        ice_strong_mean += ice_strong[i] / n;
        tcl_strong_mean += tcl_strong[i] / n;
    }
    report.metrics["icebeem_mcc"] = ice_weak_mean;
    report.metrics["tcl_mcc"] = tcl_weak_mean;
    if (std::isfinite(ice_strong_mean)) report.metrics["icebeem_strong_mcc"] = ice_strong_mean;
    if (std::isfinite(tcl_strong_mean)) report.metrics["tcl_strong_mcc"] = tcl_strong_mean;

    if (!cfg.output_dir.empty()) {
        std::filesystem::create_directories(cfg.output_dir);
        for (std::size_t i = 0; i < n; ++i) {
            const std::string path =
                cfg.output_dir + "/icebeem_loss_run" + std::to_string(i) + ".csv";
            write_history_csv(ice_hist[i], path);
            report.artifacts.push_back(path);
        }
    }
    report.wall_clock_sec =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    detail::emit_report(report, cfg);
    return report;
}

/// Fig. 1a/b analog: representation consistency across seeds, conditional
/// versus the unconditional (g frozen at ones) baseline.
inline ExperimentReport run_consistency(const ExperimentConfig& cfg) {
    cfg.validate();
    const auto t0 = std::chrono::steady_clock::now();
    auto [data, truth] = generate_dataset(cfg.data);
    const detail::SplitData split =
        detail::split_for_eval(data, truth, cfg.eval.eval_fraction, cfg.data.seed ^ 0xA5A5A5A5ULL);

    ExperimentReport report;
    report.config = to_json(cfg);

    const std::size_t n = cfg.eval.n_seeds;
    std::vector<Matrix> cond_dumps(n), uncond_dumps(n);
    for (std::size_t i = 0; i < n; ++i) report.run_seeds.push_back(detail::run_seed(cfg, i));

    detail::run_indexed_jobs(2 * n, cfg.eval.runner_threads, [&](std::size_t job) {
        const std::size_t i = job % n;
        const bool unconditional = job >= n;
        const IceBeemModel model =
            detail::train_run(cfg, split.train, report.run_seeds[i], unconditional);
        if (unconditional) {
            // the baseline is the same code path with g pinned; verify the pin
            for (std::size_t k = 0; k < model.g.lookup.size(); ++k)
                if (model.g.lookup.data()[k] != 1.0)
                    throw NumericalError("run_consistency: frozen g drifted");
            uncond_dumps[i] = detail::feature_matrix(model, split.eval.x);
        } else {
            cond_dumps[i] = detail::feature_matrix(model, split.eval.x);
        }
    });

    for (MccMode mode : cfg.eval.mcc_modes) {
        const std::string tag = to_string(mode);
        const Matrix cond = consistency_matrix(cond_dumps, mode);
        const Matrix uncond = consistency_matrix(uncond_dumps, mode);
        report.matrices["consistency_conditional_" + tag] = cond;
        report.matrices["consistency_unconditional_" + tag] = uncond;
        report.metrics["conditional_" + tag + "_mcc"] = offdiagonal_mean(cond);
        report.metrics["unconditional_" + tag + "_mcc"] = offdiagonal_mean(uncond);
    }

    report.wall_clock_sec =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    detail::emit_report(report, cfg);
    return report;
}

/// Table 1a analog: CDSM scores of the four transfer arms on held-out
/// segments. Lower is better everywhere.
inline ExperimentReport run_transfer(const ExperimentConfig& cfg) {
    cfg.validate();
    const auto t0 = std::chrono::steady_clock::now();
    auto [data, truth] = generate_dataset(cfg.data);

    std::vector<std::size_t> train_segments;
    for (std::size_t s = 0; s < cfg.data.segments; ++s) {
        bool held = false;
        for (std::size_t h : cfg.eval.held_out_segments) held |= h == s;
        if (!held) train_segments.push_back(s);
    }
    if (train_segments.empty()) throw std::invalid_argument("run_transfer: no training segments");

    const LabeledDataset train = data.restricted_to(train_segments);
    const LabeledDataset held = data.restricted_to(cfg.eval.held_out_segments);

    ExperimentReport report;
    report.config = to_json(cfg);
    report.run_seeds.push_back(detail::run_seed(cfg, 0));
    const std::uint64_t seed = report.run_seeds[0];
    const std::uint64_t eval_seed = Rng(seed).split(777).seed();

    // (1) full conditional model on the training segments
    ExperimentConfig train_cfg = cfg;
    train_cfg.data.segments = train.num_segments;
    const IceBeemModel base = detail::train_run(train_cfg, train, seed, false);

    std::vector<std::size_t> sizes = cfg.eval.transfer_sample_sizes;
    const std::size_t full = held.rows_of_segment(0).size();
    if (sizes.empty()) sizes.push_back(full);

    for (std::size_t size_idx = 0; size_idx < sizes.size(); ++size_idx) {
        const std::size_t n_fit = std::min(sizes[size_idx], full);
        const std::string suffix = sizes.size() == 1 ? "" : "_n" + std::to_string(n_fit);

        // per-held-out-segment subsample used both to fit and to score
        LabeledDataset held_sub;
        {
            std::vector<std::size_t> rows;
            for (std::size_t h = 0; h < held.num_segments; ++h) {
                const std::vector<std::size_t> seg_rows = held.rows_of_segment(h);
                for (std::size_t i = 0; i < std::min(n_fit, seg_rows.size()); ++i)
                    rows.push_back(seg_rows[i]);
            }
            held_sub = held.subset(rows);
        }

        // (2) f frozen, one fresh condition vector per held-out segment
        double f_gtheta = 0.0, f_ones = 0.0, init_score_mean = 0.0;
        for (std::size_t h = 0; h < held_sub.num_segments; ++h) {
            const std::vector<std::size_t> rows = held_sub.rows_of_segment(h);
            LabeledDataset seg = held_sub.subset(rows);
            seg.num_segments = 1;
            for (auto& yy : seg.y) yy = 0;

            CdsmConfig fit_cfg = cfg.training.cdsm;
            fit_cfg.seed = Rng(seed).split(1000 + h).seed();
            const FitGResult fit = fit_g_new_segment(base, seg.x, fit_cfg, nullptr, &eval_seed);
            f_gtheta += fit.cdsm_score / held_sub.num_segments;
            init_score_mean += fit.init_score / held_sub.num_segments;

            // (3) frozen f against the all-ones condition
            IceBeemModel ones_arm = base;
            ones_arm.g = ConditionEmbedding::make_lookup(
                Matrix(1, base.feature_dim(), Vector(base.feature_dim(), 1.0)));
            f_ones += cdsm_eval_score(ones_arm, seg, cfg.training.cdsm.sigma, eval_seed) /
                      held_sub.num_segments;
        }

        // (4) fresh conditional model on held-out data only
        ExperimentConfig held_cfg = cfg;
        held_cfg.data.segments = held_sub.num_segments;
        const IceBeemModel fresh =
            detail::train_run(held_cfg, held_sub, Rng(seed).split(2000 + size_idx).seed(), false);
        const double ftheta_gtheta =
            cdsm_eval_score(fresh, held_sub, cfg.training.cdsm.sigma, eval_seed);

        // (5) fresh unconditional model on held-out data only
        const IceBeemModel fresh_uncond =
            detail::train_run(held_cfg, held_sub, Rng(seed).split(3000 + size_idx).seed(), true);
        const double ftheta_ones =
            cdsm_eval_score(fresh_uncond, held_sub, cfg.training.cdsm.sigma, eval_seed);

        report.metrics["transfer_f_gtheta" + suffix] = f_gtheta;
        report.metrics["transfer_f_ones" + suffix] = f_ones;
        report.metrics["transfer_ftheta_gtheta" + suffix] = ftheta_gtheta;
        report.metrics["transfer_ftheta_ones" + suffix] = ftheta_ones;
        report.metrics["transfer_f_gtheta_init" + suffix] = init_score_mean;
    }

    report.wall_clock_sec =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    detail::emit_report(report, cfg);
    return report;
}

/// Table 1b analog: held-out segment classification from learned features,
/// conditional versus unconditional, plus a raw-observation floor.
inline ExperimentReport run_semisup(const ExperimentConfig& cfg) {
    cfg.validate();
    const auto t0 = std::chrono::steady_clock::now();
    auto [data, truth] = generate_dataset(cfg.data);

    std::vector<std::size_t> train_segments;
    for (std::size_t s = 0; s < cfg.data.segments; ++s) {
        bool held = false;
        for (std::size_t h : cfg.eval.held_out_segments) held |= h == s;
        if (!held) train_segments.push_back(s);
    }
    const LabeledDataset train = data.restricted_to(train_segments);
    const LabeledDataset held = data.restricted_to(cfg.eval.held_out_segments);

    ExperimentReport report;
    report.config = to_json(cfg);

    // seeded probe split of the held-out rows
    const std::vector<std::size_t> idx =
        detail::shuffled_indices(held.size(), cfg.data.seed ^ 0xC0FFEEULL);
    const std::size_t n_probe_train =
        std::max<std::size_t>(2, static_cast<std::size_t>(cfg.eval.probe_train_fraction *
                                                          held.size()));
    std::vector<std::size_t> probe_train_rows(idx.begin(), idx.begin() + n_probe_train);
    std::vector<std::size_t> probe_test_rows(idx.begin() + n_probe_train, idx.end());
    const LabeledDataset probe_train = held.subset(probe_train_rows);
    const LabeledDataset probe_test = held.subset(probe_test_rows);

    auto probe_accuracy = [&](const Matrix& train_features, const Matrix& test_features) {
        const LogRegModel probe = logreg_fit(train_features, probe_train.y);
        return logreg_accuracy(probe, test_features, probe_test.y);
    };

    const std::size_t n = cfg.eval.n_seeds;
    for (std::size_t i = 0; i < n; ++i) report.run_seeds.push_back(detail::run_seed(cfg, i));
    std::vector<double> cond_acc(n), uncond_acc(n);
    detail::run_indexed_jobs(2 * n, cfg.eval.runner_threads, [&](std::size_t job) {
        const std::size_t i = job % n;
        const bool unconditional = job >= n;
        ExperimentConfig tcfg = cfg;
        tcfg.data.segments = train.num_segments;
        const IceBeemModel model =
            detail::train_run(tcfg, train, report.run_seeds[i], unconditional);
        const double acc = probe_accuracy(detail::feature_matrix(model, probe_train.x),
                                          detail::feature_matrix(model, probe_test.x));
        (unconditional ? uncond_acc : cond_acc)[i] = acc;
    });

    double cond_mean = 0.0, uncond_mean = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
        report.metrics["semisup_conditional_acc_run" + std::to_string(i)] = cond_acc[i];
        report.metrics["semisup_unconditional_acc_run" + std::to_string(i)] = uncond_acc[i];
        cond_mean += cond_acc[i] / n;
        uncond_mean += uncond_acc[i] / n;
    }
    report.metrics["semisup_conditional_acc"] = cond_mean;
    report.metrics["semisup_unconditional_acc"] = uncond_mean;
    report.metrics["semisup_raw_acc"] = probe_accuracy(probe_train.x, probe_test.x);

    report.wall_clock_sec =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    detail::emit_report(report, cfg);
    return report;
}

inline ExperimentReport run_experiment(const ExperimentConfig& cfg) {
    switch (cfg.experiment) {
        case ExperimentKind::simulation: return run_simulation(cfg);
        case ExperimentKind::consistency: return run_consistency(cfg);
        case ExperimentKind::transfer: return run_transfer(cfg);
        case ExperimentKind::semisup: return run_semisup(cfg);
    }
    throw std::invalid_argument("run_experiment: unknown kind");
}

}  // namespace icebeem
