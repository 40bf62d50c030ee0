// Command-line front end: synthetic data generation, model training, MCC
// evaluation, config-driven experiments, and architecture checks.

#include <cstring>
#include <filesystem>
#include <fstream>
#include <iostream>

#include <CLI11.hpp>

#include "icebeem/experiment.hpp"

using namespace icebeem;

namespace {

int cmd_generate(const std::string& out_dir, const ImcaConfig& cfg) {
    auto [data, truth] = generate_dataset(cfg);
    std::filesystem::create_directories(out_dir);

    write_dataset_csv(data, out_dir + "/data.csv", "x");

    LabeledDataset latents;
    latents.x = truth.z;
    latents.y = truth.y;
    latents.num_segments = cfg.segments;
    write_dataset_csv(latents, out_dir + "/latents.csv", "z");

    save_net(truth.mixing, out_dir + "/mixing.net");
    save_net_text(truth.mixing, out_dir + "/mixing.net.txt");

    json meta;
    meta["mode"] = to_string(cfg.mode);
    meta["d"] = cfg.d;
    meta["segments"] = cfg.segments;
    meta["n_per_segment"] = cfg.n_per_segment;
    meta["mixing_layers"] = cfg.mixing_layers;
    meta["seed"] = cfg.seed;
    json lambdas = json::array();
    for (std::size_t s = 0; s < truth.lambdas.rows(); ++s) {
        json row = json::array();
        for (std::size_t j = 0; j < truth.lambdas.cols(); ++j) row.push_back(truth.lambdas(s, j));
        lambdas.push_back(std::move(row));
    }
    meta["lambdas"] = std::move(lambdas);
    write_file_atomic(out_dir + "/generation.json", meta.dump(2) + "\n");

    std::cout << "wrote " << data.size() << " rows to " << out_dir << "/data.csv\n";
    return 0;
}

int cmd_train(const std::string& data_path, const std::string& out_path,
              const std::string& history_path, const std::string& objective, ModelMode mode,
              std::size_t d_z, std::vector<std::size_t> hidden, CdsmConfig cdsm_cfg,
              CfceConfig cfce_cfg) {
    const LabeledDataset data = read_dataset_csv(data_path);
    data.validate();
    if (data.size() == 0) throw std::invalid_argument("train: empty dataset");

    MlpSpec spec;
    spec.dims.push_back(data.dim());
    if (hidden.empty()) hidden.assign(1, 32);
    spec.dims.insert(spec.dims.end(), hidden.begin(), hidden.end());
    spec.dims.push_back(d_z);
    spec.allow_non_monotone = true;
    spec.seed = cdsm_cfg.seed;
    if (mode == ModelMode::positive) spec.output_activation = OutputActivation::relu;

    Rng rng(cdsm_cfg.seed);
    IceBeemModel model;
    model.f = build_mlp(spec, rng);
    const std::size_t dg = (mode == ModelMode::augmented ? 2 : 1) * d_z;
    Matrix table(data.num_segments, dg);
    for (std::size_t i = 0; i < table.size(); ++i) table.data()[i] = 0.1 * rng.normal();
    model.g = ConditionEmbedding::make_lookup(std::move(table));
    model.mode = mode;
    model.validate();

    Vector history;
    if (objective == "cfce") {
        const ContrastNoise noise = fit_contrast_noise(data);
        CfceResult r = train_cfce(std::move(model), data, noise, cfce_cfg);
        model = std::move(r.model);
        history = std::move(r.loss_history);
    } else if (objective == "cdsm") {
        TrainResult r = train_cdsm(std::move(model), data, cdsm_cfg);
        model = std::move(r.model);
        history = std::move(r.loss_history);
    } else {
        throw std::invalid_argument("train: unknown objective " + objective);
    }

    save_model(model, out_path);
    if (!history_path.empty()) write_history_csv(history, history_path);
    std::cout << "trained " << objective << " model (" << to_string(mode) << ") -> " << out_path
              << "\n";
    if (!history.empty()) std::cout << "final loss " << history.back() << "\n";
    return 0;
}

int cmd_eval_mcc(const std::string& features_path, const std::string& reference_path,
                 MccMode mode, std::size_t k) {
    const LabeledDataset a = read_dataset_csv(features_path);
    const LabeledDataset b = read_dataset_csv(reference_path);
    if (a.size() != b.size()) throw std::invalid_argument("eval-mcc: row count mismatch");

    MccReport report;
    if (mode == MccMode::strong) {
        report = mcc_strong(a.x, b.x);
    } else {
        const std::size_t kk = k ? k : std::min(a.dim(), b.dim());
        report = mcc_weak(a.x, b.x, kk);
    }
    json out;
    out["mcc"] = report.mcc;
    out["mode"] = to_string(mode);
    out["permutation"] = report.permutation.permutation;
    out["per_component_corrs"] = report.per_component_corrs;
    std::cout << out.dump(2) << "\n";
    return 0;
}

int cmd_run(const std::string& config_path) {
    std::ifstream in(config_path);
    if (!in) throw std::invalid_argument("run: cannot open config file " + config_path);
    json j;
    try {
        in >> j;
    } catch (const json::exception& e) {
        throw std::invalid_argument("run: " + config_path + " is not valid JSON: " + e.what());
    }
    const ExperimentConfig cfg = experiment_config_from_json(j);
    const ExperimentReport report = run_experiment(cfg);
    std::cout << to_string(cfg.experiment) << " finished in " << report.wall_clock_sec << " s\n";
    for (const auto& [name, value] : report.metrics) std::cout << name << " = " << value << "\n";
    if (!cfg.output_dir.empty()) std::cout << "report: " << cfg.output_dir << "/report.json\n";
    return 0;
}

int check_net(const MlpNet& net, const std::string& label) {
    int failures = 0;
    for (std::size_t l = 0; l < net.num_layers(); ++l) {
        const Matrix& w = net.weights[l];
        const std::size_t want = std::min(w.rows(), w.cols());
        const std::size_t rank = numerical_rank(w, 1e-10);
        if (rank < want) {
            std::cout << label << ": layer " << l << " weight is rank-deficient (" << rank << " < "
                      << want << ")\n";
            ++failures;
        }
    }
    Rng rng(0);
    const JacobianProbeReport probe = jacobian_rank_probe(net, 100, rng);
    const std::size_t want_rank = std::min(net.input_dim(), net.output_dim());
    std::cout << label << ": jacobian probe min rank " << probe.min_rank << "/" << want_rank
              << ", min sigma " << probe.min_sigma << "\n";
    if (probe.min_rank < want_rank) ++failures;

    Rng rng2(1);
    const SubmatrixCheckReport sub = check_submatrix_invertibility(net, 200, rng2);
    if (sub.total_checked > 0)
        std::cout << label << ": " << sub.total_checked
                  << " square submatrices checked, min sigma " << sub.min_sigma << "\n";
    if (!sub.all_invertible) {
        std::cout << label << ": layer " << sub.failing_layer << " has a singular submatrix (rows";
        for (std::size_t r : sub.failing_subset) std::cout << ' ' << r;
        std::cout << ")\n";
        ++failures;
    }
    return failures;
}

int cmd_check_arch(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::invalid_argument("check-arch: cannot open " + path);
    char magic[4] = {};
    in.read(magic, 4);
    in.seekg(0);

    int failures = 0;
    if (std::memcmp(magic, "ICBM", 4) == 0) {
        const IceBeemModel model = read_model(in);
        failures += check_net(model.f, "f");
        if (model.g.kind == ConditionEmbedding::Kind::network) {
            failures += check_net(*model.g.network, "g");
        } else {
            const std::size_t rank = numerical_rank(model.g.lookup, 1e-10);
            std::cout << "g: lookup table rank " << rank << "/"
                      << std::min(model.g.lookup.rows(), model.g.lookup.cols()) << "\n";
        }
    } else {
        const MlpNet net = read_net(in);
        failures += check_net(net, "net");
    }
    if (failures) {
        std::cout << failures << " check(s) failed\n";
        return 2;
    }
    std::cout << "all checks passed\n";
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"ICE-BeeM: identifiable conditional EBMs on synthetic data"};
    app.require_subcommand(1);

    auto* gen = app.add_subcommand("generate", "generate a synthetic ICA/IMCA dataset");
    ImcaConfig gen_cfg;
    std::string gen_mode = "ica", gen_out = "generated";
    gen->add_option("--mode", gen_mode, "latent model: ica or imca");
    gen->add_option("--d", gen_cfg.d, "latent/observed dimension");
    gen->add_option("--segments,--M", gen_cfg.segments, "number of segments");
    gen->add_option("--n-per-segment", gen_cfg.n_per_segment, "samples per segment");
    gen->add_option("--layers,-L", gen_cfg.mixing_layers, "mixing network depth");
    gen->add_option("--lambda-lo", gen_cfg.lambda_lo, "modulation lower bound");
    gen->add_option("--lambda-hi", gen_cfg.lambda_hi, "modulation upper bound");
    gen->add_flag("--appendix-precision-form", gen_cfg.appendix_precision_form,
                  "use the appendix covariance variant");
    gen->add_option("--seed", gen_cfg.seed, "generation seed");
    gen->add_option("--out-dir,-o", gen_out, "output directory");

    auto* train = app.add_subcommand("train", "train an ICE-BeeM model on a dataset CSV");
    std::string train_data, train_out = "model.icebeem", train_history, train_objective = "cdsm";
    std::string train_mode = "plain";
    std::size_t train_dz = 5;
    std::vector<std::size_t> train_hidden;
    CdsmConfig train_cdsm_cfg;
    CfceConfig train_cfce_cfg;
    train->add_option("--data", train_data, "dataset CSV (x_0..x_{d-1},y)")->required();
    train->add_option("--out,-o", train_out, "output model file (.icebeem)");
    train->add_option("--history", train_history, "loss history CSV");
    train->add_option("--objective", train_objective, "cdsm or cfce");
    train->add_option("--mode", train_mode, "plain, positive or augmented");
    train->add_option("--dz", train_dz, "feature dimension");
    train->add_option("--hidden", train_hidden, "hidden layer widths");
    train->add_option("--iterations", train_cdsm_cfg.iterations, "training iterations");
    train->add_option("--batch", train_cdsm_cfg.batch_size, "minibatch size");
    train->add_option("--lr", train_cdsm_cfg.lr, "learning rate");
    train->add_option("--sigma", train_cdsm_cfg.sigma, "CDSM noise scale");
    train->add_option("--seed", train_cdsm_cfg.seed, "training seed");
    train->add_option("--threads", train_cdsm_cfg.num_threads, "batch shards");

    auto* eval = app.add_subcommand("eval-mcc", "MCC between two feature CSVs");
    std::string eval_features, eval_reference, eval_mode = "strong";
    std::size_t eval_k = 0;
    eval->add_option("--features", eval_features, "features CSV")->required();
    eval->add_option("--reference", eval_reference, "reference CSV")->required();
    eval->add_option("--mode", eval_mode, "strong or weak");
    eval->add_option("--k", eval_k, "canonical components for weak mode");

    auto* runner = app.add_subcommand("run", "run an experiment from a JSON config");
    std::string run_config;
    runner->add_option("config", run_config, "experiment config JSON")->required();

    auto* check = app.add_subcommand("check-arch", "verify architecture assumptions of a model");
    std::string check_path;
    check->add_option("file", check_path, "net (.net) or model (.icebeem) container")->required();

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        if (e.get_name() == "CallForHelp" || e.get_name() == "CallForAllHelp")
            return app.exit(e);
        app.exit(e);  // prints the parse error
        return 1;
    }

    try {
        if (gen->parsed()) {
            gen_cfg.mode = latent_model_from_string(gen_mode);
            return cmd_generate(gen_out, gen_cfg);
        }
        if (train->parsed()) {
            train_cfce_cfg.seed = train_cdsm_cfg.seed;
            train_cfce_cfg.iterations = train_cdsm_cfg.iterations;
            train_cfce_cfg.batch_size = train_cdsm_cfg.batch_size;
            return cmd_train(train_data, train_out, train_history, train_objective,
                             model_mode_from_string(train_mode), train_dz, train_hidden,
                             train_cdsm_cfg, train_cfce_cfg);
        }
        if (eval->parsed())
            return cmd_eval_mcc(eval_features, eval_reference, mcc_mode_from_string(eval_mode),
                                eval_k);
        if (runner->parsed()) return cmd_run(run_config);
        if (check->parsed()) return cmd_check_arch(check_path);
    } catch (const NumericalError& e) {
        std::cerr << "numerical failure: " << e.what() << "\n";
        return 2;
    } catch (const std::invalid_argument& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
    return 0;
}
