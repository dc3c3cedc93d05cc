#pragma once

#include <cstdio>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "altcast/checksum.hpp"
#include "altcast/config.hpp"
#include "altcast/data.hpp"
#include "altcast/diagnostics.hpp"
#include "altcast/errors.hpp"
#include "altcast/manifest.hpp"
#include "altcast/model.hpp"
#include "altcast/synthetic.hpp"
#include "altcast/trainer.hpp"
#include "altcast/version.hpp"

namespace altcast {

// Exit codes: 0 success, 1 configuration/usage error, 2 data error,
// 3 numerical abort, 4 failed verification verdict.

struct CliOptions {
    std::string subcommand;
    std::string config_path;
    std::string out_dir = "altcast-out";
    std::string checkpoint;
    std::optional<std::uint64_t> seed;
};

namespace cli_detail {

inline const char* kUsage =
    "usage: altcast <subcommand> --config <path> [--out <dir>] [--seed N]\n"
    "\n"
    "subcommands:\n"
    "  train             train one model; writes checkpoint, epoch log, metrics\n"
    "  evaluate          score a saved checkpoint on the test split\n"
    "                    (requires --checkpoint <path>)\n"
    "  ablate            train alternating and joint under one seed; writes\n"
    "                    the paired metric table\n"
    "  diagnose-gradvar  run both modes and export gradient-variance series\n"
    "  synth-verify      check the estimator theory against a synthetic\n"
    "                    ground-truth operator (--config names the operator spec)\n";

inline CliOptions parse_args(int argc, char** argv) {
    if (argc < 2) throw ConfigError("missing subcommand");
    CliOptions o;
    o.subcommand = argv[1];
    for (int i = 2; i < argc; i += 2) {
        const std::string flag = argv[i];
        if (i + 1 >= argc) throw ConfigError("flag " + flag + " needs a value");
        const std::string value = argv[i + 1];
        if (flag == "--config") o.config_path = value;
        else if (flag == "--out") o.out_dir = value;
        else if (flag == "--checkpoint") o.checkpoint = value;
        else if (flag == "--seed") {
            double v = 0.0;
            if (!detail::parse_double(value, v) || v < 0 || v != std::floor(v))
                throw ConfigError("--seed needs a non-negative integer");
            o.seed = static_cast<std::uint64_t>(v);
        } else {
            throw ConfigError("unknown flag '" + flag + "'");
        }
    }
    if (o.config_path.empty()) throw ConfigError("--config is required");
    return o;
}

struct CsvFile {
    std::FILE* f = nullptr;
    explicit CsvFile(const std::string& path) : f(std::fopen(path.c_str(), "w")) {
        if (!f) throw IoError("cannot write '" + path + "'");
    }
    ~CsvFile() {
        if (f) std::fclose(f);
    }
    CsvFile(const CsvFile&) = delete;
    CsvFile& operator=(const CsvFile&) = delete;
};

struct MetricRow {
    std::string dataset;
    std::size_t horizon = 0;
    std::string mode;
    double mse = 0.0, mae = 0.0;
};

inline void write_metric_table(const std::vector<MetricRow>& rows,
                               const std::string& path) {
    CsvFile csv(path);
    std::fprintf(csv.f, "dataset,horizon,mode,mse,mae\n");
    for (const MetricRow& r : rows)
        std::fprintf(csv.f, "%s,%zu,%s,%.17g,%.17g\n", r.dataset.c_str(), r.horizon,
                     r.mode.c_str(), r.mse, r.mae);
}

inline void write_epoch_log(const std::vector<EpochReport>& history,
                            const std::string& path) {
    CsvFile csv(path);
    std::fprintf(csv.f, "epoch,train_loss,val_mse,val_mae\n");
    for (const EpochReport& e : history)
        std::fprintf(csv.f, "%zu,%.17g,%.17g,%.17g\n", e.epoch, e.train_loss, e.val_mse,
                     e.val_mae);
}

inline std::string dataset_name(const std::string& data_path) {
    return std::filesystem::path(data_path).stem().string();
}

inline bool is_csv_path(const std::string& p) {
    return p.size() >= 4 && p.compare(p.size() - 4, 4, ".csv") == 0;
}

// Real data comes from a CSV; anything else is an operator spec rolled
// forward deterministically (per config seed, independent of the training
// stream).
inline SeriesMatrix load_input(const RunConfig& cfg) {
    if (is_csv_path(cfg.data)) return load_csv(cfg.data);
    const SyntheticSpec spec = parse_operator_spec(cfg.data);
    return generate_series(spec.op, spec.T, mix_seed(cfg.seed, 0xda7a));
}

inline void print_history(const TrainResult& res, const char* mode) {
    for (const EpochReport& e : res.history)
        std::printf("[%s] epoch %zu  train_loss %.6f  val_mse %.6f  val_mae %.6f"
                    "  (%.1fs)\n",
                    mode, e.epoch, e.train_loss, e.val_mse, e.val_mae, e.wall_seconds);
    std::printf("[%s] best epoch %zu  val_mse %.6f\n", mode, res.best_epoch,
                res.best_val_mse);
}

struct TrainOutcome {
    DualPathModel model;  // carries the best parameters
    TrainResult result;
    Metrics test;
};

inline TrainOutcome run_training(const RunConfig& cfg, const PreparedData& prep,
                                 TrainMode mode, bool early_stopping) {
    const std::size_t channels = prep.splits.train.cols();
    DualPathModel model = DualPathModel::init(cfg.model_config(channels), cfg.seed);
    TrainConfig tc = cfg.train_config();
    tc.mode = mode;
    tc.early_stopping = early_stopping;
    Trainer trainer(model, prep.splits.train, prep.splits.val, tc);
    TrainResult result = trainer.run();
    model.params = result.best_params;
    const Metrics test = evaluate_model(model, prep.splits.test);
    return {std::move(model), std::move(result), test};
}

inline const char* mode_label(TrainMode m) {
    return m == TrainMode::Joint ? "joint" : "alternating";
}

}  // namespace cli_detail

inline int cmd_train(const CliOptions& opts) {
    namespace cd = cli_detail;
    RunConfig cfg = parse_run_config(opts.config_path);
    if (opts.seed) cfg.seed = *opts.seed;
    const SeriesMatrix series = cd::load_input(cfg);
    const RunManifest manifest = RunManifest::build("train", cfg, series.values);
    const PreparedData prep = prepare_dataset(series, cfg.ratio, cfg.lookback, cfg.horizon);

    const cd::TrainOutcome out = cd::run_training(cfg, prep, cfg.mode, true);
    cd::print_history(out.result, cd::mode_label(cfg.mode));
    std::printf("test  mse %.6f  mae %.6f\n", out.test.mse, out.test.mae);

    std::filesystem::create_directories(opts.out_dir);
    const std::filesystem::path dir(opts.out_dir);
    save_checkpoint((dir / "model.ckpt").string(), out.model);
    cd::write_epoch_log(out.result.history, (dir / "epochs.csv").string());
    cd::write_metric_table({{cd::dataset_name(cfg.data), cfg.horizon,
                             cd::mode_label(cfg.mode), out.test.mse, out.test.mae}},
                           (dir / "metrics.csv").string());
    export_variance_series(out.result.variance_epochs, (dir / "gradvar.csv").string());
    if (cfg.gradvar_steps)
        export_variance_series(out.result.variance_steps,
                               (dir / "gradvar_steps.csv").string());
    write_manifest(manifest, (dir / "manifest.txt").string());
    std::printf("wrote %s\n", (dir / "model.ckpt").string().c_str());
    return 0;
}

inline int cmd_evaluate(const CliOptions& opts) {
    namespace cd = cli_detail;
    RunConfig cfg = parse_run_config(opts.config_path);
    if (opts.seed) cfg.seed = *opts.seed;
    if (opts.checkpoint.empty()) throw ConfigError("evaluate requires --checkpoint");
    const DualPathModel model = load_checkpoint(opts.checkpoint);
    const SeriesMatrix series = cd::load_input(cfg);
    if (series.channels() != model.cfg.channels)
        throw ShapeMismatch("checkpoint has " + std::to_string(model.cfg.channels) +
                            " channels but data has " +
                            std::to_string(series.channels()));
    const PreparedData prep =
        prepare_dataset(series, cfg.ratio, model.cfg.lookback, model.cfg.horizon);
    const Metrics test = evaluate_model(model, prep.splits.test);
    std::printf("test  mse %.6f  mae %.6f\n", test.mse, test.mae);

    std::filesystem::create_directories(opts.out_dir);
    const std::filesystem::path dir(opts.out_dir);
    cd::write_metric_table({{cd::dataset_name(cfg.data), model.cfg.horizon,
                             cd::mode_label(cfg.mode), test.mse, test.mae}},
                           (dir / "metrics.csv").string());
    RunManifest manifest = RunManifest::build("evaluate", cfg, series.values);
    write_manifest(manifest, (dir / "manifest.txt").string());
    return 0;
}

inline int cmd_ablate(const CliOptions& opts) {
    namespace cd = cli_detail;
    RunConfig cfg = parse_run_config(opts.config_path);
    if (opts.seed) cfg.seed = *opts.seed;
    const SeriesMatrix series = cd::load_input(cfg);
    const RunManifest manifest = RunManifest::build("ablate", cfg, series.values);
    const PreparedData prep = prepare_dataset(series, cfg.ratio, cfg.lookback, cfg.horizon);

    std::filesystem::create_directories(opts.out_dir);
    const std::filesystem::path dir(opts.out_dir);
    std::vector<cd::MetricRow> rows;
    for (const TrainMode mode : {TrainMode::Alternating, TrainMode::Joint}) {
        const cd::TrainOutcome out = cd::run_training(cfg, prep, mode, true);
        cd::print_history(out.result, cd::mode_label(mode));
        std::printf("[%s] test  mse %.6f  mae %.6f\n", cd::mode_label(mode), out.test.mse,
                    out.test.mae);
        save_checkpoint(
            (dir / (std::string("model_") + cd::mode_label(mode) + ".ckpt")).string(),
            out.model);
        rows.push_back({cd::dataset_name(cfg.data), cfg.horizon, cd::mode_label(mode),
                        out.test.mse, out.test.mae});
    }
    cd::write_metric_table(rows, (dir / "ablate.csv").string());
    write_manifest(manifest, (dir / "manifest.txt").string());
    return 0;
}

inline int cmd_diagnose_gradvar(const CliOptions& opts) {
    namespace cd = cli_detail;
    RunConfig cfg = parse_run_config(opts.config_path);
    if (opts.seed) cfg.seed = *opts.seed;
    const SeriesMatrix series = cd::load_input(cfg);
    const RunManifest manifest = RunManifest::build("diagnose-gradvar", cfg, series.values);
    const PreparedData prep = prepare_dataset(series, cfg.ratio, cfg.lookback, cfg.horizon);

    std::vector<VarianceRecord> epochs, steps;
    for (const TrainMode mode : {TrainMode::Alternating, TrainMode::Joint}) {
        // Early stopping off: both modes must produce the same number of
        // epochs for the series to be comparable.
        const cd::TrainOutcome out = cd::run_training(cfg, prep, mode, false);
        epochs.insert(epochs.end(), out.result.variance_epochs.begin(),
                      out.result.variance_epochs.end());
        steps.insert(steps.end(), out.result.variance_steps.begin(),
                     out.result.variance_steps.end());
        // Mean CR-branch log-variance over the trailing five epochs is the
        // headline comparison statistic.
        double tail = 0.0;
        std::size_t count = 0;
        for (auto it = out.result.variance_epochs.rbegin();
             it != out.result.variance_epochs.rend() && count < 5; ++it) {
            if (it->branch != "cr") continue;
            tail += it->log_variance;
            ++count;
        }
        if (count > 0)
            std::printf("[%s] cr log-variance, last %zu epochs: %.6f\n",
                        cd::mode_label(mode), count, tail / double(count));
    }

    std::filesystem::create_directories(opts.out_dir);
    const std::filesystem::path dir(opts.out_dir);
    export_variance_series(epochs, (dir / "gradvar.csv").string());
    if (cfg.gradvar_steps)
        export_variance_series(steps, (dir / "gradvar_steps.csv").string());
    write_manifest(manifest, (dir / "manifest.txt").string());
    return 0;
}

namespace cli_detail {

struct Verdict {
    std::string check;
    double estimate = 0.0;
    double se = 0.0;
    bool pass = false;
};

inline void write_verdicts(const std::vector<Verdict>& verdicts,
                           const std::string& path) {
    CsvFile csv(path);
    std::fprintf(csv.f, "check,estimate,se,verdict\n");
    for (const Verdict& v : verdicts)
        std::fprintf(csv.f, "%s,%.17g,%.17g,%s\n", v.check.c_str(), v.estimate, v.se,
                     v.pass ? "pass" : "fail");
}

inline std::uint64_t file_checksum(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw FileNotFound("cannot open '" + path + "'");
    std::uint64_t h = 0xcbf29ce484222325ull;
    char buf[4096];
    while (in.read(buf, sizeof buf) || in.gcount() > 0)
        h = fnv1a(buf, static_cast<std::size_t>(in.gcount()), h);
    return h;
}

}  // namespace cli_detail

// Verifies the estimator theory against a known operator: conditional bias
// of the contaminated gradient, the three-term covariance-trace identity in
// a contamination-dominated regime, and the law of total (co)variance over a
// joint-training trajectory.
inline int cmd_synth_verify(const CliOptions& opts) {
    namespace cd = cli_detail;
    const SyntheticSpec spec = parse_operator_spec(opts.config_path);
    const TrueOperatorSpec& op = spec.op;
    const std::uint64_t seed = opts.seed.value_or(0);
    std::vector<cd::Verdict> verdicts;

    if (op.sigma_v == 0.0 && op.coupling_noise() == 0.0) {
        // Noise-free system with an exact fit: every residual, gradient, and
        // trace is identically zero, so the identities hold trivially.
        const FitParams exact = FitParams::from_truth(op);
        RngStream rng(mix_seed(seed, 1));
        double worst = 0.0;
        for (int k = 0; k < 100; ++k) {
            const SampleWindow w = sample_window(op, rng);
            const ResidualDecomposition d = decompose(op, exact, w.x);
            for (std::size_t i = 0; i < op.D; ++i) {
                const Tensor agg = d.aggregate(i);
                for (double v : agg.values()) worst = std::max(worst, std::abs(v));
            }
        }
        verdicts.push_back({"noise_free_residuals_zero", worst, 0.0, worst == 0.0});
        verdicts.push_back({"cov_additivity", 0.0, 0.0, true});
        verdicts.push_back({"law_identity", 0.0, 0.0, true});
    } else {
        std::size_t channel = 0;
        if (!op.off_diag.empty()) channel = op.off_diag.front().dst;

        // Bias, exact cross maps: contamination vanishes in every bin.
        FitParams clean = FitParams::from_truth(op);
        for (double& v : clean.at(channel, channel).values()) v += 0.1;
        const BiasReport zero = bias_estimate(op, clean, channel, 20000, seed);
        double worst = 0.0, worst_se = 0.0;
        bool all_within = true;
        for (const BiasBin& b : zero.bins) {
            worst = std::max(worst, std::abs(b.mean));
            worst_se = std::max(worst_se, b.se);
            if (std::abs(b.mean) > std::max(3.0 * b.se, 1e-12)) all_within = false;
        }
        verdicts.push_back({"bias_zero_when_exact", worst, worst_se, all_within});

        // Bias, dropped cross maps: the extreme deciles must light up —
        // only meaningful when the operator has cross structure to drop.
        if (!op.off_diag.empty()) {
            FitParams miss = FitParams::from_truth(op);
            for (std::size_t j = 0; j < op.D; ++j)
                if (j != channel)
                    miss.at(channel, j) = Tensor::zeros(Shape{op.L, op.H});
            const BiasReport biased = bias_estimate(op, miss, channel, 20000, seed);
            const BiasBin& lo = biased.bins.front();
            const BiasBin& hi = biased.bins.back();
            const double ratio =
                std::min(std::abs(lo.mean) / std::max(lo.se, 1e-30),
                         std::abs(hi.mean) / std::max(hi.se, 1e-30));
            verdicts.push_back({"bias_detected_when_dropped", ratio, 1.0, ratio > 5.0});
        }

        // Covariance decomposition in a contamination-dominated regime:
        // pilot-estimate the two traces, then rescale the cross-map error so
        // the contamination trace sits near nine times the true-gradient
        // trace.
        FitParams cov_fit = FitParams::from_truth(op);
        for (double& v : cov_fit.at(channel, channel).values()) v += 0.1;
        if (!op.off_diag.empty()) {
            for (std::size_t j = 0; j < op.D; ++j)
                if (j != channel)
                    cov_fit.at(channel, j) = Tensor::zeros(Shape{op.L, op.H});
            const CovarianceReport pilot =
                covariance_decomposition_check(op, cov_fit, channel, 4000, seed + 1);
            if (pilot.sigma_minus.value > 0.0) {
                const double s =
                    3.0 * std::sqrt(pilot.sigma_ii.value / pilot.sigma_minus.value);
                for (std::size_t j = 0; j < op.D; ++j) {
                    if (j == channel) continue;
                    const Tensor truth = op.map(channel, j);
                    Tensor& w = cov_fit.at(channel, j);
                    for (std::size_t c = 0; c < w.size(); ++c)
                        w[c] = (1.0 - s) * truth[c];
                }
            }
        }
        const CovarianceReport cov =
            covariance_decomposition_check(op, cov_fit, channel, 100000, seed + 2);
        verdicts.push_back(
            {"cov_additivity", cov.additivity_rel, cov.total.se, cov.additivity_ok});
        verdicts.push_back({"cov_cauchy_schwarz", cov.cross.value, cov.cross.se,
                            cov.cauchy_schwarz_ok});
        verdicts.push_back({"cov_mixed_dominates",
                            cov.total.value - cov.sigma_ii.value, cov.total.se,
                            cov.regime_holds ? cov.dominance_ok : true});

        // Law of total covariance over a joint trajectory.
        const TotalCovarianceReport law =
            total_covariance_law_check(op, channel, 16, 6000, seed + 3);
        verdicts.push_back({"law_identity", law.identity_rel, law.total.se,
                            law.identity_ok});
        verdicts.push_back({"law_within_le_total",
                            law.within.value - law.total.value, law.within.se,
                            law.within_le_total});
        verdicts.push_back({"law_between_positive", law.between.value, law.between.se,
                            law.between_positive});
    }

    bool all_pass = true;
    for (const cd::Verdict& v : verdicts) {
        std::printf("%-28s estimate %12.6g  se %10.4g  %s\n", v.check.c_str(),
                    v.estimate, v.se, v.pass ? "pass" : "FAIL");
        all_pass = all_pass && v.pass;
    }

    std::filesystem::create_directories(opts.out_dir);
    const std::filesystem::path dir(opts.out_dir);
    cd::write_verdicts(verdicts, (dir / "verdicts.csv").string());
    RunManifest manifest;
    manifest.command = "synth-verify";
    manifest.data_path = opts.config_path;
    manifest.data_checksum = cd::file_checksum(opts.config_path);
    manifest.seed = seed;
    manifest.mode = "synth-verify";
    manifest.config["D"] = std::to_string(op.D);
    manifest.config["L"] = std::to_string(op.L);
    manifest.config["H"] = std::to_string(op.H);
    manifest.config["T"] = std::to_string(spec.T);
    write_manifest(manifest, (dir / "manifest.txt").string());
    return all_pass ? 0 : 4;
}

inline int run_cli(int argc, char** argv) {
    try {
        if (argc >= 2 &&
            (std::string(argv[1]) == "--help" || std::string(argv[1]) == "help")) {
            std::printf("%s", cli_detail::kUsage);
            return 0;
        }
        const CliOptions opts = cli_detail::parse_args(argc, argv);
        if (opts.subcommand == "train") return cmd_train(opts);
        if (opts.subcommand == "evaluate") return cmd_evaluate(opts);
        if (opts.subcommand == "ablate") return cmd_ablate(opts);
        if (opts.subcommand == "diagnose-gradvar") return cmd_diagnose_gradvar(opts);
        if (opts.subcommand == "synth-verify") return cmd_synth_verify(opts);
        throw ConfigError("unknown subcommand '" + opts.subcommand + "'");
    } catch (const ConfigError& e) {
        std::fprintf(stderr, "error: %s\n%s", e.what(), cli_detail::kUsage);
        return 1;
    } catch (const InsufficientSamples& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return 1;
    } catch (const NonFiniteLoss& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return 3;
    } catch (const NonFiniteValue& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return 3;
    } catch (const DegenerateTrajectory& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return 4;
    } catch (const Error& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return 2;
    } catch (const std::exception& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return 1;
    }
}

}  // namespace altcast
