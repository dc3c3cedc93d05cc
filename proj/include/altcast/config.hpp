#pragma once

#include <cmath>
#include <filesystem>
#include <fstream>
#include <map>
#include <string>

#include "altcast/data.hpp"
#include "altcast/errors.hpp"
#include "altcast/model.hpp"
#include "altcast/trainer.hpp"

namespace altcast {

// Resolved run configuration: one flat key=value file drives every
// subcommand. Defaults match the library defaults so a minimal file only
// needs `data=`.
struct RunConfig {
    std::string data;  // .csv file or synthetic operator spec
    SplitRatio ratio{7, 1, 2};
    std::size_t lookback = 512;
    std::size_t horizon = 96;
    TrainMode mode = TrainMode::Alternating;
    std::size_t n_ar = 10;
    std::size_t n_cr = 2;
    double lr_ar = 5e-3;
    double lr_cr = 1e-4;
    double lambda_ar = 0.0;
    double lambda_cr = 0.0;
    std::size_t batch = 32;
    std::size_t epochs = 30;
    std::size_t patience = 5;
    std::uint64_t seed = 0;
    std::size_t d_model = 128;
    std::size_t heads = 8;
    std::size_t layers = 2;
    std::size_t d_ff = 256;
    AoGranularity granularity = AoGranularity::MiniBatch;
    std::size_t k_var = 32;
    bool gradvar_steps = false;

    ModelConfig model_config(std::size_t channels) const {
        ModelConfig m;
        m.channels = channels;
        m.lookback = lookback;
        m.horizon = horizon;
        m.d_model = d_model;
        m.heads = heads;
        m.layers = layers;
        m.d_ff = d_ff;
        return m;
    }

    TrainConfig train_config() const {
        TrainConfig t;
        t.mode = mode;
        t.n_ar = n_ar;
        t.n_cr = n_cr;
        t.lr_ar = lr_ar;
        t.lr_cr = lr_cr;
        t.lambda_ar = lambda_ar;
        t.lambda_cr = lambda_cr;
        t.batch = batch;
        t.epochs = epochs;
        t.patience = patience;
        t.seed = seed;
        t.granularity = granularity;
        t.k_var = k_var;
        t.gradvar_steps = gradvar_steps;
        return t;
    }

    // Every resolved key, for the manifest. Keeps insertion-independent
    // (sorted) order.
    std::map<std::string, std::string> resolved() const {
        const auto num = [](double v) {
            char buf[32];
            std::snprintf(buf, sizeof buf, "%.17g", v);
            return std::string(buf);
        };
        std::map<std::string, std::string> out;
        out["data"] = data;
        out["ratio"] = num(ratio.train) + ":" + num(ratio.val) + ":" + num(ratio.test);
        out["lookback"] = std::to_string(lookback);
        out["horizon"] = std::to_string(horizon);
        out["mode"] = mode == TrainMode::Alternating ? "alternating" : "joint";
        out["n_ar"] = std::to_string(n_ar);
        out["n_cr"] = std::to_string(n_cr);
        out["lr_ar"] = num(lr_ar);
        out["lr_cr"] = num(lr_cr);
        out["lambda_ar"] = num(lambda_ar);
        out["lambda_cr"] = num(lambda_cr);
        out["batch"] = std::to_string(batch);
        out["epochs"] = std::to_string(epochs);
        out["patience"] = std::to_string(patience);
        out["seed"] = std::to_string(seed);
        out["d_model"] = std::to_string(d_model);
        out["heads"] = std::to_string(heads);
        out["layers"] = std::to_string(layers);
        out["d_ff"] = std::to_string(d_ff);
        out["granularity"] =
            granularity == AoGranularity::MiniBatch ? "minibatch" : "inner_epoch";
        out["k_var"] = std::to_string(k_var);
        out["gradvar_steps"] = gradvar_steps ? "1" : "0";
        return out;
    }
};

namespace detail {

inline void apply_config_entry(RunConfig& cfg, const std::string& key,
                               const std::string& value, const std::string& where) {
    const auto fail = [&](const std::string& why) {
        throw ConfigError(where + ": " + why);
    };
    const auto as_size = [&]() -> std::size_t {
        double v = 0.0;
        if (!parse_double(value, v) || v < 0 || v != std::floor(v))
            fail("'" + value + "' is not a non-negative integer");
        return static_cast<std::size_t>(v);
    };
    const auto as_double = [&]() -> double {
        double v = 0.0;
        if (!parse_double(value, v)) fail("'" + value + "' is not a number");
        return v;
    };
    if (key == "data") cfg.data = value;
    else if (key == "ratio") cfg.ratio = SplitRatio::parse(value);
    else if (key == "lookback") cfg.lookback = as_size();
    else if (key == "horizon") cfg.horizon = as_size();
    else if (key == "mode") {
        if (value == "alternating") cfg.mode = TrainMode::Alternating;
        else if (value == "joint") cfg.mode = TrainMode::Joint;
        else fail("mode must be 'alternating' or 'joint', got '" + value + "'");
    } else if (key == "n_ar") cfg.n_ar = as_size();
    else if (key == "n_cr") cfg.n_cr = as_size();
    else if (key == "lr_ar") cfg.lr_ar = as_double();
    else if (key == "lr_cr") cfg.lr_cr = as_double();
    else if (key == "lambda_ar") cfg.lambda_ar = as_double();
    else if (key == "lambda_cr") cfg.lambda_cr = as_double();
    else if (key == "batch") cfg.batch = as_size();
    else if (key == "epochs") cfg.epochs = as_size();
    else if (key == "patience") cfg.patience = as_size();
    else if (key == "seed") cfg.seed = static_cast<std::uint64_t>(as_size());
    else if (key == "d_model") cfg.d_model = as_size();
    else if (key == "heads") cfg.heads = as_size();
    else if (key == "layers") cfg.layers = as_size();
    else if (key == "d_ff") cfg.d_ff = as_size();
    else if (key == "granularity") {
        if (value == "minibatch") cfg.granularity = AoGranularity::MiniBatch;
        else if (value == "inner_epoch") cfg.granularity = AoGranularity::InnerEpoch;
        else fail("granularity must be 'minibatch' or 'inner_epoch'");
    } else if (key == "k_var") cfg.k_var = as_size();
    else if (key == "gradvar_steps") {
        if (value == "0" || value == "false") cfg.gradvar_steps = false;
        else if (value == "1" || value == "true") cfg.gradvar_steps = true;
        else fail("gradvar_steps must be 0 or 1");
    } else {
        fail("unknown key '" + key + "'");
    }
}

}  // namespace detail

inline RunConfig parse_run_config(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw FileNotFound("cannot open config '" + path + "'");
    RunConfig cfg;
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        const std::size_t hash = line.find('#');
        if (hash != std::string::npos) line.erase(hash);
        const std::string_view trimmed = detail::trim(line);
        if (trimmed.empty()) continue;
        const std::string where = "config line " + std::to_string(lineno);
        const std::size_t eq = trimmed.find('=');
        if (eq == std::string_view::npos)
            throw ConfigError(where + ": expected key=value");
        const std::string key{detail::trim(trimmed.substr(0, eq))};
        const std::string value{detail::trim(trimmed.substr(eq + 1))};
        detail::apply_config_entry(cfg, key, value, where);
    }
    if (cfg.data.empty()) throw ConfigError("config must set 'data'");
    // Relative data paths resolve against the config file's directory, so a
    // config can name a sibling spec/CSV regardless of the caller's cwd.
    const std::filesystem::path dp(cfg.data);
    if (dp.is_relative()) {
        const std::filesystem::path base = std::filesystem::path(path).parent_path();
        if (!base.empty()) cfg.data = (base / dp).string();
    }
    return cfg;
}

}  // namespace altcast
