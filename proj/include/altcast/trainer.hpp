#pragma once

#include <chrono>
#include <cmath>
#include <functional>
#include <limits>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "altcast/data.hpp"
#include "altcast/diagnostics.hpp"
#include "altcast/errors.hpp"
#include "altcast/model.hpp"
#include "altcast/optim.hpp"
#include "altcast/rng.hpp"

namespace altcast {

enum class TrainMode { Alternating, Joint };
enum class AoGranularity { MiniBatch, InnerEpoch };

struct TrainConfig {
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
    AoGranularity granularity = AoGranularity::MiniBatch;
    std::size_t k_var = 32;
    bool gradvar_steps = false;   // also record per-update variance rows
    bool early_stopping = true;

    void validate() const {
        if (n_ar < 1 || n_cr < 1)
            throw ConfigError("alternating schedule needs n_ar >= 1 and n_cr >= 1");
        if (lr_ar <= 0.0 || lr_cr <= 0.0) throw ConfigError("learning rates must be positive");
        if (lambda_ar < 0.0 || lambda_cr < 0.0)
            throw ConfigError("penalty weights must be non-negative");
        if (batch < 1 || epochs < 1 || patience < 1)
            throw ConfigError("batch, epochs, and patience must be at least 1");
        if (k_var < 2) throw ConfigError("k_var must be at least 2");
    }
};

struct EpochReport {
    std::size_t epoch = 0;  // 1-based
    double train_loss = 0.0;
    double val_mse = 0.0;
    double val_mae = 0.0;
    double ar_log_variance = std::numeric_limits<double>::quiet_NaN();
    double cr_log_variance = std::numeric_limits<double>::quiet_NaN();
    double wall_seconds = 0.0;
};

struct TrainResult {
    ParamStore best_params;
    std::size_t best_epoch = 0;  // 1-based
    double best_val_mse = std::numeric_limits<double>::infinity();
    std::vector<EpochReport> history;
    std::vector<VarianceRecord> variance_epochs;
    std::vector<VarianceRecord> variance_steps;
};

struct StepEvent {
    Branch branch = Branch::Ar;
    std::size_t epoch = 0;   // 1-based
    std::size_t cycle = 0;   // mini-batch (or inner-epoch pass) counter within the epoch
    std::size_t step_in_phase = 0;
};
using StepObserver = std::function<void(const StepEvent&)>;

struct Metrics {
    double mse = 0.0;
    double mae = 0.0;
};

// Mean squared / absolute error over every window, channel, and horizon step
// of the segment, in the space the segment is expressed in.
inline Metrics evaluate_model(const DualPathModel& m, const Tensor& segment,
                              std::size_t eval_batch = 256) {
    const std::size_t L = m.cfg.lookback, H = m.cfg.horizon;
    if (segment.rank() != 2 || segment.rows() < L + H)
        throw EmptyTestSet("segment of " + std::to_string(segment.rows()) +
                           " rows yields no evaluation window");
    const WindowSet ws(segment, L, H);
    double se = 0.0, ae = 0.0;
    std::size_t entries = 0;
    for (std::size_t done = 0; done < ws.count(); done += eval_batch) {
        const std::size_t take = std::min(eval_batch, ws.count() - done);
        std::vector<std::size_t> starts(take);
        for (std::size_t i = 0; i < take; ++i) starts[i] = ws.start(done + i);
        const BatchData b = prepare_batch(segment, starts, L, H);
        const EvalResult r = evaluate_batch(m, b);
        const std::size_t n = r.y_hat.size();
        se += r.mse * static_cast<double>(n);
        ae += r.mae * static_cast<double>(n);
        entries += n;
    }
    return {se / static_cast<double>(entries), ae / static_cast<double>(entries)};
}

// Owns the optimizer states and the update schedule. Alternating mode runs
// n_ar AR steps (cross-relation branch frozen: its parameters, buffers, and
// cached output untouched), then n_cr CR steps with the AR side frozen; the
// AR phase always comes first. Joint mode advances one optimizer over all
// parameters every batch.
class Trainer {
public:
    Trainer(DualPathModel& model, const Tensor& train_seg, const Tensor& val_seg,
            TrainConfig cfg)
        : model_(model),
          train_seg_(train_seg),
          val_seg_(val_seg),
          cfg_(cfg),
          ar_opt_({.lr = cfg.lr_ar}),
          cr_opt_({.lr = cfg.lr_cr}),
          joint_opt_({.lr = cfg.lr_ar}) {
        cfg_.validate();
        if (cfg_.mode == TrainMode::Joint) {
            joint_opt_.register_params(model_.params);
        } else {
            ar_opt_.register_params(model_.params, "ar.");
            cr_opt_.register_params(model_.params, "cr.");
        }
        ar_tracker_.emplace(model_.params, "ar.", cfg_.k_var);
        if (model_.cfg.cr_enabled()) cr_tracker_.emplace(model_.params, "cr.", cfg_.k_var);
    }

    void set_step_observer(StepObserver obs) { observer_ = std::move(obs); }

    const AmsGrad& ar_optimizer() const { return ar_opt_; }
    const AmsGrad& cr_optimizer() const { return cr_opt_; }
    const AmsGrad& joint_optimizer() const { return joint_opt_; }
    const DualPathModel& model() const { return model_; }

    TrainResult run() {
        const std::size_t L = model_.cfg.lookback, H = model_.cfg.horizon;
        const WindowSet train_ws(train_seg_, L, H);
        std::vector<std::size_t> starts(train_ws.count());
        for (std::size_t i = 0; i < starts.size(); ++i) starts[i] = train_ws.start(i);

        TrainResult result;
        std::size_t bad_epochs = 0;
        for (std::size_t epoch = 1; epoch <= cfg_.epochs; ++epoch) {
            const auto t0 = std::chrono::steady_clock::now();
            RngStream shuffle_rng(mix_seed(cfg_.seed, epoch));
            shuffle_rng.shuffle(starts);

            double loss_sum = 0.0;
            std::size_t loss_count = 0;
            try {
                run_epoch(epoch, starts, loss_sum, loss_count, result);
            } catch (const NonFiniteValue& e) {
                throw NonFiniteLoss("epoch " + std::to_string(epoch) + ": " + e.what());
            }

            EpochReport rep;
            rep.epoch = epoch;
            rep.train_loss = loss_count ? loss_sum / static_cast<double>(loss_count) : 0.0;
            if (!std::isfinite(rep.train_loss))
                throw NonFiniteLoss("epoch " + std::to_string(epoch) +
                                    ": mean train loss is not finite");
            const Metrics val = evaluate_model(model_, val_seg_);
            rep.val_mse = val.mse;
            rep.val_mae = val.mae;
            record_epoch_variance(epoch, rep, result);
            rep.wall_seconds =
                std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
            result.history.push_back(rep);

            if (rep.val_mse < result.best_val_mse) {
                result.best_val_mse = rep.val_mse;
                result.best_epoch = epoch;
                result.best_params = model_.params;
                bad_epochs = 0;
            } else {
                ++bad_epochs;
                if (cfg_.early_stopping && bad_epochs >= cfg_.patience) break;
            }
        }
        return result;
    }

private:
    DualPathModel& model_;
    const Tensor& train_seg_;
    const Tensor& val_seg_;
    TrainConfig cfg_;
    AmsGrad ar_opt_, cr_opt_, joint_opt_;
    std::optional<RollingVarTracker> ar_tracker_, cr_tracker_;
    StepObserver observer_;
    std::size_t global_step_ = 0;

    const char* mode_name() const {
        return cfg_.mode == TrainMode::Joint ? "joint" : "alternating";
    }

    void notify(Branch branch, std::size_t epoch, std::size_t cycle, std::size_t step) {
        if (observer_) observer_(StepEvent{branch, epoch, cycle, step});
    }

    void record_step_variance(const RollingVarTracker& tr, TrainResult& out) {
        if (!cfg_.gradvar_steps || !tr.ready()) return;
        out.variance_steps.push_back(
            {global_step_, tr.prefix() == "ar." ? "ar" : "cr", mode_name(),
             tr.log_variance()});
    }

    void record_epoch_variance(std::size_t epoch, EpochReport& rep, TrainResult& out) {
        if (ar_tracker_ && ar_tracker_->ready()) {
            rep.ar_log_variance = ar_tracker_->log_variance();
            out.variance_epochs.push_back({epoch, "ar", mode_name(), rep.ar_log_variance});
        }
        if (cr_tracker_ && cr_tracker_->ready()) {
            rep.cr_log_variance = cr_tracker_->log_variance();
            out.variance_epochs.push_back({epoch, "cr", mode_name(), rep.cr_log_variance});
        }
    }

    // One optimizer step for one branch on one prepared batch. Returns the
    // total loss at the evaluated point.
    double branch_step(Branch branch, const BatchData& bd, const Tensor* cached,
                       TrainResult& out) {
        Tape tape;
        const GraphRefs g = build_training_graph(tape, model_, bd, branch, cached,
                                                 cfg_.lambda_ar, cfg_.lambda_cr);
        const GradientSet grads = tape.backward(g.loss, g.leaves);
        const double loss = tape.value(g.loss).scalar_value();
        ++global_step_;
        switch (branch) {
            case Branch::Ar:
                ar_opt_.step(model_.params, grads.grads);
                ar_tracker_->update(grads.grads);
                record_step_variance(*ar_tracker_, out);
                break;
            case Branch::Cr:
                cr_opt_.step(model_.params, grads.grads);
                cr_tracker_->update(grads.grads);
                record_step_variance(*cr_tracker_, out);
                break;
            case Branch::Both: {
                joint_opt_.step(model_.params, grads.grads);
                std::map<std::string, Tensor> ar_slice, cr_slice;
                for (const auto& [name, grad] : grads.grads)
                    (name.rfind("ar.", 0) == 0 ? ar_slice : cr_slice)[name] = grad;
                ar_tracker_->update(ar_slice);
                record_step_variance(*ar_tracker_, out);
                if (cr_tracker_) {
                    cr_tracker_->update(cr_slice);
                    record_step_variance(*cr_tracker_, out);
                }
                break;
            }
        }
        return loss;
    }

    void for_each_batch(const std::vector<std::size_t>& starts,
                        const std::function<void(const BatchData&)>& fn) {
        for (std::size_t done = 0; done < starts.size(); done += cfg_.batch) {
            const std::size_t take = std::min(cfg_.batch, starts.size() - done);
            const std::vector<std::size_t> chunk(starts.begin() + done,
                                                 starts.begin() + done + take);
            fn(prepare_batch(train_seg_, chunk, model_.cfg.lookback, model_.cfg.horizon));
        }
    }

    void run_epoch(std::size_t epoch, const std::vector<std::size_t>& starts,
                   double& loss_sum, std::size_t& loss_count, TrainResult& out) {
        const bool cr_active = model_.cfg.cr_enabled();
        if (cfg_.mode == TrainMode::Joint) {
            std::size_t cycle = 0;
            for_each_batch(starts, [&](const BatchData& bd) {
                notify(Branch::Both, epoch, cycle, 0);
                loss_sum += branch_step(Branch::Both, bd, nullptr, out);
                ++loss_count;
                ++cycle;
            });
            return;
        }
        if (cfg_.granularity == AoGranularity::MiniBatch) {
            std::size_t cycle = 0;
            for_each_batch(starts, [&](const BatchData& bd) {
                const Tensor cached_cr = cr_norm_output(model_, bd);
                double last = 0.0;
                for (std::size_t s = 0; s < cfg_.n_ar; ++s) {
                    notify(Branch::Ar, epoch, cycle, s);
                    last = branch_step(Branch::Ar, bd, &cached_cr, out);
                }
                if (cr_active) {
                    const Tensor cached_ar = ar_norm_output(model_, bd);
                    for (std::size_t s = 0; s < cfg_.n_cr; ++s) {
                        notify(Branch::Cr, epoch, cycle, s);
                        last = branch_step(Branch::Cr, bd, &cached_ar, out);
                    }
                }
                loss_sum += last;
                ++loss_count;
                ++cycle;
            });
            return;
        }
        // Inner-epoch granularity: n_ar full passes over the training set
        // updating AR only, then n_cr full CR passes.
        std::size_t cycle = 0;
        for (std::size_t rep = 0; rep < cfg_.n_ar; ++rep, ++cycle) {
            for_each_batch(starts, [&](const BatchData& bd) {
                const Tensor cached_cr = cr_norm_output(model_, bd);
                notify(Branch::Ar, epoch, cycle, 0);
                loss_sum += branch_step(Branch::Ar, bd, &cached_cr, out);
                ++loss_count;
            });
        }
        if (cr_active) {
            for (std::size_t rep = 0; rep < cfg_.n_cr; ++rep, ++cycle) {
                for_each_batch(starts, [&](const BatchData& bd) {
                    const Tensor cached_ar = ar_norm_output(model_, bd);
                    notify(Branch::Cr, epoch, cycle, 0);
                    loss_sum += branch_step(Branch::Cr, bd, &cached_ar, out);
                    ++loss_count;
                });
            }
        }
    }
};

}  // namespace altcast
