#pragma once

#include <cmath>
#include <map>
#include <string>

#include "altcast/checksum.hpp"
#include "altcast/errors.hpp"
#include "altcast/params.hpp"
#include "altcast/tensor.hpp"

namespace altcast {

struct AmsGradConfig {
    double lr = 1e-3;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
};

// Adam with a running elementwise maximum of the second-moment estimate, so
// per-coordinate effective step sizes never grow. Bias correction retained.
class AmsGrad {
public:
    struct Slot {
        Tensor m, v, vhat;
    };

    explicit AmsGrad(AmsGradConfig cfg = {}) : cfg_(cfg) {}

    void register_params(const ParamStore& params, const std::string& prefix = "") {
        for (const std::string& name : params.names(prefix))
            slots_.emplace(name, Slot{Tensor::zeros(params.value(name).shape()),
                                      Tensor::zeros(params.value(name).shape()),
                                      Tensor::zeros(params.value(name).shape())});
    }

    // One applied step over the provided gradients; the step counter advances
    // once per call.
    void step(ParamStore& params, const std::map<std::string, Tensor>& grads) {
        ++t_;
        const double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(t_));
        const double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(t_));
        for (const auto& [name, g] : grads) {
            const auto it = slots_.find(name);
            if (it == slots_.end())
                throw MissingState("no moment buffers for parameter '" + name + "'");
            Slot& s = it->second;
            Tensor& theta = params.value(name);
            if (!g.same_shape(theta))
                throw ShapeMismatch("gradient shape " + shape_str(g.shape()) +
                                    " for parameter '" + name + "' of shape " +
                                    shape_str(theta.shape()));
            for (std::size_t i = 0; i < g.size(); ++i) {
                s.m[i] = cfg_.beta1 * s.m[i] + (1.0 - cfg_.beta1) * g[i];
                s.v[i] = cfg_.beta2 * s.v[i] + (1.0 - cfg_.beta2) * g[i] * g[i];
                if (s.v[i] > s.vhat[i]) s.vhat[i] = s.v[i];
                const double mhat = s.m[i] / bc1;
                const double vhat_c = s.vhat[i] / bc2;
                theta[i] -= cfg_.lr * mhat / (std::sqrt(vhat_c) + cfg_.eps);
            }
        }
    }

    long step_count() const { return t_; }
    const AmsGradConfig& config() const { return cfg_; }

    const Slot& slot(const std::string& name) const {
        const auto it = slots_.find(name);
        if (it == slots_.end())
            throw MissingState("no moment buffers for parameter '" + name + "'");
        return it->second;
    }

    bool has_slot(const std::string& name) const { return slots_.count(name) != 0; }

    // Covers buffers and the step counter; freeze checks compare this.
    std::uint64_t state_checksum() const {
        std::uint64_t h = fnv1a(&t_, sizeof(t_));
        for (const auto& [name, s] : slots_) {
            h = fnv1a(name, h);
            h = checksum(s.m, h);
            h = checksum(s.v, h);
            h = checksum(s.vhat, h);
        }
        return h;
    }

private:
    AmsGradConfig cfg_;
    std::map<std::string, Slot> slots_;
    long t_ = 0;
};

}  // namespace altcast
