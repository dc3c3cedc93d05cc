#pragma once

#include <cmath>
#include <cstdio>
#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "altcast/errors.hpp"
#include "altcast/params.hpp"
#include "altcast/tensor.hpp"

namespace altcast {

constexpr double kVarianceFloor = 1e-30;

// Rolling window of the last K gradient values for every scalar parameter of
// one branch. Variance is recomputed from the buffered window on demand, so
// the reported number is exactly the sample variance of what is stored.
class RollingVarTracker {
public:
    RollingVarTracker(const ParamStore& params, const std::string& prefix, std::size_t k)
        : prefix_(prefix), k_(k) {
        if (k < 2) throw ConfigError("variance window must hold at least 2 updates");
        for (const std::string& name : params.names(prefix)) {
            tracked_.push_back({name, params.value(name).size()});
            total_ += params.value(name).size();
        }
        ring_.assign(total_ * k_, 0.0);
    }

    // One applied optimizer step for this branch. The snapshot must cover the
    // tracked parameter set exactly.
    void update(const std::map<std::string, Tensor>& grads) {
        if (grads.size() != tracked_.size())
            throw ShapeMismatch("snapshot has " + std::to_string(grads.size()) +
                                " tensors, tracker covers " +
                                std::to_string(tracked_.size()));
        const std::size_t slot = updates_ % k_;
        std::size_t offset = 0;
        for (const auto& [name, size] : tracked_) {
            const auto it = grads.find(name);
            if (it == grads.end() || it->second.size() != size)
                throw ShapeMismatch("snapshot does not match tracked parameter '" + name +
                                    "'");
            const Tensor& g = it->second;
            for (std::size_t i = 0; i < size; ++i)
                ring_[(offset + i) * k_ + slot] = g[i];
            offset += size;
        }
        ++updates_;
    }

    std::size_t updates() const { return updates_; }
    std::size_t window() const { return k_; }
    std::size_t parameter_count() const { return total_; }
    bool ready() const { return updates_ >= 2; }
    const std::string& prefix() const { return prefix_; }

    // Unbiased sample variance per parameter, summed across the branch.
    double total_variance() const {
        const std::size_t n = std::min(updates_, k_);
        if (n < 2)
            throw WindowTooShort("variance needs at least 2 recorded updates, have " +
                                 std::to_string(n));
        double sum = 0.0;
        for (std::size_t p = 0; p < total_; ++p) {
            const double* buf = ring_.data() + p * k_;
            double mean = 0.0;
            for (std::size_t i = 0; i < n; ++i) mean += buf[i];
            mean /= static_cast<double>(n);
            double acc = 0.0;
            for (std::size_t i = 0; i < n; ++i) {
                const double d = buf[i] - mean;
                acc += d * d;
            }
            sum += acc / static_cast<double>(n - 1);
        }
        return sum;
    }

    double log_variance() const {
        return std::log(std::max(total_variance(), kVarianceFloor));
    }

private:
    std::string prefix_;
    std::size_t k_;
    std::vector<std::pair<std::string, std::size_t>> tracked_;
    std::size_t total_ = 0;
    std::vector<double> ring_;  // per parameter: k_ consecutive slots
    std::size_t updates_ = 0;
};

struct VarianceRecord {
    std::size_t step_or_epoch = 0;
    std::string branch;  // "ar" | "cr"
    std::string mode;    // "alternating" | "joint"
    double log_variance = 0.0;
};

inline void export_variance_series(const std::vector<VarianceRecord>& history,
                                   const std::string& path) {
    if (history.empty()) throw Error("no variance history to export");
    std::ofstream out(path, std::ios::trunc);
    if (!out) throw IoError("cannot write '" + path + "'");
    out << "step_or_epoch,branch,mode,log_variance\n";
    char buf[64];
    for (const VarianceRecord& r : history) {
        std::snprintf(buf, sizeof(buf), "%.17g", r.log_variance);
        out << r.step_or_epoch << ',' << r.branch << ',' << r.mode << ',' << buf << '\n';
    }
    if (!out) throw IoError("short write to '" + path + "'");
}

inline std::vector<VarianceRecord> load_variance_series(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw FileNotFound("cannot open '" + path + "'");
    std::vector<VarianceRecord> out;
    std::string line;
    std::getline(in, line);  // header
    while (std::getline(in, line)) {
        if (line.empty()) continue;
        VarianceRecord r;
        std::istringstream ss(line);
        std::string cell;
        std::getline(ss, cell, ',');
        r.step_or_epoch = std::stoul(cell);
        std::getline(ss, r.branch, ',');
        std::getline(ss, r.mode, ',');
        std::getline(ss, cell, ',');
        r.log_variance = std::stod(cell);
        out.push_back(std::move(r));
    }
    return out;
}

}  // namespace altcast
