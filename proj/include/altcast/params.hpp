#pragma once

#include <map>
#include <string>
#include <vector>

#include "altcast/checksum.hpp"
#include "altcast/errors.hpp"
#include "altcast/tensor.hpp"

namespace altcast {

// Named trainable tensors. Names carry a branch prefix ("ar." / "cr.") so
// freeze masks, regularizers, and diagnostics can filter by prefix; map order
// fixes a deterministic iteration order everywhere.
class ParamStore {
public:
    struct Entry {
        Tensor value;
        bool penalized = false;  // included in the L1 weight penalty
    };

    void add(const std::string& name, Tensor value, bool penalized) {
        if (entries_.count(name)) throw Error("duplicate parameter '" + name + "'");
        entries_[name] = Entry{std::move(value), penalized};
    }

    bool has(const std::string& name) const { return entries_.count(name) != 0; }

    Tensor& value(const std::string& name) { return entry(name).value; }
    const Tensor& value(const std::string& name) const { return entry(name).value; }
    bool penalized(const std::string& name) const { return entry(name).penalized; }

    std::vector<std::string> names(const std::string& prefix = "") const {
        std::vector<std::string> out;
        for (const auto& [name, e] : entries_)
            if (name.rfind(prefix, 0) == 0) out.push_back(name);
        return out;
    }

    std::size_t scalar_count(const std::string& prefix = "") const {
        std::size_t n = 0;
        for (const auto& [name, e] : entries_)
            if (name.rfind(prefix, 0) == 0) n += e.value.size();
        return n;
    }

    std::uint64_t checksum_of(const std::string& prefix = "") const {
        std::uint64_t h = 0xcbf29ce484222325ull;
        for (const auto& [name, e] : entries_) {
            if (name.rfind(prefix, 0) != 0) continue;
            h = fnv1a(name, h);
            h = checksum(e.value, h);
        }
        return h;
    }

    bool operator==(const ParamStore& other) const {
        if (entries_.size() != other.entries_.size()) return false;
        for (const auto& [name, e] : entries_) {
            const auto it = other.entries_.find(name);
            if (it == other.entries_.end() || it->second.penalized != e.penalized ||
                !(it->second.value == e.value))
                return false;
        }
        return true;
    }

private:
    std::map<std::string, Entry> entries_;

    Entry& entry(const std::string& name) {
        const auto it = entries_.find(name);
        if (it == entries_.end()) throw Error("unknown parameter '" + name + "'");
        return it->second;
    }
    const Entry& entry(const std::string& name) const {
        const auto it = entries_.find(name);
        if (it == entries_.end()) throw Error("unknown parameter '" + name + "'");
        return it->second;
    }
};

}  // namespace altcast
