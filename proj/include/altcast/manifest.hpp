#pragma once

#include <fstream>
#include <map>
#include <string>

#include "altcast/checksum.hpp"
#include "altcast/config.hpp"
#include "altcast/errors.hpp"
#include "altcast/tensor.hpp"
#include "altcast/version.hpp"

namespace altcast {

// Provenance record written next to every output file. Deliberately contains
// nothing time- or host-dependent: identical inputs and seed must produce a
// byte-identical manifest.
struct RunManifest {
    std::string command;
    std::string data_path;
    std::size_t data_rows = 0;
    std::size_t data_cols = 0;
    std::uint64_t data_checksum = 0;
    std::map<std::string, std::string> config;  // resolved key=value pairs
    std::uint64_t seed = 0;
    std::string mode;

    static RunManifest build(const std::string& command, const RunConfig& cfg,
                             const Tensor& raw_values) {
        RunManifest m;
        m.command = command;
        m.data_path = cfg.data;
        m.data_rows = raw_values.rank() == 2 ? raw_values.rows() : 0;
        m.data_cols = raw_values.rank() == 2 ? raw_values.cols() : 0;
        m.data_checksum = checksum(raw_values);
        m.config = cfg.resolved();
        m.seed = cfg.seed;
        m.mode = m.config.at("mode");
        return m;
    }
};

inline void write_manifest(const RunManifest& m, const std::string& path) {
    std::ofstream out(path);
    if (!out) throw IoError("cannot write manifest '" + path + "'");
    out << "artifact_version=" << kVersion << "\n";
    out << "command=" << m.command << "\n";
    out << "seed=" << m.seed << "\n";
    out << "mode=" << m.mode << "\n";
    out << "data=" << m.data_path << "\n";
    out << "data_rows=" << m.data_rows << "\n";
    out << "data_cols=" << m.data_cols << "\n";
    out << "data_checksum=" << hex64(m.data_checksum) << "\n";
    for (const auto& [k, v] : m.config) out << "config." << k << "=" << v << "\n";
    if (!out) throw IoError("failed writing manifest '" + path + "'");
}

}  // namespace altcast
