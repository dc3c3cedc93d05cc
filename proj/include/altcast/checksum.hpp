#pragma once

#include <cstdint>
#include <cstring>
#include <string>

#include "altcast/tensor.hpp"

namespace altcast {

// FNV-1a over raw bytes; used for dataset fingerprints and determinism checks.
inline std::uint64_t fnv1a(const void* data, std::size_t len,
                           std::uint64_t seed = 0xcbf29ce484222325ull) {
    const auto* p = static_cast<const unsigned char*>(data);
    std::uint64_t h = seed;
    for (std::size_t i = 0; i < len; ++i) {
        h ^= p[i];
        h *= 0x100000001b3ull;
    }
    return h;
}

inline std::uint64_t fnv1a(const std::string& s,
                           std::uint64_t seed = 0xcbf29ce484222325ull) {
    return fnv1a(s.data(), s.size(), seed);
}

inline std::uint64_t checksum(const Tensor& t,
                              std::uint64_t seed = 0xcbf29ce484222325ull) {
    return fnv1a(t.data(), t.size() * sizeof(double), seed);
}

inline std::string hex64(std::uint64_t v) {
    static const char* digits = "0123456789abcdef";
    std::string out(16, '0');
    for (int i = 15; i >= 0; --i) {
        out[i] = digits[v & 0xf];
        v >>= 4;
    }
    return out;
}

}  // namespace altcast
