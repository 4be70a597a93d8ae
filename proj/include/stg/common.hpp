#pragma once

#include <bit>
#include <cstdint>
#include <stdexcept>
#include <string>

namespace stg {

static_assert(std::endian::native == std::endian::little,
              "file and wire formats assume a little-endian host");

inline constexpr const char* kToolVersion = "0.1.0";

// Invalid configuration, bad CLI arguments, malformed config files.
struct ConfigError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// NaN/Inf or other numeric contract violations at runtime.
struct NumericError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// Corrupt or mismatched binary files (checkpoints, datasets).
struct FormatError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// Wire protocol violations between distributed roles.
struct ProtocolError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// FNV-1a over arbitrary bytes; used for config hashes and parameter hashes.
inline std::uint64_t fnv1a64(const void* data, std::size_t n,
                             std::uint64_t h = 1469598103934665603ull) {
    const auto* p = static_cast<const unsigned char*>(data);
    for (std::size_t i = 0; i < n; ++i) {
        h ^= p[i];
        h *= 1099511628211ull;
    }
    return h;
}

inline std::uint64_t fnv1a64(const std::string& s) {
    return fnv1a64(s.data(), s.size());
}

}  // namespace stg
