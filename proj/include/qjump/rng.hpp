#pragma once

#include <cstdint>
#include <limits>

namespace qjump {

/// Counter-based random stream. Output k of a stream is a fixed bijective
/// mix of (key + (k+1) * gamma), so a stream is fully determined by its key
/// and position, and stream i of a master seed never depends on how many
/// other streams were drawn before it.
class RandomStream {
public:
    using result_type = std::uint64_t;

    explicit RandomStream(std::uint64_t key) : key_(key) {}

    /// Stream `index` derived from `master_seed`.
    static RandomStream derive(std::uint64_t master_seed, std::uint64_t index) {
        return RandomStream(mix(mix(master_seed) ^ mix(index * kGamma + 0x243F6A8885A308D3ull)));
    }

    static constexpr result_type min() { return 0; }
    static constexpr result_type max() { return std::numeric_limits<result_type>::max(); }

    result_type operator()() {
        ++counter_;
        return mix(key_ + counter_ * kGamma);
    }

    /// Uniform double in the open interval (0, 1).
    double uniform() { return (static_cast<double>((*this)() >> 11) + 0.5) * 0x1.0p-53; }

    std::uint64_t key() const { return key_; }
    std::uint64_t position() const { return counter_; }

private:
    static constexpr std::uint64_t kGamma = 0x9E3779B97F4A7C15ull;

    static constexpr std::uint64_t mix(std::uint64_t z) {
        z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ull;
        z = (z ^ (z >> 27)) * 0x94D049BB133111EBull;
        return z ^ (z >> 31);
    }

    std::uint64_t key_;
    std::uint64_t counter_ = 0;
};

}  // namespace qjump
