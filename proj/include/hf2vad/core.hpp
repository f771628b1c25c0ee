#pragma once

// Common error types and deterministic RNG shared across the library.

#include <cmath>
#include <cstdint>
#include <stdexcept>
#include <string>
#include <utility>

namespace hf2vad {

struct Error : std::runtime_error {
    explicit Error(const std::string& msg) : std::runtime_error(msg) {}
};

// Malformed file contents (bad magic, version, dtype).
struct FormatError : Error {
    using Error::Error;
};
// File shorter than its header promises.
struct CorruptionError : Error {
    using Error::Error;
};
// Inconsistent or missing dataset pieces (manifest, flow files, labels).
struct DatasetError : Error {
    using Error::Error;
};
// Invalid configuration (variant/level mismatch, even smoothing window, ...).
struct ConfigError : Error {
    using Error::Error;
};
// Tensor shape mismatch between operands.
struct ShapeError : Error {
    using Error::Error;
};
// Non-finite or otherwise invalid numeric input.
struct ValueError : Error {
    using Error::Error;
};
// Degenerate statistics (zero variance) or undefined metrics (one-class AUROC).
struct StatsError : Error {
    using Error::Error;
};

// Deterministic RNG. std::mt19937_64 has a standardized output sequence; the
// distributions below are hand-rolled so streams are identical across
// platforms and standard library implementations.
class Rng {
public:
    explicit Rng(uint64_t seed) : state_(seed) {
        // splitmix64 warmup decorrelates small seeds
        next_u64();
        next_u64();
    }

    uint64_t next_u64() {
        uint64_t z = (state_ += 0x9e3779b97f4a7c15ull);
        z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
        z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
        return z ^ (z >> 31);
    }

    // uniform in [0,1) with 24 bits of mantissa
    float uniform() { return static_cast<float>(next_u64() >> 40) * 0x1.0p-24f; }

    float uniform(float lo, float hi) { return lo + (hi - lo) * uniform(); }

    // standard normal via Box-Muller, one value per call (no caching so that
    // interleaved consumers stay reproducible)
    float normal() {
        float u1 = 0.0f;
        while (u1 <= 0.0f) u1 = uniform();
        float u2 = uniform();
        double r = std::sqrt(-2.0 * std::log(static_cast<double>(u1)));
        return static_cast<float>(r * std::cos(2.0 * 3.14159265358979323846 * u2));
    }

    float normal(float mean, float sd) { return mean + sd * normal(); }

    // unbiased integer in [0, n)
    uint64_t index(uint64_t n) {
        if (n == 0) throw ValueError("Rng::index: n must be positive");
        uint64_t mask = ~0ull >> __builtin_clzll(n | 1);
        uint64_t v;
        do {
            v = next_u64() & mask;
        } while (v >= n);
        return v;
    }

    // derived stream, independent of this one for distinct keys
    Rng fork(uint64_t key) const {
        Rng child(state_ ^ (0xd1342543de82ef95ull * (key + 0x632be59bd9b4e019ull)));
        return child;
    }

private:
    uint64_t state_;
};

template <typename It>
void shuffle(It first, It last, Rng& rng) {
    auto n = static_cast<uint64_t>(last - first);
    for (uint64_t i = n; i > 1; --i) {
        std::swap(first[i - 1], first[rng.index(i)]);
    }
}

}  // namespace hf2vad
