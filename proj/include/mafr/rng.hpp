#pragma once

#include <cmath>
#include <cstdint>
#include <random>

namespace mafr {

inline uint64_t splitmix64(uint64_t x) {
    x += 0x9e3779b97f4a7c15ull;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ull;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebull;
    return x ^ (x >> 31);
}

// All randomness in a run flows from one root seed. Streams are derived as
// root XOR role-constant; per-item streams additionally mix an index through
// splitmix64 so neighbouring indices decorrelate.
namespace seed_role {
constexpr uint64_t kSynthesis = 0x53594e5448ull;  // dataset generation
constexpr uint64_t kInit      = 0x494e4954ull;    // weight initialization
constexpr uint64_t kShuffle   = 0x5348464cull;    // per-epoch sample order
constexpr uint64_t kDropout   = 0x44524f50ull;    // dropout masks
constexpr uint64_t kFewShot   = 0x46535542ull;    // few-shot subsampling
constexpr uint64_t kGradCheck = 0x47434b31ull;    // gradcheck trial inputs
} // namespace seed_role

inline uint64_t derive_seed(uint64_t root, uint64_t role) {
    return root ^ role;
}

inline uint64_t mix_seed(uint64_t stream, uint64_t index) {
    return splitmix64(stream + 0x9e3779b97f4a7c15ull * (index + 1));
}

// Deterministic RNG: mt19937_64 is fully specified by the standard, and the
// uniform/normal transforms below are spelled out here instead of relying on
// std::*_distribution, whose output sequences are implementation-defined.
class Rng {
public:
    explicit Rng(uint64_t seed) : gen_(seed) {}

    uint64_t next_u64() { return gen_(); }

    // [0, 1)
    double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    // Unbiased integer in [0, n) via rejection sampling.
    uint64_t below(uint64_t n) {
        if (n == 0) return 0;
        const uint64_t limit = UINT64_MAX - UINT64_MAX % n;
        uint64_t x;
        do {
            x = next_u64();
        } while (x >= limit);
        return x % n;
    }

    // Standard normal via Box-Muller; the paired draw is cached.
    double normal() {
        if (have_spare_) {
            have_spare_ = false;
            return spare_;
        }
        const double u1 = 1.0 - uniform(); // (0, 1]
        const double u2 = uniform();
        const double r = std::sqrt(-2.0 * std::log(u1));
        const double theta = 6.283185307179586476925286766559 * u2;
        spare_ = r * std::sin(theta);
        have_spare_ = true;
        return r * std::cos(theta);
    }

private:
    std::mt19937_64 gen_;
    bool have_spare_ = false;
    double spare_ = 0.0;
};

} // namespace mafr
