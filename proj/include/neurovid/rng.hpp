#pragma once

#include <cmath>
#include <cstdint>
#include <string_view>
#include <vector>

namespace neurovid {

// Deterministic, splittable RNG. Streams are derived from a root seed plus a
// chain of child keys, so per-sample / per-batch / per-trial draws are
// reproducible regardless of evaluation order. The generator is xoshiro256**
// seeded through splitmix64; normals come from Box-Muller on our own
// uniforms, which keeps byte-level determinism independent of the standard
// library's distribution implementations.
class Rng {
  public:
    explicit Rng(uint64_t seed = 0) {
        uint64_t x = seed;
        for (auto& word : s_) word = splitmix64(x);
    }

    // Derives an independent child stream; the parent is left untouched.
    Rng child(uint64_t key) const {
        uint64_t x = s_[0] ^ (0x9e3779b97f4a7c15ULL + key);
        x ^= s_[1] * 0xbf58476d1ce4e5b9ULL;
        x ^= s_[2] + (key << 17 | key >> 47);
        x ^= s_[3] * 0x94d049bb133111ebULL;
        return Rng(x ^ 0xa0761d6478bd642fULL);
    }

    Rng child(std::string_view name) const { return child(hash_name(name)); }

    uint64_t next_u64() {
        const uint64_t result = rotl(s_[1] * 5, 7) * 9;
        const uint64_t t = s_[1] << 17;
        s_[2] ^= s_[0];
        s_[3] ^= s_[1];
        s_[1] ^= s_[2];
        s_[0] ^= s_[3];
        s_[2] ^= t;
        s_[3] = rotl(s_[3], 45);
        return result;
    }

    // Uniform in [0, 1).
    double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    // Integer in [0, n).
    uint64_t below(uint64_t n) {
        // Multiply-shift; bias is negligible for n << 2^64.
        return static_cast<uint64_t>((static_cast<__uint128_t>(next_u64()) * n) >> 64);
    }

    // Standard normal via Box-Muller (cosine branch only; one spare uniform
    // is discarded to keep the stream position independent of call parity).
    double normal() {
        double u1;
        do {
            u1 = uniform();
        } while (u1 <= 0.0);
        const double u2 = uniform();
        return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * M_PI * u2);
    }

    double normal(double mean, double stddev) { return mean + stddev * normal(); }

    static uint64_t hash_name(std::string_view name) {
        uint64_t h = 0xcbf29ce484222325ULL;  // FNV-1a 64
        for (unsigned char c : name) {
            h ^= c;
            h *= 0x100000001b3ULL;
        }
        return h;
    }

  private:
    static uint64_t splitmix64(uint64_t& x) {
        uint64_t z = (x += 0x9e3779b97f4a7c15ULL);
        z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
        z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
        return z ^ (z >> 31);
    }

    static uint64_t rotl(uint64_t v, int k) { return (v << k) | (v >> (64 - k)); }

    uint64_t s_[4];
};

// First k entries of a Fisher-Yates shuffle over [0, n): a uniform draw of k
// distinct indices.
inline std::vector<int64_t> sample_without_replacement(int64_t n, int64_t k, Rng& rng) {
    std::vector<int64_t> idx(static_cast<size_t>(n));
    for (int64_t i = 0; i < n; ++i) idx[static_cast<size_t>(i)] = i;
    for (int64_t i = 0; i < k; ++i) {
        const int64_t j = i + static_cast<int64_t>(rng.below(static_cast<uint64_t>(n - i)));
        std::swap(idx[static_cast<size_t>(i)], idx[static_cast<size_t>(j)]);
    }
    idx.resize(static_cast<size_t>(k));
    return idx;
}

}  // namespace neurovid
