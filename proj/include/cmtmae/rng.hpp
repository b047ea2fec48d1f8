#pragma once

#include <array>
#include <cmath>
#include <cstdint>
#include <vector>

#include "cmtmae/errors.hpp"

namespace cmtmae {

// splitmix64, used for seeding and for deriving independent substreams.
inline uint64_t splitmix64(uint64_t& state) {
    uint64_t z = (state += 0x9e3779b97f4a7c15ull);
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
    return z ^ (z >> 31);
}

// xoshiro256** by Blackman & Vigna. Chosen over std engines for its compact
// 4-word state, which serializes verbatim into checkpoints.
class Rng {
  public:
    Rng() : Rng(0) {}

    explicit Rng(uint64_t seed) {
        uint64_t sm = seed;
        for (auto& word : state_) word = splitmix64(sm);
    }

    static Rng from_state(const std::array<uint64_t, 4>& s) {
        Rng r;
        r.state_ = s;
        return r;
    }

    const std::array<uint64_t, 4>& state() const { return state_; }

    uint64_t next_u64() {
        const uint64_t result = rotl(state_[1] * 5, 7) * 9;
        const uint64_t t = state_[1] << 17;
        state_[2] ^= state_[0];
        state_[3] ^= state_[1];
        state_[1] ^= state_[2];
        state_[0] ^= state_[3];
        state_[2] ^= t;
        state_[3] = rotl(state_[3], 45);
        return result;
    }

    // Uniform in [0, 1). 53-bit mantissa.
    double next_double() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

    // Uniform integer in [0, n). Rejection-free modulo bias is negligible for
    // the n used here (dataset sizes, patch counts), but use Lemire anyway.
    uint64_t next_below(uint64_t n) {
        if (n == 0) throw ContractError("Rng::next_below: n must be positive");
        unsigned __int128 m = static_cast<unsigned __int128>(next_u64()) * n;
        uint64_t lo = static_cast<uint64_t>(m);
        if (lo < n) {
            uint64_t threshold = (0 - n) % n;
            while (lo < threshold) {
                m = static_cast<unsigned __int128>(next_u64()) * n;
                lo = static_cast<uint64_t>(m);
            }
        }
        return static_cast<uint64_t>(m >> 64);
    }

    // Standard normal via Box-Muller. Consumes exactly two uniforms per call;
    // no cached spare, so the stream position is a pure function of call count.
    double next_normal() {
        double u1 = next_double();
        double u2 = next_double();
        while (u1 <= 0.0) u1 = next_double();
        return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * 3.14159265358979323846 * u2);
    }

    // Normal truncated to [-2s, 2s] by resampling.
    double next_trunc_normal(double stddev) {
        for (;;) {
            double z = next_normal();
            if (std::fabs(z) <= 2.0) return z * stddev;
        }
    }

    template <typename T>
    void shuffle(std::vector<T>& v) {
        for (size_t i = v.size(); i > 1; --i) {
            size_t j = static_cast<size_t>(next_below(i));
            std::swap(v[i - 1], v[j]);
        }
    }

  private:
    static uint64_t rotl(uint64_t x, int k) { return (x << k) | (x >> (64 - k)); }

    std::array<uint64_t, 4> state_{};
};

// Derives a substream seed from a master seed and a small tuple of tags.
// Every stochastic decision in training draws from a stream derived this way,
// which makes the whole run a pure function of (master seed, step indices)
// and lets checkpoint resume replay without serializing every stream.
inline uint64_t derive_seed(uint64_t master, uint64_t purpose, uint64_t a = 0, uint64_t b = 0) {
    uint64_t s = master;
    uint64_t h = splitmix64(s);
    s ^= purpose * 0x2545f4914f6cdd1dull;
    h ^= splitmix64(s);
    s ^= a * 0x9e3779b97f4a7c15ull;
    h ^= splitmix64(s);
    s ^= b * 0xd1342543de82ef95ull;
    h ^= splitmix64(s);
    return h;
}

namespace rng_purpose {
inline constexpr uint64_t init = 1;
inline constexpr uint64_t data_order = 2;
inline constexpr uint64_t mask = 3;
inline constexpr uint64_t augment = 4;
inline constexpr uint64_t head_reinit = 5;
inline constexpr uint64_t probe = 6;
inline constexpr uint64_t synth = 7;
}  // namespace rng_purpose

}  // namespace cmtmae
