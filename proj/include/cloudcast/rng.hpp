#pragma once

#include <cmath>
#include <cstdint>
#include <vector>

namespace cloudcast {

// xoshiro256++ seeded through splitmix64. The standard <random> distributions
// are implementation-defined, so every draw the project makes goes through
// these helpers to keep runs reproducible byte-for-byte.
class Rng {
  public:
    explicit Rng(uint64_t seed) {
        uint64_t x = seed;
        for (auto& s : state_) {
            x += 0x9e3779b97f4a7c15ULL;
            uint64_t z = x;
            z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
            z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
            s = z ^ (z >> 31);
        }
    }

    uint64_t next_u64() {
        const uint64_t result = rotl(state_[0] + state_[3], 23) + state_[0];
        const uint64_t t = state_[1] << 17;
        state_[2] ^= state_[0];
        state_[3] ^= state_[1];
        state_[1] ^= state_[2];
        state_[0] ^= state_[3];
        state_[2] ^= t;
        state_[3] = rotl(state_[3], 45);
        return result;
    }

    // [0, 1)
    double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    double log_uniform(double lo, double hi) {
        return std::exp(uniform(std::log(lo), std::log(hi)));
    }

    // inclusive bounds, rejection sampled
    int uniform_int(int lo, int hi) {
        const uint64_t span = static_cast<uint64_t>(hi - lo) + 1;
        const uint64_t limit = UINT64_MAX - UINT64_MAX % span;
        uint64_t v = next_u64();
        while (v >= limit) v = next_u64();
        return lo + static_cast<int>(v % span);
    }

    bool bernoulli(double p) { return uniform() < p; }

    template <class T>
    void shuffle(std::vector<T>& items) {
        for (size_t i = items.size(); i > 1; --i) {
            const size_t j = static_cast<size_t>(uniform_int(0, static_cast<int>(i) - 1));
            std::swap(items[i - 1], items[j]);
        }
    }

    // Independent child stream, e.g. one per site or per trial.
    Rng fork(uint64_t stream) const {
        return Rng(state_[0] ^ (0xd1342543de82ef95ULL * (stream + 1)));
    }

  private:
    static uint64_t rotl(uint64_t x, int k) { return (x << k) | (x >> (64 - k)); }
    uint64_t state_[4];
};

}  // namespace cloudcast
