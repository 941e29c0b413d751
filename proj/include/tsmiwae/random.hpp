#pragma once

#include <cmath>
#include <cstdint>
#include <string>

#include "tsmiwae/common.hpp"

namespace tsmiwae {

// splitmix64; used both as a seed mixer and as the per-stream generator.
inline uint64_t splitmix64(uint64_t& state) {
    uint64_t z = (state += 0x9e3779b97f4a7c15ull);
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
    return z ^ (z >> 31);
}

// Deterministic random stream. All randomness in the project flows through
// streams derived from one master seed via derive_stream(), so any component
// can be re-run in isolation (or in parallel) without perturbing the draws of
// any other component.
//
// Normal draws use Box-Muller on two fresh uniforms per call; nothing is
// cached, so the stream state is exactly the counter.
class RngStream {
public:
    RngStream() : state_(0x853c49e6748fea9bull) {}
    explicit RngStream(uint64_t seed) : state_(seed ^ 0x853c49e6748fea9bull) {
        // warm up so nearby seeds decorrelate
        splitmix64(state_);
        splitmix64(state_);
    }

    uint64_t next_u64() { return splitmix64(state_); }

    // uniform in [0, 1)
    double uniform() {
        return static_cast<double>(next_u64() >> 11) * 0x1.0p-53;
    }

    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    // standard normal via Box-Muller
    double normal() {
        double u1 = uniform();
        double u2 = uniform();
        if (u1 <= 0.0) u1 = 0x1.0p-53;
        return std::sqrt(-2.0 * std::log(u1)) * std::cos(6.283185307179586476925286766559 * u2);
    }

    bool bernoulli(double p) { return uniform() < p; }

    // uniform integer in [0, n)
    uint64_t uniform_index(uint64_t n) { return n == 0 ? 0 : next_u64() % n; }

private:
    uint64_t state_;
};

// Derives an independent stream keyed by (seed, tag, a, b). Tags name the
// consuming component ("data", "init", "noise", "drop", ...); the integer
// keys typically carry epoch and series indices so that draws for one series
// in one epoch are a pure function of the key, independent of batch order
// and thread scheduling.
inline RngStream derive_stream(uint64_t seed, const std::string& tag, uint64_t a = 0, uint64_t b = 0) {
    uint64_t h = fnv1a(tag, seed ^ 14695981039346656037ull);
    h ^= 0x9e3779b97f4a7c15ull + a;
    splitmix64(h);
    h ^= 0xc2b2ae3d27d4eb4full + b;
    splitmix64(h);
    return RngStream(h);
}

}  // namespace tsmiwae
