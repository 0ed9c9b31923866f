#pragma once

#include <cmath>
#include <cstdint>
#include <string_view>

namespace dcma {

inline uint64_t fnv1a64(std::string_view s) {
    uint64_t h = 1469598103934665603ULL;
    for (char c : s) {
        h ^= static_cast<uint8_t>(c);
        h *= 1099511628211ULL;
    }
    return h;
}

// splitmix64 counter generator. Every random draw in the project goes
// through this class so that runs are bit-reproducible and the full RNG
// state is two u64 words, trivially checkpointable.
class Rng {
public:
    Rng() : state_(0x9e3779b97f4a7c15ULL) {}
    explicit Rng(uint64_t seed) : state_(seed) {}

    uint64_t next_u64() {
        uint64_t z = (state_ += 0x9e3779b97f4a7c15ULL);
        z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
        z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
        return z ^ (z >> 31);
    }

    // [0, 1)
    double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

    // clamped into (eps, 1-eps); Gumbel noise needs log(-log(u)) to stay finite
    double uniform_open(double eps = 1e-10) {
        double u = uniform();
        if (u < eps) u = eps;
        if (u > 1.0 - eps) u = 1.0 - eps;
        return u;
    }

    double gaussian() {
        // Box-Muller without a cached spare, so state stays two words
        double u1 = uniform_open();
        double u2 = uniform();
        return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * M_PI * u2);
    }

    // unbiased enough for data shuffling at toy scale
    uint64_t uniform_int(uint64_t n) {
        return static_cast<uint64_t>((static_cast<__uint128_t>(next_u64()) * n) >> 64);
    }

    uint64_t state() const { return state_; }
    void set_state(uint64_t s) { state_ = s; }

    // derive an independent stream without consuming this one
    Rng fork(std::string_view name) const {
        Rng r(state_ ^ fnv1a64(name));
        r.next_u64();
        return r;
    }

private:
    uint64_t state_;
};

// The named streams every run draws from. Changing one experiment knob
// (say the mask policy) must not perturb data order or init.
struct RngSet {
    Rng data;
    Rng mask;
    Rng gumbel;
    Rng dropout;
    Rng init;

    static RngSet from_seed(uint64_t master) {
        Rng root(master);
        RngSet s;
        s.data = root.fork("data");
        s.mask = root.fork("mask");
        s.gumbel = root.fork("gumbel");
        s.dropout = root.fork("dropout");
        s.init = root.fork("init");
        return s;
    }
};

}  // namespace dcma
