#pragma once

#include <cmath>
#include <cstdint>
#include <random>
#include <sstream>
#include <string>

namespace xmreg {

/// Deterministic random source. Wraps mt19937_64 but derives uniform and
/// normal variates itself so streams do not depend on libstdc++
/// distribution internals. Same seed, same platform => identical stream.
class Rng {
public:
    Rng() : engine_(0x9e3779b97f4a7c15ull) {}
    explicit Rng(uint64_t seed) : engine_(seed) {}

    uint64_t next_u64() { return engine_(); }

    /// Uniform in [0, 1) with 53-bit resolution.
    double uniform() { return static_cast<double>(engine_() >> 11) * 0x1.0p-53; }

    /// Uniform in [lo, hi).
    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    /// Uniform integer in [0, n).
    int64_t uniform_int(int64_t n) {
        // rejection-free modulo is fine at these ranges
        return static_cast<int64_t>(engine_() % static_cast<uint64_t>(n));
    }

    /// Standard normal via Box-Muller (no cached spare, keeps the stream
    /// position a pure function of the call count).
    double normal() {
        double u1 = uniform(), u2 = uniform();
        if (u1 < 1e-300) u1 = 1e-300;
        return std::sqrt(-2.0 * std::log(u1)) * std::cos(6.283185307179586 * u2);
    }

    /// Spawn an independent child stream; advances this stream by one draw.
    Rng spawn() { return Rng(engine_() ^ 0xd1b54a32d192ed03ull); }

    std::string save_state() const {
        std::ostringstream os;
        os << engine_;
        return os.str();
    }
    void load_state(const std::string& s) {
        std::istringstream is(s);
        is >> engine_;
    }

private:
    std::mt19937_64 engine_;
};

} // namespace xmreg
