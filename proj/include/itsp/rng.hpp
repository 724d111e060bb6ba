#pragma once

#include <cmath>
#include <cstdint>

namespace itsp {

// Deterministic splitmix64-based generator. The standard library engines are
// implementation-defined across platforms for the distribution adapters, so
// all randomness in the library goes through this one.
class Rng {
public:
    explicit Rng(std::uint64_t seed) : state_(seed ^ 0x9e3779b97f4a7c15ull) {}

    std::uint64_t next_u64() {
        state_ += 0x9e3779b97f4a7c15ull;
        std::uint64_t z = state_;
        z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
        z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
        return z ^ (z >> 31);
    }

    // Uniform in [0, 1).
    double next_double() {
        return static_cast<double>(next_u64() >> 11) * (1.0 / 9007199254740992.0);
    }

    // Uniform integer in [0, n). Rejection sampling, no modulo bias.
    int below(int n) {
        const auto un = static_cast<std::uint64_t>(n);
        const std::uint64_t limit = UINT64_MAX - UINT64_MAX % un;
        std::uint64_t x;
        do {
            x = next_u64();
        } while (x >= limit);
        return static_cast<int>(x % un);
    }

    // Standard normal via Box-Muller, one value cached.
    double normal() {
        if (have_cached_) {
            have_cached_ = false;
            return cached_;
        }
        double u1 = next_double();
        double u2 = next_double();
        while (u1 <= 1e-300) u1 = next_double();
        const double r = std::sqrt(-2.0 * std::log(u1));
        const double a = 6.283185307179586 * u2;
        cached_ = r * std::sin(a);
        have_cached_ = true;
        return r * std::cos(a);
    }

    // Independent stream derived from (this seed, stream ids). Used so that
    // parallel workers never share a sequence.
    static Rng derive(std::uint64_t seed, std::uint64_t a, std::uint64_t b = 0) {
        Rng r(seed);
        r.state_ ^= 0xd1342543de82ef95ull * (a + 1);
        r.next_u64();
        r.state_ ^= 0xaf251af3b0f025b5ull * (b + 1);
        r.next_u64();
        return r;
    }

private:
    std::uint64_t state_;
    double cached_ = 0.0;
    bool have_cached_ = false;
};

} // namespace itsp
