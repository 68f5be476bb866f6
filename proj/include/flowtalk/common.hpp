#pragma once

#include <cmath>
#include <cstdarg>
#include <cstdint>
#include <cstdio>
#include <functional>
#include <stdexcept>
#include <string>
#include <thread>
#include <vector>

namespace flowtalk {

// Error taxonomy maps onto process exit codes: validation/format problems
// exit 2, numeric failures exit 3.
struct Error : std::runtime_error {
    using std::runtime_error::runtime_error;
};
struct ValidationError : Error {
    using Error::Error;
};
struct IoError : ValidationError {
    using ValidationError::ValidationError;
};
struct NumericError : Error {
    using Error::Error;
};

std::string strf(const char* fmt, ...);

// FNV-1a, used for config hashes and seed derivation.
inline uint64_t fnv1a64(const void* data, size_t len, uint64_t h = 0xcbf29ce484222325ull) {
    const auto* p = static_cast<const uint8_t*>(data);
    for (size_t i = 0; i < len; ++i) {
        h ^= p[i];
        h *= 0x100000001b3ull;
    }
    return h;
}
inline uint64_t fnv1a64(const std::string& s) { return fnv1a64(s.data(), s.size()); }

// splitmix64 finalizer; mixes a base seed with a stream index so that
// per-step / per-item generators are independent but reproducible.
inline uint64_t mix_seed(uint64_t base, uint64_t stream) {
    uint64_t z = base + 0x9e3779b97f4a7c15ull * (stream + 1);
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
    return z ^ (z >> 31);
}

// Deterministic generator. All distribution transforms are implemented here
// (not via std::*_distribution) so streams are identical across platforms.
class Rng {
public:
    explicit Rng(uint64_t seed) : state_(seed ? seed : 0x853c49e6748fea9bull) {}

    uint64_t next_u64() {
        // xorshift64* — small, fast, and fully specified.
        uint64_t x = state_;
        x ^= x >> 12;
        x ^= x << 25;
        x ^= x >> 27;
        state_ = x;
        return x * 0x2545f4914f6cdd1dull;
    }

    // uniform in [0, 1)
    double uniform() { return double(next_u64() >> 11) * 0x1.0p-53; }

    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    // uniform integer in [0, n)
    uint64_t uniform_int(uint64_t n) { return n ? next_u64() % n : 0; }

    bool bernoulli(double p) { return uniform() < p; }

    // standard normal via Box-Muller (pairs cached)
    double normal() {
        if (have_cached_) {
            have_cached_ = false;
            return cached_;
        }
        double u1 = 0.0;
        do {
            u1 = uniform();
        } while (u1 <= 0.0);
        double u2 = uniform();
        double r = std::sqrt(-2.0 * std::log(u1));
        double a = 2.0 * M_PI * u2;
        cached_ = r * std::sin(a);
        have_cached_ = true;
        return r * std::cos(a);
    }

private:
    uint64_t state_;
    double cached_ = 0.0;
    bool have_cached_ = false;
};

// Worker-pool cap honoring FLOWTALK_THREADS; result order is index-determined
// so output never depends on scheduling.
int worker_count();
void parallel_for(int n, const std::function<void(int)>& fn);

}  // namespace flowtalk
