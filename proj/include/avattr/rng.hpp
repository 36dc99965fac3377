#pragma once

#include <cmath>
#include <cstdint>
#include <random>
#include <string_view>
#include <vector>

namespace avattr {

// Deterministic random streams. The engine is std::mt19937_64 (its output
// sequence is fixed by the standard) and every distribution below is
// hand-rolled, so a given (seed, tag, indices) tuple produces the same
// values on every platform. Training derives all randomness statelessly
// from such tuples, which is what makes checkpoint resume exact.
class Rng {
public:
    explicit Rng(uint64_t seed) : eng_(seed) {}

    static uint64_t mix(uint64_t h, uint64_t k) {
        // splitmix64 finalizer over the running hash
        h += 0x9e3779b97f4a7c15ULL + k;
        h = (h ^ (h >> 30)) * 0xbf58476d1ce4e5b9ULL;
        h = (h ^ (h >> 27)) * 0x94d049bb133111ebULL;
        return h ^ (h >> 31);
    }

    static uint64_t hash_tag(std::string_view tag) {
        uint64_t h = 0xcbf29ce484222325ULL;  // FNV-1a
        for (char c : tag) {
            h ^= static_cast<unsigned char>(c);
            h *= 0x100000001b3ULL;
        }
        return h;
    }

    // Named substream: independent of every other (tag, a, b) combination.
    static Rng stream(uint64_t seed, std::string_view tag, uint64_t a = 0, uint64_t b = 0) {
        uint64_t h = mix(seed, hash_tag(tag));
        h = mix(h, a);
        h = mix(h, b);
        return Rng(h);
    }

    uint64_t next_u64() { return eng_(); }

    // uniform in [0, 1)
    double uniform() { return static_cast<double>(eng_() >> 11) * 0x1.0p-53; }

    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    // standard normal via Box-Muller (no cached spare, to keep state trivial)
    double normal() {
        double u1 = 1.0 - uniform();  // (0, 1]
        double u2 = uniform();
        return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * M_PI * u2);
    }

    double normal(double mean, double stddev) { return mean + stddev * normal(); }

    bool bernoulli(double p) { return uniform() < p; }

    int64_t randint(int64_t n) {
        int64_t v = static_cast<int64_t>(uniform() * static_cast<double>(n));
        return v < n ? v : n - 1;
    }

    std::vector<int64_t> permutation(int64_t n) {
        std::vector<int64_t> p(static_cast<size_t>(n));
        for (int64_t i = 0; i < n; ++i) p[static_cast<size_t>(i)] = i;
        for (int64_t i = n - 1; i > 0; --i) std::swap(p[static_cast<size_t>(i)], p[static_cast<size_t>(randint(i + 1))]);
        return p;
    }

    // index draw proportional to the given nonnegative weights
    int64_t discrete(const std::vector<double>& cdf) {
        double u = uniform() * cdf.back();
        auto it = std::lower_bound(cdf.begin(), cdf.end(), u);
        int64_t i = static_cast<int64_t>(it - cdf.begin());
        return i < static_cast<int64_t>(cdf.size()) ? i : static_cast<int64_t>(cdf.size()) - 1;
    }

    static std::vector<double> cumulative(const std::vector<double>& weights) {
        std::vector<double> cdf(weights.size());
        double acc = 0.0;
        for (size_t i = 0; i < weights.size(); ++i) {
            acc += weights[i];
            cdf[i] = acc;
        }
        return cdf;
    }

private:
    std::mt19937_64 eng_;
};

}  // namespace avattr
