#pragma once

// Counter-based splittable RNG. Every consumer derives its own substream
// from (seed, tag, index), so parallel generation and re-ordering of calls
// across substreams never changes the values drawn inside one substream.

#include <cmath>
#include <cstdint>
#include <string_view>

namespace uplift {

class Rng {
public:
    explicit Rng(std::uint64_t seed) : key_(mix(seed ^ 0x9e3779b97f4a7c15ull)) {}

    // Substream derivation: key' = mix(key ^ mix(fnv(tag) ^ mix(index))).
    Rng derive(std::string_view tag, std::uint64_t index = 0) const {
        Rng r(0);
        r.key_ = mix(key_ ^ mix(fnv1a(tag) ^ mix(index + 0x632be59bd9b4e019ull)));
        r.ctr_ = 0;
        return r;
    }

    std::uint64_t next_u64() { return mix(key_ + (++ctr_) * 0x9e3779b97f4a7c15ull); }

    // Uniform in [0, 1).
    double uniform() { return double(next_u64() >> 11) * 0x1.0p-53; }

    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    // Inclusive integer range.
    std::int64_t uniform_int(std::int64_t lo, std::int64_t hi) {
        return lo + std::int64_t(next_u64() % std::uint64_t(hi - lo + 1));
    }

    bool bernoulli(double p) { return uniform() < p; }

    // Box-Muller, two fresh uniforms per variate (no cached spare).
    double normal() {
        double u1 = 0.0;
        while (u1 == 0.0) u1 = uniform();
        double u2 = uniform();
        return std::sqrt(-2.0 * std::log(u1)) * std::cos(6.283185307179586476925287 * u2);
    }

    double normal(double mean, double stddev) { return mean + stddev * normal(); }

    // Index into a probability vector.
    template <typename Probs>
    int categorical(const Probs& probs) {
        double u = uniform(), acc = 0.0;
        int last = 0;
        for (int i = 0; i < int(probs.size()); ++i) {
            acc += probs[i];
            last = i;
            if (u < acc) return i;
        }
        return last;
    }

private:
    static std::uint64_t mix(std::uint64_t z) {  // splitmix64 finalizer
        z += 0x9e3779b97f4a7c15ull;
        z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
        z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
        return z ^ (z >> 31);
    }

    static std::uint64_t fnv1a(std::string_view s) {
        std::uint64_t h = 0xcbf29ce484222325ull;
        for (char c : s) {
            h ^= std::uint64_t(static_cast<unsigned char>(c));
            h *= 0x100000001b3ull;
        }
        return h;
    }

    std::uint64_t key_;
    std::uint64_t ctr_ = 0;
};

}  // namespace uplift
