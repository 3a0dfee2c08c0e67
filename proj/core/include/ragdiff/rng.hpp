#pragma once

#include "ragdiff/tensor.hpp"

#include <cstdint>
#include <random>
#include <string_view>

namespace ragdiff {

inline uint64_t splitmix64(uint64_t x) {
    x += 0x9e3779b97f4a7c15ULL;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
    return x ^ (x >> 31);
}

inline uint64_t fnv1a(const void* bytes, size_t n, uint64_t h = 0xcbf29ce484222325ULL) {
    const auto* p = (const unsigned char*)bytes;
    for (size_t i = 0; i < n; ++i) {
        h ^= p[i];
        h *= 0x100000001b3ULL;
    }
    return h;
}

/// Seeded random stream. Streams derived from the same (seed, tag, ids) are
/// identical across runs and platforms-with-identical-libstdc++; all draws go
/// through explicit transforms so the sequence is fully pinned by mt19937_64.
class RandomStream {
  public:
    explicit RandomStream(uint64_t seed) : gen_(splitmix64(seed)) {}

    static RandomStream derive(uint64_t seed, std::string_view tag, uint64_t a = 0, uint64_t b = 0) {
        uint64_t h = fnv1a(tag.data(), tag.size());
        h = splitmix64(h ^ splitmix64(seed));
        h = splitmix64(h ^ splitmix64(a + 0x632be59bd9b4e019ULL));
        h = splitmix64(h ^ splitmix64(b + 0x9e3779b97f4a7c15ULL));
        return RandomStream(h);
    }

    uint64_t next_u64() { return gen_(); }

    /// Uniform in [0, 1).
    double uniform() { return (double)(next_u64() >> 11) * 0x1.0p-53; }

    /// Uniform integer in [lo, hi] inclusive.
    int64_t uniform_int(int64_t lo, int64_t hi) {
        uint64_t span = (uint64_t)(hi - lo) + 1;
        return lo + (int64_t)(next_u64() % span);
    }

    bool bernoulli(double p) { return uniform() < p; }

    /// Standard normal via Box-Muller; consumes two uniforms per pair.
    double normal() {
        if (have_spare_) {
            have_spare_ = false;
            return spare_;
        }
        double u1 = uniform();
        double u2 = uniform();
        // avoid log(0)
        double r = std::sqrt(-2.0 * std::log(1.0 - u1));
        double a = 2.0 * M_PI * u2;
        spare_ = r * std::sin(a);
        have_spare_ = true;
        return r * std::cos(a);
    }

    template <typename T>
    void fill_normal(Tensor<T>& t, double scale = 1.0) {
        for (int64_t i = 0; i < t.numel(); ++i) t[i] = (T)(normal() * scale);
    }

    template <typename T>
    void fill_uniform(Tensor<T>& t, double lo, double hi) {
        for (int64_t i = 0; i < t.numel(); ++i) t[i] = (T)(lo + uniform() * (hi - lo));
    }

    template <typename T>
    Tensor<T> normal_tensor(std::vector<int> shape, double scale = 1.0) {
        Tensor<T> t(std::move(shape));
        fill_normal(t, scale);
        return t;
    }

  private:
    std::mt19937_64 gen_;
    double spare_ = 0;
    bool have_spare_ = false;
};

}  // namespace ragdiff
