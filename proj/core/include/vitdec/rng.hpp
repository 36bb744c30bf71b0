#pragma once

#include <cstdint>
#include <random>

namespace vitdec {

/// Seeded random source. Every command routes all randomness through one
/// of these so reruns with the same seed are bit-reproducible.
class Rng {
public:
    explicit Rng(uint64_t seed) : seed_(seed), engine_(seed) {}

    float gaussian(float mean = 0.0f, float stddev = 1.0f) {
        std::normal_distribution<float> d(mean, stddev);
        return d(engine_);
    }

    double gaussian_d(double mean = 0.0, double stddev = 1.0) {
        std::normal_distribution<double> d(mean, stddev);
        return d(engine_);
    }

    float uniform(float lo = 0.0f, float hi = 1.0f) {
        std::uniform_real_distribution<float> d(lo, hi);
        return d(engine_);
    }

    /// Uniform integer in [0, n).
    int next_int(int n) {
        std::uniform_int_distribution<int> d(0, n - 1);
        return d(engine_);
    }

    bool bernoulli(double p) {
        std::bernoulli_distribution d(p);
        return d(engine_);
    }

    /// Derive an independent stream, e.g. one per image index. Forking is a
    /// pure function of (seed, salt), so parallel workers stay deterministic.
    Rng fork(uint64_t salt) const { return Rng(mix(seed_, salt)); }

    uint64_t seed() const { return seed_; }

    static uint64_t mix(uint64_t a, uint64_t b) {
        // splitmix64 round over the pair
        uint64_t x = a + 0x9e3779b97f4a7c15ULL * (b + 1);
        x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
        x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
        return x ^ (x >> 31);
    }

    std::mt19937_64& engine() { return engine_; }

private:
    uint64_t seed_;
    std::mt19937_64 engine_;
};

} // namespace vitdec
