#pragma once

#include <cmath>
#include <cstdint>

namespace kvzip {

inline uint64_t splitmix64(uint64_t x) {
    x += 0x9e3779b97f4a7c15ull;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ull;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebull;
    return x ^ (x >> 31);
}

// Counter-based generator: every draw is a pure function of (seed, stream, counter),
// so weight init and sampling are reproducible independent of call order.
class CounterRng {
public:
    explicit CounterRng(uint64_t seed, uint64_t stream = 0)
        : key_(splitmix64(splitmix64(seed) ^ (0x9e3779b97f4a7c15ull * (stream + 1)))) {}

    uint64_t bits(uint64_t counter) const { return splitmix64(key_ ^ (counter * 0xda942042e4dd58b5ull + 0x2545f4914f6cdd1dull)); }

    // uniform in (0, 1]
    double uniform(uint64_t counter) const {
        return (static_cast<double>(bits(counter) >> 11) + 1.0) * 0x1.0p-53;
    }

    // standard normal via Box-Muller on counters (2c, 2c+1)
    float normal(uint64_t counter) const {
        const double u1 = uniform(2 * counter);
        const double u2 = uniform(2 * counter + 1);
        return static_cast<float>(std::sqrt(-2.0 * std::log(u1)) * std::cos(6.283185307179586 * u2));
    }

private:
    uint64_t key_;
};

// Sequential convenience wrapper.
class Rng {
public:
    explicit Rng(uint64_t seed, uint64_t stream = 0) : base_(seed, stream) {}

    uint64_t next() { return base_.bits(counter_++); }
    double uniform() { return base_.uniform(counter_++); }
    uint32_t below(uint32_t n) { return static_cast<uint32_t>(next() % n); }
    float normal() {
        const uint64_t c = counter_;
        counter_ += 2;
        const double u1 = base_.uniform(c);
        const double u2 = base_.uniform(c + 1);
        return static_cast<float>(std::sqrt(-2.0 * std::log(u1)) * std::cos(6.283185307179586 * u2));
    }

private:
    CounterRng base_;
    uint64_t counter_ = 0;
};

}  // namespace kvzip
