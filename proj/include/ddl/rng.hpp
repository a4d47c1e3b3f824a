#pragma once

#include <cmath>
#include <cstdint>
#include <random>
#include <string_view>

#include "ddl/tensor.hpp"

namespace ddl {

inline uint64_t splitmix64(uint64_t x) {
    x += 0x9e3779b97f4a7c15ULL;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
    return x ^ (x >> 31);
}

inline uint64_t fnv1a64(std::string_view s) {
    uint64_t h = 0xcbf29ce484222325ULL;
    for (char c : s) {
        h ^= static_cast<uint8_t>(c);
        h *= 0x100000001b3ULL;
    }
    return h;
}

// Stable fan-out: every pipeline stage derives its stream from the root seed
// and a fixed tag, so adding stages never shifts the streams of existing ones.
inline uint64_t seed_stream(uint64_t root, std::string_view tag) {
    return splitmix64(root ^ fnv1a64(tag));
}

// mt19937_64 is bit-exact across platforms by the standard. Gaussian draws use
// our own Box-Muller since std::normal_distribution is implementation defined.
class Rng {
public:
    explicit Rng(uint64_t seed) : gen_(seed) {}

    uint64_t next() { return gen_(); }

    double uniform() {  // [0, 1)
        return static_cast<double>(gen_() >> 11) * 0x1.0p-53;
    }

    double normal() {
        if (have_spare_) {
            have_spare_ = false;
            return spare_;
        }
        double u1 = 0.0;
        do { u1 = uniform(); } while (u1 <= 0.0);
        double u2 = uniform();
        double r = std::sqrt(-2.0 * std::log(u1));
        double a = 6.283185307179586476925286766559 * u2;
        spare_ = r * std::sin(a);
        have_spare_ = true;
        return r * std::cos(a);
    }

    int64_t range(int64_t n) {  // uniform over [0, n)
        if (n <= 0) throw std::runtime_error("rng: range bound must be positive");
        uint64_t un = static_cast<uint64_t>(n);
        uint64_t limit = UINT64_MAX - UINT64_MAX % un;
        uint64_t x = 0;
        do { x = gen_(); } while (x >= limit);
        return static_cast<int64_t>(x % un);
    }

    Tensor normal_tensor(std::vector<int64_t> dims, DType dt) {
        Tensor t = Tensor::zeros(std::move(dims), dt);
        for (int64_t i = 0; i < t.numel(); ++i) t.set(i, normal());
        return t;
    }

    Tensor uniform_tensor(std::vector<int64_t> dims, double lo, double hi, DType dt) {
        Tensor t = Tensor::zeros(std::move(dims), dt);
        for (int64_t i = 0; i < t.numel(); ++i) t.set(i, lo + (hi - lo) * uniform());
        return t;
    }

private:
    std::mt19937_64 gen_;
    double spare_ = 0.0;
    bool have_spare_ = false;
};

}  // namespace ddl
