#ifndef MIXMATCH_RNG_HPP
#define MIXMATCH_RNG_HPP

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <random>
#include <vector>

#include "mixmatch/common.hpp"

namespace mixmatch {

// Deterministic RNG. mt19937_64 produces the same stream everywhere, but the
// standard <random> distributions are implementation-defined, so the
// distributions here are hand-rolled to keep outputs reproducible across
// standard libraries.
class Rng {
public:
    explicit Rng(std::uint64_t seed) : gen_(seed) {}

    std::uint64_t next_u64() { return gen_(); }

    // Unbiased integer in [0, n). n must be > 0.
    std::uint64_t below(std::uint64_t n) {
        const std::uint64_t limit = ~std::uint64_t{0} - (~std::uint64_t{0} % n);
        std::uint64_t x;
        do {
            x = gen_();
        } while (x >= limit);
        return x % n;
    }

    int below_int(int n) { return static_cast<int>(below(static_cast<std::uint64_t>(n))); }

    // Uniform in [0, 1) with 53 bits of precision.
    double uniform() { return static_cast<double>(gen_() >> 11) * 0x1.0p-53; }

    bool bernoulli(double p) { return uniform() < p; }

    // Box-Muller with a cached spare.
    double gauss(double mu = 0.0, double sigma = 1.0) {
        if (has_spare_) {
            has_spare_ = false;
            return mu + sigma * spare_;
        }
        double u1 = uniform();
        while (u1 <= 0.0) u1 = uniform();
        const double u2 = uniform();
        const double r = std::sqrt(-2.0 * std::log(u1));
        const double theta = 2.0 * 3.14159265358979323846 * u2;
        spare_ = r * std::sin(theta);
        has_spare_ = true;
        return mu + sigma * r * std::cos(theta);
    }

    template <typename T>
    void shuffle(std::vector<T>& v) {
        for (std::size_t i = v.size(); i > 1; --i) {
            const std::size_t j = below(i);
            std::swap(v[i - 1], v[j]);
        }
    }

    // k distinct values from [0, n), in draw order.
    std::vector<int> sample_without_replacement(int n, int k) {
        std::vector<int> pool(static_cast<std::size_t>(n));
        for (int i = 0; i < n; ++i) pool[static_cast<std::size_t>(i)] = i;
        std::vector<int> out;
        out.reserve(static_cast<std::size_t>(k));
        for (int i = 0; i < k; ++i) {
            const std::size_t j = below(pool.size());
            out.push_back(pool[j]);
            pool[j] = pool.back();
            pool.pop_back();
        }
        return out;
    }

    Rng fork(const std::string& tag) { return Rng(mix_seed(gen_(), tag)); }

private:
    std::mt19937_64 gen_;
    bool has_spare_ = false;
    double spare_ = 0.0;
};

}  // namespace mixmatch

#endif  // MIXMATCH_RNG_HPP
