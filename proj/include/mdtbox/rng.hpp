#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numbers>
#include <numeric>
#include <string_view>
#include <vector>

#include "mdtbox/errors.hpp"

namespace mdtbox {

// splitmix64 generator with hand-rolled distributions, so that every stream
// is reproducible from a single u64 state regardless of platform or libstdc++
// version. All randomness in the project flows through named child streams of
// one top-level seed.
class Rng {
public:
    explicit Rng(uint64_t seed = 0) : state_(seed) {}

    // Independent stream derived from (seed, stream name).
    static Rng child(uint64_t seed, std::string_view stream) {
        uint64_t h = 1469598103934665603ull; // FNV-1a 64
        for (char ch : stream) {
            h ^= static_cast<unsigned char>(ch);
            h *= 1099511628211ull;
        }
        Rng r(seed ^ h);
        r.next_u64(); // decorrelate nearby seeds
        return r;
    }

    uint64_t next_u64() {
        uint64_t z = (state_ += 0x9e3779b97f4a7c15ull);
        z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
        z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
        return z ^ (z >> 31);
    }

    // [0, 1)
    double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    // One Gaussian per call (Box-Muller, cosine branch) keeps the state a
    // single u64 so checkpoints can serialize it.
    double gaussian() {
        double u1 = uniform();
        if (u1 < 1e-300) u1 = 1e-300;
        double u2 = uniform();
        return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * std::numbers::pi * u2);
    }

    void fill_gaussian(double* out, size_t n) {
        for (size_t i = 0; i < n; ++i) out[i] = gaussian();
    }

    // [0, n), unbiased
    int uniform_int(int n) {
        if (n <= 0) throw ParameterError("uniform_int requires n > 0");
        const uint64_t un = static_cast<uint64_t>(n);
        const uint64_t limit = UINT64_MAX - UINT64_MAX % un;
        uint64_t x = next_u64();
        while (x >= limit) x = next_u64();
        return static_cast<int>(x % un);
    }

    bool bernoulli(double p) { return uniform() < p; }

    // k distinct indices drawn uniformly from [0, n), returned ascending.
    std::vector<int> sample_without_replacement(int n, int k) {
        if (k < 0 || k > n) throw ParameterError("sample_without_replacement: k out of range");
        std::vector<int> idx(static_cast<size_t>(n));
        std::iota(idx.begin(), idx.end(), 0);
        for (int i = 0; i < k; ++i) {
            int j = i + uniform_int(n - i);
            std::swap(idx[static_cast<size_t>(i)], idx[static_cast<size_t>(j)]);
        }
        idx.resize(static_cast<size_t>(k));
        std::sort(idx.begin(), idx.end());
        return idx;
    }

    uint64_t state() const { return state_; }
    void set_state(uint64_t s) { state_ = s; }

private:
    uint64_t state_;
};

} // namespace mdtbox
