#include "retain/rng.hpp"

#include <cmath>
#include <numbers>

namespace retain {

uint64_t splitmix64(uint64_t x) {
    x += 0x9e3779b97f4a7c15ULL;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
    return x ^ (x >> 31);
}

uint64_t mix_seeds(uint64_t a, uint64_t b) { return splitmix64(splitmix64(a) ^ (b + 0x9e3779b97f4a7c15ULL)); }

uint64_t mix_seeds(uint64_t a, uint64_t b, uint64_t c) { return mix_seeds(mix_seeds(a, b), c); }

Rng::Rng(uint64_t seed) : state_(splitmix64(seed ^ 0x5851f42d4c957f2dULL)) {}

uint64_t Rng::next_u64() {
    state_ = splitmix64(state_);
    return state_;
}

double Rng::next_uniform() {
    // 53 random bits -> [0, 1)
    return static_cast<double>(next_u64() >> 11) * 0x1.0p-53;
}

uint64_t Rng::next_below(uint64_t n) {
    if (n == 0) return 0;
    return next_u64() % n;
}

double Rng::next_normal() {
    if (have_spare_) {
        have_spare_ = false;
        return spare_;
    }
    // Box-Muller; u1 kept away from 0 so log stays finite.
    double u1 = (static_cast<double>(next_u64() >> 11) + 1.0) * 0x1.0p-53;
    double u2 = next_uniform();
    double r = std::sqrt(-2.0 * std::log(u1));
    double a = 2.0 * std::numbers::pi * u2;
    spare_ = r * std::sin(a);
    have_spare_ = true;
    return r * std::cos(a);
}

bool Rng::next_bool(double p_true) { return next_uniform() < p_true; }

std::vector<int64_t> Rng::permutation(int64_t n) {
    std::vector<int64_t> v(static_cast<size_t>(n));
    for (int64_t i = 0; i < n; ++i) v[static_cast<size_t>(i)] = i;
    shuffle(v);
    return v;
}

void Rng::shuffle(std::vector<int64_t>& v) {
    for (size_t i = v.size(); i > 1; --i) {
        size_t j = static_cast<size_t>(next_below(i));
        std::swap(v[i - 1], v[j]);
    }
}

}  // namespace retain
