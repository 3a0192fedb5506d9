#pragma once

#include <cstdint>
#include <vector>

namespace retain {

// splitmix64; used for seed derivation so every consumer stream is a pure
// function of (run seed, purpose) and results are identical across platforms.
uint64_t splitmix64(uint64_t x);
uint64_t mix_seeds(uint64_t a, uint64_t b);
uint64_t mix_seeds(uint64_t a, uint64_t b, uint64_t c);

// Deterministic generator. Gaussian sampling is done with an explicit
// Box-Muller transform rather than std::normal_distribution, whose output
// is implementation-defined.
class Rng {
  public:
    explicit Rng(uint64_t seed);

    uint64_t next_u64();
    // uniform in [0, 1)
    double next_uniform();
    // uniform integer in [0, n)
    uint64_t next_below(uint64_t n);
    // standard normal
    double next_normal();

    bool next_bool(double p_true);

    std::vector<int64_t> permutation(int64_t n);
    void shuffle(std::vector<int64_t>& v);

  private:
    uint64_t state_;
    bool have_spare_ = false;
    double spare_ = 0.0;
};

}  // namespace retain
