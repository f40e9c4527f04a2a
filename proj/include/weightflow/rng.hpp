#pragma once

#include <cstdint>
#include <random>

namespace wf {

// Thin wrapper so every module draws randomness the same way and stays
// reproducible under a seed.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : gen_(seed) {}

  double uniform(double lo = 0.0, double hi = 1.0) {
    return std::uniform_real_distribution<double>(lo, hi)(gen_);
  }
  double normal(double mean = 0.0, double std = 1.0) {
    return std::normal_distribution<double>(mean, std)(gen_);
  }
  // Uniform integer in [0, n).
  std::size_t index(std::size_t n) {
    return std::uniform_int_distribution<std::size_t>(0, n - 1)(gen_);
  }
  bool bernoulli(double p) { return std::bernoulli_distribution(p)(gen_); }

  std::mt19937_64& engine() { return gen_; }

 private:
  std::mt19937_64 gen_;
};

}  // namespace wf
