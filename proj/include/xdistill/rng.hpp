#pragma once

#include <cstdint>
#include <random>
#include <vector>

#include "xdistill/tensor.hpp"

namespace xdistill {

/// Seeded generator. Every stochastic component takes one explicitly; there is
/// no wall-clock seeding anywhere.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : eng_(seed) {}

  double uniform(double lo = 0.0, double hi = 1.0) { return std::uniform_real_distribution<double>(lo, hi)(eng_); }
  double normal(double mean = 0.0, double stddev = 1.0) { return std::normal_distribution<double>(mean, stddev)(eng_); }
  std::uint64_t next() { return eng_(); }

  /// Uniform integer in [0, n).
  std::size_t below(std::size_t n) { return std::uniform_int_distribution<std::size_t>(0, n - 1)(eng_); }

  /// Index drawn from unnormalized nonnegative weights.
  std::size_t categorical(const std::vector<double>& w) {
    return std::discrete_distribution<std::size_t>(w.begin(), w.end())(eng_);
  }

  /// Independent stream derived from this seed and a label.
  static std::uint64_t derive(std::uint64_t seed, std::uint64_t label) {
    std::uint64_t z = seed + 0x9e3779b97f4a7c15ULL * (label + 1);
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
  }

  template <class T>
  Tensor<T> normal_tensor(Shape s, double stddev) {
    Tensor<T> t(std::move(s));
    for (auto& v : t.storage()) v = static_cast<T>(normal(0.0, stddev));
    return t;
  }

  template <class T>
  Tensor<T> uniform_tensor(Shape s, double lo, double hi) {
    Tensor<T> t(std::move(s));
    for (auto& v : t.storage()) v = static_cast<T>(uniform(lo, hi));
    return t;
  }

  std::mt19937_64& engine() { return eng_; }

 private:
  std::mt19937_64 eng_;
};

}  // namespace xdistill
