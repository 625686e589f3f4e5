#pragma once

#include <cstdint>
#include <random>

#include "cem/tensor.hpp"

namespace cem {

// Seeded generator; every random draw in the library goes through one.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : engine_(seed) {}

  double normal(double mean = 0.0, double stddev = 1.0) {
    return std::normal_distribution<double>(mean, stddev)(engine_);
  }
  double uniform(double lo = 0.0, double hi = 1.0) {
    return std::uniform_real_distribution<double>(lo, hi)(engine_);
  }
  std::size_t index(std::size_t n) {
    return std::uniform_int_distribution<std::size_t>(0, n - 1)(engine_);
  }
  Tensor normal_tensor(Shape shape, double stddev = 1.0) {
    Tensor t(std::move(shape));
    for (double& v : t.data()) v = normal(0.0, stddev);
    return t;
  }
  Tensor uniform_tensor(Shape shape, double lo = 0.0, double hi = 1.0) {
    Tensor t(std::move(shape));
    for (double& v : t.data()) v = uniform(lo, hi);
    return t;
  }
  std::mt19937_64& engine() { return engine_; }

 private:
  std::mt19937_64 engine_;
};

}  // namespace cem
