#pragma once

#include <cstdint>
#include <random>
#include <string>
#include <string_view>

#include "lorakey/tensor.hpp"

namespace lorakey {

// 64-bit FNV-1a; stable across platforms, used to derive stream seeds.
std::uint64_t fnv1a64(std::string_view bytes, std::uint64_t basis = 0xcbf29ce484222325ULL);

// Seeded random stream. Identical (seed, label, call sequence) gives identical draws.
class Rng {
 public:
  Rng(std::uint64_t seed, std::string label = "root");

  std::uint64_t seed() const { return seed_; }
  const std::string& label() const { return label_; }

  // Independent child stream; does not advance this stream.
  Rng fork(std::string_view child) const;
  Rng fork(std::uint64_t index) const;

  double normal();
  double uniform();  // [0, 1)
  double uniform(double lo, double hi);
  std::size_t uniform_index(std::size_t n);  // [0, n)
  int bit();

  Tensor normal_tensor(Shape shape, double stddev = 1.0);

 private:
  std::uint64_t seed_;
  std::string label_;
  std::mt19937_64 engine_;
  std::normal_distribution<double> normal_{0.0, 1.0};
};

}  // namespace lorakey
