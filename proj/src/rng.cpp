#include "lorakey/rng.hpp"

#include <cmath>

namespace lorakey {

std::uint64_t fnv1a64(std::string_view bytes, std::uint64_t basis) {
  std::uint64_t h = basis;
  for (unsigned char c : bytes) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

namespace {

std::uint64_t mix_seed(std::uint64_t seed, std::string_view label) {
  // splitmix64 finalizer over (seed, label hash)
  std::uint64_t z = seed ^ fnv1a64(label);
  z += 0x9e3779b97f4a7c15ULL;
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

}  // namespace

Rng::Rng(std::uint64_t seed, std::string label)
    : seed_(seed), label_(std::move(label)), engine_(mix_seed(seed_, label_)) {}

Rng Rng::fork(std::string_view child) const {
  return Rng(seed_, label_ + "/" + std::string(child));
}

Rng Rng::fork(std::uint64_t index) const { return fork("#" + std::to_string(index)); }

double Rng::normal() { return normal_(engine_); }

double Rng::uniform() {
  // 53 random mantissa bits
  return static_cast<double>(engine_() >> 11) * 0x1.0p-53;
}

double Rng::uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

std::size_t Rng::uniform_index(std::size_t n) {
  return static_cast<std::size_t>(std::floor(uniform() * static_cast<double>(n))) % n;
}

int Rng::bit() { return static_cast<int>(engine_() >> 63); }

Tensor Rng::normal_tensor(Shape shape, double stddev) {
  Tensor t(std::move(shape));
  for (double& v : t.values()) v = stddev * normal();
  return t;
}

}  // namespace lorakey
