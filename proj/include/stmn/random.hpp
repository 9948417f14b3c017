#pragma once

#include <cstdint>
#include <random>

#include "stmn/tensor.hpp"

namespace stmn {

using Rng = std::mt19937_64;

// Derives an independent stream seed from a base seed and a salt (splitmix64 mix).
inline std::uint64_t derive_seed(std::uint64_t base, std::uint64_t salt) {
  std::uint64_t z = base + 0x9E3779B97F4A7C15ull * (salt + 1);
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ull;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBull;
  return z ^ (z >> 31);
}

template <typename T>
Tensor<T> uniform_tensor(Shape dims, double lo, double hi, Rng& rng) {
  Tensor<T> t(std::move(dims));
  std::uniform_real_distribution<double> dist(lo, hi);
  for (auto& v : t.values()) v = static_cast<T>(dist(rng));
  return t;
}

}  // namespace stmn
