#pragma once

#include <cstdint>
#include <random>
#include <vector>

#include "covsda/tensor.hpp"

namespace covsda {

using Rng = std::mt19937_64;

/// Independent stream derived from a base seed and a stream tag.
inline Rng make_rng(std::uint64_t seed, std::uint64_t stream = 0) {
  std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                    static_cast<std::uint32_t>(stream), static_cast<std::uint32_t>(stream >> 32), 0x5eedu};
  return Rng(seq);
}

inline double standard_normal(Rng& rng) { return std::normal_distribution<double>(0.0, 1.0)(rng); }

inline double uniform(Rng& rng, double lo, double hi) { return std::uniform_real_distribution<double>(lo, hi)(rng); }

inline Tensor normal_tensor(Shape shape, Rng& rng) {
  Tensor t(std::move(shape));
  std::normal_distribution<double> dist(0.0, 1.0);
  for (double& v : t.data()) v = dist(rng);
  return t;
}

}  // namespace covsda
