#pragma once

#include <cstdint>
#include <random>
#include <span>
#include <vector>

#include "ddis/tensor.hpp"

namespace ddis {

/// splitmix64 finalizer; derives independent child seeds from a parent seed.
std::uint64_t mix_seed(std::uint64_t seed, std::uint64_t stream);

class Rng {
 public:
  explicit Rng(std::uint64_t seed) : engine_(seed) {}

  double normal() { return normal_(engine_); }
  double uniform() { return uniform_(engine_); }
  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform_(engine_); }
  std::uint64_t next() { return engine_(); }
  std::int64_t index(std::int64_t n) {
    return static_cast<std::int64_t>(uniform_(engine_) * static_cast<double>(n)) % n;
  }

  Tensor normal_tensor(Shape shape, double scale = 1.0);

 private:
  std::mt19937_64 engine_;
  std::normal_distribution<double> normal_{0.0, 1.0};
  std::uniform_real_distribution<double> uniform_{0.0, 1.0};
};

/// Stacks one standard-normal sample of shape `item` per seed into [n, item...].
Tensor normal_batch(const Shape& item, std::span<const std::uint64_t> seeds);

/// n child seeds of `seed`.
std::vector<std::uint64_t> seed_stream(std::uint64_t seed, std::size_t n, std::uint64_t offset = 0);

}  // namespace ddis
