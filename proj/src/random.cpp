#include "ddis/random.hpp"

namespace ddis {

std::uint64_t mix_seed(std::uint64_t seed, std::uint64_t stream) {
  std::uint64_t z = seed + 0x9E3779B97F4A7C15ULL * (stream + 1);
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
  return z ^ (z >> 31);
}

Tensor Rng::normal_tensor(Shape shape, double scale) {
  Tensor t(std::move(shape));
  for (auto& v : t.data()) v = scale * normal();
  return t;
}

Tensor normal_batch(const Shape& item, std::span<const std::uint64_t> seeds) {
  Shape shape{static_cast<std::int64_t>(seeds.size())};
  shape.insert(shape.end(), item.begin(), item.end());
  Tensor out(shape);
  const std::int64_t per = numel(item);
  for (std::size_t i = 0; i < seeds.size(); ++i) {
    Rng rng(seeds[i]);
    for (std::int64_t j = 0; j < per; ++j) out.data()[static_cast<std::int64_t>(i) * per + j] = rng.normal();
  }
  return out;
}

std::vector<std::uint64_t> seed_stream(std::uint64_t seed, std::size_t n, std::uint64_t offset) {
  std::vector<std::uint64_t> out(n);
  for (std::size_t i = 0; i < n; ++i) out[i] = mix_seed(seed, offset + i);
  return out;
}

}  // namespace ddis
