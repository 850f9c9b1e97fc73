#pragma once

#include <cstdint>
#include <random>

namespace bq2 {

// Portable deterministic generator. std::normal_distribution and friends are
// implementation-defined, so all sampling goes through these helpers.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : engine_(seed) {}

  std::uint64_t next_u64() { return engine_(); }

  // Uniform in [0, 1).
  double uniform() { return static_cast<double>(engine_() >> 11) * 0x1.0p-53; }

  // Uniform integer in [0, n).
  std::uint64_t below(std::uint64_t n);

  double normal();

  // +1 or -1 with equal probability.
  float sign() { return (engine_() >> 63) ? -1.0f : 1.0f; }

 private:
  std::mt19937_64 engine_;
  bool has_spare_ = false;
  double spare_ = 0.0;
};

// Derive an independent stream seed from a base seed and a tag.
std::uint64_t mix_seed(std::uint64_t seed, std::uint64_t tag);

}  // namespace bq2
