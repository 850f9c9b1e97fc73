#include "bq2/matrix.hpp"
#include "bq2/rng.hpp"

#include <bit>
#include <cmath>
#include <cstring>

namespace bq2 {

bool all_finite(const Matrix& m) { return m.allFinite(); }
bool all_finite(const MatrixD& m) { return m.allFinite(); }

double symmetry_error(const MatrixD& m) {
  if (m.rows() != m.cols()) return INFINITY;
  double worst = 0.0;
  for (Eigen::Index i = 0; i < m.rows(); ++i)
    for (Eigen::Index j = i + 1; j < m.cols(); ++j)
      worst = std::max(worst, std::abs(m(i, j) - m(j, i)));
  return worst;
}

double orthogonality_error(const MatrixD& r) {
  const MatrixD gram = r.transpose() * r;
  return (gram - MatrixD::Identity(r.cols(), r.cols())).norm();
}

bool is_power_of_two(std::size_t n) { return n != 0 && std::has_single_bit(n); }

int log2_exact(std::size_t n) { return std::countr_zero(n); }

std::uint64_t fnv1a64(std::span<const std::uint8_t> bytes, std::uint64_t seed) {
  std::uint64_t h = seed;
  for (std::uint8_t b : bytes) {
    h ^= b;
    h *= 0x100000001b3ULL;
  }
  return h;
}

std::uint64_t fnv1a64(std::string_view text, std::uint64_t seed) {
  return fnv1a64(std::span<const std::uint8_t>(reinterpret_cast<const std::uint8_t*>(text.data()), text.size()), seed);
}

std::uint64_t hash_matrix(const Matrix& m, std::uint64_t seed) {
  std::uint64_t h = seed;
  const std::int64_t dims[2] = {m.rows(), m.cols()};
  h = fnv1a64(std::span<const std::uint8_t>(reinterpret_cast<const std::uint8_t*>(dims), sizeof(dims)), h);
  return fnv1a64(std::span<const std::uint8_t>(reinterpret_cast<const std::uint8_t*>(m.data()),
                                                static_cast<std::size_t>(m.size()) * sizeof(float)),
                 h);
}

std::uint64_t hash_vector(const Vector& v, std::uint64_t seed) {
  return fnv1a64(std::span<const std::uint8_t>(reinterpret_cast<const std::uint8_t*>(v.data()),
                                               static_cast<std::size_t>(v.size()) * sizeof(float)),
                 seed);
}

std::uint64_t Rng::below(std::uint64_t n) {
  if (n <= 1) return 0;
  // Rejection sampling keeps the result unbiased and portable.
  const std::uint64_t limit = std::numeric_limits<std::uint64_t>::max() - std::numeric_limits<std::uint64_t>::max() % n;
  std::uint64_t x = engine_();
  while (x >= limit) x = engine_();
  return x % n;
}

double Rng::normal() {
  if (has_spare_) {
    has_spare_ = false;
    return spare_;
  }
  double u1 = uniform();
  while (u1 <= 0.0) u1 = uniform();
  const double u2 = uniform();
  const double radius = std::sqrt(-2.0 * std::log(u1));
  const double angle = 2.0 * M_PI * u2;
  spare_ = radius * std::sin(angle);
  has_spare_ = true;
  return radius * std::cos(angle);
}

std::uint64_t mix_seed(std::uint64_t seed, std::uint64_t tag) {
  // splitmix64 finalizer over the combined value
  std::uint64_t z = seed + 0x9e3779b97f4a7c15ULL * (tag + 1);
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

}  // namespace bq2
