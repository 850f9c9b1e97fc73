#pragma once

#include "bq2/matrix.hpp"

#include <cstdint>
#include <optional>
#include <span>
#include <vector>

namespace bq2 {

// H = L diag(D) L^T with L unit lower-triangular.
struct LdlFactors {
  MatrixD L;
  VectorD D;
};

// Throws InputError on non-finite or asymmetric input, NotPsdError when a
// pivot falls below -1e-10. Pivots in [-1e-10, 0] are clamped to zero and
// their column of L is zeroed.
LdlFactors ldl_decompose(const MatrixD& h);

// Seed-deterministic +-1 diagonal used by the signed Hadamard transform.
std::vector<float> hadamard_signs(std::size_t n, std::uint64_t seed);

// Orthonormal Walsh-Hadamard transform, y = H S x / sqrt(n). With no seed
// S = I. Length must be a power of two (ShapeError otherwise).
std::vector<float> hadamard_transform(std::span<const float> x, std::optional<std::uint64_t> sign_seed = {});

// Inverse of hadamard_transform for the same seed: x = S H y / sqrt(n).
std::vector<float> inverse_hadamard_transform(std::span<const float> y, std::optional<std::uint64_t> sign_seed = {});

// In-place 64-bit variants; `signs` may be empty.
void hadamard_inplace(std::span<double> x, std::span<const float> signs);
void inverse_hadamard_inplace(std::span<double> x, std::span<const float> signs);

// Dense n x n matrix of the signed transform (T with y = T x).
MatrixD hadamard_matrix(std::size_t n, std::optional<std::uint64_t> sign_seed = {});

// Butterfly transform built from log2(n) stages of n/2 Givens rotations.
// Stage s pairs indices (j, j + 2^s) for every j whose bit s is clear,
// enumerated in ascending j; each pair is rotated by
// [[cos t, sin t], [-sin t, cos t]].
struct ButterflyAngles {
  std::size_t n = 0;
  std::vector<std::vector<double>> stages;

  static ButterflyAngles zeros(std::size_t n);
  std::size_t parameter_count() const;
};

std::size_t butterfly_parameter_count(std::size_t n);

std::vector<float> butterfly_apply(const ButterflyAngles& angles, std::span<const float> x, bool inverse = false);
void butterfly_apply_inplace(const ButterflyAngles& angles, std::span<double> x, bool inverse = false);

// Reverse-mode derivative of the forward (inverse=false) or inverse
// transform evaluated at input `x` with upstream gradient `grad_out`.
// Accumulates into `grad_angles` (same shape as angles.stages) and returns
// the gradient with respect to x.
std::vector<double> butterfly_backward(const ButterflyAngles& angles, std::span<const double> x,
                                       std::span<const double> grad_out, bool inverse,
                                       std::vector<std::vector<double>>& grad_angles);

// Dense matrix B with butterfly_apply(x) = B x.
MatrixD butterfly_matrix(const ButterflyAngles& angles);

// One Cayley retraction on the orthogonal group:
//   A = (G R^T - R G^T) / 2,  R' = (I - lr/2 A)^-1 (I + lr/2 A) R.
// R' moves along +G, so pass the negative Euclidean gradient to descend.
MatrixD cayley_step(const MatrixD& r, const MatrixD& g, double lr);

}  // namespace bq2
