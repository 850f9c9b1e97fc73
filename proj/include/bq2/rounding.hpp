#pragma once

#include "bq2/codebooks.hpp"
#include "bq2/matrix.hpp"

#include <cstdint>
#include <optional>
#include <vector>

namespace bq2 {

// Sorted reproduction levels of a scalar quantizer.
struct ScalarGrid {
  std::vector<double> levels;

  // {-1, -1/3, 1/3, 1}
  static ScalarGrid two_bit();
  void validate() const;
  double max_abs() const;
  int bits() const;
};

// Per-row scale max|w| / max|grid|, rounded to 32-bit; an all-zero row gets 1.
Vector row_scales(const MatrixD& w, const ScalarGrid& grid);

struct ScalarCodes {
  int rows = 0;
  int cols = 0;
  std::vector<std::uint32_t> codes;  // row-major grid indices
  Vector scales;                     // one per row
};

MatrixD dequantize(const ScalarCodes& codes, const ScalarGrid& grid);

// Index of the nearest level to v; ties go to the smaller index.
std::uint32_t nearest_level(const ScalarGrid& grid, double v);

ScalarCodes rtn_quantize(const MatrixD& w, const ScalarGrid& grid, const std::optional<Vector>& scales = {});

// Columns in ascending order with error feedback from the upper Cholesky
// factor of H^-1. `h` must already be damped.
ScalarCodes gptq_quantize(const MatrixD& w, const MatrixD& h, const ScalarGrid& grid,
                          const std::optional<Vector>& scales = {});

struct BlockCodes {
  int rows = 0;
  int cols = 0;
  int g = 0;
  std::vector<std::uint32_t> codes;  // rows x (cols / g), row-major
  Vector scales;
};

MatrixD dequantize(const BlockCodes& codes, const BlockCodebook& cb);

// H = U D U^T with U block-unit upper triangular (identity g x g diagonal
// blocks) and D block diagonal, derived from ldl_decompose of the reversed H.
struct BlockUdu {
  MatrixD U;
  MatrixD D;
};
BlockUdu block_udu(const MatrixD& h, int g);

// BlockLDLQ: blocks in ascending order, target t_B = w_B / s + sum_{j<B}
// (w_j / s - q_j) U_jB, each target encoded to its nearest codeword.
BlockCodes ldlq_block_quantize(const MatrixD& w, const MatrixD& h, const BlockCodebook& cb, const Vector& scales);

// tr((W - Q) H (W - Q)^T) / tr(W H W^T); the absolute numerator when the
// denominator is zero.
double proxy_error(const MatrixD& w, const MatrixD& w_hat, const MatrixD& h);

}  // namespace bq2
