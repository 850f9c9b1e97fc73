#include "bq2/rounding.hpp"

#include "bq2/errors.hpp"
#include "bq2/numeric.hpp"

#include <Eigen/Cholesky>

#include <algorithm>
#include <cmath>

namespace bq2 {

ScalarGrid ScalarGrid::two_bit() { return {{-1.0, -1.0 / 3.0, 1.0 / 3.0, 1.0}}; }

void ScalarGrid::validate() const {
  if (levels.empty()) throw ConfigError("scalar grid is empty");
  if (!std::is_sorted(levels.begin(), levels.end())) throw ConfigError("scalar grid must be sorted");
}

double ScalarGrid::max_abs() const {
  double m = 0.0;
  for (double v : levels) m = std::max(m, std::abs(v));
  return m;
}

int ScalarGrid::bits() const {
  int b = 0;
  while ((std::size_t{1} << b) < levels.size()) ++b;
  return b;
}

Vector row_scales(const MatrixD& w, const ScalarGrid& grid) {
  grid.validate();
  const double top = grid.max_abs();
  Vector s(w.rows());
  for (Eigen::Index r = 0; r < w.rows(); ++r) {
    const double m = w.row(r).cwiseAbs().maxCoeff();
    s(r) = (m == 0.0 || top == 0.0) ? 1.0f : static_cast<float>(m / top);
  }
  return s;
}

std::uint32_t nearest_level(const ScalarGrid& grid, double v) {
  std::uint32_t best = 0;
  double best_d = std::abs(v - grid.levels[0]);
  for (std::size_t i = 1; i < grid.levels.size(); ++i) {
    const double d = std::abs(v - grid.levels[i]);
    if (d < best_d) {
      best_d = d;
      best = static_cast<std::uint32_t>(i);
    }
  }
  return best;
}

MatrixD dequantize(const ScalarCodes& codes, const ScalarGrid& grid) {
  MatrixD out(codes.rows, codes.cols);
  for (int r = 0; r < codes.rows; ++r) {
    for (int c = 0; c < codes.cols; ++c) {
      const std::uint32_t q = codes.codes[static_cast<std::size_t>(r) * codes.cols + c];
      out(r, c) = static_cast<double>(codes.scales(r) * static_cast<float>(grid.levels[q]));
    }
  }
  return out;
}

namespace {

Vector checked_scales(const MatrixD& w, const ScalarGrid& grid, const std::optional<Vector>& scales) {
  grid.validate();
  if (!scales) return row_scales(w, grid);
  if (scales->size() != w.rows()) throw ShapeError("one scale per row required");
  for (Eigen::Index r = 0; r < scales->size(); ++r)
    if (!((*scales)(r) > 0.0f) || !std::isfinite((*scales)(r))) throw InputError("scales must be finite and positive");
  return *scales;
}

}  // namespace

ScalarCodes rtn_quantize(const MatrixD& w, const ScalarGrid& grid, const std::optional<Vector>& scales) {
  ScalarCodes out;
  out.rows = static_cast<int>(w.rows());
  out.cols = static_cast<int>(w.cols());
  out.scales = checked_scales(w, grid, scales);
  out.codes.resize(static_cast<std::size_t>(w.size()));
  for (Eigen::Index r = 0; r < w.rows(); ++r) {
    const double s = out.scales(r);
    for (Eigen::Index c = 0; c < w.cols(); ++c) {
      out.codes[static_cast<std::size_t>(r * w.cols() + c)] = nearest_level(grid, w(r, c) / s);
    }
  }
  return out;
}

ScalarCodes gptq_quantize(const MatrixD& w, const MatrixD& h, const ScalarGrid& grid, const std::optional<Vector>& scales) {
  if (h.rows() != w.cols() || h.cols() != w.cols()) throw ShapeError("gptq: Hessian size must equal the column count");
  if (!all_finite(h)) throw InputError("gptq: non-finite Hessian");
  const Eigen::Index n = w.cols();
  Eigen::LLT<MatrixD> llt(h);
  if (llt.info() != Eigen::Success) throw NotPsdError("gptq: Hessian is not positive definite");
  const MatrixD hinv = llt.solve(MatrixD::Identity(n, n));
  Eigen::LLT<MatrixD> llt_inv(0.5 * (hinv + hinv.transpose()));
  if (llt_inv.info() != Eigen::Success) throw NotPsdError("gptq: inverse Hessian is not positive definite");
  const MatrixD u = llt_inv.matrixU();

  ScalarCodes out;
  out.rows = static_cast<int>(w.rows());
  out.cols = static_cast<int>(n);
  out.scales = checked_scales(w, grid, scales);
  out.codes.resize(static_cast<std::size_t>(w.size()));
  for (Eigen::Index r = 0; r < w.rows(); ++r) {
    const double s = out.scales(r);
    Eigen::RowVectorXd row = w.row(r);
    for (Eigen::Index j = 0; j < n; ++j) {
      const std::uint32_t q = nearest_level(grid, row(j) / s);
      out.codes[static_cast<std::size_t>(r * n + j)] = q;
      const double err = (row(j) - s * grid.levels[q]) / u(j, j);
      for (Eigen::Index k = j + 1; k < n; ++k) row(k) -= err * u(j, k);
    }
  }
  return out;
}

MatrixD dequantize(const BlockCodes& codes, const BlockCodebook& cb) {
  MatrixD out(codes.rows, codes.cols);
  const int blocks = codes.cols / codes.g;
  std::vector<double> e(static_cast<std::size_t>(codes.g));
  for (int r = 0; r < codes.rows; ++r) {
    for (int b = 0; b < blocks; ++b) {
      cb.decode(codes.codes[static_cast<std::size_t>(r) * blocks + b], e);
      for (int j = 0; j < codes.g; ++j) {
        out(r, b * codes.g + j) = static_cast<double>(codes.scales(r) * static_cast<float>(e[static_cast<std::size_t>(j)]));
      }
    }
  }
  return out;
}

BlockUdu block_udu(const MatrixD& h, int g) {
  const Eigen::Index n = h.rows();
  if (h.cols() != n || g < 1 || n % g != 0) throw ShapeError("block_udu: size must be a multiple of the block size");
  const MatrixD rev = h.reverse();
  const LdlFactors f = ldl_decompose(rev);
  // Reversing L diag(D) L^T back gives H = U D U^T with U unit upper.
  const MatrixD u = f.L.reverse();
  const VectorD d = f.D.reverse();
  MatrixD u_diag = MatrixD::Zero(n, n);
  for (Eigen::Index b = 0; b < n; b += g) u_diag.block(b, b, g, g) = u.block(b, b, g, g);
  BlockUdu out;
  // U = U_b U_diag with U_b block-unit upper; D_b = U_diag D U_diag^T.
  out.U = u_diag.transpose().triangularView<Eigen::Lower>().solve(u.transpose()).transpose();
  for (Eigen::Index b = 0; b < n; b += g) out.U.block(b, b, g, g).setIdentity();
  out.D = u_diag * d.asDiagonal() * u_diag.transpose();
  return out;
}

BlockCodes ldlq_block_quantize(const MatrixD& w, const MatrixD& h, const BlockCodebook& cb, const Vector& scales) {
  const int g = cb.dim();
  if (w.cols() % g != 0) throw ShapeError("ldlq: column count must be a multiple of the block size");
  if (h.rows() != w.cols() || h.cols() != w.cols()) throw ShapeError("ldlq: Hessian size must equal the column count");
  if (scales.size() != w.rows()) throw ShapeError("ldlq: one scale per row required");
  const BlockUdu f = block_udu(h, g);
  const int blocks = static_cast<int>(w.cols()) / g;
  BlockCodes out;
  out.rows = static_cast<int>(w.rows());
  out.cols = static_cast<int>(w.cols());
  out.g = g;
  out.scales = scales;
  out.codes.resize(static_cast<std::size_t>(w.rows()) * blocks);
  std::vector<double> target(static_cast<std::size_t>(g));
  std::vector<double> q(static_cast<std::size_t>(g));
  for (Eigen::Index r = 0; r < w.rows(); ++r) {
    const double s = scales(r);
    const Eigen::RowVectorXd x = w.row(r) / s;
    Eigen::RowVectorXd err = Eigen::RowVectorXd::Zero(w.cols());
    for (int b = 0; b < blocks; ++b) {
      const Eigen::Index c0 = static_cast<Eigen::Index>(b) * g;
      for (int j = 0; j < g; ++j) {
        double t = x(c0 + j);
        for (Eigen::Index k = 0; k < c0; ++k) t += err(k) * f.U(k, c0 + j);
        target[static_cast<std::size_t>(j)] = t;
      }
      const std::uint32_t code = cb.encode(target);
      out.codes[static_cast<std::size_t>(r) * blocks + b] = code;
      cb.decode(code, q);
      for (int j = 0; j < g; ++j) err(c0 + j) = x(c0 + j) - q[static_cast<std::size_t>(j)];
    }
  }
  return out;
}

double proxy_error(const MatrixD& w, const MatrixD& w_hat, const MatrixD& h) {
  if (w.rows() != w_hat.rows() || w.cols() != w_hat.cols() || h.rows() != w.cols() || h.cols() != w.cols()) {
    throw ShapeError("proxy_error: shape mismatch");
  }
  const MatrixD delta = w - w_hat;
  const double num = (delta * h).cwiseProduct(delta).sum();
  const double den = (w * h).cwiseProduct(w).sum();
  return den == 0.0 ? num : num / den;
}

}  // namespace bq2
