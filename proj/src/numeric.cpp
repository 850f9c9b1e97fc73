#include "bq2/numeric.hpp"

#include "bq2/errors.hpp"
#include "bq2/rng.hpp"

#include <cmath>
#include <string>

namespace bq2 {

LdlFactors ldl_decompose(const MatrixD& h) {
  if (h.rows() != h.cols()) throw ShapeError("ldl_decompose: matrix is not square");
  if (!h.allFinite()) throw InputError("ldl_decompose: non-finite entry");
  const double scale = std::max(1.0, h.cwiseAbs().maxCoeff());
  if (symmetry_error(h) > 1e-8 * scale) throw InputError("ldl_decompose: matrix is not symmetric");

  const Eigen::Index n = h.rows();
  LdlFactors f{MatrixD::Identity(n, n), VectorD::Zero(n)};
  MatrixD& l = f.L;
  VectorD& d = f.D;
  for (Eigen::Index j = 0; j < n; ++j) {
    double pivot = h(j, j);
    for (Eigen::Index k = 0; k < j; ++k) pivot -= l(j, k) * l(j, k) * d(k);
    if (pivot < -1e-10) {
      throw NotPsdError("ldl_decompose: negative pivot " + std::to_string(pivot) + " at index " + std::to_string(j));
    }
    if (pivot <= 0.0) {
      d(j) = 0.0;
      continue;  // column of L stays zero below the diagonal
    }
    d(j) = pivot;
    for (Eigen::Index i = j + 1; i < n; ++i) {
      double acc = h(i, j);
      for (Eigen::Index k = 0; k < j; ++k) acc -= l(i, k) * l(j, k) * d(k);
      l(i, j) = acc / pivot;
    }
  }
  return f;
}

std::vector<float> hadamard_signs(std::size_t n, std::uint64_t seed) {
  Rng rng(mix_seed(seed, 0x4841444dULL));
  std::vector<float> signs(n);
  for (auto& s : signs) s = rng.sign();
  return signs;
}

namespace {

void fwht(std::span<double> x) {
  const std::size_t n = x.size();
  for (std::size_t len = 1; len < n; len <<= 1) {
    for (std::size_t i = 0; i < n; i += len << 1) {
      for (std::size_t j = i; j < i + len; ++j) {
        const double a = x[j];
        const double b = x[j + len];
        x[j] = a + b;
        x[j + len] = a - b;
      }
    }
  }
  const double norm = 1.0 / std::sqrt(static_cast<double>(n));
  for (double& v : x) v *= norm;
}

void require_power_of_two(std::size_t n, const char* what) {
  if (!is_power_of_two(n)) throw ShapeError(std::string(what) + ": length " + std::to_string(n) + " is not a power of two");
}

}  // namespace

void hadamard_inplace(std::span<double> x, std::span<const float> signs) {
  require_power_of_two(x.size(), "hadamard_transform");
  if (!signs.empty()) {
    for (std::size_t i = 0; i < x.size(); ++i) x[i] *= signs[i];
  }
  fwht(x);
}

void inverse_hadamard_inplace(std::span<double> x, std::span<const float> signs) {
  require_power_of_two(x.size(), "hadamard_transform");
  fwht(x);
  if (!signs.empty()) {
    for (std::size_t i = 0; i < x.size(); ++i) x[i] *= signs[i];
  }
}

std::vector<float> hadamard_transform(std::span<const float> x, std::optional<std::uint64_t> sign_seed) {
  require_power_of_two(x.size(), "hadamard_transform");
  std::vector<double> work(x.begin(), x.end());
  std::vector<float> signs;
  if (sign_seed) signs = hadamard_signs(x.size(), *sign_seed);
  hadamard_inplace(work, signs);
  return {work.begin(), work.end()};
}

std::vector<float> inverse_hadamard_transform(std::span<const float> y, std::optional<std::uint64_t> sign_seed) {
  require_power_of_two(y.size(), "hadamard_transform");
  std::vector<double> work(y.begin(), y.end());
  std::vector<float> signs;
  if (sign_seed) signs = hadamard_signs(y.size(), *sign_seed);
  inverse_hadamard_inplace(work, signs);
  return {work.begin(), work.end()};
}

MatrixD hadamard_matrix(std::size_t n, std::optional<std::uint64_t> sign_seed) {
  require_power_of_two(n, "hadamard_matrix");
  std::vector<float> signs;
  if (sign_seed) signs = hadamard_signs(n, *sign_seed);
  MatrixD t(n, n);
  std::vector<double> column(n);
  for (std::size_t c = 0; c < n; ++c) {
    std::fill(column.begin(), column.end(), 0.0);
    column[c] = 1.0;
    hadamard_inplace(column, signs);
    for (std::size_t r = 0; r < n; ++r) t(r, c) = column[r];
  }
  return t;
}

ButterflyAngles ButterflyAngles::zeros(std::size_t n) {
  require_power_of_two(n, "butterfly");
  ButterflyAngles a;
  a.n = n;
  a.stages.assign(static_cast<std::size_t>(log2_exact(n)), std::vector<double>(n / 2, 0.0));
  return a;
}

std::size_t ButterflyAngles::parameter_count() const {
  std::size_t total = 0;
  for (const auto& s : stages) total += s.size();
  return total;
}

std::size_t butterfly_parameter_count(std::size_t n) {
  require_power_of_two(n, "butterfly");
  return (n / 2) * static_cast<std::size_t>(log2_exact(n));
}

namespace {

// Calls fn(pair_index, a, b) for every rotated pair of stage s.
template <typename Fn>
void for_each_pair(std::size_t n, std::size_t stage, Fn&& fn) {
  const std::size_t stride = std::size_t{1} << stage;
  std::size_t p = 0;
  for (std::size_t j = 0; j < n; ++j) {
    if (j & stride) continue;
    fn(p++, j, j + stride);
  }
}

void check_butterfly(const ButterflyAngles& angles, std::size_t len) {
  if (angles.n != len) {
    throw ShapeError("butterfly_apply: vector length " + std::to_string(len) + " != " + std::to_string(angles.n));
  }
  if (angles.stages.size() != static_cast<std::size_t>(log2_exact(angles.n))) {
    throw ShapeError("butterfly_apply: wrong number of stages");
  }
}

// Rotation with angle t, optionally transposed.
inline void rotate(double& a, double& b, double t, bool transpose) {
  const double c = std::cos(t);
  const double s = transpose ? -std::sin(t) : std::sin(t);
  const double na = c * a + s * b;
  const double nb = -s * a + c * b;
  a = na;
  b = nb;
}

}  // namespace

void butterfly_apply_inplace(const ButterflyAngles& angles, std::span<double> x, bool inverse) {
  check_butterfly(angles, x.size());
  const std::size_t n_stages = angles.stages.size();
  for (std::size_t k = 0; k < n_stages; ++k) {
    const std::size_t s = inverse ? n_stages - 1 - k : k;
    const auto& theta = angles.stages[s];
    for_each_pair(angles.n, s, [&](std::size_t p, std::size_t a, std::size_t b) { rotate(x[a], x[b], theta[p], inverse); });
  }
}

std::vector<float> butterfly_apply(const ButterflyAngles& angles, std::span<const float> x, bool inverse) {
  std::vector<double> work(x.begin(), x.end());
  butterfly_apply_inplace(angles, work, inverse);
  return {work.begin(), work.end()};
}

std::vector<double> butterfly_backward(const ButterflyAngles& angles, std::span<const double> x,
                                       std::span<const double> grad_out, bool inverse,
                                       std::vector<std::vector<double>>& grad_angles) {
  check_butterfly(angles, x.size());
  const std::size_t n_stages = angles.stages.size();
  if (grad_angles.size() != n_stages) {
    grad_angles.assign(n_stages, std::vector<double>(angles.n / 2, 0.0));
  }
  // Record the input of every applied stage.
  std::vector<std::vector<double>> inputs;
  inputs.reserve(n_stages);
  std::vector<double> cur(x.begin(), x.end());
  std::vector<std::size_t> order(n_stages);
  for (std::size_t k = 0; k < n_stages; ++k) order[k] = inverse ? n_stages - 1 - k : k;
  for (std::size_t k = 0; k < n_stages; ++k) {
    inputs.push_back(cur);
    const std::size_t s = order[k];
    for_each_pair(angles.n, s, [&](std::size_t p, std::size_t a, std::size_t b) {
      rotate(cur[a], cur[b], angles.stages[s][p], inverse);
    });
  }
  std::vector<double> grad(grad_out.begin(), grad_out.end());
  for (std::size_t k = n_stages; k-- > 0;) {
    const std::size_t s = order[k];
    const auto& in = inputs[k];
    for_each_pair(angles.n, s, [&](std::size_t p, std::size_t a, std::size_t b) {
      const double t = angles.stages[s][p];
      const double c = std::cos(t);
      const double sn = std::sin(t);
      const double ga = grad[a];
      const double gb = grad[b];
      // forward: na = c a + sgn s b ; nb = -sgn s a + c b, sgn = -1 when transposed
      const double sg = inverse ? -1.0 : 1.0;
      const double dna_dt = -sn * in[a] + sg * c * in[b];
      const double dnb_dt = -sg * c * in[a] - sn * in[b];
      grad_angles[s][p] += ga * dna_dt + gb * dnb_dt;
      grad[a] = c * ga - sg * sn * gb;
      grad[b] = sg * sn * ga + c * gb;
    });
  }
  return grad;
}

MatrixD butterfly_matrix(const ButterflyAngles& angles) {
  const std::size_t n = angles.n;
  MatrixD b(n, n);
  std::vector<double> column(n);
  for (std::size_t c = 0; c < n; ++c) {
    std::fill(column.begin(), column.end(), 0.0);
    column[c] = 1.0;
    butterfly_apply_inplace(angles, column, false);
    for (std::size_t r = 0; r < n; ++r) b(r, c) = column[r];
  }
  return b;
}

MatrixD cayley_step(const MatrixD& r, const MatrixD& g, double lr) {
  if (r.rows() != r.cols() || g.rows() != r.rows() || g.cols() != r.cols()) {
    throw ShapeError("cayley_step: R and G must be square and of equal size");
  }
  if (!r.allFinite() || !g.allFinite() || !std::isfinite(lr)) throw InputError("cayley_step: non-finite input");
  if (orthogonality_error(r) > 1e-4) throw InputError("cayley_step: R is not orthogonal");
  const Eigen::Index n = r.rows();
  const MatrixD a = 0.5 * (g * r.transpose() - r * g.transpose());
  const MatrixD identity = MatrixD::Identity(n, n);
  const MatrixD lhs = identity - 0.5 * lr * a;
  const MatrixD rhs = (identity + 0.5 * lr * a) * r;
  Eigen::FullPivLU<MatrixD> lu(lhs);
  if (!lu.isInvertible() || lu.rcond() < 1e-12) {
    throw StepSizeError("cayley_step: (I - lr/2 A) is singular; halve the step size");
  }
  return lu.solve(rhs);
}

}  // namespace bq2
