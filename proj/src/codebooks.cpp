#include "bq2/codebooks.hpp"

#include "bq2/errors.hpp"
#include "bq2/rng.hpp"

#include <Eigen/Cholesky>

#include <algorithm>
#include <cmath>
#include <limits>
#include <numbers>
#include <numeric>

namespace bq2 {

namespace {

double dist2(const Vec8& a, const Vec8& b) {
  double s = 0.0;
  for (int i = 0; i < 8; ++i) s += (a[i] - b[i]) * (a[i] - b[i]);
  return s;
}

Vec8 d8_decode(const Vec8& x) {
  Vec8 r;
  double sum = 0.0;
  for (int i = 0; i < 8; ++i) {
    r[i] = std::floor(x[i] + 0.5);
    sum += r[i];
  }
  if (std::fmod(std::abs(sum), 2.0) != 0.0) {
    int worst = 0;
    double worst_err = -1.0;
    for (int i = 0; i < 8; ++i) {
      const double err = std::abs(x[i] - r[i]);
      if (err > worst_err) {
        worst_err = err;
        worst = i;
      }
    }
    r[worst] += x[worst] - r[worst] > 0.0 ? 1.0 : -1.0;
  }
  return r;
}

}  // namespace

Vec8 e8_nearest_point(const Vec8& x) {
  const Vec8 a = d8_decode(x);
  Vec8 shifted;
  for (int i = 0; i < 8; ++i) shifted[i] = x[i] - 0.5;
  Vec8 b = d8_decode(shifted);
  for (double& v : b) v += 0.5;
  const double da = dist2(a, x);
  const double db = dist2(b, x);
  if (da < db) return a;
  if (db < da) return b;
  return std::lexicographical_compare(b.begin(), b.end(), a.begin(), a.end()) ? b : a;
}

bool is_e8_point(const Vec8& y) {
  const bool integer = std::all_of(y.begin(), y.end(), [](double v) { return v == std::floor(v); });
  const bool half = std::all_of(y.begin(), y.end(), [](double v) { return v - 0.5 == std::floor(v - 0.5); });
  if (!integer && !half) return false;
  double sum = 0.0;
  for (double v : y) sum += v;
  return std::fmod(std::abs(sum), 2.0) == 0.0;
}

int BlockCodebook::index_bits() const {
  int bits = 0;
  while ((std::size_t{1} << bits) < size()) ++bits;
  return bits;
}

namespace {

// All points y of one coset (integer or half-integer coordinates) with
// ||y + shift||^2 <= radius2 and even coordinate sum.
void enumerate_coset(bool half, double shift, double radius2, std::vector<Vec8>& out) {
  Vec8 y{};
  const double offset = half ? 0.5 : 0.0;
  const int lim = static_cast<int>(std::ceil(std::sqrt(radius2))) + 2;
  auto rec = [&](auto&& self, int i, double partial, double sum) -> void {
    if (i == 8) {
      if (std::fmod(std::abs(sum), 2.0) == 0.0) out.push_back(y);
      return;
    }
    for (int k = -lim; k <= lim; ++k) {
      const double v = k + offset;
      const double c = (v + shift) * (v + shift);
      if (partial + c > radius2) continue;
      y[i] = v;
      self(self, i + 1, partial + c, sum + v);
    }
  };
  rec(rec, 0, 0.0, 0.0);
}

}  // namespace

std::uint64_t E8PCodebook::key(const Vec8& y) {
  std::uint64_t k = 0;
  for (int i = 0; i < 8; ++i) {
    const auto twice = static_cast<std::int8_t>(std::lround(2.0 * y[i]));
    k = (k << 8) | static_cast<std::uint8_t>(twice);
  }
  return k;
}

E8PCodebook E8PCodebook::build(std::size_t size, double scale, bool shifted) {
  if (size < 1) throw ConfigError("E8P codebook size must be >= 1");
  if (!(scale > 0.0)) throw ConfigError("E8P codebook scale must be positive");
  const double shift = shifted ? 0.25 : 0.0;
  // The E8 lattice has unit covolume, so a ball of volume `size` holds about
  // `size` points.
  double radius2 = std::pow(static_cast<double>(size) * 24.0 / std::pow(std::numbers::pi, 4.0), 0.25) + 0.5;
  std::vector<Vec8> pts;
  for (;;) {
    pts.clear();
    enumerate_coset(false, shift, radius2, pts);
    enumerate_coset(true, shift, radius2, pts);
    if (pts.size() >= size) break;
    radius2 += 0.5;
  }
  auto norm = [shift](const Vec8& y) {
    double s = 0.0;
    for (double v : y) s += (v + shift) * (v + shift);
    return s;
  };
  std::sort(pts.begin(), pts.end(), [&](const Vec8& a, const Vec8& b) {
    const double na = norm(a);
    const double nb = norm(b);
    if (na != nb) return na < nb;
    return std::lexicographical_compare(a.begin(), a.end(), b.begin(), b.end());
  });
  pts.resize(size);
  E8PCodebook cb;
  cb.scale_ = scale;
  cb.shifted_ = shifted;
  cb.entries_.reserve(size);
  for (std::size_t i = 0; i < size; ++i) {
    cb.lookup_.emplace(key(pts[i]), static_cast<std::uint32_t>(i));
    Vec8 e;
    for (int j = 0; j < 8; ++j) e[j] = (pts[i][j] + shift) * scale;
    cb.entries_.push_back(e);
  }
  return cb;
}

std::uint32_t E8PCodebook::brute_force_encode(std::span<const double> x) const {
  if (x.size() != 8) throw ShapeError("E8P encode expects 8 values");
  std::uint32_t best = 0;
  double best_d = std::numeric_limits<double>::infinity();
  for (std::size_t i = 0; i < entries_.size(); ++i) {
    double d = 0.0;
    for (int j = 0; j < 8; ++j) d += (entries_[i][j] - x[j]) * (entries_[i][j] - x[j]);
    if (d < best_d) {
      best_d = d;
      best = static_cast<std::uint32_t>(i);
    }
  }
  return best;
}

std::uint32_t E8PCodebook::encode(std::span<const double> x) const {
  if (x.size() != 8) throw ShapeError("E8P encode expects 8 values");
  const double shift = shifted_ ? 0.25 : 0.0;
  Vec8 u;
  for (int j = 0; j < 8; ++j) u[j] = x[j] / scale_ - shift;
  const auto it = lookup_.find(key(e8_nearest_point(u)));
  if (it != lookup_.end()) return it->second;
  return brute_force_encode(x);
}

void E8PCodebook::decode(std::uint32_t index, std::span<double> out) const {
  if (index >= entries_.size()) throw InputError("E8P index out of range");
  std::copy(entries_[index].begin(), entries_[index].end(), out.begin());
}

void Trellis::validate() const {
  if (n_states < 1) throw ConfigError("trellis has no states");
  if (bits < 1 || bits > 16) throw ConfigError("trellis branch bits must be in [1, 16]");
  const std::size_t n = static_cast<std::size_t>(n_states) * static_cast<std::size_t>(branches());
  if (next.size() != n || values.size() != n) throw ConfigError("trellis tables have the wrong size");
  for (int s : next)
    if (s < 0 || s >= n_states) throw ConfigError("trellis successor out of range");
}

Trellis Trellis::bitshift(int n_states, int bits) {
  if (n_states < 1 || !is_power_of_two(static_cast<std::size_t>(n_states))) {
    throw ConfigError("bitshift trellis needs a power-of-two state count");
  }
  Trellis t;
  t.n_states = n_states;
  t.bits = bits;
  const int levels = 1 << (bits + 1);
  for (int s = 0; s < n_states; ++s) {
    for (int b = 0; b < t.branches(); ++b) {
      t.next.push_back(((s << bits) | b) & (n_states - 1));
      const int level = 2 * b + (s & 1);
      t.values.push_back(static_cast<double>(2 * level + 1 - levels) / (levels - 1));
    }
  }
  return t;
}

TcqResult tcq_viterbi_encode(std::span<const double> seq, const Trellis& trellis, std::span<const double> weights,
                             int start_state) {
  trellis.validate();
  if (weights.size() != seq.size()) throw ShapeError("tcq: weight count must match sequence length");
  if (start_state < 0 || start_state >= trellis.n_states) throw ConfigError("tcq: start state out of range");
  const std::size_t n = seq.size();
  const int S = trellis.n_states;
  const int B = trellis.branches();
  std::vector<double> to_go(static_cast<std::size_t>(S), 0.0);
  std::vector<double> cur(static_cast<std::size_t>(S));
  std::vector<std::uint32_t> choice(n * static_cast<std::size_t>(S));
  for (std::size_t t = n; t-- > 0;) {
    for (int s = 0; s < S; ++s) {
      double best = std::numeric_limits<double>::infinity();
      int best_b = 0;
      for (int b = 0; b < B; ++b) {
        const std::size_t e = static_cast<std::size_t>(s * B + b);
        const double diff = seq[t] - trellis.values[e];
        const double c = weights[t] * diff * diff + to_go[static_cast<std::size_t>(trellis.next[e])];
        if (c < best) {
          best = c;
          best_b = b;
        }
      }
      cur[static_cast<std::size_t>(s)] = best;
      choice[t * static_cast<std::size_t>(S) + static_cast<std::size_t>(s)] = static_cast<std::uint32_t>(best_b);
    }
    std::swap(cur, to_go);
  }
  TcqResult r;
  r.cost = to_go[static_cast<std::size_t>(start_state)];
  int s = start_state;
  for (std::size_t t = 0; t < n; ++t) {
    const std::uint32_t b = choice[t * static_cast<std::size_t>(S) + static_cast<std::size_t>(s)];
    const std::size_t e = static_cast<std::size_t>(s * B) + b;
    r.path.push_back(b);
    r.reproduction.push_back(trellis.values[e]);
    s = trellis.next[e];
  }
  return r;
}

std::vector<double> tcq_decode(std::span<const std::uint32_t> path, const Trellis& trellis, int start_state) {
  trellis.validate();
  std::vector<double> out;
  out.reserve(path.size());
  int s = start_state;
  for (std::uint32_t b : path) {
    if (b >= static_cast<std::uint32_t>(trellis.branches())) throw InputError("tcq: branch index out of range");
    const std::size_t e = static_cast<std::size_t>(s * trellis.branches()) + b;
    out.push_back(trellis.values[e]);
    s = trellis.next[e];
  }
  return out;
}

void VQCodebook::validate() const {
  if (g < 1 || centroids.rows() < 1 || centroids.cols() != g) throw ConfigError("VQ codebook needs K >= 1 centroids of width g");
  if (residual.size() > 0) {
    if (residual.cols() != g) throw ConfigError("VQ residual table has the wrong width");
    if (!residual.row(0).isZero(0.0)) throw ConfigError("VQ residual table must start with the zero vector");
  }
}

std::uint32_t nearest_row(const MatrixD& table, std::span<const double> x) {
  std::uint32_t best = 0;
  double best_d = std::numeric_limits<double>::infinity();
  const Eigen::Index g = table.cols();
  for (Eigen::Index k = 0; k < table.rows(); ++k) {
    const double* c = table.row(k).data();
    double d = 0.0;
    for (Eigen::Index j = 0; j < g; ++j) d += (x[static_cast<std::size_t>(j)] - c[j]) * (x[static_cast<std::size_t>(j)] - c[j]);
    if (d < best_d) {
      best_d = d;
      best = static_cast<std::uint32_t>(k);
    }
  }
  return best;
}

MatrixD kmeans_init(const MatrixD& vectors, int k, std::uint64_t seed) {
  if (k < 1) throw ConfigError("k-means needs K >= 1");
  std::vector<Eigen::Index> order(static_cast<std::size_t>(vectors.rows()));
  std::iota(order.begin(), order.end(), 0);
  Rng rng(mix_seed(seed, 0x4b4dULL));
  for (std::size_t i = order.size(); i > 1; --i) std::swap(order[i - 1], order[rng.below(i)]);
  MatrixD init(k, vectors.cols());
  int found = 0;
  for (Eigen::Index idx : order) {
    bool duplicate = false;
    for (int c = 0; c < found && !duplicate; ++c) duplicate = init.row(c) == vectors.row(idx);
    if (duplicate) continue;
    init.row(found++) = vectors.row(idx);
    if (found == k) return init;
  }
  throw ConfigError("k-means: K exceeds the number of distinct vectors");
}

KMeansResult kmeans_weighted(const MatrixD& vectors, const VectorD& weights, MatrixD init, int iters) {
  const Eigen::Index n = vectors.rows();
  const Eigen::Index g = vectors.cols();
  const Eigen::Index k = init.rows();
  if (k < 1) throw ConfigError("k-means needs K >= 1");
  if (weights.size() != n) throw ShapeError("k-means: one weight per vector required");
  if (init.cols() != g) throw ShapeError("k-means: initial centroids have the wrong width");
  KMeansResult r;
  r.codebook.g = static_cast<int>(g);
  r.codebook.centroids = std::move(init);
  MatrixD& c = r.codebook.centroids;
  r.assignment.assign(static_cast<std::size_t>(n), 0);
  std::vector<double> err(static_cast<std::size_t>(n));
  for (int it = 0; it < iters; ++it) {
    for (Eigen::Index i = 0; i < n; ++i) {
      const std::span<const double> x(vectors.row(i).data(), static_cast<std::size_t>(g));
      const std::uint32_t a = nearest_row(c, x);
      r.assignment[static_cast<std::size_t>(i)] = a;
      err[static_cast<std::size_t>(i)] = weights(i) * (vectors.row(i) - c.row(a)).squaredNorm();
    }
    std::vector<Eigen::Index> count(static_cast<std::size_t>(k), 0);
    for (std::uint32_t a : r.assignment) ++count[a];
    for (Eigen::Index cl = 0; cl < k; ++cl) {
      if (count[static_cast<std::size_t>(cl)] > 0) continue;
      Eigen::Index far = -1;
      for (Eigen::Index i = 0; i < n; ++i) {
        if (count[r.assignment[static_cast<std::size_t>(i)]] < 2) continue;
        if (far < 0 || err[static_cast<std::size_t>(i)] > err[static_cast<std::size_t>(far)]) far = i;
      }
      if (far < 0) break;
      --count[r.assignment[static_cast<std::size_t>(far)]];
      r.assignment[static_cast<std::size_t>(far)] = static_cast<std::uint32_t>(cl);
      err[static_cast<std::size_t>(far)] = 0.0;
      count[static_cast<std::size_t>(cl)] = 1;
      c.row(cl) = vectors.row(far);
    }
    MatrixD sum = MatrixD::Zero(k, g);
    VectorD wsum = VectorD::Zero(k);
    for (Eigen::Index i = 0; i < n; ++i) {
      const std::uint32_t a = r.assignment[static_cast<std::size_t>(i)];
      sum.row(a) += weights(i) * vectors.row(i);
      wsum(a) += weights(i);
    }
    for (Eigen::Index cl = 0; cl < k; ++cl)
      if (wsum(cl) > 0.0) c.row(cl) = sum.row(cl) / wsum(cl);
    double sse = 0.0;
    for (Eigen::Index i = 0; i < n; ++i) sse += weights(i) * (vectors.row(i) - c.row(r.assignment[static_cast<std::size_t>(i)])).squaredNorm();
    r.sse_trace.push_back(sse);
  }
  return r;
}

KMeansResult kmeans_weighted(const MatrixD& vectors, const VectorD& weights, int k, int iters, std::uint64_t seed) {
  return kmeans_weighted(vectors, weights, kmeans_init(vectors, k, seed), iters);
}

ResidualCodes residual_encode(const MatrixD& vectors, const VQCodebook& cb) {
  if (cb.residual.size() == 0) throw ConfigError("residual_encode: codebook has no residual table");
  cb.validate();
  ResidualCodes out;
  const auto g = static_cast<std::size_t>(cb.g);
  std::vector<double> r(g);
  for (Eigen::Index i = 0; i < vectors.rows(); ++i) {
    const std::uint32_t p = nearest_row(cb.centroids, {vectors.row(i).data(), g});
    for (std::size_t j = 0; j < g; ++j) r[j] = vectors(i, static_cast<Eigen::Index>(j)) - cb.centroids(p, static_cast<Eigen::Index>(j));
    out.primary.push_back(p);
    out.residual.push_back(nearest_row(cb.residual, r));
  }
  return out;
}

MatrixD residual_decode(const ResidualCodes& codes, const VQCodebook& cb) {
  MatrixD out(static_cast<Eigen::Index>(codes.primary.size()), cb.g);
  for (std::size_t i = 0; i < codes.primary.size(); ++i) {
    out.row(static_cast<Eigen::Index>(i)) = cb.centroids.row(codes.primary[i]);
    if (cb.residual.size() > 0) out.row(static_cast<Eigen::Index>(i)) += cb.residual.row(codes.residual[i]);
  }
  return out;
}

VQCodebook train_residual_vq(const MatrixD& vectors, const VectorD& weights, int k, int k_residual, int iters,
                             std::uint64_t seed) {
  if (k_residual < 2) throw ConfigError("residual table needs at least 2 entries");
  KMeansResult primary = kmeans_weighted(vectors, weights, k, iters, seed);
  MatrixD residuals(vectors.rows(), vectors.cols());
  for (Eigen::Index i = 0; i < vectors.rows(); ++i) {
    residuals.row(i) = vectors.row(i) - primary.codebook.centroids.row(primary.assignment[static_cast<std::size_t>(i)]);
  }
  KMeansResult second = kmeans_weighted(residuals, weights, k_residual - 1, iters, mix_seed(seed, 0x5245ULL));
  VQCodebook cb = primary.codebook;
  cb.residual = MatrixD::Zero(k_residual, vectors.cols());
  cb.residual.bottomRows(k_residual - 1) = second.codebook.centroids;
  return cb;
}

namespace {

constexpr int kMaxBooks = 8;
constexpr int kMaxGroup = 16;

struct BeamEntry {
  double err = 0.0;
  std::array<std::uint32_t, kMaxBooks> codes{};
  std::array<double, kMaxGroup> sum{};
};

}  // namespace

std::vector<std::uint32_t> aq_beam_encode(std::span<const double> group, const AdditiveCodebooks& cbs, int beam) {
  if (beam < 1) throw ConfigError("aq_beam_encode: beam must be >= 1");
  if (cbs.books.empty()) throw ConfigError("aq_beam_encode: no codebooks");
  if (cbs.m() > kMaxBooks || cbs.g > kMaxGroup) throw ConfigError("aq_beam_encode: at most 8 codebooks of width <= 16");
  const auto g = static_cast<std::size_t>(cbs.g);
  if (group.size() != g) throw ShapeError("aq_beam_encode: group size mismatch");
  std::vector<BeamEntry> frontier(1);
  std::vector<BeamEntry> next;
  std::vector<std::size_t> order;
  for (std::size_t m = 0; m < cbs.books.size(); ++m) {
    const MatrixD& book = cbs.books[m];
    next.clear();
    for (const BeamEntry& e : frontier) {
      for (Eigen::Index k = 0; k < book.rows(); ++k) {
        BeamEntry c = e;
        c.codes[m] = static_cast<std::uint32_t>(k);
        c.err = 0.0;
        for (std::size_t j = 0; j < g; ++j) {
          c.sum[j] += book(k, static_cast<Eigen::Index>(j));
          const double d = group[j] - c.sum[j];
          c.err += d * d;
        }
        next.push_back(c);
      }
    }
    const std::size_t used = m + 1;
    auto less = [used](const BeamEntry& a, const BeamEntry& b) {
      if (a.err != b.err) return a.err < b.err;
      return std::lexicographical_compare(a.codes.begin(), a.codes.begin() + static_cast<std::ptrdiff_t>(used),
                                          b.codes.begin(), b.codes.begin() + static_cast<std::ptrdiff_t>(used));
    };
    const std::size_t keep = std::min(next.size(), static_cast<std::size_t>(beam));
    std::partial_sort(next.begin(), next.begin() + static_cast<std::ptrdiff_t>(keep), next.end(), less);
    next.resize(keep);
    std::swap(frontier, next);
  }
  return {frontier.front().codes.begin(), frontier.front().codes.begin() + cbs.m()};
}

std::vector<double> aq_decode(std::span<const std::uint32_t> codes, const AdditiveCodebooks& cbs) {
  if (codes.size() != cbs.books.size()) throw ShapeError("aq_decode: one index per codebook required");
  std::vector<double> out(static_cast<std::size_t>(cbs.g), 0.0);
  for (std::size_t m = 0; m < codes.size(); ++m)
    for (int j = 0; j < cbs.g; ++j) out[static_cast<std::size_t>(j)] += cbs.books[m](codes[m], j);
  return out;
}

double aq_error(const MatrixD& groups, std::span<const std::uint32_t> assignments, const AdditiveCodebooks& cbs) {
  const std::size_t m = cbs.books.size();
  double total = 0.0;
  for (Eigen::Index i = 0; i < groups.rows(); ++i) {
    const auto rec = aq_decode(assignments.subspan(static_cast<std::size_t>(i) * m, m), cbs);
    for (int j = 0; j < cbs.g; ++j) {
      const double d = groups(i, j) - rec[static_cast<std::size_t>(j)];
      total += d * d;
    }
  }
  return total;
}

AdditiveCodebooks aq_update_codebooks(const MatrixD& groups, std::span<const std::uint32_t> assignments,
                                      const AdditiveCodebooks& cbs) {
  const int m = cbs.m();
  if (m < 1) throw ConfigError("aq_update_codebooks: no codebooks");
  if (assignments.size() != static_cast<std::size_t>(groups.rows()) * static_cast<std::size_t>(m)) {
    throw ShapeError("aq_update_codebooks: assignment count mismatch");
  }
  std::vector<Eigen::Index> offset(static_cast<std::size_t>(m) + 1, 0);
  for (int b = 0; b < m; ++b) offset[static_cast<std::size_t>(b) + 1] = offset[static_cast<std::size_t>(b)] + cbs.books[static_cast<std::size_t>(b)].rows();
  const Eigen::Index total = offset.back();
  MatrixD current(total, cbs.g);
  for (int b = 0; b < m; ++b) current.middleRows(offset[static_cast<std::size_t>(b)], cbs.books[static_cast<std::size_t>(b)].rows()) = cbs.books[static_cast<std::size_t>(b)];

  // Normal equations for the update D: (A + eps I) D = sum_n b_n r_n^T with
  // r_n the current residual of group n.
  MatrixD a = MatrixD::Zero(total, total);
  MatrixD rhs = MatrixD::Zero(total, cbs.g);
  std::vector<Eigen::Index> idx(static_cast<std::size_t>(m));
  for (Eigen::Index i = 0; i < groups.rows(); ++i) {
    Eigen::RowVectorXd r = groups.row(i);
    for (int b = 0; b < m; ++b) {
      const std::uint32_t code = assignments[static_cast<std::size_t>(i) * static_cast<std::size_t>(m) + static_cast<std::size_t>(b)];
      if (code >= cbs.books[static_cast<std::size_t>(b)].rows()) throw InputError("aq_update_codebooks: index out of range");
      idx[static_cast<std::size_t>(b)] = offset[static_cast<std::size_t>(b)] + code;
      r -= current.row(idx[static_cast<std::size_t>(b)]);
    }
    for (int p = 0; p < m; ++p) {
      rhs.row(idx[static_cast<std::size_t>(p)]) += r;
      for (int q = 0; q < m; ++q) a(idx[static_cast<std::size_t>(p)], idx[static_cast<std::size_t>(q)]) += 1.0;
    }
  }
  a.diagonal().array() += 1e-8;
  const MatrixD delta = a.ldlt().solve(rhs);
  AdditiveCodebooks out = cbs;
  for (int b = 0; b < m; ++b) {
    MatrixD& book = out.books[static_cast<std::size_t>(b)];
    for (Eigen::Index k = 0; k < book.rows(); ++k) {
      const Eigen::Index row = offset[static_cast<std::size_t>(b)] + k;
      if (a(row, row) > 1e-8) book.row(k) += delta.row(row);
    }
  }
  return out;
}

}  // namespace bq2
