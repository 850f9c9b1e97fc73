#pragma once

#include "bq2/matrix.hpp"

#include <array>
#include <cstdint>
#include <span>
#include <unordered_map>
#include <vector>

namespace bq2 {

using Vec8 = std::array<double, 8>;

// Nearest point of E8 = D8 u (D8 + 1/2), decoded on both cosets; ties between
// the cosets go to the lexicographically smaller point.
Vec8 e8_nearest_point(const Vec8& x);
bool is_e8_point(const Vec8& y);

// Fixed-dimension codebook used by block rounding.
class BlockCodebook {
 public:
  virtual ~BlockCodebook() = default;
  virtual int dim() const = 0;
  virtual std::size_t size() const = 0;
  // Index of the nearest entry; ties go to the smaller index.
  virtual std::uint32_t encode(std::span<const double> x) const = 0;
  virtual void decode(std::uint32_t index, std::span<double> out) const = 0;
  // Bits needed per code.
  int index_bits() const;
};

// The `size` least-norm points of E8 + (1/4, ..., 1/4) (or of E8 itself when
// shifted = false), ordered by (norm, lexicographic), times `scale`.
class E8PCodebook final : public BlockCodebook {
 public:
  static E8PCodebook build(std::size_t size, double scale = 1.0, bool shifted = true);

  int dim() const override { return 8; }
  std::size_t size() const override { return entries_.size(); }
  std::uint32_t encode(std::span<const double> x) const override;
  void decode(std::uint32_t index, std::span<double> out) const override;

  std::uint32_t brute_force_encode(std::span<const double> x) const;
  const Vec8& entry(std::size_t i) const { return entries_[i]; }
  double scale() const { return scale_; }
  bool shifted() const { return shifted_; }

 private:
  static std::uint64_t key(const Vec8& unscaled);
  std::vector<Vec8> entries_;  // scaled
  std::unordered_map<std::uint64_t, std::uint32_t> lookup_;
  double scale_ = 1.0;
  bool shifted_ = true;
};

// State machine with 2^bits outgoing branches per state; each branch carries
// a successor state and a reproduction value.
struct Trellis {
  int n_states = 0;
  int bits = 1;
  std::vector<int> next;        // [state * branches + branch]
  std::vector<double> values;   // same layout

  int branches() const { return 1 << bits; }
  void validate() const;

  // Shift-register trellis: next = ((s << bits) | b) mod n_states. Branch b
  // of state s reproduces level 2b + (s & 1) of a uniform grid with
  // 2^(bits+1) levels on [-1, 1], so consecutive states alternate between
  // two interleaved subsets.
  static Trellis bitshift(int n_states, int bits);
};

struct TcqResult {
  std::vector<std::uint32_t> path;  // branch per symbol
  std::vector<double> reproduction;
  double cost = 0.0;
};

// Minimizes sum_i w_i (x_i - value_i)^2 over all paths from `start_state` by
// dynamic programming; among optimal paths the lexicographically smallest
// branch sequence is returned.
TcqResult tcq_viterbi_encode(std::span<const double> seq, const Trellis& trellis, std::span<const double> weights,
                             int start_state = 0);
std::vector<double> tcq_decode(std::span<const std::uint32_t> path, const Trellis& trellis, int start_state = 0);

struct VQCodebook {
  int g = 0;
  MatrixD centroids;  // K x g
  MatrixD residual;   // K_r x g, row 0 is zero when present

  void validate() const;
};

struct KMeansResult {
  VQCodebook codebook;
  std::vector<std::uint32_t> assignment;
  std::vector<double> sse_trace;  // weighted SSE after each iteration
};

// Seeded choice of K distinct rows as initial centroids.
MatrixD kmeans_init(const MatrixD& vectors, int k, std::uint64_t seed);

// Weighted Lloyd iterations. Assignment by Euclidean distance (ties to the
// smaller index); centroids are weighted means; an empty cluster is moved to
// the point with the largest weighted error, which then joins it.
KMeansResult kmeans_weighted(const MatrixD& vectors, const VectorD& weights, int k, int iters, std::uint64_t seed);
KMeansResult kmeans_weighted(const MatrixD& vectors, const VectorD& weights, MatrixD init, int iters);

std::uint32_t nearest_row(const MatrixD& table, std::span<const double> x);

struct ResidualCodes {
  std::vector<std::uint32_t> primary;
  std::vector<std::uint32_t> residual;
};

ResidualCodes residual_encode(const MatrixD& vectors, const VQCodebook& cb);
MatrixD residual_decode(const ResidualCodes& codes, const VQCodebook& cb);

// Primary k-means followed by k-means on the residuals; the residual table
// gets an exactly-zero first row and k_residual - 1 learned rows.
VQCodebook train_residual_vq(const MatrixD& vectors, const VectorD& weights, int k, int k_residual, int iters,
                             std::uint64_t seed);

struct AdditiveCodebooks {
  int g = 0;
  std::vector<MatrixD> books;  // each K x g

  int m() const { return static_cast<int>(books.size()); }
};

// Beam search over the codebooks in order, keeping the `beam` best partial
// sums (ties by index sequence). Returns one index per codebook.
std::vector<std::uint32_t> aq_beam_encode(std::span<const double> group, const AdditiveCodebooks& cbs, int beam);
std::vector<double> aq_decode(std::span<const std::uint32_t> codes, const AdditiveCodebooks& cbs);

// Least-squares re-solve of all entries for fixed assignments (N x M,
// row-major), ridge 1e-8 on the update. Entries no group uses are unchanged.
AdditiveCodebooks aq_update_codebooks(const MatrixD& groups, std::span<const std::uint32_t> assignments,
                                      const AdditiveCodebooks& cbs);
double aq_error(const MatrixD& groups, std::span<const std::uint32_t> assignments, const AdditiveCodebooks& cbs);

}  // namespace bq2
