#pragma once

#include "bq2/matrix.hpp"
#include "bq2/model.hpp"
#include "bq2/rng.hpp"

#include <unistd.h>

#include <filesystem>
#include <string>

namespace bq2::test {

inline ModelConfig tiny_config(std::uint64_t seed = 5) {
  ModelConfig c;
  c.d_model = 16;
  c.n_layers = 2;
  c.n_heads = 2;
  c.n_kv_heads = 1;
  c.d_ff = 32;
  c.max_seq = 64;
  c.seed = seed;
  return c;
}

// Untrained model with non-trivial norm scales.
inline Model tiny_model(std::uint64_t seed = 5) {
  Model m = Model::init(tiny_config(seed));
  Rng rng(mix_seed(seed, 99));
  auto jitter = [&](Vector& v) {
    for (int i = 0; i < v.size(); ++i) v(i) = static_cast<float>(0.5 + rng.uniform());
  };
  for (auto& l : m.layers) {
    jitter(l.attn_norm);
    jitter(l.ffn_norm);
  }
  jitter(m.final_norm);
  return m;
}

inline MatrixD random_matrix(int rows, int cols, Rng& rng, double scale = 1.0) {
  MatrixD m(rows, cols);
  for (int i = 0; i < rows; ++i)
    for (int j = 0; j < cols; ++j) m(i, j) = scale * rng.normal();
  return m;
}

// X^T X / N + eps I for a random X with a few correlated columns.
inline MatrixD random_spd(int n, Rng& rng, double eps = 1e-2) {
  MatrixD x = random_matrix(4 * n, n, rng);
  for (int i = 0; i < x.rows(); ++i)
    for (int j = 1; j < n; ++j) x(i, j) += 0.5 * x(i, j - 1);
  MatrixD h = x.transpose() * x / static_cast<double>(x.rows());
  h += eps * MatrixD::Identity(n, n);
  return 0.5 * (h + h.transpose());
}

inline MatrixD random_orthogonal(int n, Rng& rng) {
  Eigen::HouseholderQR<MatrixD> qr(random_matrix(n, n, rng));
  return qr.householderQ() * MatrixD::Identity(n, n);
}

inline std::vector<std::vector<int>> probe_prompts(int count, int len, std::uint64_t seed) {
  Rng rng(seed);
  std::vector<std::vector<int>> out(static_cast<std::size_t>(count));
  for (auto& p : out)
    for (int i = 0; i < len; ++i) p.push_back(static_cast<int>(rng.below(kVocabSize)));
  return out;
}

inline double max_abs(const MatrixD& a, const MatrixD& b) { return (a - b).cwiseAbs().maxCoeff(); }

class TempDir {
 public:
  explicit TempDir(const std::string& tag) {
    path_ = std::filesystem::temp_directory_path() / ("bq2_test_" + tag + "_" + std::to_string(::getpid()));
    std::filesystem::remove_all(path_);
    std::filesystem::create_directories(path_);
  }
  ~TempDir() { std::filesystem::remove_all(path_); }
  const std::filesystem::path& path() const { return path_; }

 private:
  std::filesystem::path path_;
};

}  // namespace bq2::test
