#pragma once

#include "bq2/matrix.hpp"
#include "bq2/model.hpp"

#include <cstdint>
#include <filesystem>
#include <map>
#include <utility>
#include <vector>

namespace bq2 {

class Grammar;

struct CalibConfig {
  int n_sequences = 64;
  int seq_len = 256;
  std::uint64_t corpus_seed = 99;
  double damping = 0.01;

  void validate() const;
};

using Corpus = std::vector<std::vector<int>>;

// Sequences sampled from the synthetic grammar; deterministic in corpus_seed.
Corpus generate_corpus(const CalibConfig& cfg, const Grammar& grammar);

struct SublayerId {
  int layer = 0;
  SublayerKind kind = SublayerKind::qkv_in;

  auto operator<=>(const SublayerId&) const = default;
};

struct HessianEntry {
  MatrixD h;
  std::uint64_t count = 0;
};

using HessianSet = std::map<SublayerId, HessianEntry>;

// H = X^T X / N at the inputs of every linear site, accumulated in 64-bit.
// Sequences are grouped into fixed shards whose partial sums are reduced in
// ascending shard order, so the result does not depend on `workers`.
HessianSet collect_hessians(const InferenceModel& model, const Corpus& corpus, int workers = 1);
HessianSet collect_hessians(const Model& model, const Corpus& corpus, int workers = 1);

// Rounds every matrix to the 32-bit storage precision of the file format.
void round_to_storage(HessianSet& set);

// H + lambda * mean(diag H) * I
MatrixD damped(const MatrixD& h, double lambda);

std::filesystem::path hessian_filename(const SublayerId& id);
void persist_hessians(const HessianSet& set, const std::filesystem::path& dir);
HessianSet load_hessians(const std::filesystem::path& dir);

void write_hessian_file(const std::filesystem::path& path, const HessianEntry& entry);
HessianEntry read_hessian_file(const std::filesystem::path& path);

}  // namespace bq2
