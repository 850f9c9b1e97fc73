#pragma once

#include "bq2/calibration.hpp"
#include "bq2/model.hpp"
#include "bq2/quantizers.hpp"
#include "bq2/train.hpp"

#include <json.hpp>

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

namespace bq2::cli {

struct GrammarSection {
  int n_stems = 24;
  int sentence_words = 5;
};

struct TaskSection {
  int per_family = 50;
  int shots = 0;
};

struct EvalSection {
  int ppl_sequences = 16;
  int ppl_seq_len = 256;
  int probes = 16;
  int probe_len = 64;
  std::vector<int> horizons{1, 2, 4, 8, 16, 32};
};

struct DistillSection {
  DistillConfig config;
  int sequences = 32;
  int seq_len = 128;
};

// Optional overrides for the artifact locations under the output directory.
struct PathSection {
  std::optional<std::filesystem::path> checkpoint;
  std::optional<std::filesystem::path> hessians;
  std::optional<std::filesystem::path> mc_tasks;
  std::optional<std::filesystem::path> gen_tasks;
};

// Every seed of a run derives from `seed`; method entries may pin their own.
struct RunConfig {
  int schema_version = 1;
  std::uint64_t seed = 7;
  int workers = 0;
  std::filesystem::path out = "bq2-run";
  ModelConfig model;
  TrainConfig train;
  GrammarSection grammar;
  CalibConfig calibration;
  TaskSection tasks;
  EvalSection eval;
  DistillSection distill;
  std::vector<QuantMethodConfig> methods;
  std::vector<bool> method_seed_pinned;
  std::string dissociation_flags = "r4=off";
  PathSection paths;

  // Applies the seed derivation; call after changing `seed`.
  void derive_seeds();
  void validate() const;

  std::uint64_t grammar_seed() const { return seed; }
  std::uint64_t task_seed() const;
  std::uint64_t eval_seed() const;
  std::uint64_t distill_seed() const;

  std::filesystem::path checkpoint_dir() const;
  std::filesystem::path hessian_dir() const;
  std::filesystem::path mc_task_file() const;
  std::filesystem::path gen_task_file() const;
  std::filesystem::path quantized_dir(const std::string& id) const { return out / "quantized" / id; }
  std::filesystem::path distilled_dir(const std::string& id) const { return out / "distilled" / id; }
  std::filesystem::path decompressed_dir(const std::string& id) const { return out / "decompressed" / id; }
  std::filesystem::path eval_dir(const std::string& id) const { return out / "eval" / id; }
  std::filesystem::path report_dir() const { return out / "report"; }
};

RunConfig default_run_config();
RunConfig run_config_from_json(const nlohmann::json& j);
RunConfig load_run_config(const std::filesystem::path& path);
// Canonical form; `out` and `workers` are omitted because they never affect
// results.
nlohmann::json run_config_to_json(const RunConfig& cfg);
std::string config_hash(const RunConfig& cfg);

}  // namespace bq2::cli
