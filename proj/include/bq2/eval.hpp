#pragma once

#include "bq2/calibration.hpp"
#include "bq2/model.hpp"
#include "bq2/quantizers.hpp"
#include "bq2/tasks.hpp"

#include <json.hpp>

#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <vector>

namespace bq2 {

struct TaskRow {
  std::string task;
  std::string metric;
  double value = 0.0;

  bool operator==(const TaskRow&) const = default;
};

// Prompt for one item: `shots` solved items of the same task family, drawn
// from the task list by a seeded choice that never includes the item itself,
// each rendered as context + answer + "\n", followed by the item's context.
std::string build_prompt(const std::vector<ToyTask>& tasks, std::size_t index, int shots, std::uint64_t seed);

struct McItem {
  std::string id;
  std::vector<double> loglik;
  int chosen = 0;       // argmax loglik, ties to the lowest index
  int chosen_norm = 0;  // argmax loglik / option byte length
};

struct McResult {
  double acc = 0.0;
  double acc_norm = 0.0;
  std::vector<TaskRow> rows;  // per task family: acc, acc_norm
  std::vector<McItem> items;
};

McResult mc_eval(const InferenceModel& model, const std::vector<ToyTask>& tasks, int shots = 0, std::uint64_t seed = 0,
                 int workers = 1);

struct GenItem {
  std::string id;
  std::string output;
  bool match = false;
};

struct GenResult {
  double exact_match = 0.0;
  std::vector<TaskRow> rows;  // per task family: exact_match
  std::vector<GenItem> items;
};

// Greedy generation up to max_tokens, cut at the first `until`; the match
// compares trimmed strings, or the first regex match against the trimmed
// target when the task has a regex.
GenResult gen_eval(const InferenceModel& model, const std::vector<ToyTask>& tasks, int shots = 0, std::uint64_t seed = 0,
                   int workers = 1);

// exp(mean negative log-likelihood per predicted token)
double perplexity(const InferenceModel& model, const Corpus& corpus, int workers = 1);
// (q - base) / base * 100
double ppl_rel_degradation(double q, double base);
// (score - baseline) / (100 - baseline) * 100; ConfigError when baseline >= 100
double normalize_score(double score, double baseline);

struct RuntimeFlags {
  std::optional<bool> r3;
  std::optional<bool> r4;
};

// "r3=on,r4=off"; ConfigError on unknown names or values.
RuntimeFlags parse_runtime_flags(const std::string& text);
std::string format_runtime_flags(const RuntimeTransforms& rt);

struct DissociationResult {
  double a_mc = 0.0;
  std::vector<int> horizons;
  std::vector<double> a_gen;
  RuntimeTransforms flags;
  int mc_items = 0;
  int gen_prompts = 0;
};

// The FP model with the quantized model's rotations fused, runtime
// transforms all enabled as recorded in the quantized model.
Model reference_model(const Model& teacher, const QuantizedModel& qm);

// Evaluates `qm` (code level) with `flags` applied over its runtime
// transforms and compares against `reference`: A_mc is the fraction of MC
// items with the same argmax, A_gen(k) the mean fraction of the first k
// greedy tokens (after every task context) equal to the reference's.
DissociationResult dissociation_experiment(const InferenceModel& reference, const QuantizedModel& qm, const RuntimeFlags& flags,
                                           const std::vector<ToyTask>& tasks, const std::vector<int>& horizons = {1, 2, 4, 8, 16, 32},
                                           int workers = 1);

DissociationResult self_dissociation(const InferenceModel& reference, const std::vector<ToyTask>& tasks,
                                     const std::vector<int>& horizons = {1, 2, 4, 8, 16, 32}, int workers = 1);

struct FidelityResult {
  std::vector<double> layer_cosine;  // in QuantizedModel::layers order
  double min_cosine = 1.0;
  double top1 = 0.0;
  double top5 = 0.0;
  double max_abs_diff = 0.0;
  int positions = 0;
};

// Code-level model vs `dense` (= decompress_model(qm)) on every position of
// every probe.
FidelityResult fidelity_check(const QuantizedModel& qm, const Model& dense, const std::vector<std::vector<int>>& probes);

struct MethodResults {
  std::string method;
  std::vector<TaskRow> rows;
  std::optional<SizeReport> size;
  std::optional<double> mean_proxy_error;
};

struct MethodSummary {
  std::string method;
  double raw_average = 0.0;
  double normalized_average = 0.0;
  std::optional<double> bpw;
  std::optional<double> compression_ratio;
  std::optional<double> mean_proxy_error;
  std::map<std::string, double> bpw_by_kind;

  bool operator==(const MethodSummary&) const = default;
};

struct ReportRow {
  std::string method;
  std::string task;
  std::string metric;
  double value = 0.0;
  bool best = false;  // best value for (task, metric) across methods, ties all marked

  bool operator==(const ReportRow&) const = default;
};

struct EvalReport {
  std::vector<ReportRow> rows;  // sorted by (method, task, metric)
  std::vector<MethodSummary> summaries;
  std::map<std::string, double> baselines;
  nlohmann::json metadata;

  bool operator==(const EvalReport&) const = default;
};

// Scored metrics (aggregated): acc and exact_match, as percentages in the
// aggregates. Lower is better for perplexity, higher for everything else.
bool is_scored_metric(const std::string& metric);
bool lower_is_better(const std::string& metric);

// ReportError when methods do not share the same (task, metric) set, or a
// scored task has no baseline.
EvalReport build_report(const std::vector<MethodResults>& results, const std::map<std::string, double>& baselines,
                        nlohmann::json metadata = nlohmann::json::object());

// report.csv (method,task,metric,value), summary.csv and report.json.
void write_report(const EvalReport& report, const std::filesystem::path& dir);
EvalReport read_report(const std::filesystem::path& dir);
nlohmann::json report_to_json(const EvalReport& report);
EvalReport report_from_json(const nlohmann::json& j);
std::string report_csv(const EvalReport& report);

}  // namespace bq2
