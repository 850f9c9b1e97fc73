#include "run_config.hpp"

#include "bq2/errors.hpp"
#include "bq2/matrix.hpp"
#include "bq2/rng.hpp"

#include <cstdio>
#include <fstream>
#include <set>

namespace bq2::cli {

using nlohmann::json;

namespace {

constexpr int kSchemaVersion = 1;

enum SeedTag : std::uint64_t { kModelSeed = 1, kTrainSeed, kCalibSeed, kTaskSeed, kEvalSeed, kDistillSeed };

void check_keys(const json& j, const std::string& where, const std::set<std::string>& allowed) {
  if (!j.is_object()) throw ConfigError(where + " must be an object");
  for (const auto& [key, value] : j.items()) {
    if (!allowed.count(key)) throw ConfigError("unknown key '" + key + "' in " + where);
  }
}

template <typename T>
void read(const json& j, const char* key, T& into) {
  if (j.contains(key)) into = j.at(key).get<T>();
}

std::optional<std::filesystem::path> read_path(const json& j, const char* key) {
  if (!j.contains(key) || j.at(key).is_null()) return std::nullopt;
  return std::filesystem::path(j.at(key).get<std::string>());
}

}  // namespace

void RunConfig::derive_seeds() {
  model.seed = mix_seed(seed, kModelSeed);
  train.data_seed = mix_seed(seed, kTrainSeed);
  calibration.corpus_seed = mix_seed(seed, kCalibSeed);
  for (std::size_t i = 0; i < methods.size(); ++i) {
    if (!method_seed_pinned[i]) methods[i].seed = mix_seed(seed, fnv1a64(methods[i].id));
  }
}

std::uint64_t RunConfig::task_seed() const { return mix_seed(seed, kTaskSeed); }
std::uint64_t RunConfig::eval_seed() const { return mix_seed(seed, kEvalSeed); }
std::uint64_t RunConfig::distill_seed() const { return mix_seed(seed, kDistillSeed); }

void RunConfig::validate() const {
  if (schema_version != kSchemaVersion) throw ConfigError("unsupported schema_version " + std::to_string(schema_version));
  if (workers < 0) throw ConfigError("workers must be >= 0");
  model.validate();
  calibration.validate();
  if (train.steps < 0 || train.batch < 1 || train.seq_len < 2 || !(train.lr > 0.0)) throw ConfigError("invalid train section");
  if (train.seq_len > model.max_seq) throw ConfigError("train.seq_len exceeds model.max_seq");
  if (calibration.seq_len > model.max_seq) throw ConfigError("calibration.seq_len exceeds model.max_seq");
  if (grammar.n_stems < 2 || grammar.sentence_words < 3) throw ConfigError("grammar needs n_stems >= 2 and sentence_words >= 3");
  if (tasks.per_family < 1 || tasks.shots < 0) throw ConfigError("tasks need per_family >= 1 and shots >= 0");
  if (eval.ppl_sequences < 1 || eval.ppl_seq_len < 2 || eval.ppl_seq_len > model.max_seq) throw ConfigError("invalid perplexity corpus size");
  if (eval.probes < 1 || eval.probe_len < 1 || eval.probe_len > model.max_seq) throw ConfigError("invalid probe size");
  if (eval.horizons.empty()) throw ConfigError("eval.horizons must not be empty");
  for (std::size_t i = 0; i < eval.horizons.size(); ++i) {
    if (eval.horizons[i] < 1 || (i > 0 && eval.horizons[i] <= eval.horizons[i - 1])) {
      throw ConfigError("eval.horizons must be positive and strictly ascending");
    }
  }
  if (eval.horizons.back() >= model.max_seq) throw ConfigError("largest horizon must be below model.max_seq");
  if (distill.sequences < 1 || distill.seq_len < 2 || distill.seq_len > model.max_seq) throw ConfigError("invalid distillation corpus size");
  if (methods.empty()) throw ConfigError("methods must list at least one method");
  std::set<std::string> ids{"fp"};
  for (const auto& m : methods) {
    m.validate();
    if (!ids.insert(m.id).second) throw ConfigError("duplicate method id '" + m.id + "'");
    if (m.id.empty() || m.id.find_first_of("/\\ ,") != std::string::npos) throw ConfigError("method id '" + m.id + "' is not a plain name");
  }
  for (const auto* p : {&paths.checkpoint, &paths.hessians, &paths.mc_tasks, &paths.gen_tasks}) {
    if (*p && !std::filesystem::exists(**p)) throw ConfigError("configured path does not exist: " + (*p)->string());
  }
}

std::filesystem::path RunConfig::checkpoint_dir() const { return paths.checkpoint.value_or(out / "checkpoint"); }
std::filesystem::path RunConfig::hessian_dir() const { return paths.hessians.value_or(out / "hessians"); }
std::filesystem::path RunConfig::mc_task_file() const { return paths.mc_tasks.value_or(out / "tasks" / "mc.jsonl"); }
std::filesystem::path RunConfig::gen_task_file() const { return paths.gen_tasks.value_or(out / "tasks" / "gen.jsonl"); }

RunConfig default_run_config() {
  RunConfig cfg;
  for (Variant v : {Variant::rtn, Variant::a_quip, Variant::b_spin, Variant::c_butterfly, Variant::d_tcq, Variant::e_rvq, Variant::f_aq}) {
    QuantMethodConfig m;
    m.variant = v;
    m.id = std::string(variant_name(v));
    cfg.methods.push_back(m);
    cfg.method_seed_pinned.push_back(false);
  }
  cfg.derive_seeds();
  return cfg;
}

RunConfig run_config_from_json(const json& j) {
  RunConfig cfg;
  try {
    check_keys(j, "config", {"schema_version", "seed", "workers", "out", "model", "train", "grammar", "calibration", "tasks", "eval",
                             "distill", "methods", "dissociation", "paths"});
    if (!j.contains("schema_version")) throw ConfigError("config is missing schema_version");
    read(j, "schema_version", cfg.schema_version);
    if (cfg.schema_version != kSchemaVersion) throw ConfigError("unsupported schema_version " + std::to_string(cfg.schema_version));
    read(j, "seed", cfg.seed);
    read(j, "workers", cfg.workers);
    if (j.contains("out")) cfg.out = j.at("out").get<std::string>();
    if (j.contains("model")) {
      const json& m = j.at("model");
      check_keys(m, "model", {"d_model", "n_layers", "n_heads", "n_kv_heads", "d_ff", "max_seq"});
      read(m, "d_model", cfg.model.d_model);
      read(m, "n_layers", cfg.model.n_layers);
      read(m, "n_heads", cfg.model.n_heads);
      read(m, "n_kv_heads", cfg.model.n_kv_heads);
      read(m, "d_ff", cfg.model.d_ff);
      read(m, "max_seq", cfg.model.max_seq);
    }
    if (j.contains("train")) {
      const json& t = j.at("train");
      check_keys(t, "train", {"steps", "batch", "seq_len", "lr", "warmup", "grad_clip"});
      read(t, "steps", cfg.train.steps);
      read(t, "batch", cfg.train.batch);
      read(t, "seq_len", cfg.train.seq_len);
      read(t, "lr", cfg.train.lr);
      read(t, "warmup", cfg.train.warmup);
      read(t, "grad_clip", cfg.train.grad_clip);
    }
    if (j.contains("grammar")) {
      const json& g = j.at("grammar");
      check_keys(g, "grammar", {"n_stems", "sentence_words"});
      read(g, "n_stems", cfg.grammar.n_stems);
      read(g, "sentence_words", cfg.grammar.sentence_words);
    }
    if (j.contains("calibration")) {
      const json& c = j.at("calibration");
      check_keys(c, "calibration", {"n_sequences", "seq_len", "damping"});
      read(c, "n_sequences", cfg.calibration.n_sequences);
      read(c, "seq_len", cfg.calibration.seq_len);
      read(c, "damping", cfg.calibration.damping);
    }
    if (j.contains("tasks")) {
      const json& t = j.at("tasks");
      check_keys(t, "tasks", {"per_family", "shots"});
      read(t, "per_family", cfg.tasks.per_family);
      read(t, "shots", cfg.tasks.shots);
    }
    if (j.contains("eval")) {
      const json& e = j.at("eval");
      check_keys(e, "eval", {"ppl_sequences", "ppl_seq_len", "probes", "probe_len", "horizons"});
      read(e, "ppl_sequences", cfg.eval.ppl_sequences);
      read(e, "ppl_seq_len", cfg.eval.ppl_seq_len);
      read(e, "probes", cfg.eval.probes);
      read(e, "probe_len", cfg.eval.probe_len);
      read(e, "horizons", cfg.eval.horizons);
    }
    if (j.contains("distill")) {
      const json& d = j.at("distill");
      check_keys(d, "distill", {"epochs", "lr", "batch", "sequences", "seq_len"});
      read(d, "epochs", cfg.distill.config.epochs);
      read(d, "lr", cfg.distill.config.lr);
      read(d, "batch", cfg.distill.config.batch);
      read(d, "sequences", cfg.distill.sequences);
      read(d, "seq_len", cfg.distill.seq_len);
    }
    if (!j.contains("methods") || !j.at("methods").is_array()) throw ConfigError("config needs a methods array");
    for (const auto& m : j.at("methods")) {
      cfg.methods.push_back(method_from_json(m));
      cfg.method_seed_pinned.push_back(m.contains("seed"));
    }
    if (j.contains("dissociation")) {
      const json& d = j.at("dissociation");
      check_keys(d, "dissociation", {"flags"});
      read(d, "flags", cfg.dissociation_flags);
    }
    if (j.contains("paths")) {
      const json& p = j.at("paths");
      check_keys(p, "paths", {"checkpoint", "hessians", "mc_tasks", "gen_tasks"});
      cfg.paths.checkpoint = read_path(p, "checkpoint");
      cfg.paths.hessians = read_path(p, "hessians");
      cfg.paths.mc_tasks = read_path(p, "mc_tasks");
      cfg.paths.gen_tasks = read_path(p, "gen_tasks");
    }
  } catch (const json::exception& e) {
    throw ConfigError(std::string("malformed config: ") + e.what());
  }
  cfg.derive_seeds();
  return cfg;
}

RunConfig load_run_config(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ConfigError("cannot read config " + path.string());
  json j;
  try {
    j = json::parse(in);
  } catch (const json::exception& e) {
    throw ConfigError("config " + path.string() + " is not valid JSON: " + e.what());
  }
  return run_config_from_json(j);
}

json run_config_to_json(const RunConfig& cfg) {
  json methods = json::array();
  for (const auto& m : cfg.methods) methods.push_back(method_to_json(m));
  auto opt_path = [](const std::optional<std::filesystem::path>& p) { return p ? json(p->generic_string()) : json(nullptr); };
  return {{"schema_version", cfg.schema_version},
          {"seed", cfg.seed},
          {"model",
           {{"d_model", cfg.model.d_model},
            {"n_layers", cfg.model.n_layers},
            {"n_heads", cfg.model.n_heads},
            {"n_kv_heads", cfg.model.n_kv_heads},
            {"d_ff", cfg.model.d_ff},
            {"max_seq", cfg.model.max_seq}}},
          {"train",
           {{"steps", cfg.train.steps},
            {"batch", cfg.train.batch},
            {"seq_len", cfg.train.seq_len},
            {"lr", cfg.train.lr},
            {"warmup", cfg.train.warmup},
            {"grad_clip", cfg.train.grad_clip}}},
          {"grammar", {{"n_stems", cfg.grammar.n_stems}, {"sentence_words", cfg.grammar.sentence_words}}},
          {"calibration",
           {{"n_sequences", cfg.calibration.n_sequences}, {"seq_len", cfg.calibration.seq_len}, {"damping", cfg.calibration.damping}}},
          {"tasks", {{"per_family", cfg.tasks.per_family}, {"shots", cfg.tasks.shots}}},
          {"eval",
           {{"ppl_sequences", cfg.eval.ppl_sequences},
            {"ppl_seq_len", cfg.eval.ppl_seq_len},
            {"probes", cfg.eval.probes},
            {"probe_len", cfg.eval.probe_len},
            {"horizons", cfg.eval.horizons}}},
          {"distill",
           {{"epochs", cfg.distill.config.epochs},
            {"lr", cfg.distill.config.lr},
            {"batch", cfg.distill.config.batch},
            {"sequences", cfg.distill.sequences},
            {"seq_len", cfg.distill.seq_len}}},
          {"methods", methods},
          {"dissociation", {{"flags", cfg.dissociation_flags}}},
          {"paths",
           {{"checkpoint", opt_path(cfg.paths.checkpoint)},
            {"hessians", opt_path(cfg.paths.hessians)},
            {"mc_tasks", opt_path(cfg.paths.mc_tasks)},
            {"gen_tasks", opt_path(cfg.paths.gen_tasks)}}}};
}

std::string config_hash(const RunConfig& cfg) {
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(fnv1a64(run_config_to_json(cfg).dump())));
  return buf;
}

}  // namespace bq2::cli
