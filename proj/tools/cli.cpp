#include "cli.hpp"

#include "run_config.hpp"

#include "bq2/errors.hpp"
#include "bq2/eval.hpp"
#include "bq2/grammar.hpp"
#include "bq2/parallel.hpp"

#include <CLI11.hpp>

#include <cstdio>
#include <fstream>
#include <map>
#include <ostream>
#include <set>

namespace bq2::cli {

using nlohmann::json;

namespace {

const char* kDistilledSuffix = "-distilled";

std::string fmt(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.6g", v);
  return buf;
}

std::string hex(std::uint64_t v) {
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(v));
  return buf;
}

// Generated bytes are not necessarily UTF-8; each byte maps to the code point
// of the same value.
std::string latin1_to_utf8(const std::string& bytes) {
  std::string out;
  for (unsigned char c : bytes) {
    if (c < 0x80) {
      out.push_back(static_cast<char>(c));
    } else {
      out.push_back(static_cast<char>(0xC0 | (c >> 6)));
      out.push_back(static_cast<char>(0x80 | (c & 0x3F)));
    }
  }
  return out;
}

void write_json(const std::filesystem::path& path, const json& j) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error("cannot write " + path.string());
  out << j.dump(2) << '\n';
}

json read_json(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw InputError("cannot read " + path.string());
  try {
    return json::parse(in);
  } catch (const json::exception& e) {
    throw InputError(path.string() + " is not valid JSON: " + e.what());
  }
}

json rows_to_json(const std::vector<TaskRow>& rows) {
  json out = json::array();
  for (const auto& r : rows) out.push_back({{"task", r.task}, {"metric", r.metric}, {"value", r.value}});
  return out;
}

std::vector<TaskRow> rows_from_json(const json& j) {
  std::vector<TaskRow> rows;
  for (const auto& r : j.at("rows")) rows.push_back({r.at("task").get<std::string>(), r.at("metric").get<std::string>(), r.at("value").get<double>()});
  return rows;
}

json dissociation_to_json(const DissociationResult& r) {
  json gen = json::object();
  for (std::size_t i = 0; i < r.horizons.size(); ++i) gen[std::to_string(r.horizons[i])] = r.a_gen[i];
  return {{"flags", format_runtime_flags(r.flags)}, {"a_mc", r.a_mc}, {"a_gen", gen}, {"mc_items", r.mc_items}, {"gen_prompts", r.gen_prompts}};
}

// State shared by every command of one invocation.
class Runner {
 public:
  Runner(RunConfig cfg, std::string method_filter, std::string flags, std::ostream& out)
      : cfg_(std::move(cfg)),
        hash_(config_hash(cfg_)),
        filter_(std::move(method_filter)),
        flags_(std::move(flags)),
        workers_(resolve_workers(cfg_.workers)),
        out_(out) {}

  void train_toy() {
    const Grammar g = grammar();
    out_ << "stage=train steps=" << cfg_.train.steps << " workers=" << workers_ << " config_hash=" << hash_ << std::endl;
    const Model m = bq2::train_toy(cfg_.model, cfg_.train, g, [this](const TrainProgress& p) {
      if (p.step % 100 == 0 || p.step == cfg_.train.steps) out_ << "stage=train step=" << p.step << " loss=" << fmt(p.loss) << std::endl;
    });
    save_checkpoint(m, cfg_.out / "checkpoint", hash_);
    const auto mc = make_mc_tasks(g, cfg_.tasks.per_family, cfg_.task_seed());
    const auto gen = make_gen_tasks(g, cfg_.tasks.per_family, cfg_.task_seed());
    write_tasks(cfg_.out / "tasks" / "mc.jsonl", mc);
    write_tasks(cfg_.out / "tasks" / "gen.jsonl", gen);
    write_json(cfg_.out / "tasks" / "index.json", {{"config_hash", hash_}, {"mc", mc.size()}, {"gen", gen.size()}});
    write_json(cfg_.out / "run_config.json", {{"config_hash", hash_}, {"config", run_config_to_json(cfg_)}});
    out_ << "stage=train done checkpoint=" << (cfg_.out / "checkpoint").generic_string() << " mc_tasks=" << mc.size()
         << " gen_tasks=" << gen.size() << std::endl;
  }

  void calibrate() {
    const Model& m = teacher();
    const Corpus corpus = generate_corpus(cfg_.calibration, grammar());
    HessianSet hs = collect_hessians(m, corpus, workers_);
    round_to_storage(hs);
    const auto dir = cfg_.out / "hessians";
    persist_hessians(hs, dir);
    json files = json::array();
    for (const auto& [id, e] : hs) {
      files.push_back({{"file", hessian_filename(id).generic_string()}, {"layer", id.layer}, {"site", sublayer_name(id.kind)}, {"count", e.count}});
      out_ << "stage=calibrate layer=" << id.layer << " site=" << sublayer_name(id.kind) << " count=" << e.count
           << " trace=" << fmt(e.h.trace()) << std::endl;
    }
    write_json(dir / "index.json", {{"config_hash", hash_},
                                    {"n_sequences", cfg_.calibration.n_sequences},
                                    {"seq_len", cfg_.calibration.seq_len},
                                    {"corpus_seed", cfg_.calibration.corpus_seed},
                                    {"files", files}});
  }

  void quantize() {
    const Model& m = teacher();
    const HessianSet hs = hessians();
    for (const auto& mc : selected_methods()) {
      const std::string id = mc.id;
      QuantizedModel qm = quantize_model(m, mc, hs, workers_, [&](const std::string& line) { out_ << "method=" << id << " " << line << std::endl; });
      qm.config_hash = hash_;
      save_quantized(qm, cfg_.quantized_dir(id));
      const SizeReport s = account_size(qm);
      out_ << "method=" << id << " done bpw=" << fmt(s.bpw) << " compression_ratio=" << fmt(s.compression_ratio)
           << " mean_proxy_error=" << fmt(qm.mean_proxy_error()) << " code_hash=" << hex(code_hash(qm)) << std::endl;
    }
  }

  void distill() {
    std::vector<QuantMethodConfig> methods;
    for (const auto& mc : selected_methods())
      if (mc.variant == Variant::d_tcq) methods.push_back(mc);
    if (methods.empty()) throw ConfigError("distill needs a D-tcq method in the selection");
    const Model& m = teacher();
    CalibConfig dc;
    dc.n_sequences = cfg_.distill.sequences;
    dc.seq_len = cfg_.distill.seq_len;
    dc.corpus_seed = cfg_.distill_seed();
    const Corpus corpus = generate_corpus(dc, grammar());
    for (const auto& mc : methods) {
      const QuantizedModel qm = quantized(mc.id);
      DistillResult r = distill_scales(m, qm, corpus, cfg_.distill.config, [&](const std::string& line) {
        out_ << "method=" << mc.id << " stage=distill " << line << std::endl;
      });
      r.student.config_hash = hash_;
      save_quantized(r.student, cfg_.distilled_dir(mc.id));
      const bool same = code_hash(r.student) == code_hash(qm);
      write_json(cfg_.distilled_dir(mc.id) / "distill.json",
                 {{"config_hash", hash_}, {"method", mc.id}, {"ce_trace", r.ce_trace}, {"best_epoch", r.best_epoch}, {"codes_identical", same}});
      out_ << "method=" << mc.id << " stage=distill done best_epoch=" << r.best_epoch << " initial_ce=" << fmt(r.ce_trace.front())
           << " best_ce=" << fmt(r.ce_trace[static_cast<std::size_t>(r.best_epoch)]) << " codes_identical=" << (same ? 1 : 0) << std::endl;
    }
  }

  void decompress() {
    const Corpus probes = probe_corpus();
    for (const auto& [id, qm] : quantized_models()) {
      const Model dense = decompress_model(qm);
      const auto dir = cfg_.decompressed_dir(id);
      save_checkpoint(dense, dir, hash_);
      const FidelityResult f = fidelity_check(qm, dense, probes);
      write_json(dir / "fidelity.json", {{"config_hash", hash_},
                                         {"method", id},
                                         {"layer_cosine", f.layer_cosine},
                                         {"min_cosine", f.min_cosine},
                                         {"top1", f.top1},
                                         {"top5", f.top5},
                                         {"max_abs_diff", f.max_abs_diff},
                                         {"positions", f.positions}});
      out_ << "method=" << id << " stage=decompress min_cosine=" << fmt(f.min_cosine) << " top1=" << fmt(f.top1) << " top5=" << fmt(f.top5)
           << " max_abs_diff=" << fmt(f.max_abs_diff) << std::endl;
    }
  }

  void eval_mc() {
    const auto tasks = read_tasks(cfg_.mc_task_file());
    for (const auto& [id, model] : eval_models()) {
      const McResult r = mc_eval(*model, tasks, cfg_.tasks.shots, cfg_.task_seed(), workers_);
      json items = json::array();
      for (const auto& it : r.items) items.push_back({{"id", it.id}, {"chosen", it.chosen}, {"chosen_norm", it.chosen_norm}, {"loglik", it.loglik}});
      write_json(cfg_.eval_dir(id) / "mc.json", {{"config_hash", hash_},
                                                 {"method", id},
                                                 {"shots", cfg_.tasks.shots},
                                                 {"acc", r.acc},
                                                 {"acc_norm", r.acc_norm},
                                                 {"rows", rows_to_json(r.rows)},
                                                 {"items", items}});
      out_ << "method=" << id << " stage=eval-mc acc=" << fmt(r.acc) << " acc_norm=" << fmt(r.acc_norm) << std::endl;
    }
  }

  void eval_gen() {
    const auto tasks = read_tasks(cfg_.gen_task_file());
    for (const auto& [id, model] : eval_models()) {
      const GenResult r = gen_eval(*model, tasks, cfg_.tasks.shots, cfg_.task_seed(), workers_);
      json items = json::array();
      for (const auto& it : r.items) items.push_back({{"id", it.id}, {"output", latin1_to_utf8(it.output)}, {"match", it.match}});
      write_json(cfg_.eval_dir(id) / "gen.json", {{"config_hash", hash_},
                                                  {"method", id},
                                                  {"shots", cfg_.tasks.shots},
                                                  {"exact_match", r.exact_match},
                                                  {"rows", rows_to_json(r.rows)},
                                                  {"items", items}});
      out_ << "method=" << id << " stage=eval-gen exact_match=" << fmt(r.exact_match) << std::endl;
    }
  }

  void eval_ppl() {
    CalibConfig pc;
    pc.n_sequences = cfg_.eval.ppl_sequences;
    pc.seq_len = cfg_.eval.ppl_seq_len;
    pc.corpus_seed = mix_seed(cfg_.eval_seed(), 1);
    const Corpus corpus = generate_corpus(pc, grammar());
    const double base = perplexity(*make_inference(teacher()), corpus, workers_);
    for (const auto& [id, model] : eval_models()) {
      const double ppl = id == "fp" ? base : perplexity(*model, corpus, workers_);
      const double deg = ppl_rel_degradation(ppl, base);
      write_json(cfg_.eval_dir(id) / "ppl.json", {{"config_hash", hash_},
                                                  {"method", id},
                                                  {"perplexity", ppl},
                                                  {"fp_perplexity", base},
                                                  {"rel_degradation", deg},
                                                  {"rows", rows_to_json({{"heldout", "perplexity", ppl}})}});
      out_ << "method=" << id << " stage=eval-ppl perplexity=" << fmt(ppl) << " rel_degradation=" << fmt(deg) << std::endl;
    }
  }

  void dissociate() {
    const RuntimeFlags fault = parse_runtime_flags(flags_.empty() ? cfg_.dissociation_flags : flags_);
    std::vector<QuantMethodConfig> methods;
    for (const auto& mc : selected_methods())
      if (!filter_.empty() || has_runtime_transforms(mc.variant)) methods.push_back(mc);
    if (methods.empty()) throw ConfigError("no selected method defines runtime transforms");
    std::vector<ToyTask> tasks = read_tasks(cfg_.mc_task_file());
    const auto gen = read_tasks(cfg_.gen_task_file());
    tasks.insert(tasks.end(), gen.begin(), gen.end());
    for (const auto& mc : methods) {
      const QuantizedModel qm = quantized(mc.id);
      const auto ref = make_inference(reference_model(teacher(), qm));
      const DissociationResult control = dissociation_experiment(*ref, qm, {}, tasks, cfg_.eval.horizons, workers_);
      const DissociationResult faulted = dissociation_experiment(*ref, qm, fault, tasks, cfg_.eval.horizons, workers_);
      write_json(cfg_.out / "dissociation" / (mc.id + ".json"),
                 {{"config_hash", hash_}, {"method", mc.id}, {"control", dissociation_to_json(control)}, {"fault", dissociation_to_json(faulted)}});
      for (const auto* arm : {&control, &faulted}) {
        out_ << "method=" << mc.id << " stage=dissociate arm=" << (arm == &control ? "control" : "fault")
             << " r3=" << (arm->flags.apply_r3 ? "on" : "off") << " r4=" << (arm->flags.apply_r4 ? "on" : "off") << " a_mc=" << fmt(arm->a_mc);
        for (std::size_t i = 0; i < arm->horizons.size(); ++i) out_ << " a_gen_" << arm->horizons[i] << "=" << fmt(arm->a_gen[i]);
        out_ << std::endl;
      }
    }
  }

  void report() {
    std::vector<MethodResults> results;
    for (const std::string& id : model_ids()) {
      const auto dir = cfg_.eval_dir(id);
      if (!std::filesystem::exists(dir)) continue;
      MethodResults r;
      r.method = id;
      for (const char* file : {"mc.json", "gen.json", "ppl.json"}) {
        if (!std::filesystem::exists(dir / file)) continue;
        const auto rows = rows_from_json(read_json(dir / file));
        r.rows.insert(r.rows.end(), rows.begin(), rows.end());
      }
      if (id != "fp") {
        const QuantizedModel qm = load_quantized(source_dir(id));
        r.size = account_size(qm);
        r.mean_proxy_error = qm.mean_proxy_error();
      }
      results.push_back(std::move(r));
    }
    if (results.empty()) throw ConfigError("no evaluation results under " + (cfg_.out / "eval").string() + "; run the eval commands first");
    std::map<std::string, double> baselines;
    std::map<std::string, std::pair<double, int>> chance;
    for (const auto& t : read_tasks(cfg_.mc_task_file())) {
      chance[t.task].first += 100.0 / static_cast<double>(t.options.size());
      chance[t.task].second += 1;
    }
    for (const auto& [task, c] : chance) baselines[task] = c.first / c.second;
    for (const auto& t : read_tasks(cfg_.gen_task_file())) baselines[t.task] = 0.0;
    json meta = {{"config_hash", hash_}, {"seed", cfg_.seed}, {"shots", cfg_.tasks.shots}};
    json diss = json::object();
    for (const auto& mc : cfg_.methods) {
      const auto path = cfg_.out / "dissociation" / (mc.id + ".json");
      if (std::filesystem::exists(path)) {
        const json d = read_json(path);
        diss[mc.id] = {{"control", d.at("control")}, {"fault", d.at("fault")}};
      }
    }
    meta["dissociation"] = diss;
    const EvalReport rep = build_report(results, baselines, meta);
    write_report(rep, cfg_.report_dir());
    for (const auto& s : rep.summaries) {
      out_ << "method=" << s.method << " stage=report raw_average=" << fmt(s.raw_average) << " normalized_average=" << fmt(s.normalized_average);
      if (s.bpw) out_ << " bpw=" << fmt(*s.bpw);
      out_ << std::endl;
    }
    out_ << "stage=report done dir=" << cfg_.report_dir().generic_string() << " rows=" << rep.rows.size() << std::endl;
  }

  void pipeline() {
    train_toy();
    calibrate();
    quantize();
    if (any_selected([](const QuantMethodConfig& m) { return m.variant == Variant::d_tcq; })) distill();
    decompress();
    eval_mc();
    eval_gen();
    eval_ppl();
    if (any_selected([](const QuantMethodConfig& m) { return has_runtime_transforms(m.variant); })) dissociate();
    report();
  }

 private:
  Grammar grammar() const { return Grammar(cfg_.grammar_seed(), cfg_.grammar.n_stems, cfg_.grammar.sentence_words); }

  const Model& teacher() {
    if (!teacher_) {
      const auto dir = cfg_.checkpoint_dir();
      if (!std::filesystem::exists(dir / "manifest.json")) throw ConfigError("no checkpoint at " + dir.string() + "; run train-toy first");
      teacher_ = load_checkpoint(dir);
    }
    return *teacher_;
  }

  HessianSet hessians() const {
    const auto dir = cfg_.hessian_dir();
    if (!std::filesystem::exists(dir)) throw ConfigError("no Hessians at " + dir.string() + "; run calibrate first");
    return load_hessians(dir);
  }

  std::vector<QuantMethodConfig> selected_methods() const {
    std::vector<QuantMethodConfig> out;
    for (const auto& m : cfg_.methods)
      if (filter_.empty() || filter_ == m.id) out.push_back(m);
    if (out.empty()) throw ConfigError("method '" + filter_ + "' is not configured");
    return out;
  }

  template <typename Pred>
  bool any_selected(Pred pred) const {
    for (const auto& m : cfg_.methods)
      if ((filter_.empty() || filter_ == m.id) && pred(m)) return true;
    return false;
  }

  QuantizedModel quantized(const std::string& id) const {
    const auto dir = cfg_.quantized_dir(id);
    if (!std::filesystem::exists(dir / "manifest.json")) throw ConfigError("no quantized model at " + dir.string() + "; run quantize first");
    return load_quantized(dir);
  }

  std::filesystem::path source_dir(const std::string& id) const {
    const std::size_t n = std::char_traits<char>::length(kDistilledSuffix);
    if (id.size() > n && id.compare(id.size() - n, n, kDistilledSuffix) == 0) return cfg_.distilled_dir(id.substr(0, id.size() - n));
    return cfg_.quantized_dir(id);
  }

  // fp, every configured method, then distilled students that exist.
  std::vector<std::string> model_ids() const {
    std::vector<std::string> ids{"fp"};
    for (const auto& m : cfg_.methods) ids.push_back(m.id);
    for (const auto& m : cfg_.methods)
      if (std::filesystem::exists(cfg_.distilled_dir(m.id) / "manifest.json")) ids.push_back(m.id + kDistilledSuffix);
    return ids;
  }

  std::vector<std::string> selected_model_ids() const {
    std::vector<std::string> out;
    for (const auto& id : model_ids())
      if (filter_.empty() || filter_ == id) out.push_back(id);
    if (out.empty()) throw ConfigError("method '" + filter_ + "' is not configured");
    return out;
  }

  std::vector<std::pair<std::string, QuantizedModel>> quantized_models() const {
    std::vector<std::pair<std::string, QuantizedModel>> out;
    for (const auto& id : selected_model_ids()) {
      if (id == "fp") continue;
      const auto dir = source_dir(id);
      if (!std::filesystem::exists(dir / "manifest.json")) throw ConfigError("no quantized model at " + dir.string() + "; run quantize first");
      out.emplace_back(id, load_quantized(dir));
    }
    if (out.empty()) throw ConfigError("no quantized model selected");
    return out;
  }

  std::vector<std::pair<std::string, std::shared_ptr<const InferenceModel>>> eval_models() {
    std::vector<std::pair<std::string, std::shared_ptr<const InferenceModel>>> out;
    for (const auto& id : selected_model_ids()) {
      if (id == "fp") {
        out.emplace_back(id, make_inference(teacher()));
        continue;
      }
      const auto dir = source_dir(id);
      if (!std::filesystem::exists(dir / "manifest.json")) throw ConfigError("no quantized model at " + dir.string() + "; run quantize first");
      out.emplace_back(id, code_level_model(load_quantized(dir)));
    }
    return out;
  }

  Corpus probe_corpus() const {
    CalibConfig pc;
    pc.n_sequences = cfg_.eval.probes;
    pc.seq_len = cfg_.eval.probe_len;
    pc.corpus_seed = mix_seed(cfg_.eval_seed(), 2);
    return generate_corpus(pc, grammar());
  }

  RunConfig cfg_;
  std::string hash_;
  std::string filter_;
  std::string flags_;
  int workers_;
  std::ostream& out_;
  std::optional<Model> teacher_;
};

}  // namespace

int dispatch(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"Extreme 2-bit quantization toolkit for a toy decoder-only transformer", "bq2"};
  app.require_subcommand(1, 1);
  app.fallthrough();
  std::string config_path;
  std::optional<std::uint64_t> seed;
  std::optional<int> workers;
  std::string out_dir;
  std::string method;
  std::string flags;
  app.add_option("--config", config_path, "Run configuration (JSON)");
  app.add_option("--seed", seed, "Global seed, overrides the config");
  app.add_option("--workers", workers, "Worker threads (0 = all logical CPUs)");
  app.add_option("--out", out_dir, "Output directory, overrides the config");
  app.add_option("--method", method, "Restrict to one method id");
  app.add_option("--flags", flags, "Runtime transform flags for dissociate, e.g. r3=on,r4=off");

  using Step = void (Runner::*)();
  const std::vector<std::tuple<const char*, const char*, Step>> commands = {
      {"train-toy", "Train the toy model and write the task files", &Runner::train_toy},
      {"calibrate", "Collect per-sublayer Hessians", &Runner::calibrate},
      {"quantize", "Quantize the checkpoint with every configured method", &Runner::quantize},
      {"decompress", "Write dense checkpoints and fidelity checks", &Runner::decompress},
      {"eval-mc", "Multiple-choice log-likelihood evaluation", &Runner::eval_mc},
      {"eval-gen", "Greedy generation exact-match evaluation", &Runner::eval_gen},
      {"eval-ppl", "Held-out perplexity", &Runner::eval_ppl},
      {"dissociate", "Runtime-transform omission experiment", &Runner::dissociate},
      {"distill", "Distill the SU/SV scales of D-tcq methods", &Runner::distill},
      {"report", "Build the cross-method report", &Runner::report},
      {"pipeline", "Run every stage in order", &Runner::pipeline},
  };
  std::map<CLI::App*, Step> steps;
  for (const auto& [name, help, step] : commands) steps[app.add_subcommand(name, help)] = step;

  std::vector<std::string> reversed(args.rbegin(), args.rend());
  try {
    app.parse(reversed);
  } catch (const CLI::ParseError& e) {
    if (e.get_exit_code() == 0) {
      out << app.help();
      return 0;
    }
    err << "error: " << e.what() << "\n" << app.help();
    return 2;
  }

  try {
    RunConfig cfg = config_path.empty() ? default_run_config() : load_run_config(config_path);
    if (seed) {
      cfg.seed = *seed;
      cfg.derive_seeds();
    }
    if (workers) cfg.workers = *workers;
    if (!out_dir.empty()) cfg.out = out_dir;
    cfg.validate();
    Runner runner(std::move(cfg), method, flags, out);
    (runner.*steps.at(app.get_subcommands().front()))();
    return 0;
  } catch (const ConfigError& e) {
    err << "error: " << e.what() << std::endl;
    return 2;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << std::endl;
    return 1;
  }
}

}  // namespace bq2::cli
