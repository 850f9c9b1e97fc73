#include "bq2/eval.hpp"

#include "bq2/errors.hpp"
#include "bq2/parallel.hpp"
#include "bq2/rng.hpp"
#include "bq2/rotations.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <regex>
#include <set>
#include <sstream>
#include <tuple>

namespace bq2 {

using nlohmann::json;

namespace {

std::shared_ptr<const InferenceModel> borrow(const InferenceModel& m) {
  return std::shared_ptr<const InferenceModel>(std::shared_ptr<const InferenceModel>{}, &m);
}

std::string answer_of(const ToyTask& t) { return t.kind == TaskKind::mc ? t.options[static_cast<std::size_t>(t.gold)] : t.target; }

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r\n");
  if (b == std::string::npos) return {};
  const auto e = s.find_last_not_of(" \t\r\n");
  return s.substr(b, e - b + 1);
}

// Keeps the last `limit` tokens of the prompt.
std::vector<int> fit_prompt(const std::string& prompt, int limit) {
  std::vector<int> toks = encode_text(prompt);
  if (limit < 1) throw InputError("no room left for the prompt within max_seq");
  if (static_cast<int>(toks.size()) > limit) toks.erase(toks.begin(), toks.end() - limit);
  return toks;
}

// Per-family mean of a per-item value, families in first-appearance order.
std::vector<TaskRow> family_rows(const std::vector<ToyTask>& tasks, const std::vector<double>& values, const std::string& metric) {
  std::vector<std::string> order;
  std::map<std::string, std::pair<double, int>> acc;
  for (std::size_t i = 0; i < tasks.size(); ++i) {
    const std::string& f = tasks[i].task;
    if (!acc.count(f)) order.push_back(f);
    acc[f].first += values[i];
    acc[f].second += 1;
  }
  std::vector<TaskRow> rows;
  for (const auto& f : order) rows.push_back({f, metric, acc[f].first / acc[f].second});
  return rows;
}

double mean(const std::vector<double>& v) {
  if (v.empty()) return 0.0;
  double s = 0.0;
  for (double x : v) s += x;
  return s / static_cast<double>(v.size());
}

}  // namespace

std::string build_prompt(const std::vector<ToyTask>& tasks, std::size_t index, int shots, std::uint64_t seed) {
  if (index >= tasks.size()) throw InputError("task index out of range");
  if (shots < 0) throw ConfigError("shots must be >= 0");
  const ToyTask& item = tasks[index];
  std::string prompt;
  if (shots > 0) {
    std::vector<std::size_t> pool;
    for (std::size_t i = 0; i < tasks.size(); ++i)
      if (i != index && tasks[i].task == item.task) pool.push_back(i);
    Rng rng(mix_seed(seed, 0x53484f54ULL + index));
    for (std::size_t i = pool.size(); i > 1; --i) std::swap(pool[i - 1], pool[rng.below(i)]);
    const std::size_t n = std::min(pool.size(), static_cast<std::size_t>(shots));
    for (std::size_t i = 0; i < n; ++i) {
      const ToyTask& s = tasks[pool[i]];
      prompt += s.context + answer_of(s) + "\n";
    }
  }
  return prompt + item.context;
}

McResult mc_eval(const InferenceModel& model, const std::vector<ToyTask>& tasks, int shots, std::uint64_t seed, int workers) {
  for (const auto& t : tasks) {
    if (t.kind != TaskKind::mc) throw TaskFormatError("task " + t.id + " is not multiple-choice");
    t.validate();
  }
  McResult res;
  res.items.resize(tasks.size());
  parallel_for(tasks.size(), workers, [&](std::size_t i) {
    const ToyTask& t = tasks[i];
    std::size_t longest = 0;
    for (const auto& o : t.options) longest = std::max(longest, o.size());
    const std::vector<int> ctx = fit_prompt(build_prompt(tasks, i, shots, seed), model.config.max_seq - static_cast<int>(longest));
    Session s(borrow(model));
    const MatrixD logits = s.extend(ctx);
    const VectorD last = logits.row(logits.rows() - 1).transpose();
    McItem item;
    item.id = t.id;
    double best = -std::numeric_limits<double>::infinity();
    double best_norm = -std::numeric_limits<double>::infinity();
    for (std::size_t k = 0; k < t.options.size(); ++k) {
      const std::vector<int> cont = encode_text(t.options[k]);
      const double ll = sequence_loglik(s, cont, last);
      item.loglik.push_back(ll);
      const double norm = ll / static_cast<double>(std::max<std::size_t>(1, t.options[k].size()));
      if (ll > best) {
        best = ll;
        item.chosen = static_cast<int>(k);
      }
      if (norm > best_norm) {
        best_norm = norm;
        item.chosen_norm = static_cast<int>(k);
      }
    }
    res.items[i] = std::move(item);
  });
  std::vector<double> correct(tasks.size());
  std::vector<double> correct_norm(tasks.size());
  for (std::size_t i = 0; i < tasks.size(); ++i) {
    correct[i] = res.items[i].chosen == tasks[i].gold ? 1.0 : 0.0;
    correct_norm[i] = res.items[i].chosen_norm == tasks[i].gold ? 1.0 : 0.0;
  }
  res.acc = mean(correct);
  res.acc_norm = mean(correct_norm);
  const auto a = family_rows(tasks, correct, "acc");
  const auto b = family_rows(tasks, correct_norm, "acc_norm");
  for (std::size_t i = 0; i < a.size(); ++i) {
    res.rows.push_back(a[i]);
    res.rows.push_back(b[i]);
  }
  return res;
}

GenResult gen_eval(const InferenceModel& model, const std::vector<ToyTask>& tasks, int shots, std::uint64_t seed, int workers) {
  for (const auto& t : tasks) {
    if (t.kind != TaskKind::gen) throw TaskFormatError("task " + t.id + " is not generative");
    t.validate();
  }
  GenResult res;
  res.items.resize(tasks.size());
  parallel_for(tasks.size(), workers, [&](std::size_t i) {
    const ToyTask& t = tasks[i];
    GenItem item;
    item.id = t.id;
    if (t.max_tokens > 0) {
      const std::vector<int> prompt = fit_prompt(build_prompt(tasks, i, shots, seed), model.config.max_seq - t.max_tokens);
      const std::string until = t.until;
      const std::vector<int> out = greedy_generate(model, prompt, t.max_tokens, [&until](std::span<const int> so_far) {
        return !until.empty() && decode_tokens(so_far).find(until) != std::string::npos;
      });
      item.output = decode_tokens(out);
      if (!until.empty()) {
        const auto pos = item.output.find(until);
        if (pos != std::string::npos) item.output.resize(pos);
      }
    }
    if (!t.regex.empty()) {
      std::smatch m;
      const std::regex re(t.regex);
      const std::string text = item.output;
      item.match = std::regex_search(text, m, re) ? m.str(0) == trim(t.target) : trim(t.target).empty();
    } else {
      item.match = trim(item.output) == trim(t.target);
    }
    res.items[i] = std::move(item);
  });
  std::vector<double> match(tasks.size());
  for (std::size_t i = 0; i < tasks.size(); ++i) match[i] = res.items[i].match ? 1.0 : 0.0;
  res.exact_match = mean(match);
  res.rows = family_rows(tasks, match, "exact_match");
  return res;
}

double perplexity(const InferenceModel& model, const Corpus& corpus, int workers) {
  if (corpus.empty()) throw InputError("perplexity: empty corpus");
  std::vector<double> nll(corpus.size());
  std::vector<double> count(corpus.size());
  parallel_for(corpus.size(), workers, [&](std::size_t i) {
    const auto& seq = corpus[i];
    if (seq.size() < 2) return;
    const MatrixD logits = forward_logits(model, seq);
    double s = 0.0;
    for (std::size_t t = 1; t < seq.size(); ++t) s -= log_softmax(logits.row(static_cast<Eigen::Index>(t - 1)).transpose())(seq[t]);
    nll[i] = s;
    count[i] = static_cast<double>(seq.size() - 1);
  });
  double total = 0.0;
  double n = 0.0;
  for (std::size_t i = 0; i < corpus.size(); ++i) {
    total += nll[i];
    n += count[i];
  }
  if (n == 0.0) throw InputError("perplexity: corpus has no predictable tokens");
  return std::exp(total / n);
}

double ppl_rel_degradation(double q, double base) {
  if (!(base > 0.0)) throw InputError("perplexity baseline must be positive");
  return (q - base) / base * 100.0;
}

double normalize_score(double score, double baseline) {
  if (!(baseline < 100.0)) throw ConfigError("normalization baseline must be below 100");
  return (score - baseline) / (100.0 - baseline) * 100.0;
}

RuntimeFlags parse_runtime_flags(const std::string& text) {
  RuntimeFlags f;
  std::stringstream ss(text);
  std::string part;
  while (std::getline(ss, part, ',')) {
    part = trim(part);
    if (part.empty()) continue;
    const auto eq = part.find('=');
    if (eq == std::string::npos) throw ConfigError("flag '" + part + "' must look like name=on|off");
    const std::string name = trim(part.substr(0, eq));
    const std::string value = trim(part.substr(eq + 1));
    bool on = false;
    if (value == "on" || value == "true" || value == "1") {
      on = true;
    } else if (value != "off" && value != "false" && value != "0") {
      throw ConfigError("flag value '" + value + "' must be on or off");
    }
    if (name == "r3") {
      f.r3 = on;
    } else if (name == "r4") {
      f.r4 = on;
    } else {
      throw ConfigError("unknown runtime flag '" + name + "' (expected r3 or r4)");
    }
  }
  return f;
}

std::string format_runtime_flags(const RuntimeTransforms& rt) {
  return std::string("r3=") + (rt.apply_r3 ? "on" : "off") + ",r4=" + (rt.apply_r4 ? "on" : "off");
}

Model reference_model(const Model& teacher, const QuantizedModel& qm) {
  return fuse_rotations(teacher, rotation_spec(qm));
}

namespace {

DissociationResult compare_models(const InferenceModel& reference, const InferenceModel& subject, const std::vector<ToyTask>& tasks,
                                  const std::vector<int>& horizons, int workers) {
  if (horizons.empty()) throw ConfigError("dissociation needs at least one horizon");
  for (std::size_t i = 0; i < horizons.size(); ++i) {
    if (horizons[i] < 1 || (i > 0 && horizons[i] <= horizons[i - 1])) throw ConfigError("horizons must be positive and ascending");
  }
  std::vector<ToyTask> mc;
  for (const auto& t : tasks)
    if (t.kind == TaskKind::mc) mc.push_back(t);
  DissociationResult res;
  res.horizons = horizons;
  res.mc_items = static_cast<int>(mc.size());
  res.gen_prompts = static_cast<int>(tasks.size());
  if (!mc.empty()) {
    const McResult a = mc_eval(reference, mc, 0, 0, workers);
    const McResult b = mc_eval(subject, mc, 0, 0, workers);
    double agree = 0.0;
    for (std::size_t i = 0; i < mc.size(); ++i) agree += a.items[i].chosen == b.items[i].chosen ? 1.0 : 0.0;
    res.a_mc = agree / static_cast<double>(mc.size());
  }
  const int h = horizons.back();
  std::vector<std::vector<double>> per(tasks.size(), std::vector<double>(horizons.size(), 0.0));
  parallel_for(tasks.size(), workers, [&](std::size_t i) {
    const std::vector<int> prompt = fit_prompt(tasks[i].context, reference.config.max_seq - h);
    const std::vector<int> x = greedy_generate(reference, prompt, h);
    const std::vector<int> y = greedy_generate(subject, prompt, h);
    for (std::size_t k = 0; k < horizons.size(); ++k) {
      int same = 0;
      for (int p = 0; p < horizons[k]; ++p) same += x[static_cast<std::size_t>(p)] == y[static_cast<std::size_t>(p)] ? 1 : 0;
      per[i][k] = static_cast<double>(same) / horizons[k];
    }
  });
  res.a_gen.assign(horizons.size(), 0.0);
  if (!tasks.empty()) {
    for (std::size_t k = 0; k < horizons.size(); ++k) {
      double s = 0.0;
      for (const auto& p : per) s += p[k];
      res.a_gen[k] = s / static_cast<double>(tasks.size());
    }
  }
  return res;
}

}  // namespace

DissociationResult dissociation_experiment(const InferenceModel& reference, const QuantizedModel& qm, const RuntimeFlags& flags,
                                           const std::vector<ToyTask>& tasks, const std::vector<int>& horizons, int workers) {
  if (!has_runtime_transforms(qm.method.variant)) {
    throw ConfigError("variant " + std::string(variant_name(qm.method.variant)) + " defines no runtime transforms");
  }
  RuntimeTransforms rt = qm.runtime;
  if (flags.r3) {
    if (!qm.runtime.apply_r3) throw ConfigError("flag r3 is irrelevant: the model was built without R3");
    rt.apply_r3 = *flags.r3;
  }
  if (flags.r4) {
    if (!qm.runtime.apply_r4) throw ConfigError("flag r4 is irrelevant: the model was built without R4");
    rt.apply_r4 = *flags.r4;
  }
  const auto subject = with_runtime(code_level_model(qm), rt);
  DissociationResult res = compare_models(reference, *subject, tasks, horizons, workers);
  res.flags = rt;
  return res;
}

DissociationResult self_dissociation(const InferenceModel& reference, const std::vector<ToyTask>& tasks,
                                     const std::vector<int>& horizons, int workers) {
  DissociationResult res = compare_models(reference, reference, tasks, horizons, workers);
  res.flags = reference.runtime;
  return res;
}

FidelityResult fidelity_check(const QuantizedModel& qm, const Model& dense, const std::vector<std::vector<int>>& probes) {
  FidelityResult res;
  const CodebookCache cache(qm);
  for (const auto& q : qm.layers) {
    const MatrixD a = decode_layer(q, cache);
    const MatrixD b = dense.layers.at(static_cast<std::size_t>(q.layer)).weight(q.kind).cast<double>();
    if (a.rows() != b.rows() || a.cols() != b.cols()) throw ShapeError("fidelity: dense model does not match the manifest");
    const double na = a.norm();
    const double nb = b.norm();
    const double c = (na == 0.0 || nb == 0.0) ? (na == nb ? 1.0 : 0.0) : a.cwiseProduct(b).sum() / (na * nb);
    res.layer_cosine.push_back(c);
    res.min_cosine = std::min(res.min_cosine, c);
  }
  const auto code = code_level_model(qm);
  const auto flat = make_inference(dense);
  double top1 = 0.0;
  double top5 = 0.0;
  for (const auto& p : probes) {
    const MatrixD x = forward_logits(*code, p);
    const MatrixD y = forward_logits(*flat, p);
    res.max_abs_diff = std::max(res.max_abs_diff, (x - y).cwiseAbs().maxCoeff());
    for (Eigen::Index t = 0; t < x.rows(); ++t) {
      top1 += argmax(x.row(t).transpose()) == argmax(y.row(t).transpose()) ? 1.0 : 0.0;
      auto top = [](const Eigen::RowVectorXd& r) {
        std::vector<int> idx(static_cast<std::size_t>(r.size()));
        for (int i = 0; i < r.size(); ++i) idx[static_cast<std::size_t>(i)] = i;
        std::partial_sort(idx.begin(), idx.begin() + 5, idx.end(), [&r](int a, int b) { return r(a) > r(b) || (r(a) == r(b) && a < b); });
        idx.resize(5);
        std::sort(idx.begin(), idx.end());
        return idx;
      };
      top5 += top(x.row(t)) == top(y.row(t)) ? 1.0 : 0.0;
      ++res.positions;
    }
  }
  if (res.positions > 0) {
    res.top1 = top1 / res.positions;
    res.top5 = top5 / res.positions;
  }
  return res;
}

bool is_scored_metric(const std::string& metric) { return metric == "acc" || metric == "exact_match"; }
bool lower_is_better(const std::string& metric) { return metric == "perplexity"; }

EvalReport build_report(const std::vector<MethodResults>& results, const std::map<std::string, double>& baselines, json metadata) {
  EvalReport rep;
  rep.baselines = baselines;
  rep.metadata = std::move(metadata);
  if (results.empty()) throw ReportError("no results to report");
  std::set<std::pair<std::string, std::string>> reference;
  for (const auto& r : results[0].rows) reference.insert({r.task, r.metric});
  std::set<std::string> methods;
  for (const auto& res : results) {
    if (!methods.insert(res.method).second) throw ReportError("duplicate method '" + res.method + "'");
    std::set<std::pair<std::string, std::string>> mine;
    for (const auto& r : res.rows) {
      if (!mine.insert({r.task, r.metric}).second) throw ReportError("method " + res.method + " reports " + r.task + "/" + r.metric + " twice");
    }
    if (mine != reference) {
      std::string missing;
      for (const auto& k : reference)
        if (!mine.count(k)) missing += " " + k.first + "/" + k.second + " (missing in " + res.method + ")";
      for (const auto& k : mine)
        if (!reference.count(k)) missing += " " + k.first + "/" + k.second + " (missing in " + results[0].method + ")";
      throw ReportError("task sets differ across methods:" + missing);
    }
  }
  for (const auto& [task, metric] : reference) {
    if (is_scored_metric(metric) && !baselines.count(task)) throw ReportError("no normalization baseline for task " + task);
  }
  for (const auto& res : results) {
    MethodSummary s;
    s.method = res.method;
    std::vector<double> raw;
    std::vector<double> norm;
    for (const auto& r : res.rows) {
      rep.rows.push_back({res.method, r.task, r.metric, r.value, false});
      if (is_scored_metric(r.metric)) {
        raw.push_back(100.0 * r.value);
        norm.push_back(normalize_score(100.0 * r.value, baselines.at(r.task)));
      }
    }
    s.raw_average = mean(raw);
    s.normalized_average = mean(norm);
    if (res.size) {
      s.bpw = res.size->bpw;
      s.compression_ratio = res.size->compression_ratio;
      s.bpw_by_kind = res.size->bpw_by_kind;
    }
    s.mean_proxy_error = res.mean_proxy_error;
    rep.summaries.push_back(std::move(s));
  }
  std::sort(rep.rows.begin(), rep.rows.end(), [](const ReportRow& a, const ReportRow& b) {
    return std::tie(a.method, a.task, a.metric) < std::tie(b.method, b.task, b.metric);
  });
  std::sort(rep.summaries.begin(), rep.summaries.end(), [](const MethodSummary& a, const MethodSummary& b) { return a.method < b.method; });
  std::map<std::pair<std::string, std::string>, double> best;
  for (const auto& r : rep.rows) {
    const auto key = std::make_pair(r.task, r.metric);
    auto it = best.find(key);
    if (it == best.end()) {
      best[key] = r.value;
    } else if (lower_is_better(r.metric) ? r.value < it->second : r.value > it->second) {
      it->second = r.value;
    }
  }
  for (auto& r : rep.rows) r.best = r.value == best[{r.task, r.metric}];
  return rep;
}

namespace {

std::string num(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

json opt(const std::optional<double>& v) { return v ? json(*v) : json(nullptr); }

std::optional<double> opt_from(const json& j, const char* key) {
  if (!j.contains(key) || j.at(key).is_null()) return std::nullopt;
  return j.at(key).get<double>();
}

}  // namespace

std::string report_csv(const EvalReport& report) {
  std::string out = "method,task,metric,value\n";
  for (const auto& r : report.rows) out += r.method + "," + r.task + "," + r.metric + "," + num(r.value) + "\n";
  return out;
}

json report_to_json(const EvalReport& report) {
  json rows = json::array();
  for (const auto& r : report.rows) rows.push_back({{"method", r.method}, {"task", r.task}, {"metric", r.metric}, {"value", r.value}, {"best", r.best}});
  json sums = json::array();
  for (const auto& s : report.summaries) {
    sums.push_back({{"method", s.method},
                    {"raw_average", s.raw_average},
                    {"normalized_average", s.normalized_average},
                    {"bpw", opt(s.bpw)},
                    {"compression_ratio", opt(s.compression_ratio)},
                    {"mean_proxy_error", opt(s.mean_proxy_error)},
                    {"bpw_by_kind", s.bpw_by_kind}});
  }
  return {{"rows", rows}, {"summaries", sums}, {"baselines", report.baselines}, {"metadata", report.metadata}};
}

EvalReport report_from_json(const json& j) {
  EvalReport rep;
  try {
    for (const auto& r : j.at("rows")) {
      rep.rows.push_back({r.at("method").get<std::string>(), r.at("task").get<std::string>(), r.at("metric").get<std::string>(),
                          r.at("value").get<double>(), r.at("best").get<bool>()});
    }
    for (const auto& s : j.at("summaries")) {
      MethodSummary m;
      m.method = s.at("method").get<std::string>();
      m.raw_average = s.at("raw_average").get<double>();
      m.normalized_average = s.at("normalized_average").get<double>();
      m.bpw = opt_from(s, "bpw");
      m.compression_ratio = opt_from(s, "compression_ratio");
      m.mean_proxy_error = opt_from(s, "mean_proxy_error");
      m.bpw_by_kind = s.at("bpw_by_kind").get<std::map<std::string, double>>();
      rep.summaries.push_back(std::move(m));
    }
    rep.baselines = j.at("baselines").get<std::map<std::string, double>>();
    rep.metadata = j.at("metadata");
  } catch (const json::exception& e) {
    throw ReportError(std::string("malformed report: ") + e.what());
  }
  return rep;
}

void write_report(const EvalReport& report, const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  auto write = [&dir](const char* name, const std::string& text) {
    std::ofstream out(dir / name, std::ios::binary);
    if (!out) throw Error("cannot write " + (dir / name).string());
    out << text;
  };
  write("report.csv", report_csv(report));
  std::string summary = "task,metric,method,value,best\n";
  std::vector<ReportRow> by_task = report.rows;
  std::stable_sort(by_task.begin(), by_task.end(), [](const ReportRow& a, const ReportRow& b) {
    return std::tie(a.task, a.metric) < std::tie(b.task, b.metric);
  });
  for (const auto& r : by_task) summary += r.task + "," + r.metric + "," + r.method + "," + num(r.value) + "," + (r.best ? "*" : "") + "\n";
  for (const auto& s : report.summaries) {
    summary += "_aggregate,raw_average," + s.method + "," + num(s.raw_average) + ",\n";
    summary += "_aggregate,normalized_average," + s.method + "," + num(s.normalized_average) + ",\n";
    if (s.bpw) summary += "_size,bpw," + s.method + "," + num(*s.bpw) + ",\n";
    if (s.compression_ratio) summary += "_size,compression_ratio," + s.method + "," + num(*s.compression_ratio) + ",\n";
    if (s.mean_proxy_error) summary += "_size,mean_proxy_error," + s.method + "," + num(*s.mean_proxy_error) + ",\n";
  }
  write("summary.csv", summary);
  write("report.json", report_to_json(report).dump(2) + "\n");
}

EvalReport read_report(const std::filesystem::path& dir) {
  std::ifstream in(dir / "report.json", std::ios::binary);
  if (!in) throw InputError("cannot read " + (dir / "report.json").string());
  json j;
  try {
    j = json::parse(in);
  } catch (const json::exception& e) {
    throw ReportError(std::string("report.json is not valid JSON: ") + e.what());
  }
  return report_from_json(j);
}

}  // namespace bq2
