#include "bq2/codebooks.hpp"
#include "bq2/eval.hpp"
#include "bq2/grammar.hpp"
#include "bq2/quantizers.hpp"
#include "bq2/rotations.hpp"
#include "bq2/rounding.hpp"
#include "cli.hpp"
#include "oracles.hpp"
#include "run_config.hpp"

#include <CLI11.hpp>

#include <chrono>
#include <cstdio>
#include <fstream>
#include <iostream>
#include <iterator>
#include <sstream>

using namespace bq2;
namespace fs = std::filesystem;

namespace {

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) { return std::chrono::duration<double>(Clock::now() - t0).count(); }

std::string fmt(const char* f, auto... args) {
  char buf[512];
  std::snprintf(buf, sizeof buf, f, args...);
  return buf;
}

struct Verdict {
  bool pass = false;
  std::string detail;
};

int failures = 0;

void report(int id, const std::string& name, const Verdict& v) {
  failures += !v.pass;
  std::cout << (v.pass ? "PASS" : "FAIL") << " [" << id << "] " << name << ": " << v.detail << std::endl;
}

void guarded(int id, const std::string& name, const std::function<Verdict()>& fn) {
  try {
    report(id, name, fn());
  } catch (const std::exception& e) {
    report(id, name, {false, std::string("threw: ") + e.what()});
  }
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

std::vector<fs::path> files_under(const fs::path& root) {
  std::vector<fs::path> out;
  for (const auto& e : fs::recursive_directory_iterator(root))
    if (e.is_regular_file()) out.push_back(fs::relative(e.path(), root));
  std::sort(out.begin(), out.end());
  return out;
}

nlohmann::json read_json(const fs::path& p) { return nlohmann::json::parse(slurp(p)); }

double mean_proxy(const QuantizedModel& qm) {
  double s = 0.0;
  for (const auto& l : qm.layers) s += l.proxy_error;
  return s / static_cast<double>(qm.layers.size());
}

MatrixD permutation(int n, Rng& rng) {
  std::vector<int> idx(static_cast<std::size_t>(n));
  for (int i = 0; i < n; ++i) idx[static_cast<std::size_t>(i)] = i;
  for (int i = n - 1; i > 0; --i) std::swap(idx[static_cast<std::size_t>(i)], idx[rng.below(static_cast<std::uint64_t>(i) + 1)]);
  MatrixD p = MatrixD::Zero(n, n);
  for (int i = 0; i < n; ++i) p(i, idx[static_cast<std::size_t>(i)]) = 1.0;
  return p;
}

double logit_gap(const Model& a, const Model& b, const Corpus& probes) {
  double worst = 0.0;
  for (const auto& p : probes) worst = std::max(worst, test::max_abs(forward_logits(a, p), forward_logits(b, p)));
  return worst;
}

Verdict e8_oracle() {
  const auto t0 = Clock::now();
  Rng rng(1);
  int matches = 0;
  for (int trial = 0; trial < 10000; ++trial) {
    Vec8 x;
    for (double& v : x) v = 4.0 * rng.uniform() - 2.0;
    const Vec8 y = e8_nearest_point(x);
    matches += is_e8_point(y) && std::abs(test::dist2(x, y) - test::brute_e8_distance(x)) <= 1e-12;
  }
  const auto ball = test::lattice_ball(2.0);
  int roots = 0, zero = 0;
  for (const auto& p : ball) {
    const double n2 = test::dist2(p, Vec8{});
    roots += n2 == 2.0;
    zero += n2 == 0.0;
  }
  const double secs = seconds_since(t0);
  const bool ok = matches == 10000 && ball.size() == 241 && roots == 240 && zero == 1 && secs < 60.0;
  return {ok, fmt("%d/10000 brute-force matches, least-norm set = %d roots + %d zero, %.1fs", matches, roots, zero, secs)};
}

Verdict trellis_oracle() {
  const auto t0 = Clock::now();
  Rng rng(3);
  int matches = 0;
  for (int trial = 0; trial < 500; ++trial) {
    const int states = 1 + static_cast<int>(rng.below(8));
    const Trellis t = test::random_trellis(states, rng);
    const std::size_t n = 1 + rng.below(12);
    std::vector<double> seq(n), w(n);
    for (auto& v : seq) v = 1.5 * rng.normal();
    for (auto& v : w) v = 0.1 + rng.uniform();
    const auto r = tcq_viterbi_encode(seq, t, w);
    const double ex = test::exhaustive_tcq(t, seq, w);
    matches += std::abs(r.cost - ex) <= 1e-12 * std::max(1.0, ex) &&
               std::abs(test::path_cost(r.path, t, seq, w) - r.cost) <= 1e-12 * std::max(1.0, r.cost);
  }
  const double secs = seconds_since(t0);
  return {matches == 500 && secs < 60.0, fmt("%d/500 instances equal the exhaustive optimum, %.1fs", matches, secs)};
}

Verdict beam_oracle() {
  Rng rng(11);
  int matches = 0;
  for (int trial = 0; trial < 500; ++trial) {
    const int k = 2 + static_cast<int>(rng.below(7));
    const int g = 1 + static_cast<int>(rng.below(4));
    const auto cbs = test::random_books(2, k, g, rng);
    std::vector<double> x(static_cast<std::size_t>(g));
    for (auto& v : x) v = 1.5 * rng.normal();
    const auto codes = aq_beam_encode(x, cbs, k);
    double best = std::numeric_limits<double>::infinity();
    for (int i = 0; i < k; ++i)
      for (int j = 0; j < k; ++j) {
        const std::vector<std::uint32_t> c = {static_cast<std::uint32_t>(i), static_cast<std::uint32_t>(j)};
        best = std::min(best, test::sq_err(x, aq_decode(c, cbs)));
      }
    matches += std::abs(test::sq_err(x, aq_decode(codes, cbs)) - best) <= 1e-12;
  }
  return {matches == 500, fmt("%d/500 instances (M=2, K<=8, g<=4) equal the exhaustive optimum", matches)};
}

Verdict feedback_free() {
  Rng rng(2);
  int gptq_same = 0;
  for (int trial = 0; trial < 100; ++trial) {
    const int n = 2 + static_cast<int>(rng.below(31));
    const MatrixD w = test::random_matrix(1 + static_cast<int>(rng.below(8)), n, rng);
    const ScalarGrid g = ScalarGrid::two_bit();
    gptq_same += gptq_quantize(w, test::diag_h(n, rng), g).codes == rtn_quantize(w, g).codes;
  }
  const auto cb = E8PCodebook::build(256, 0.5);
  Rng rng2(5);
  int ldlq_same = 0;
  for (int trial = 0; trial < 100; ++trial) {
    const int blocks = 1 + static_cast<int>(rng2.below(4));
    const MatrixD w = test::random_matrix(3, 8 * blocks, rng2);
    const Vector s = Vector::Constant(3, static_cast<float>(0.5 + rng2.uniform()));
    const auto codes = ldlq_block_quantize(w, test::diag_h(8 * blocks, rng2), cb, s);
    std::vector<std::uint32_t> direct;
    for (Eigen::Index r = 0; r < w.rows(); ++r)
      for (int b = 0; b < blocks; ++b) {
        std::vector<double> x(8);
        for (int j = 0; j < 8; ++j) x[static_cast<std::size_t>(j)] = w(r, 8 * b + j) / s(r);
        direct.push_back(cb.encode(x));
      }
    ldlq_same += codes.codes == direct;
  }
  return {gptq_same == 100 && ldlq_same == 100, fmt("gptq == rtn on %d/100, ldlq == per-block nearest on %d/100", gptq_same, ldlq_same)};
}

Verdict formulas() {
  const double ns = normalize_score(62.5, 25.0);
  const bool fix = normalize_score(25.0, 25.0) == 0.0 && std::abs(normalize_score(100.0, 25.0) - 100.0) <= 1e-12;
  const double deg = ppl_rel_degradation(3.74, 3.39);
  SizeInputs in;
  in.reference_bytes = 22.0;
  in.code_bytes = 3.26;
  in.weight_count = 1;
  const double ratio = account_size(in).compression_ratio;
  const bool ok = std::abs(ns - 50.0) <= 1e-12 && fix && std::abs(deg - 10.3) <= 0.05 && std::abs(ratio - 6.75) <= 0.05;
  return {ok, fmt("normalize(62.5,25)=%.6g, fixpoints %s, degradation=%.4f%%, compression=%.4f", ns, fix ? "ok" : "broken", deg, ratio)};
}

struct Run {
  cli::RunConfig cfg;
  double seconds = 0.0;
  int code = 0;
};

Run pipeline(const fs::path& config, const fs::path& out, int workers, const fs::path& log) {
  Run r;
  r.cfg = cli::load_run_config(config);
  r.cfg.out = out;
  fs::remove_all(out);
  std::ofstream lg(log);
  const auto t0 = Clock::now();
  r.code = cli::dispatch({"pipeline", "--config", config.string(), "--out", out.string(), "--workers", std::to_string(workers)}, lg, lg);
  r.seconds = seconds_since(t0);
  return r;
}

Corpus probe_prompts(const cli::RunConfig& cfg) {
  CalibConfig pc;
  pc.n_sequences = cfg.eval.probes;
  pc.seq_len = cfg.eval.probe_len;
  pc.corpus_seed = mix_seed(cfg.eval_seed(), 2);
  return generate_corpus(pc, Grammar(cfg.grammar_seed(), cfg.grammar.n_stems, cfg.grammar.sentence_words));
}

const QuantMethodConfig* find_variant(const cli::RunConfig& cfg, Variant v) {
  for (const auto& m : cfg.methods)
    if (m.variant == v) return &m;
  return nullptr;
}

Verdict rotation_invariance(const Run& run) {
  const Model teacher = load_checkpoint(run.cfg.checkpoint_dir());
  const Corpus probes = probe_prompts(run.cfg);
  const auto& c = teacher.config;
  const double had = logit_gap(teacher, fuse_rotations(teacher, RotationSpec::random_hadamard(run.cfg.seed)), probes);
  Rng rng(mix_seed(run.cfg.seed, 5));
  std::vector<std::vector<MatrixD>> r2(static_cast<std::size_t>(c.n_layers));
  for (auto& layer : r2)
    for (int h = 0; h < c.n_kv_heads; ++h) layer.push_back(permutation(c.head_dim(), rng));
  const double perm = logit_gap(teacher, fuse_rotations(teacher, RotationSpec::learned(permutation(c.d_model, rng), r2, 1, false, false)), probes);

  const QuantMethodConfig* spin = find_variant(run.cfg, Variant::b_spin);
  if (!spin) return {false, "no B-spin method in the config"};
  const RotationSpec learned = rotation_spec(load_quantized(run.cfg.quantized_dir(spin->id)));
  double orth = orthogonality_error(learned.r1);
  for (const auto& layer : learned.r2)
    for (const auto& r : layer) orth = std::max(orth, orthogonality_error(r));
  const double cay = logit_gap(teacher, fuse_rotations(teacher, learned), probes);
  const bool ok = had <= 1e-4 && perm <= 1e-4 && orth <= 1e-4 && probes.size() == 16;
  return {ok, fmt("max |dlogit| hadamard=%.2e permutation=%.2e (%zu probes); cayley orthogonality=%.2e (fused gap %.2e)", had, perm,
                  probes.size(), orth, cay)};
}

Verdict dissociation(const Run& run) {
  const QuantMethodConfig* quip = find_variant(run.cfg, Variant::a_quip);
  if (!quip) return {false, "no A-quip method in the config"};
  const auto j = read_json(run.cfg.out / "dissociation" / (quip->id + ".json"));
  const auto& f = j.at("fault");
  const auto& c = j.at("control");
  const double f_mc = f.at("a_mc"), f1 = f.at("a_gen").at("1"), f8 = f.at("a_gen").at("8"), f32 = f.at("a_gen").at("32");
  const double c_mc = c.at("a_mc"), c32 = c.at("a_gen").at("32");
  const bool ok = f32 < f_mc && f8 < f1 && std::abs(c32 - c_mc) <= 0.1;
  return {ok, fmt("fault(%s): A_mc=%.3f A_gen(1)=%.3f A_gen(8)=%.3f A_gen(32)=%.3f; control: A_mc=%.3f A_gen(32)=%.3f",
                  f.at("flags").get<std::string>().c_str(), f_mc, f1, f8, f32, c_mc, c32)};
}

Verdict residual_vq(const Run& run) {
  const QuantMethodConfig* e = find_variant(run.cfg, Variant::e_rvq);
  if (!e) return {false, "no E-residual-vq method in the config"};
  const QuantizedModel qm = load_quantized(run.cfg.quantized_dir(e->id));
  int strict = 0;
  double sum = 0.0, worst = 1.0;
  for (const auto& l : qm.layers) {
    strict += l.proxy_error < l.primary_proxy_error;
    const double red = 1.0 - l.proxy_error / l.primary_proxy_error;
    sum += red;
    worst = std::min(worst, red);
  }
  const double mean = sum / static_cast<double>(qm.layers.size());
  const bool ok = strict == static_cast<int>(qm.layers.size()) && mean >= 0.30;
  return {ok, fmt("two-stage < primary on %d/%zu sublayers, mean reduction %.1f%% (min %.1f%%)", strict, qm.layers.size(), 100.0 * mean,
                  100.0 * worst)};
}

Verdict method_comparison(const Run& run) {
  const EvalReport rep = read_report(run.cfg.report_dir());
  std::map<std::string, const MethodSummary*> by_id;
  for (const auto& s : rep.summaries) by_id[s.method] = &s;
  std::map<Variant, double> proxy, bits, bpw;
  int complete = 0;
  for (const auto& m : run.cfg.methods) {
    const QuantizedModel qm = load_quantized(run.cfg.quantized_dir(m.id));
    proxy[m.variant] = mean_proxy(qm);
    bits[m.variant] = nominal_bits(qm.method);
    const bool decompressed = fs::exists(run.cfg.decompressed_dir(m.id) / "manifest.json");
    if (by_id.count(m.id) && by_id[m.id]->bpw && decompressed) {
      bpw[m.variant] = *by_id[m.id]->bpw;
      ++complete;
    }
  }
  const bool all_seven = complete == 7 && run.cfg.methods.size() == 7;
  if (!all_seven) return {false, fmt("%d/7 methods quantized, decompressed and evaluated", complete)};
  bool beats = true;
  for (Variant v : {Variant::a_quip, Variant::d_tcq, Variant::e_rvq, Variant::f_aq})
    beats = beats && proxy[v] < proxy[Variant::rtn] && bits[v] == bits[Variant::rtn];
  const bool e_bpw = bpw[Variant::e_rvq] > bpw[Variant::a_quip] && bpw[Variant::e_rvq] > bpw[Variant::d_tcq];
  const bool fast = run.seconds <= 1800.0;
  return {beats && e_bpw && fast,
          fmt("proxy@%gbit rtn=%.4f A=%.4f D=%.4f E=%.4f F=%.4f; bpw E=%.2f A=%.2f D=%.2f; pipeline %.0fs", bits[Variant::rtn],
              proxy[Variant::rtn], proxy[Variant::a_quip], proxy[Variant::d_tcq], proxy[Variant::e_rvq], proxy[Variant::f_aq],
              bpw[Variant::e_rvq], bpw[Variant::a_quip], bpw[Variant::d_tcq], run.seconds)};
}

Verdict distillation(const Run& run) {
  const QuantMethodConfig* d = find_variant(run.cfg, Variant::d_tcq);
  if (!d) return {false, "no D-tcq method in the config"};
  const QuantizedModel before = load_quantized(run.cfg.quantized_dir(d->id));
  const QuantizedModel after = load_quantized(run.cfg.distilled_dir(d->id));
  const bool codes = code_hash(before) == code_hash(after);
  const Model teacher = load_checkpoint(run.cfg.checkpoint_dir());
  CalibConfig dc;
  dc.n_sequences = run.cfg.distill.sequences;
  dc.seq_len = run.cfg.distill.seq_len;
  dc.corpus_seed = run.cfg.distill_seed();
  const Corpus corpus = generate_corpus(dc, Grammar(run.cfg.grammar_seed(), run.cfg.grammar.n_stems, run.cfg.grammar.sentence_words));
  auto ref = make_inference(teacher);
  const double ce0 = distill_ce(*ref, *code_level_model(before), corpus);
  const double ce1 = distill_ce(*ref, *code_level_model(after), corpus);
  return {codes && ce1 <= ce0, fmt("code streams %s, CE %.4f -> %.4f", codes ? "bit-identical" : "CHANGED", ce0, ce1)};
}

Verdict determinism(const Run& a, const Run& b) {
  const auto fa = files_under(a.cfg.out);
  const auto fb = files_under(b.cfg.out);
  if (fa != fb) return {false, fmt("file sets differ (%zu vs %zu files)", fa.size(), fb.size())};
  int manifests = 0, reports = 0, differing = 0;
  std::string first;
  for (const auto& rel : fa) {
    const bool same = slurp(a.cfg.out / rel) == slurp(b.cfg.out / rel);
    if (!same && first.empty()) first = rel.string();
    differing += !same;
    manifests += rel.filename() == "manifest.json";
    reports += *rel.begin() == "report";
  }
  return {differing == 0 && manifests > 0 && reports > 0,
          fmt("%zu files compared (%d manifests, %d report files), %d differ%s%s", fa.size(), manifests, reports, differing,
              first.empty() ? "" : ", first: ", first.c_str())};
}

Verdict fidelity(const Run& run, const fs::path& scratch) {
  const Model teacher = load_checkpoint(run.cfg.checkpoint_dir());
  const fs::path dir = scratch / "identity";
  fs::remove_all(dir);
  save_quantized(make_checkpoint(teacher), dir);
  const Model back = decompress_model(load_quantized(dir));
  const bool identity = back.weight_hash() == teacher.weight_hash() && slurp(dir / "payload.bin") == slurp(run.cfg.checkpoint_dir() / "payload.bin");

  const QuantMethodConfig* quip = find_variant(run.cfg, Variant::a_quip);
  if (!quip) return {false, "no A-quip method in the config"};
  const QuantizedModel qm = load_quantized(run.cfg.quantized_dir(quip->id));
  const FidelityResult f = fidelity_check(qm, decompress_model(qm), probe_prompts(run.cfg));
  const bool ok = identity && f.max_abs_diff <= 1e-6 && f.top1 == 1.0;
  return {ok, fmt("identity %s; A dense vs code max |dlogit|=%.2e, top-1 %.4f, top-5 %.4f over %d positions",
                  identity ? "bit-exact" : "MISMATCH", f.max_abs_diff, f.top1, f.top5, f.positions)};
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Acceptance checks", "bq2_acceptance"};
  std::string config = (fs::path(BQ2_SOURCE_DIR) / "configs" / "default.json").string();
  std::string work = "acceptance-work";
  app.add_option("--config", config, "Run configuration for the end-to-end checks");
  app.add_option("--work", work, "Scratch directory for the two pipeline runs");
  CLI11_PARSE(app, argc, argv);

  guarded(1, "E8 decoder oracle", e8_oracle);
  guarded(2, "Trellis oracle", trellis_oracle);
  guarded(3, "Beam oracle", beam_oracle);
  guarded(4, "Feedback-free reductions", feedback_free);
  guarded(8, "Exact formula checks", formulas);

  fs::create_directories(work);
  std::cout << "running pipeline twice with " << config << " (logs in " << work << ")" << std::endl;
  Run a, b;
  try {
    a = pipeline(config, fs::path(work) / "run-a", 0, fs::path(work) / "run-a.log");
    b = pipeline(config, fs::path(work) / "run-b", 1, fs::path(work) / "run-b.log");
  } catch (const std::exception& e) {
    std::cout << "pipeline setup failed: " << e.what() << std::endl;
    return 1;
  }
  if (a.code != 0 || b.code != 0) {
    for (int id : {5, 6, 7, 9, 10, 11, 12}) report(id, "end-to-end", {false, fmt("pipeline exit codes %d/%d, see logs", a.code, b.code)});
    return 1;
  }

  guarded(5, "Rotation-fusion invariance", [&] { return rotation_invariance(a); });
  guarded(6, "Dissociation reproduction", [&] { return dissociation(a); });
  guarded(7, "Residual-VQ improvement", [&] { return residual_vq(a); });
  guarded(9, "Method comparison end-to-end", [&] { return method_comparison(a); });
  guarded(10, "Distillation contract", [&] { return distillation(a); });
  guarded(11, "Determinism", [&] { return determinism(a, b); });
  guarded(12, "Decompression fidelity", [&] { return fidelity(a, fs::path(work)); });

  std::cout << (failures == 0 ? "all acceptance criteria pass" : fmt("%d acceptance criteria failed", failures)) << std::endl;
  return failures == 0 ? 0 : 1;
}
