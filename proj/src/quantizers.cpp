#include "bq2/quantizers.hpp"

#include "bq2/errors.hpp"
#include "bq2/parallel.hpp"
#include "bq2/rng.hpp"
#include "bq2/rounding.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <mutex>
#include <set>

namespace bq2 {

using nlohmann::json;

namespace {

constexpr std::array<std::string_view, 8> kVariantNames = {"identity", "rtn",   "A-quip",        "B-spin",
                                                           "C-butterfly", "D-tcq", "E-residual-vq", "F-additive"};

std::set<std::string> allowed_keys(Variant v) {
  std::set<std::string> keys = {"id", "variant", "bits", "seed", "damping"};
  auto add = [&keys](std::initializer_list<const char*> more) {
    for (const char* k : more) keys.insert(k);
  };
  switch (v) {
    case Variant::identity:
    case Variant::rtn: break;
    case Variant::a_quip: add({"r3", "r4", "e8p_size", "scale_search"}); break;
    case Variant::b_spin: add({"r3", "r4", "scale_search", "cayley_iters", "cayley_lr"}); break;
    case Variant::c_butterfly: add({"e8p_size", "scale_search", "butterfly_iters", "butterfly_lr"}); break;
    case Variant::d_tcq: add({"trellis_states", "trellis_bits", "scale_search"}); break;
    case Variant::e_rvq: add({"vq_group", "vq_k", "vq_residual_k", "kmeans_iters"}); break;
    case Variant::f_aq:
      add({"aq_group", "aq_k", "aq_m_min", "aq_m_max", "aq_beam", "aq_iters", "relative_mse_tolerance"});
      break;
  }
  return keys;
}

}  // namespace

std::string_view variant_name(Variant v) { return kVariantNames[static_cast<std::size_t>(v)]; }

Variant parse_variant(std::string_view name) {
  for (std::size_t i = 0; i < kVariantNames.size(); ++i)
    if (kVariantNames[i] == name) return static_cast<Variant>(i);
  throw ConfigError("unknown variant '" + std::string(name) + "'");
}

bool has_runtime_transforms(Variant v) { return v == Variant::a_quip || v == Variant::b_spin; }

double nominal_bits(const QuantMethodConfig& cfg) {
  switch (cfg.variant) {
    case Variant::identity: return 32.0;
    case Variant::rtn:
    case Variant::b_spin: return 2.0;
    case Variant::a_quip:
    case Variant::c_butterfly: return std::log2(static_cast<double>(cfg.e8p_size)) / 8.0;
    case Variant::d_tcq: return cfg.trellis_bits;
    case Variant::e_rvq: return std::log2(static_cast<double>(cfg.vq_k)) / cfg.vq_group;
    case Variant::f_aq: return std::log2(static_cast<double>(cfg.aq_k)) * cfg.aq_m_min / cfg.aq_group;
  }
  return 0.0;
}

void QuantMethodConfig::validate() const {
  auto fail = [this](const std::string& msg) { throw ConfigError("method " + label() + ": " + msg); };
  if (!(damping >= 0.0)) fail("damping must be >= 0");
  if (!(bits >= 0.0)) fail("bits must be >= 0");
  if (bits > 0.0 && std::abs(bits - nominal_bits(*this)) > 1e-9) {
    fail("bits=" + std::to_string(bits) + " does not match the knobs (" + std::to_string(nominal_bits(*this)) + ")");
  }
  if (scale_search.empty()) fail("scale_search must not be empty");
  for (double m : scale_search)
    if (!(m > 0.0)) fail("scale_search entries must be positive");
  switch (variant) {
    case Variant::a_quip:
    case Variant::c_butterfly:
      if (!is_power_of_two(e8p_size) || e8p_size < 256 || e8p_size > 65536) fail("e8p_size must be a power of two in [256, 65536]");
      if (variant == Variant::c_butterfly && (butterfly_iters < 0 || !(butterfly_lr > 0.0))) fail("bad butterfly knobs");
      break;
    case Variant::b_spin:
      if (cayley_iters < 1) fail("cayley_iters must be >= 1");
      if (!(cayley_lr > 0.0)) fail("cayley_lr must be positive");
      break;
    case Variant::d_tcq:
      if (trellis_states < 2 || !is_power_of_two(static_cast<std::size_t>(trellis_states))) fail("trellis_states must be a power of two >= 2");
      if (trellis_bits < 1 || trellis_bits > 4) fail("trellis_bits must be in [1, 4]");
      break;
    case Variant::e_rvq:
      if (vq_group < 1 || vq_k < 1 || vq_residual_k < 1 || kmeans_iters < 0) fail("bad residual-VQ knobs");
      break;
    case Variant::f_aq:
      if (aq_group < 1 || aq_k < 2 || aq_beam < 1 || aq_iters < 0) fail("bad additive knobs");
      if (aq_m_min < 1 || aq_m_max < aq_m_min || aq_m_max > 8) fail("need 1 <= aq_m_min <= aq_m_max <= 8");
      if (!(relative_mse_tolerance >= 0.0)) fail("relative_mse_tolerance must be >= 0");
      break;
    default: break;
  }
}

json method_to_json(const QuantMethodConfig& cfg) {
  json j;
  j["id"] = cfg.label();
  j["variant"] = variant_name(cfg.variant);
  j["bits"] = nominal_bits(cfg);
  j["seed"] = cfg.seed;
  j["damping"] = cfg.damping;
  const std::set<std::string> keys = allowed_keys(cfg.variant);
  auto put = [&](const char* key, const json& value) {
    if (keys.count(key)) j[key] = value;
  };
  put("r3", cfg.r3);
  put("r4", cfg.r4);
  put("e8p_size", cfg.e8p_size);
  put("scale_search", cfg.scale_search);
  put("cayley_iters", cfg.cayley_iters);
  put("cayley_lr", cfg.cayley_lr);
  put("butterfly_iters", cfg.butterfly_iters);
  put("butterfly_lr", cfg.butterfly_lr);
  put("trellis_states", cfg.trellis_states);
  put("trellis_bits", cfg.trellis_bits);
  put("vq_group", cfg.vq_group);
  put("vq_k", cfg.vq_k);
  put("vq_residual_k", cfg.vq_residual_k);
  put("kmeans_iters", cfg.kmeans_iters);
  put("aq_group", cfg.aq_group);
  put("aq_k", cfg.aq_k);
  put("aq_m_min", cfg.aq_m_min);
  put("aq_m_max", cfg.aq_m_max);
  put("aq_beam", cfg.aq_beam);
  put("aq_iters", cfg.aq_iters);
  put("relative_mse_tolerance", cfg.relative_mse_tolerance);
  return j;
}

QuantMethodConfig method_from_json(const json& j) {
  if (!j.is_object()) throw ConfigError("method entry must be an object");
  QuantMethodConfig cfg;
  try {
    cfg.variant = parse_variant(j.at("variant").get<std::string>());
    const std::set<std::string> keys = allowed_keys(cfg.variant);
    for (const auto& [key, value] : j.items()) {
      if (!keys.count(key)) {
        throw ConfigError("knob '" + key + "' does not apply to variant " + std::string(variant_name(cfg.variant)));
      }
    }
    cfg.id = j.value("id", std::string(variant_name(cfg.variant)));
    cfg.seed = j.value("seed", cfg.seed);
    cfg.damping = j.value("damping", cfg.damping);
    cfg.r3 = j.value("r3", cfg.r3);
    cfg.r4 = j.value("r4", cfg.r4);
    cfg.e8p_size = j.value("e8p_size", cfg.e8p_size);
    cfg.scale_search = j.value("scale_search", cfg.scale_search);
    cfg.cayley_iters = j.value("cayley_iters", cfg.cayley_iters);
    cfg.cayley_lr = j.value("cayley_lr", cfg.cayley_lr);
    cfg.butterfly_iters = j.value("butterfly_iters", cfg.butterfly_iters);
    cfg.butterfly_lr = j.value("butterfly_lr", cfg.butterfly_lr);
    cfg.trellis_states = j.value("trellis_states", cfg.trellis_states);
    cfg.trellis_bits = j.value("trellis_bits", cfg.trellis_bits);
    cfg.vq_group = j.value("vq_group", cfg.vq_group);
    cfg.vq_k = j.value("vq_k", cfg.vq_k);
    cfg.vq_residual_k = j.value("vq_residual_k", cfg.vq_residual_k);
    cfg.kmeans_iters = j.value("kmeans_iters", cfg.kmeans_iters);
    cfg.aq_group = j.value("aq_group", cfg.aq_group);
    cfg.aq_k = j.value("aq_k", cfg.aq_k);
    cfg.aq_m_min = j.value("aq_m_min", cfg.aq_m_min);
    cfg.aq_m_max = j.value("aq_m_max", cfg.aq_m_max);
    cfg.aq_beam = j.value("aq_beam", cfg.aq_beam);
    cfg.aq_iters = j.value("aq_iters", cfg.aq_iters);
    cfg.relative_mse_tolerance = j.value("relative_mse_tolerance", cfg.relative_mse_tolerance);
    cfg.bits = j.value("bits", 0.0);
  } catch (const json::exception& e) {
    throw ConfigError(std::string("malformed method entry: ") + e.what());
  }
  cfg.validate();
  return cfg;
}

json model_config_to_json(const ModelConfig& c) {
  return {{"vocab", c.vocab},           {"d_model", c.d_model},   {"n_layers", c.n_layers},
          {"n_heads", c.n_heads},       {"n_kv_heads", c.n_kv_heads}, {"d_ff", c.d_ff},
          {"max_seq", c.max_seq},       {"seed", c.seed},         {"rope_theta", c.rope_theta},
          {"norm_eps", c.norm_eps}};
}

ModelConfig model_config_from_json(const json& j) {
  ModelConfig c;
  try {
    c.vocab = j.value("vocab", c.vocab);
    c.d_model = j.value("d_model", c.d_model);
    c.n_layers = j.value("n_layers", c.n_layers);
    c.n_heads = j.value("n_heads", c.n_heads);
    c.n_kv_heads = j.value("n_kv_heads", c.n_kv_heads);
    c.d_ff = j.value("d_ff", c.d_ff);
    c.max_seq = j.value("max_seq", c.max_seq);
    c.seed = j.value("seed", c.seed);
    c.rope_theta = j.value("rope_theta", c.rope_theta);
    c.norm_eps = j.value("norm_eps", c.norm_eps);
  } catch (const json::exception& e) {
    throw ConfigError(std::string("malformed model config: ") + e.what());
  }
  c.validate();
  return c;
}

std::shared_ptr<const E8PCodebook> shared_e8p(std::size_t size) {
  static std::mutex mu;
  static std::map<std::size_t, std::shared_ptr<const E8PCodebook>> cache;
  std::lock_guard<std::mutex> lock(mu);
  auto& slot = cache[size];
  if (!slot) slot = std::make_shared<const E8PCodebook>(E8PCodebook::build(size));
  return slot;
}

const QuantizedLayer& QuantizedModel::layer(int l, LinearKind kind) const {
  for (const auto& q : layers)
    if (q.layer == l && q.kind == kind) return q;
  throw ManifestError("no entry for layer " + std::to_string(l) + " " + std::string(linear_name(kind)));
}

QuantizedLayer& QuantizedModel::layer(int l, LinearKind kind) {
  return const_cast<QuantizedLayer&>(static_cast<const QuantizedModel&>(*this).layer(l, kind));
}

double QuantizedModel::mean_proxy_error() const {
  if (layers.empty()) return 0.0;
  double s = 0.0;
  for (const auto& q : layers) s += q.proxy_error;
  return s / static_cast<double>(layers.size());
}

std::vector<std::uint8_t> pack_codes(const CodeStream& stream) {
  if (stream.bits < 1 || stream.bits > 32) throw ShapeError("code width must be in [1, 32]");
  const std::size_t total = stream.values.size() * static_cast<std::size_t>(stream.bits);
  std::vector<std::uint8_t> out((total + 7) / 8, 0);
  std::size_t pos = 0;
  for (std::uint32_t v : stream.values) {
    if (stream.bits < 32 && (v >> stream.bits) != 0) throw ShapeError("code value exceeds its width");
    for (int b = 0; b < stream.bits; ++b, ++pos) {
      if ((v >> b) & 1u) out[pos / 8] |= static_cast<std::uint8_t>(1u << (pos % 8));
    }
  }
  return out;
}

CodeStream unpack_codes(std::span<const std::uint8_t> bytes, int bits, std::size_t count) {
  if (bits < 1 || bits > 32) throw FormatError("code width must be in [1, 32]");
  if (bytes.size() * 8 < count * static_cast<std::size_t>(bits)) throw FormatError("code stream is truncated");
  CodeStream s;
  s.bits = bits;
  s.values.resize(count);
  std::size_t pos = 0;
  for (std::size_t i = 0; i < count; ++i) {
    std::uint32_t v = 0;
    for (int b = 0; b < bits; ++b, ++pos) {
      if ((bytes[pos / 8] >> (pos % 8)) & 1u) v |= 1u << b;
    }
    s.values[i] = v;
  }
  return s;
}

namespace {

struct Job {
  int layer;
  LinearKind kind;
};

std::vector<Job> all_jobs(const ModelConfig& cfg) {
  std::vector<Job> jobs;
  for (int l = 0; l < cfg.n_layers; ++l)
    for (LinearKind k : kLinearKinds) jobs.push_back({l, k});
  return jobs;
}

std::string job_name(const Job& j) { return "layer " + std::to_string(j.layer) + " " + std::string(linear_name(j.kind)); }

const MatrixD& hessian_for(const HessianSet& set, const Job& j) {
  const SublayerId id{j.layer, input_site(j.kind)};
  auto it = set.find(id);
  if (it == set.end()) {
    throw CalibrationError("no Hessian for " + job_name(j) + " (site " + std::string(sublayer_name(id.kind)) + ")");
  }
  return it->second.h;
}

void check_coverage(const HessianSet& set, const ModelConfig& cfg) {
  for (const Job& j : all_jobs(cfg)) {
    const MatrixD& h = hessian_for(set, j);
    const int n = j.kind == LinearKind::down ? cfg.d_ff : cfg.d_model;
    if (h.rows() != n || h.cols() != n) throw CalibrationError("Hessian for " + job_name(j) + " has the wrong size");
  }
}

int index_bits(int k) {
  int b = 1;
  while ((1 << b) < k) ++b;
  return b;
}

double rms(const Eigen::Ref<const Eigen::RowVectorXd>& v) {
  return v.size() == 0 ? 0.0 : std::sqrt(v.squaredNorm() / static_cast<double>(v.size()));
}

double codebook_rms(const E8PCodebook& cb) {
  double s = 0.0;
  for (std::size_t i = 0; i < cb.size(); ++i)
    for (double v : cb.entry(i)) s += v * v;
  return std::sqrt(s / (8.0 * static_cast<double>(cb.size())));
}

// BlockLDLQ with a per-row scale chosen from rms-relative multipliers by the
// row's Hessian-weighted error.
BlockCodes e8p_search(const MatrixD& w, const MatrixD& h, const MatrixD& h_damped, const E8PCodebook& cb,
                      const std::vector<double>& multipliers) {
  const double cb_rms = codebook_rms(cb);
  BlockCodes best;
  std::vector<double> best_err(static_cast<std::size_t>(w.rows()), std::numeric_limits<double>::infinity());
  const int blocks = static_cast<int>(w.cols()) / cb.dim();
  for (double m : multipliers) {
    Vector scales(w.rows());
    for (Eigen::Index r = 0; r < w.rows(); ++r) {
      const double v = rms(w.row(r));
      scales(r) = v == 0.0 ? 1.0f : static_cast<float>(m * v / cb_rms);
    }
    BlockCodes codes = ldlq_block_quantize(w, h_damped, cb, scales);
    const MatrixD recon = dequantize(codes, cb);
    if (best.codes.empty()) best = codes;
    for (Eigen::Index r = 0; r < w.rows(); ++r) {
      const Eigen::RowVectorXd e = w.row(r) - recon.row(r);
      const double err = e * h * e.transpose();
      if (err < best_err[static_cast<std::size_t>(r)]) {
        best_err[static_cast<std::size_t>(r)] = err;
        best.scales(r) = codes.scales(r);
        std::copy_n(codes.codes.begin() + r * blocks, blocks, best.codes.begin() + r * blocks);
      }
    }
  }
  return best;
}

ScalarCodes gptq_search(const MatrixD& w, const MatrixD& h, const MatrixD& h_damped, const ScalarGrid& grid,
                        const std::vector<double>& multipliers) {
  ScalarCodes best;
  std::vector<double> best_err(static_cast<std::size_t>(w.rows()), std::numeric_limits<double>::infinity());
  const Eigen::Index cols = w.cols();
  for (double m : multipliers) {
    Vector scales(w.rows());
    for (Eigen::Index r = 0; r < w.rows(); ++r) {
      const double v = w.row(r).cwiseAbs().maxCoeff();
      scales(r) = v == 0.0 ? 1.0f : static_cast<float>(m * v / grid.max_abs());
    }
    ScalarCodes codes = gptq_quantize(w, h_damped, grid, scales);
    const MatrixD recon = dequantize(codes, grid);
    if (best.codes.empty()) best = codes;
    for (Eigen::Index r = 0; r < w.rows(); ++r) {
      const Eigen::RowVectorXd e = w.row(r) - recon.row(r);
      const double err = e * h * e.transpose();
      if (err < best_err[static_cast<std::size_t>(r)]) {
        best_err[static_cast<std::size_t>(r)] = err;
        best.scales(r) = codes.scales(r);
        std::copy_n(codes.codes.begin() + r * cols, cols, best.codes.begin() + r * cols);
      }
    }
  }
  return best;
}

void set_block_codes(QuantizedLayer& q, const BlockCodes& codes, const E8PCodebook& cb, const std::string& cb_id) {
  q.encoding = "e8p";
  q.codebook = cb_id;
  q.streams = {CodeStream{cb.index_bits(), codes.codes}};
  q.scales = codes.scales;
}

void set_scalar_codes(QuantizedLayer& q, const ScalarCodes& codes) {
  q.encoding = "scalar";
  q.streams = {CodeStream{2, codes.codes}};
  q.scales = codes.scales;
}

std::string e8p_id(std::size_t size) { return size == 65536 ? std::string("e8p-desk") : "e8p-desk-" + std::to_string(size); }

CodebookRecord e8p_record(std::size_t size) {
  return {e8p_id(size), "e8p", json{{"size", size}, {"shifted", true}}, {}};
}

Matrix round_table(const MatrixD& m) { return m.cast<float>(); }

MatrixD groups_of(const MatrixD& w, int g) {
  const Eigen::Index per_row = w.cols() / g;
  MatrixD out(w.rows() * per_row, g);
  for (Eigen::Index r = 0; r < w.rows(); ++r)
    for (Eigen::Index b = 0; b < per_row; ++b) out.row(r * per_row + b) = w.block(r, b * g, 1, g);
  return out;
}

struct AqFit {
  AdditiveCodebooks books;
  std::vector<std::uint32_t> codes;  // N x M
  double error = 0.0;
};

std::vector<std::uint32_t> aq_encode_all(const MatrixD& groups, const AdditiveCodebooks& cbs, int beam) {
  const int m = cbs.m();
  std::vector<std::uint32_t> codes(static_cast<std::size_t>(groups.rows()) * m);
  std::vector<double> x(static_cast<std::size_t>(groups.cols()));
  for (Eigen::Index i = 0; i < groups.rows(); ++i) {
    for (Eigen::Index j = 0; j < groups.cols(); ++j) x[static_cast<std::size_t>(j)] = groups(i, j);
    const auto c = aq_beam_encode(x, cbs, beam);
    std::copy(c.begin(), c.end(), codes.begin() + i * m);
  }
  return codes;
}

AdditiveCodebooks rounded_books(const AdditiveCodebooks& cbs) {
  AdditiveCodebooks out = cbs;
  for (auto& b : out.books) b = b.cast<float>().cast<double>();
  return out;
}

AqFit fit_additive(const MatrixD& groups, int m, const QuantMethodConfig& cfg, std::uint64_t seed) {
  AdditiveCodebooks cbs;
  cbs.g = static_cast<int>(groups.cols());
  const VectorD ones = VectorD::Ones(groups.rows());
  MatrixD residual = groups;
  const int k = std::min<int>(cfg.aq_k, static_cast<int>(groups.rows()));
  for (int i = 0; i < m; ++i) {
    KMeansResult km = kmeans_weighted(residual, ones, k, 10, mix_seed(seed, static_cast<std::uint64_t>(i)));
    for (Eigen::Index r = 0; r < residual.rows(); ++r) residual.row(r) -= km.codebook.centroids.row(km.assignment[static_cast<std::size_t>(r)]);
    MatrixD book = MatrixD::Zero(cfg.aq_k, cbs.g);
    book.topRows(k) = km.codebook.centroids;
    cbs.books.push_back(std::move(book));
  }
  AqFit best;
  best.books = rounded_books(cbs);
  best.codes = aq_encode_all(groups, best.books, cfg.aq_beam);
  best.error = aq_error(groups, best.codes, best.books);
  AqFit cur = best;
  for (int it = 0; it < cfg.aq_iters; ++it) {
    cur.books = rounded_books(aq_update_codebooks(groups, cur.codes, cur.books));
    cur.codes = aq_encode_all(groups, cur.books, cfg.aq_beam);
    cur.error = aq_error(groups, cur.codes, cur.books);
    if (cur.error < best.error) best = cur;
  }
  return best;
}

std::uint64_t layer_seed(std::uint64_t seed, const Job& j, std::uint64_t tag) {
  return mix_seed(seed, tag * 0x10000 + static_cast<std::uint64_t>(j.layer) * 16 + static_cast<std::uint64_t>(j.kind));
}

double trellis_grid_rms(const Trellis& t) {
  double s = 0.0;
  for (double v : t.values) s += v * v;
  return std::sqrt(s / static_cast<double>(t.values.size()));
}

MatrixD tcq_core(const QuantizedLayer& q, const Trellis& t) {
  MatrixD core(q.rows, q.cols);
  const auto& path = q.streams.at(0).values;
  for (int r = 0; r < q.rows; ++r) {
    const std::vector<double> v =
        tcq_decode(std::span<const std::uint32_t>(path.data() + static_cast<std::size_t>(r) * q.cols, static_cast<std::size_t>(q.cols)), t);
    const double su = static_cast<float>(q.su[static_cast<std::size_t>(r)]);
    for (int c = 0; c < q.cols; ++c) core(r, c) = su * v[static_cast<std::size_t>(c)] * static_cast<float>(q.sv[static_cast<std::size_t>(c)]);
  }
  return core;
}

std::string trellis_id(const QuantMethodConfig& cfg) {
  return "trellis-" + std::to_string(cfg.trellis_states) + "x" + std::to_string(cfg.trellis_bits);
}

void fill_fp(QuantizedModel& qm, const Model& m) {
  qm.config = m.config;
  qm.runtime = m.runtime;
  qm.embedding = m.embedding;
  qm.lm_head = m.lm_head;
  qm.attn_norm.clear();
  qm.ffn_norm.clear();
  for (const auto& l : m.layers) {
    qm.attn_norm.push_back(l.attn_norm);
    qm.ffn_norm.push_back(l.ffn_norm);
  }
  qm.final_norm = m.final_norm;
}

QuantizedLayer dense_layer(const Job& j, const Matrix& w) {
  QuantizedLayer q;
  q.layer = j.layer;
  q.kind = j.kind;
  q.rows = static_cast<int>(w.rows());
  q.cols = static_cast<int>(w.cols());
  q.encoding = "dense";
  q.dense = w;
  return q;
}

std::string format_error(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.6g", v);
  return buf;
}

}  // namespace

QuantizedModel make_checkpoint(const Model& model) {
  model.config.validate();
  QuantizedModel qm;
  qm.method.variant = Variant::identity;
  fill_fp(qm, model);
  for (const Job& j : all_jobs(model.config)) {
    qm.layers.push_back(dense_layer(j, model.layers[static_cast<std::size_t>(j.layer)].weight(j.kind)));
  }
  return qm;
}

QuantizedModel quantize_model(const Model& model, const QuantMethodConfig& cfg, const HessianSet& hessians, int workers,
                              const ProgressFn& progress) {
  cfg.validate();
  model.config.validate();
  if (cfg.variant == Variant::identity) {
    QuantizedModel qm = make_checkpoint(model);
    qm.method = cfg;
    return qm;
  }
  check_coverage(hessians, model.config);
  const ModelConfig& mc = model.config;
  const std::vector<Job> jobs = all_jobs(mc);

  RotationSpec spec = RotationSpec::identity();
  if (cfg.variant == Variant::a_quip) {
    spec = RotationSpec::random_hadamard(cfg.seed, cfg.r3, cfg.r4);
  } else if (cfg.variant == Variant::b_spin) {
    Model base = fold_norm_scales(model);
    base.runtime = RotationSpec::random_hadamard(cfg.seed, cfg.r3, cfg.r4).runtime;
    CayleyConfig cc;
    cc.iters = cfg.cayley_iters;
    cc.lr = cfg.cayley_lr;
    cc.seed = mix_seed(cfg.seed, 0x42);
    CayleyResult learned = learn_cayley_rotations(base, hessians, cc);
    if (progress) {
      progress("stage=cayley iters=" + std::to_string(cfg.cayley_iters) + " initial_objective=" + format_error(learned.trace.front()) +
               " best_objective=" + format_error(learned.best_objective) + " best_iter=" + std::to_string(learned.best_iter));
    }
    spec = RotationSpec::learned(learned.r1, learned.r2, cfg.seed, cfg.r3, cfg.r4);
  }
  const Model fused = fuse_rotations(model, spec);
  const HessianSet rotated = rotate_hessians(hessians, spec, mc);

  QuantizedModel qm;
  qm.method = cfg;
  qm.rotation = spec;
  fill_fp(qm, fused);
  qm.layers.resize(jobs.size());

  std::shared_ptr<const E8PCodebook> e8p;
  if (cfg.variant == Variant::a_quip || cfg.variant == Variant::c_butterfly) {
    e8p = shared_e8p(cfg.e8p_size);
    qm.codebooks[e8p_id(cfg.e8p_size)] = e8p_record(cfg.e8p_size);
  }
  Trellis trellis;
  if (cfg.variant == Variant::d_tcq) {
    trellis = Trellis::bitshift(cfg.trellis_states, cfg.trellis_bits);
    qm.codebooks[trellis_id(cfg)] =
        CodebookRecord{trellis_id(cfg), "trellis", json{{"n_states", cfg.trellis_states}, {"bits", cfg.trellis_bits}}, {}};
  }

  // Residual VQ shares one codebook across all sublayers.
  VQCodebook vq;
  std::vector<Vector> vq_scales(jobs.size());
  if (cfg.variant == Variant::e_rvq) {
    const int g = cfg.vq_group;
    std::vector<MatrixD> parts;
    std::vector<VectorD> part_weights;
    Eigen::Index total = 0;
    for (std::size_t i = 0; i < jobs.size(); ++i) {
      const Job& j = jobs[i];
      const MatrixD w = fused.layers[static_cast<std::size_t>(j.layer)].weight(j.kind).cast<double>();
      if (w.cols() % g != 0) throw ShapeError("residual VQ: column count of " + job_name(j) + " is not a multiple of the group size");
      const MatrixD& h = hessian_for(rotated, j);
      Vector s(w.rows());
      MatrixD normalized = w;
      for (Eigen::Index r = 0; r < w.rows(); ++r) {
        const double v = rms(w.row(r));
        s(r) = v == 0.0 ? 1.0f : static_cast<float>(v);
        normalized.row(r) /= static_cast<double>(s(r));
      }
      vq_scales[i] = s;
      const MatrixD groups = groups_of(normalized, g);
      const double den = std::max((w * h).cwiseProduct(w).sum(), 1e-300);
      const Eigen::Index per_row = w.cols() / g;
      VectorD wt(groups.rows());
      for (Eigen::Index r = 0; r < w.rows(); ++r) {
        const double s2 = static_cast<double>(s(r)) * static_cast<double>(s(r));
        for (Eigen::Index b = 0; b < per_row; ++b) {
          const double hd = h.diagonal().segment(b * g, g).mean();
          wt(r * per_row + b) = std::max(s2 * hd * static_cast<double>(groups.rows()) / den, 1e-12);
        }
      }
      total += groups.rows();
      parts.push_back(groups);
      part_weights.push_back(wt);
    }
    MatrixD all(total, g);
    VectorD all_w(total);
    Eigen::Index at = 0;
    for (std::size_t i = 0; i < parts.size(); ++i) {
      all.middleRows(at, parts[i].rows()) = parts[i];
      all_w.segment(at, parts[i].rows()) = part_weights[i];
      at += parts[i].rows();
    }
    vq = train_residual_vq(all, all_w, cfg.vq_k, cfg.vq_residual_k, cfg.kmeans_iters, mix_seed(cfg.seed, 0x45));
    vq.centroids = vq.centroids.cast<float>().cast<double>();
    vq.residual = vq.residual.cast<float>().cast<double>();
    qm.codebooks["vq-shared"] = CodebookRecord{"vq-shared", "vq", json{{"g", g}},
                                               {round_table(vq.centroids), round_table(vq.residual)}};
  }

  const ScalarGrid grid = ScalarGrid::two_bit();
  std::vector<CodebookRecord> aq_records(jobs.size());

  parallel_for(jobs.size(), workers, [&](std::size_t i) {
    const Job& j = jobs[i];
    const MatrixD w = fused.layers[static_cast<std::size_t>(j.layer)].weight(j.kind).cast<double>();
    const MatrixD& h = hessian_for(rotated, j);
    const MatrixD hd = damped(h, cfg.damping);
    QuantizedLayer q;
    q.layer = j.layer;
    q.kind = j.kind;
    q.rows = static_cast<int>(w.rows());
    q.cols = static_cast<int>(w.cols());
    MatrixD w_hat;
    switch (cfg.variant) {
      case Variant::rtn: {
        const ScalarCodes codes = rtn_quantize(w, grid);
        set_scalar_codes(q, codes);
        w_hat = dequantize(codes, grid);
        break;
      }
      case Variant::b_spin: {
        const ScalarCodes codes = gptq_search(w, h, hd, grid, cfg.scale_search);
        set_scalar_codes(q, codes);
        w_hat = dequantize(codes, grid);
        break;
      }
      case Variant::a_quip: {
        const BlockCodes codes = e8p_search(w, h, hd, *e8p, cfg.scale_search);
        set_block_codes(q, codes, *e8p, e8p_id(cfg.e8p_size));
        w_hat = dequantize(codes, *e8p);
        break;
      }
      case Variant::c_butterfly: {
        ButterflyConfig bc;
        bc.iters = cfg.butterfly_iters;
        bc.lr = cfg.butterfly_lr;
        ButterflyAngles angles = learn_butterfly_angles(w, h, bc).angles;
        for (auto& stage : angles.stages)
          for (double& a : stage) a = static_cast<float>(a);
        const MatrixD b = butterfly_matrix(angles);
        const MatrixD wr = w * b.transpose();
        const MatrixD hr = b * h * b.transpose();
        const BlockCodes codes = e8p_search(wr, hr, damped(hr, cfg.damping), *e8p, cfg.scale_search);
        set_block_codes(q, codes, *e8p, e8p_id(cfg.e8p_size));
        q.butterfly = angles;
        w_hat = dequantize(codes, *e8p) * b;
        break;
      }
      case Variant::d_tcq: {
        q.in_seed = layer_seed(cfg.seed, j, 0x44);
        q.out_seed = layer_seed(cfg.seed, j, 0x45);
        const MatrixD t_in = hadamard_matrix(static_cast<std::size_t>(q.cols), q.in_seed);
        const MatrixD t_out = hadamard_matrix(static_cast<std::size_t>(q.rows), q.out_seed);
        const MatrixD core = t_out * w * t_in.transpose();
        const MatrixD hc = t_in * hd * t_in.transpose();
        std::vector<double> weights(static_cast<std::size_t>(hc.rows()));
        for (Eigen::Index c = 0; c < hc.rows(); ++c) weights[static_cast<std::size_t>(c)] = hc(c, c);
        const double grid_rms = trellis_grid_rms(trellis);
        q.encoding = "tcq";
        q.codebook = trellis_id(cfg);
        q.su.resize(static_cast<std::size_t>(q.rows));
        q.sv.assign(static_cast<std::size_t>(q.cols), Eigen::half(1.0f));
        CodeStream path{cfg.trellis_bits, std::vector<std::uint32_t>(static_cast<std::size_t>(q.rows) * q.cols)};
        std::vector<double> x(static_cast<std::size_t>(q.cols));
        for (int r = 0; r < q.rows; ++r) {
          const double v = rms(core.row(r));
          double best = std::numeric_limits<double>::infinity();
          for (double m : cfg.scale_search) {
            Eigen::half su(static_cast<float>(v == 0.0 ? 1.0 : m * v / grid_rms));
            const double s = static_cast<float>(su);
            if (!(s > 0.0) || !std::isfinite(s)) continue;
            for (int c = 0; c < q.cols; ++c) x[static_cast<std::size_t>(c)] = core(r, c) / s;
            const TcqResult res = tcq_viterbi_encode(x, trellis, weights);
            const double cost = res.cost * s * s;
            if (cost < best) {
              best = cost;
              q.su[static_cast<std::size_t>(r)] = su;
              std::copy(res.path.begin(), res.path.end(), path.values.begin() + static_cast<std::ptrdiff_t>(r) * q.cols);
            }
          }
          if (!std::isfinite(best)) throw QuantizationError("no usable scale for " + job_name(j) + " row " + std::to_string(r));
        }
        q.streams = {std::move(path)};
        w_hat = t_out.transpose() * tcq_core(q, trellis) * t_in;
        break;
      }
      case Variant::e_rvq: {
        const int g = cfg.vq_group;
        const Vector& s = vq_scales[i];
        MatrixD normalized = w;
        for (Eigen::Index r = 0; r < w.rows(); ++r) normalized.row(r) /= static_cast<double>(s(r));
        const ResidualCodes codes = residual_encode(groups_of(normalized, g), vq);
        q.encoding = "rvq";
        q.codebook = "vq-shared";
        q.scales = s;
        q.streams = {CodeStream{index_bits(cfg.vq_k), codes.primary}, CodeStream{index_bits(cfg.vq_residual_k), codes.residual}};
        const Eigen::Index per_row = w.cols() / g;
        MatrixD primary(w.rows(), w.cols());
        w_hat.resize(w.rows(), w.cols());
        for (Eigen::Index r = 0; r < w.rows(); ++r) {
          for (Eigen::Index b = 0; b < per_row; ++b) {
            const auto gi = static_cast<std::size_t>(r * per_row + b);
            for (int c = 0; c < g; ++c) {
              const float cp = static_cast<float>(vq.centroids(codes.primary[gi], c));
              const float cr = static_cast<float>(vq.residual(codes.residual[gi], c));
              primary(r, b * g + c) = static_cast<double>(s(r) * cp);
              w_hat(r, b * g + c) = static_cast<double>(s(r) * (cp + cr));
            }
          }
        }
        q.primary_proxy_error = proxy_error(w, primary, h);
        break;
      }
      case Variant::f_aq: {
        const int g = cfg.aq_group;
        if (w.cols() % g != 0) throw ShapeError("additive: column count of " + job_name(j) + " is not a multiple of the group size");
        const MatrixD groups = groups_of(w, g);
        const double energy = std::max(groups.squaredNorm(), 1e-300);
        AqFit fit;
        for (int m = cfg.aq_m_min; m <= cfg.aq_m_max; ++m) {
          fit = fit_additive(groups, m, cfg, layer_seed(cfg.seed, j, 0x46 + static_cast<std::uint64_t>(m)));
          if (fit.error / energy <= cfg.relative_mse_tolerance) break;
        }
        const int m = fit.books.m();
        const std::string id = "aq-" + std::to_string(j.layer) + "-" + std::string(linear_name(j.kind));
        CodebookRecord rec{id, "aq", json{{"g", g}, {"m", m}, {"k", cfg.aq_k}}, {}};
        for (const auto& b : fit.books.books) rec.tables.push_back(round_table(b));
        aq_records[i] = std::move(rec);
        q.encoding = "aq";
        q.codebook = id;
        const int bits = index_bits(cfg.aq_k);
        for (int k = 0; k < m; ++k) {
          CodeStream st{bits, std::vector<std::uint32_t>(static_cast<std::size_t>(groups.rows()))};
          for (Eigen::Index n = 0; n < groups.rows(); ++n) st.values[static_cast<std::size_t>(n)] = fit.codes[static_cast<std::size_t>(n * m + k)];
          q.streams.push_back(std::move(st));
        }
        const Eigen::Index per_row = w.cols() / g;
        w_hat.resize(w.rows(), w.cols());
        for (Eigen::Index r = 0; r < w.rows(); ++r) {
          for (Eigen::Index b = 0; b < per_row; ++b) {
            for (int c = 0; c < g; ++c) {
              float acc = 0.0f;
              for (int k = 0; k < m; ++k) {
                acc += static_cast<float>(fit.books.books[static_cast<std::size_t>(k)](fit.codes[static_cast<std::size_t>((r * per_row + b) * m + k)], c));
              }
              w_hat(r, b * g + c) = acc;
            }
          }
        }
        break;
      }
      case Variant::identity: break;
    }
    if (!all_finite(w_hat)) throw QuantizationError("non-finite reconstruction in " + job_name(j));
    q.proxy_error = proxy_error(w, w_hat, h);
    if (!std::isfinite(q.proxy_error)) throw QuantizationError("non-finite proxy error in " + job_name(j));
    qm.layers[i] = std::move(q);
  });

  for (auto& rec : aq_records)
    if (!rec.id.empty()) qm.codebooks[rec.id] = std::move(rec);

  if (progress) {
    for (const auto& q : qm.layers) {
      std::string line = "layer=" + std::to_string(q.layer) + " kind=" + std::string(linear_name(q.kind)) +
                         " encoding=" + q.encoding + " proxy_error=" + format_error(q.proxy_error);
      if (q.primary_proxy_error >= 0.0) line += " primary_proxy_error=" + format_error(q.primary_proxy_error);
      if (q.encoding == "aq") line += " codebooks=" + std::to_string(q.streams.size());
      progress(line);
    }
  }
  return qm;
}

}  // namespace bq2
