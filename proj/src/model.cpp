#include "bq2/model.hpp"

#include "bq2/errors.hpp"
#include "bq2/numeric.hpp"
#include "bq2/rng.hpp"

#include <cmath>
#include <limits>

namespace bq2 {

void ModelConfig::validate() const {
  if (vocab != kVocabSize) throw ConfigError("model: vocab must be 256 (byte-level)");
  if (d_model < 1 || n_layers < 1 || n_heads < 1 || n_kv_heads < 1 || d_ff < 1 || max_seq < 1) {
    throw ConfigError("model: all dimensions must be >= 1");
  }
  if (d_model % n_heads != 0) throw ConfigError("model: d_model must be divisible by n_heads");
  if (n_heads % n_kv_heads != 0) throw ConfigError("model: n_kv_heads must divide n_heads");
  if (head_dim() % 2 != 0) throw ConfigError("model: head size must be even for rotary embeddings");
}

std::string_view linear_name(LinearKind kind) {
  switch (kind) {
    case LinearKind::q: return "wq";
    case LinearKind::k: return "wk";
    case LinearKind::v: return "wv";
    case LinearKind::o: return "wo";
    case LinearKind::gate: return "w_gate";
    case LinearKind::up: return "w_up";
    case LinearKind::down: return "w_down";
  }
  return "?";
}

LinearKind parse_linear_kind(std::string_view name) {
  for (LinearKind k : kLinearKinds)
    if (linear_name(k) == name) return k;
  throw FormatError("unknown linear kind '" + std::string(name) + "'");
}

std::string_view sublayer_name(SublayerKind kind) {
  switch (kind) {
    case SublayerKind::qkv_in: return "qkv-in";
    case SublayerKind::attn_out_in: return "attn-out-in";
    case SublayerKind::ffn_up_in: return "ffn-up-in";
    case SublayerKind::ffn_down_in: return "ffn-down-in";
  }
  return "?";
}

SublayerKind parse_sublayer_kind(std::string_view name) {
  for (SublayerKind k : kSublayerKinds)
    if (sublayer_name(k) == name) return k;
  throw FormatError("unknown sublayer kind '" + std::string(name) + "'");
}

SublayerKind input_site(LinearKind kind) {
  switch (kind) {
    case LinearKind::q:
    case LinearKind::k:
    case LinearKind::v: return SublayerKind::qkv_in;
    case LinearKind::o: return SublayerKind::attn_out_in;
    case LinearKind::gate:
    case LinearKind::up: return SublayerKind::ffn_up_in;
    case LinearKind::down: return SublayerKind::ffn_down_in;
  }
  return SublayerKind::qkv_in;
}

Matrix& LayerWeights::weight(LinearKind kind) {
  switch (kind) {
    case LinearKind::q: return wq;
    case LinearKind::k: return wk;
    case LinearKind::v: return wv;
    case LinearKind::o: return wo;
    case LinearKind::gate: return w_gate;
    case LinearKind::up: return w_up;
    case LinearKind::down: return w_down;
  }
  return wq;
}

const Matrix& LayerWeights::weight(LinearKind kind) const { return const_cast<LayerWeights*>(this)->weight(kind); }

namespace {

Matrix random_matrix(Rng& rng, int rows, int cols, double stddev) {
  Matrix m(rows, cols);
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = static_cast<float>(rng.normal() * stddev);
  return m;
}

}  // namespace

Model Model::init(const ModelConfig& config) {
  config.validate();
  Rng rng(mix_seed(config.seed, 0x494e4954ULL));
  const int d = config.d_model;
  const double in_std = 1.0 / std::sqrt(static_cast<double>(d));
  const double out_scale = 1.0 / std::sqrt(2.0 * config.n_layers);
  Model m;
  m.config = config;
  m.embedding = random_matrix(rng, config.vocab, d, 1.0);
  for (int l = 0; l < config.n_layers; ++l) {
    LayerWeights w;
    w.wq = random_matrix(rng, d, d, in_std);
    w.wk = random_matrix(rng, config.kv_dim(), d, in_std);
    w.wv = random_matrix(rng, config.kv_dim(), d, in_std);
    w.wo = random_matrix(rng, d, d, in_std * out_scale);
    w.w_gate = random_matrix(rng, config.d_ff, d, in_std);
    w.w_up = random_matrix(rng, config.d_ff, d, in_std);
    w.w_down = random_matrix(rng, d, config.d_ff, out_scale / std::sqrt(static_cast<double>(config.d_ff)));
    w.attn_norm = Vector::Ones(d);
    w.ffn_norm = Vector::Ones(d);
    m.layers.push_back(std::move(w));
  }
  m.final_norm = Vector::Ones(d);
  m.lm_head = random_matrix(rng, config.vocab, d, in_std);
  return m;
}

std::uint64_t Model::weight_hash() const {
  std::uint64_t h = hash_matrix(embedding);
  for (const auto& layer : layers) {
    for (LinearKind k : kLinearKinds) h = hash_matrix(layer.weight(k), h);
    h = hash_vector(layer.attn_norm, h);
    h = hash_vector(layer.ffn_norm, h);
  }
  h = hash_vector(final_norm, h);
  return hash_matrix(lm_head, h);
}

namespace {

class DenseBackend final : public LinearBackend {
 public:
  explicit DenseBackend(const Model& model) {
    for (const auto& layer : model.layers) {
      std::array<MatrixD, 7> ws;
      for (LinearKind k : kLinearKinds) ws[static_cast<int>(k)] = layer.weight(k).cast<double>();
      weights_.push_back(std::move(ws));
    }
  }

  MatrixD apply(int layer, LinearKind kind, const MatrixD& x) const override {
    return x * weights_[layer][static_cast<int>(kind)].transpose();
  }

 private:
  std::vector<std::array<MatrixD, 7>> weights_;
};

}  // namespace

std::shared_ptr<const InferenceModel> make_inference(const Model& model, std::shared_ptr<const LinearBackend> backend) {
  model.config.validate();
  auto im = std::make_shared<InferenceModel>();
  im->config = model.config;
  im->runtime = model.runtime;
  im->embedding = model.embedding.cast<double>();
  im->lm_head = model.lm_head.cast<double>();
  for (const auto& layer : model.layers) {
    im->attn_norm.push_back(layer.attn_norm.cast<double>());
    im->ffn_norm.push_back(layer.ffn_norm.cast<double>());
  }
  im->final_norm = model.final_norm.cast<double>();
  im->linears = std::move(backend);
  return im;
}

std::shared_ptr<const InferenceModel> make_inference(const Model& model) {
  return make_inference(model, std::make_shared<DenseBackend>(model));
}

std::shared_ptr<const InferenceModel> with_runtime(const std::shared_ptr<const InferenceModel>& base,
                                                   const RuntimeTransforms& runtime) {
  auto copy = std::make_shared<InferenceModel>(*base);
  copy->runtime = runtime;
  return copy;
}

namespace {

void rms_norm_rows(MatrixD& x, const VectorD& scale, double eps) {
  for (Eigen::Index t = 0; t < x.rows(); ++t) {
    const double ms = x.row(t).squaredNorm() / static_cast<double>(x.cols());
    const double inv = 1.0 / std::sqrt(ms + eps);
    x.row(t) = (x.row(t).array() * inv * scale.transpose().array()).matrix();
  }
}

void apply_rope(MatrixD& x, int n_heads, int head_dim, int pos0, double theta) {
  const int half = head_dim / 2;
  for (Eigen::Index t = 0; t < x.rows(); ++t) {
    const double pos = static_cast<double>(pos0 + t);
    for (int h = 0; h < n_heads; ++h) {
      for (int i = 0; i < half; ++i) {
        const double freq = std::pow(theta, -2.0 * i / head_dim);
        const double angle = pos * freq;
        const double c = std::cos(angle);
        const double s = std::sin(angle);
        const int a = h * head_dim + 2 * i;
        const double xa = x(t, a);
        const double xb = x(t, a + 1);
        x(t, a) = xa * c - xb * s;
        x(t, a + 1) = xa * s + xb * c;
      }
    }
  }
}

void hadamard_rows(MatrixD& x, int block, std::uint64_t seed) {
  const std::vector<float> signs = hadamard_signs(static_cast<std::size_t>(block), seed);
  for (Eigen::Index t = 0; t < x.rows(); ++t) {
    for (Eigen::Index b = 0; b < x.cols(); b += block) {
      hadamard_inplace(std::span<double>(x.row(t).data() + b, static_cast<std::size_t>(block)), signs);
    }
  }
}

double silu(double a) { return a / (1.0 + std::exp(-a)); }

}  // namespace

Session::Session(std::shared_ptr<const InferenceModel> model) : model_(std::move(model)) {
  const auto& cfg = model_->config;
  keys_.assign(static_cast<std::size_t>(cfg.n_layers), MatrixD(cfg.max_seq, cfg.kv_dim()));
  values_.assign(static_cast<std::size_t>(cfg.n_layers), MatrixD(cfg.max_seq, cfg.kv_dim()));
}

MatrixD Session::extend(std::span<const int> tokens) {
  const InferenceModel& m = *model_;
  const ModelConfig& cfg = m.config;
  const int n = static_cast<int>(tokens.size());
  if (n == 0) return MatrixD(0, cfg.vocab);
  if (length_ + n > cfg.max_seq) {
    throw ShapeError("sequence length " + std::to_string(length_ + n) + " exceeds max_seq " + std::to_string(cfg.max_seq));
  }
  const int d = cfg.d_model;
  const int hd = cfg.head_dim();
  const int group = cfg.n_heads / cfg.n_kv_heads;
  const double attn_scale = 1.0 / std::sqrt(static_cast<double>(hd));

  MatrixD x(n, d);
  for (int t = 0; t < n; ++t) {
    const int tok = tokens[static_cast<std::size_t>(t)];
    if (tok < 0 || tok >= cfg.vocab) throw InputError("token id " + std::to_string(tok) + " out of range");
    x.row(t) = m.embedding.row(tok);
  }

  const LinearBackend& lin = *m.linears;
  for (int l = 0; l < cfg.n_layers; ++l) {
    MatrixD h = x;
    rms_norm_rows(h, m.attn_norm[static_cast<std::size_t>(l)], cfg.norm_eps);
    if (observer_) observer_(l, SublayerKind::qkv_in, h);
    MatrixD q = lin.apply(l, LinearKind::q, h);
    MatrixD k = lin.apply(l, LinearKind::k, h);
    MatrixD v = lin.apply(l, LinearKind::v, h);
    apply_rope(q, cfg.n_heads, hd, length_, cfg.rope_theta);
    apply_rope(k, cfg.n_kv_heads, hd, length_, cfg.rope_theta);
    if (m.runtime.apply_r3) {
      hadamard_rows(q, hd, m.runtime.r3_seed);
      hadamard_rows(k, hd, m.runtime.r3_seed);
    }
    MatrixD& kc = keys_[static_cast<std::size_t>(l)];
    MatrixD& vc = values_[static_cast<std::size_t>(l)];
    kc.middleRows(length_, n) = k;
    vc.middleRows(length_, n) = v;
    const int total = length_ + n;

    MatrixD o(n, d);
    for (int head = 0; head < cfg.n_heads; ++head) {
      const int kvh = head / group;
      const MatrixD scores =
          q.middleCols(head * hd, hd) * kc.topRows(total).middleCols(kvh * hd, hd).transpose() * attn_scale;
      MatrixD probs(n, total);
      for (int r = 0; r < n; ++r) {
        const int visible = length_ + r + 1;
        double mx = -std::numeric_limits<double>::infinity();
        for (int s = 0; s < visible; ++s) mx = std::max(mx, scores(r, s));
        double sum = 0.0;
        for (int s = 0; s < total; ++s) {
          const double e = s < visible ? std::exp(scores(r, s) - mx) : 0.0;
          probs(r, s) = e;
          sum += e;
        }
        probs.row(r) /= sum;
      }
      o.middleCols(head * hd, hd) = probs * vc.topRows(total).middleCols(kvh * hd, hd);
    }
    if (observer_) observer_(l, SublayerKind::attn_out_in, o);
    x += lin.apply(l, LinearKind::o, o);

    MatrixD h2 = x;
    rms_norm_rows(h2, m.ffn_norm[static_cast<std::size_t>(l)], cfg.norm_eps);
    if (observer_) observer_(l, SublayerKind::ffn_up_in, h2);
    const MatrixD a = lin.apply(l, LinearKind::gate, h2);
    const MatrixD b = lin.apply(l, LinearKind::up, h2);
    MatrixD u(n, cfg.d_ff);
    for (Eigen::Index i = 0; i < u.size(); ++i) u.data()[i] = silu(a.data()[i]) * b.data()[i];
    if (m.runtime.apply_r4) hadamard_rows(u, cfg.d_ff, m.runtime.r4_seed);
    if (observer_) observer_(l, SublayerKind::ffn_down_in, u);
    x += lin.apply(l, LinearKind::down, u);
  }
  rms_norm_rows(x, m.final_norm, cfg.norm_eps);
  length_ += n;
  return x * m.lm_head.transpose();
}

std::vector<int> encode_text(std::string_view text) {
  std::vector<int> out;
  out.reserve(text.size());
  for (char c : text) out.push_back(static_cast<unsigned char>(c));
  return out;
}

std::string decode_tokens(std::span<const int> tokens) {
  std::string out;
  out.reserve(tokens.size());
  for (int t : tokens) out.push_back(static_cast<char>(static_cast<unsigned char>(t)));
  return out;
}

MatrixD forward_logits(const InferenceModel& model, std::span<const int> tokens) {
  if (tokens.empty()) throw ShapeError("forward_logits: empty input");
  // Session shares ownership; wrap the reference without taking it.
  Session s(std::shared_ptr<const InferenceModel>(std::shared_ptr<const InferenceModel>{}, &model));
  return s.extend(tokens);
}

MatrixD forward_logits(const Model& model, std::span<const int> tokens) {
  return forward_logits(*make_inference(model), tokens);
}

VectorD log_softmax(const Eigen::Ref<const VectorD>& row) {
  const double mx = row.maxCoeff();
  const double lse = mx + std::log((row.array() - mx).exp().sum());
  return (row.array() - lse).matrix();
}

int argmax(const Eigen::Ref<const VectorD>& row) {
  int best = 0;
  for (int i = 1; i < row.size(); ++i)
    if (row(i) > row(best)) best = i;
  return best;
}

double sequence_loglik(Session prefix, std::span<const int> continuation, const VectorD& last_logits) {
  if (continuation.empty()) return 0.0;
  const MatrixD logits = prefix.extend(continuation);
  double total = log_softmax(last_logits)(continuation[0]);
  for (std::size_t i = 1; i < continuation.size(); ++i) {
    total += log_softmax(logits.row(static_cast<Eigen::Index>(i - 1)).transpose())(continuation[i]);
  }
  return total;
}

double sequence_loglik(const InferenceModel& model, std::span<const int> context, std::span<const int> continuation) {
  if (continuation.empty()) return 0.0;
  if (context.empty()) throw InputError("sequence_loglik: empty context");
  Session s(std::shared_ptr<const InferenceModel>(std::shared_ptr<const InferenceModel>{}, &model));
  const MatrixD ctx_logits = s.extend(context);
  return sequence_loglik(s, continuation, ctx_logits.row(ctx_logits.rows() - 1).transpose());
}

std::vector<int> greedy_generate(const InferenceModel& model, std::span<const int> prompt, int n_tokens,
                                 const std::function<bool(std::span<const int>)>& stop) {
  std::vector<int> out;
  if (n_tokens <= 0) return out;
  if (prompt.empty()) throw InputError("greedy_generate: empty prompt");
  Session s(std::shared_ptr<const InferenceModel>(std::shared_ptr<const InferenceModel>{}, &model));
  MatrixD logits = s.extend(prompt);
  VectorD last = logits.row(logits.rows() - 1).transpose();
  for (int i = 0; i < n_tokens; ++i) {
    const int tok = argmax(last);
    out.push_back(tok);
    if (stop && stop(out)) break;
    if (i + 1 == n_tokens) break;
    const int next[1] = {tok};
    last = s.extend(next).row(0).transpose();
  }
  return out;
}

Model fold_norm_scales(const Model& model) {
  Model out = model;
  for (auto& layer : out.layers) {
    const Eigen::RowVectorXf g1 = layer.attn_norm.transpose();
    for (LinearKind k : {LinearKind::q, LinearKind::k, LinearKind::v}) {
      Matrix& w = layer.weight(k);
      w = (w.array().rowwise() * g1.array()).matrix();
    }
    const Eigen::RowVectorXf g2 = layer.ffn_norm.transpose();
    for (LinearKind k : {LinearKind::gate, LinearKind::up}) {
      Matrix& w = layer.weight(k);
      w = (w.array().rowwise() * g2.array()).matrix();
    }
    layer.attn_norm.setOnes();
    layer.ffn_norm.setOnes();
  }
  const Eigen::RowVectorXf gf = out.final_norm.transpose();
  out.lm_head = (out.lm_head.array().rowwise() * gf.array()).matrix();
  out.final_norm.setOnes();
  return out;
}

}  // namespace bq2
