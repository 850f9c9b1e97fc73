#include "bq2/train.hpp"

#include "bq2/errors.hpp"
#include "bq2/grammar.hpp"
#include "bq2/rng.hpp"

#include <cmath>
#include <limits>
#include <numbers>

namespace bq2 {

Model zeros_like(const Model& model) {
  Model g = model;
  g.embedding.setZero();
  for (auto& layer : g.layers) {
    for (LinearKind k : kLinearKinds) layer.weight(k).setZero();
    layer.attn_norm.setZero();
    layer.ffn_norm.setZero();
  }
  g.final_norm.setZero();
  g.lm_head.setZero();
  return g;
}

namespace {

template <typename M>
std::span<float> view(M& m) {
  return {m.data(), static_cast<std::size_t>(m.size())};
}

}  // namespace

std::vector<std::span<float>> parameter_views(Model& model) {
  std::vector<std::span<float>> out;
  out.push_back(view(model.embedding));
  for (auto& layer : model.layers) {
    for (LinearKind k : kLinearKinds) out.push_back(view(layer.weight(k)));
    out.push_back(view(layer.attn_norm));
    out.push_back(view(layer.ffn_norm));
  }
  out.push_back(view(model.final_norm));
  out.push_back(view(model.lm_head));
  return out;
}

namespace {

struct NormCache {
  Matrix n;       // normalized rows (before the scale)
  Vector inv_rms;
};

Matrix rms_forward(const Matrix& x, const Vector& g, double eps, NormCache& cache) {
  const Eigen::Index rows = x.rows();
  cache.n.resize(rows, x.cols());
  cache.inv_rms.resize(rows);
  for (Eigen::Index t = 0; t < rows; ++t) {
    const double ms = static_cast<double>(x.row(t).squaredNorm()) / static_cast<double>(x.cols());
    const float inv = static_cast<float>(1.0 / std::sqrt(ms + eps));
    cache.inv_rms(t) = inv;
    cache.n.row(t) = x.row(t) * inv;
  }
  return (cache.n.array().rowwise() * g.transpose().array()).matrix();
}

// Returns dx and accumulates dg.
Matrix rms_backward(const Matrix& dy, const Vector& g, const NormCache& cache, Vector& dg) {
  dg += (dy.array() * cache.n.array()).colwise().sum().transpose().matrix();
  const Matrix dn = (dy.array().rowwise() * g.transpose().array()).matrix();
  Matrix dx(dy.rows(), dy.cols());
  const float inv_d = 1.0f / static_cast<float>(dy.cols());
  for (Eigen::Index t = 0; t < dy.rows(); ++t) {
    const float m = dn.row(t).dot(cache.n.row(t)) * inv_d;
    dx.row(t) = cache.inv_rms(t) * (dn.row(t) - m * cache.n.row(t));
  }
  return dx;
}

struct RopeTable {
  Matrix cos;  // T x half
  Matrix sin;
};

RopeTable rope_table(int n, int head_dim, double theta) {
  const int half = head_dim / 2;
  RopeTable r{Matrix(n, half), Matrix(n, half)};
  for (int t = 0; t < n; ++t) {
    for (int i = 0; i < half; ++i) {
      const double angle = t * std::pow(theta, -2.0 * i / head_dim);
      r.cos(t, i) = static_cast<float>(std::cos(angle));
      r.sin(t, i) = static_cast<float>(std::sin(angle));
    }
  }
  return r;
}

// inverse=true applies the transposed rotation (the backward pass).
void rope(Matrix& x, int n_heads, int head_dim, const RopeTable& table, bool inverse) {
  const int half = head_dim / 2;
  for (Eigen::Index t = 0; t < x.rows(); ++t) {
    for (int h = 0; h < n_heads; ++h) {
      for (int i = 0; i < half; ++i) {
        const float c = table.cos(t, i);
        const float s = inverse ? -table.sin(t, i) : table.sin(t, i);
        const int a = h * head_dim + 2 * i;
        const float xa = x(t, a);
        const float xb = x(t, a + 1);
        x(t, a) = xa * c - xb * s;
        x(t, a + 1) = xa * s + xb * c;
      }
    }
  }
}

struct LayerCache {
  Matrix x_in;
  NormCache norm1;
  Matrix h1;
  Matrix q, k, v;  // q, k after rope
  std::vector<Matrix> probs;
  Matrix o;
  Matrix x_mid;
  NormCache norm2;
  Matrix h2;
  Matrix a, b, u;
};

float sigmoid(float a) { return 1.0f / (1.0f + std::exp(-a)); }

}  // namespace

double forward_backward(const Model& model, std::span<const int> tokens, const LossFn& loss, Model& grads) {
  const ModelConfig& cfg = model.config;
  const int n = static_cast<int>(tokens.size());
  if (n == 0) throw ShapeError("forward_backward: empty sequence");
  if (n > cfg.max_seq) throw ShapeError("forward_backward: sequence longer than max_seq");
  const int d = cfg.d_model;
  const int hd = cfg.head_dim();
  const int group = cfg.n_heads / cfg.n_kv_heads;
  const float scale = static_cast<float>(1.0 / std::sqrt(static_cast<double>(hd)));
  const RopeTable table = rope_table(n, hd, cfg.rope_theta);

  Matrix x(n, d);
  for (int t = 0; t < n; ++t) {
    const int tok = tokens[static_cast<std::size_t>(t)];
    if (tok < 0 || tok >= cfg.vocab) throw InputError("token id out of range");
    x.row(t) = model.embedding.row(tok);
  }

  std::vector<LayerCache> caches(static_cast<std::size_t>(cfg.n_layers));
  for (int l = 0; l < cfg.n_layers; ++l) {
    const LayerWeights& w = model.layers[static_cast<std::size_t>(l)];
    LayerCache& c = caches[static_cast<std::size_t>(l)];
    c.x_in = x;
    c.h1 = rms_forward(x, w.attn_norm, cfg.norm_eps, c.norm1);
    c.q = c.h1 * w.wq.transpose();
    c.k = c.h1 * w.wk.transpose();
    c.v = c.h1 * w.wv.transpose();
    rope(c.q, cfg.n_heads, hd, table, false);
    rope(c.k, cfg.n_kv_heads, hd, table, false);
    c.o.resize(n, d);
    c.probs.resize(static_cast<std::size_t>(cfg.n_heads));
    for (int head = 0; head < cfg.n_heads; ++head) {
      const int kvh = head / group;
      Matrix p = c.q.middleCols(head * hd, hd) * c.k.middleCols(kvh * hd, hd).transpose() * scale;
      for (int r = 0; r < n; ++r) {
        float mx = -std::numeric_limits<float>::infinity();
        for (int s = 0; s <= r; ++s) mx = std::max(mx, p(r, s));
        float sum = 0.0f;
        for (int s = 0; s < n; ++s) {
          const float e = s <= r ? std::exp(p(r, s) - mx) : 0.0f;
          p(r, s) = e;
          sum += e;
        }
        p.row(r) /= sum;
      }
      c.o.middleCols(head * hd, hd) = p * c.v.middleCols(kvh * hd, hd);
      c.probs[static_cast<std::size_t>(head)] = std::move(p);
    }
    x += c.o * w.wo.transpose();
    c.x_mid = x;
    c.h2 = rms_forward(x, w.ffn_norm, cfg.norm_eps, c.norm2);
    c.a = c.h2 * w.w_gate.transpose();
    c.b = c.h2 * w.w_up.transpose();
    c.u.resize(n, cfg.d_ff);
    for (Eigen::Index i = 0; i < c.u.size(); ++i) {
      const float a = c.a.data()[i];
      c.u.data()[i] = a * sigmoid(a) * c.b.data()[i];
    }
    x += c.u * w.w_down.transpose();
  }
  NormCache final_cache;
  const Matrix hf = rms_forward(x, model.final_norm, cfg.norm_eps, final_cache);
  const Matrix logits = hf * model.lm_head.transpose();

  Matrix dlogits = Matrix::Zero(logits.rows(), logits.cols());
  const double value = loss(logits, dlogits);

  grads.lm_head += dlogits.transpose() * hf;
  Matrix dx = rms_backward(dlogits * model.lm_head, model.final_norm, final_cache, grads.final_norm);

  for (int l = cfg.n_layers - 1; l >= 0; --l) {
    const LayerWeights& w = model.layers[static_cast<std::size_t>(l)];
    LayerWeights& gw = grads.layers[static_cast<std::size_t>(l)];
    const LayerCache& c = caches[static_cast<std::size_t>(l)];

    // FFN
    gw.w_down += dx.transpose() * c.u;
    const Matrix du = dx * w.w_down;
    Matrix da(n, cfg.d_ff);
    Matrix db(n, cfg.d_ff);
    for (Eigen::Index i = 0; i < du.size(); ++i) {
      const float a = c.a.data()[i];
      const float sg = sigmoid(a);
      db.data()[i] = du.data()[i] * a * sg;
      da.data()[i] = du.data()[i] * c.b.data()[i] * sg * (1.0f + a * (1.0f - sg));
    }
    gw.w_gate += da.transpose() * c.h2;
    gw.w_up += db.transpose() * c.h2;
    const Matrix dh2 = da * w.w_gate + db * w.w_up;
    dx += rms_backward(dh2, w.ffn_norm, c.norm2, gw.ffn_norm);

    // attention
    gw.wo += dx.transpose() * c.o;
    const Matrix d_o = dx * w.wo;
    Matrix dq = Matrix::Zero(n, d);
    Matrix dk = Matrix::Zero(n, cfg.kv_dim());
    Matrix dv = Matrix::Zero(n, cfg.kv_dim());
    for (int head = 0; head < cfg.n_heads; ++head) {
      const int kvh = head / group;
      const Matrix& p = c.probs[static_cast<std::size_t>(head)];
      const auto doh = d_o.middleCols(head * hd, hd);
      dv.middleCols(kvh * hd, hd) += p.transpose() * doh;
      const Matrix dp = doh * c.v.middleCols(kvh * hd, hd).transpose();
      Matrix ds = p.cwiseProduct(dp);
      const Eigen::VectorXf rowsum = ds.rowwise().sum();
      ds -= (p.array().colwise() * rowsum.array()).matrix();
      ds *= scale;
      dq.middleCols(head * hd, hd) = ds * c.k.middleCols(kvh * hd, hd);
      dk.middleCols(kvh * hd, hd) += ds.transpose() * c.q.middleCols(head * hd, hd);
    }
    rope(dq, cfg.n_heads, hd, table, true);
    rope(dk, cfg.n_kv_heads, hd, table, true);
    gw.wq += dq.transpose() * c.h1;
    gw.wk += dk.transpose() * c.h1;
    gw.wv += dv.transpose() * c.h1;
    const Matrix dh1 = dq * w.wq + dk * w.wk + dv * w.wv;
    dx += rms_backward(dh1, w.attn_norm, c.norm1, gw.attn_norm);
  }
  for (int t = 0; t < n; ++t) grads.embedding.row(tokens[static_cast<std::size_t>(t)]) += dx.row(t);
  return value;
}

LossFn next_token_loss(std::span<const int> tokens) {
  std::vector<int> targets(tokens.begin(), tokens.end());
  return [targets](const Matrix& logits, Matrix& grad) {
    const Eigen::Index n = logits.rows();
    if (n < 2) return 0.0;
    const double inv = 1.0 / static_cast<double>(n - 1);
    double total = 0.0;
    for (Eigen::Index t = 0; t + 1 < n; ++t) {
      const Eigen::RowVectorXf row = logits.row(t);
      const float mx = row.maxCoeff();
      const Eigen::RowVectorXf e = (row.array() - mx).exp().matrix();
      const float sum = e.sum();
      const int y = targets[static_cast<std::size_t>(t + 1)];
      total -= static_cast<double>(row(y) - mx) - std::log(static_cast<double>(sum));
      grad.row(t) = e / sum * static_cast<float>(inv);
      grad(t, y) -= static_cast<float>(inv);
    }
    return total * inv;
  };
}

void adam_update(std::vector<std::span<float>> params, std::vector<std::span<float>> grads, AdamState& state,
                 const AdamConfig& cfg, double lr) {
  if (params.size() != grads.size()) throw ShapeError("adam_update: parameter/gradient count mismatch");
  if (state.m.empty()) {
    for (const auto& p : params) {
      state.m.emplace_back(p.size(), 0.0f);
      state.v.emplace_back(p.size(), 0.0f);
    }
  }
  ++state.step;
  const double bc1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(state.step));
  const double bc2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(state.step));
  const float b1 = static_cast<float>(cfg.beta1);
  const float b2 = static_cast<float>(cfg.beta2);
  const float step = static_cast<float>(lr / bc1);
  const float inv_bc2 = static_cast<float>(1.0 / bc2);
  const float eps = static_cast<float>(cfg.eps);
  for (std::size_t i = 0; i < params.size(); ++i) {
    auto& m = state.m[i];
    auto& v = state.v[i];
    for (std::size_t j = 0; j < params[i].size(); ++j) {
      const float g = grads[i][j];
      m[j] = b1 * m[j] + (1.0f - b1) * g;
      v[j] = b2 * v[j] + (1.0f - b2) * g * g;
      params[i][j] -= step * m[j] / (std::sqrt(v[j] * inv_bc2) + eps);
    }
  }
}

namespace {

double schedule(const TrainConfig& cfg, int step) {
  if (step < cfg.warmup) return cfg.lr * (step + 1) / cfg.warmup;
  const int span = std::max(1, cfg.steps - cfg.warmup);
  const double progress = static_cast<double>(step - cfg.warmup) / span;
  return cfg.lr * (0.1 + 0.9 * 0.5 * (1.0 + std::cos(std::numbers::pi * progress)));
}

}  // namespace

Model train_toy(const ModelConfig& config, const TrainConfig& train, const Grammar& grammar,
                const std::function<void(const TrainProgress&)>& progress) {
  config.validate();
  if (train.steps < 0 || train.batch < 1 || train.seq_len < 2 || train.seq_len > config.max_seq) {
    throw ConfigError("train: need steps >= 0, batch >= 1 and 2 <= seq_len <= max_seq");
  }
  Model model = Model::init(config);
  Rng data(mix_seed(train.data_seed, 0x44415441ULL));
  AdamState state;
  const AdamConfig adam{train.lr, 0.9, 0.98, 1e-8};
  Model grads = zeros_like(model);
  for (int step = 0; step < train.steps; ++step) {
    grads = zeros_like(model);
    double loss = 0.0;
    for (int b = 0; b < train.batch; ++b) {
      const std::vector<int> seq = grammar.stream(data, static_cast<std::size_t>(train.seq_len));
      loss += forward_backward(model, seq, next_token_loss(seq), grads);
    }
    loss /= train.batch;
    auto gviews = parameter_views(grads);
    double norm2 = 0.0;
    for (auto& g : gviews) {
      for (float& v : g) {
        v /= static_cast<float>(train.batch);
        norm2 += static_cast<double>(v) * v;
      }
    }
    if (!std::isfinite(loss) || !std::isfinite(norm2)) {
      throw TrainingError("training diverged at step " + std::to_string(step) + " (non-finite loss)");
    }
    const double norm = std::sqrt(norm2);
    if (train.grad_clip > 0.0 && norm > train.grad_clip) {
      const float f = static_cast<float>(train.grad_clip / norm);
      for (auto& g : gviews)
        for (float& v : g) v *= f;
    }
    adam_update(parameter_views(model), gviews, state, adam, schedule(train, step));
    if (progress) progress({step, loss});
  }
  return fold_norm_scales(model);
}

}  // namespace bq2
