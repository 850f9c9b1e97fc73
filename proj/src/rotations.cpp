#include "bq2/rotations.hpp"

#include "bq2/errors.hpp"
#include "bq2/rng.hpp"
#include "bq2/rounding.hpp"

#include <cmath>
#include <numbers>

namespace bq2 {

std::string_view rotation_kind_name(RotationKind kind) {
  switch (kind) {
    case RotationKind::identity: return "identity";
    case RotationKind::random_hadamard: return "random-hadamard";
    case RotationKind::learned_orthogonal: return "learned-orthogonal";
    case RotationKind::butterfly: return "butterfly";
  }
  return "?";
}

RotationKind parse_rotation_kind(std::string_view name) {
  for (RotationKind k : {RotationKind::identity, RotationKind::random_hadamard, RotationKind::learned_orthogonal,
                         RotationKind::butterfly}) {
    if (rotation_kind_name(k) == name) return k;
  }
  throw ConfigError("unknown rotation kind '" + std::string(name) + "'");
}

RotationSpec RotationSpec::identity() { return {}; }

RotationSpec RotationSpec::random_hadamard(std::uint64_t seed, bool r3, bool r4) {
  RotationSpec s;
  s.kind = RotationKind::random_hadamard;
  s.seed = seed;
  s.runtime = {r3, r4, mix_seed(seed, 3), mix_seed(seed, 4)};
  return s;
}

RotationSpec RotationSpec::learned(MatrixD r1, std::vector<std::vector<MatrixD>> r2, std::uint64_t runtime_seed, bool r3,
                                   bool r4) {
  RotationSpec s;
  s.kind = RotationKind::learned_orthogonal;
  s.seed = runtime_seed;
  s.r1 = std::move(r1);
  s.r2 = std::move(r2);
  s.runtime = {r3, r4, mix_seed(runtime_seed, 3), mix_seed(runtime_seed, 4)};
  return s;
}

nlohmann::json rotation_to_json(const RotationSpec& spec) {
  return {{"kind", rotation_kind_name(spec.kind)},
          {"seed", spec.seed},
          {"apply_r3", spec.runtime.apply_r3},
          {"apply_r4", spec.runtime.apply_r4},
          {"r3_seed", spec.runtime.r3_seed},
          {"r4_seed", spec.runtime.r4_seed}};
}

RotationSpec rotation_from_json(const nlohmann::json& j) {
  RotationSpec s;
  s.kind = parse_rotation_kind(j.at("kind").get<std::string>());
  s.seed = j.value("seed", std::uint64_t{0});
  s.runtime.apply_r3 = j.value("apply_r3", false);
  s.runtime.apply_r4 = j.value("apply_r4", false);
  s.runtime.r3_seed = j.value("r3_seed", std::uint64_t{0});
  s.runtime.r4_seed = j.value("r4_seed", std::uint64_t{0});
  return s;
}

namespace {

void check_orthogonal(const MatrixD& r, Eigen::Index n, const char* what) {
  if (r.rows() != n || r.cols() != n) throw ShapeError(std::string(what) + ": expected " + std::to_string(n) + "x" + std::to_string(n));
  if (!all_finite(r) || orthogonality_error(r) > 1e-4) throw RotationError(std::string(what) + " is not orthogonal");
}

}  // namespace

MatrixD residual_rotation(const RotationSpec& spec, const ModelConfig& config) {
  const int d = config.d_model;
  switch (spec.kind) {
    case RotationKind::random_hadamard: return hadamard_matrix(static_cast<std::size_t>(d), mix_seed(spec.seed, 1));
    case RotationKind::learned_orthogonal: check_orthogonal(spec.r1, d, "R1"); return spec.r1;
    default: return MatrixD::Identity(d, d);
  }
}

std::vector<MatrixD> value_rotations(const RotationSpec& spec, const ModelConfig& config, int layer) {
  const int hd = config.head_dim();
  std::vector<MatrixD> out;
  for (int h = 0; h < config.n_kv_heads; ++h) {
    switch (spec.kind) {
      case RotationKind::random_hadamard:
        out.push_back(hadamard_matrix(static_cast<std::size_t>(hd), mix_seed(spec.seed, 0x100 + layer * 64 + h)));
        break;
      case RotationKind::learned_orthogonal:
        if (spec.r2.size() != static_cast<std::size_t>(config.n_layers) ||
            spec.r2[static_cast<std::size_t>(layer)].size() != static_cast<std::size_t>(config.n_kv_heads)) {
          throw ShapeError("R2 needs one matrix per layer and KV head");
        }
        check_orthogonal(spec.r2[static_cast<std::size_t>(layer)][static_cast<std::size_t>(h)], hd, "R2");
        out.push_back(spec.r2[static_cast<std::size_t>(layer)][static_cast<std::size_t>(h)]);
        break;
      default: out.push_back(MatrixD::Identity(hd, hd));
    }
  }
  return out;
}

MatrixD down_rotation(const RotationSpec& spec, const ModelConfig& config) {
  const auto n = static_cast<std::size_t>(config.d_ff);
  if (!spec.runtime.apply_r4) return MatrixD::Identity(config.d_ff, config.d_ff);
  if (!is_power_of_two(n)) throw ShapeError("R4 needs a power-of-two d_ff");
  return hadamard_matrix(n, spec.runtime.r4_seed);
}

namespace {

// Block diagonal with the value rotation of each query head's KV group.
MatrixD query_block_rotation(const std::vector<MatrixD>& r2, const ModelConfig& cfg) {
  const int hd = cfg.head_dim();
  const int group = cfg.n_heads / cfg.n_kv_heads;
  MatrixD b = MatrixD::Zero(cfg.d_model, cfg.d_model);
  for (int h = 0; h < cfg.n_heads; ++h) b.block(h * hd, h * hd, hd, hd) = r2[static_cast<std::size_t>(h / group)];
  return b;
}

MatrixD kv_block_rotation(const std::vector<MatrixD>& r2, const ModelConfig& cfg) {
  const int hd = cfg.head_dim();
  MatrixD b = MatrixD::Zero(cfg.kv_dim(), cfg.kv_dim());
  for (int h = 0; h < cfg.n_kv_heads; ++h) b.block(h * hd, h * hd, hd, hd) = r2[static_cast<std::size_t>(h)];
  return b;
}

Matrix to_float(const MatrixD& m) { return m.cast<float>(); }

}  // namespace

Model fuse_rotations(const Model& model, const RotationSpec& spec) {
  Model out = fold_norm_scales(model);
  const ModelConfig& cfg = out.config;
  out.runtime = spec.runtime;
  if (spec.runtime.apply_r3 && !is_power_of_two(static_cast<std::size_t>(cfg.head_dim()))) {
    throw ShapeError("R3 needs a power-of-two head size");
  }
  const bool rotate_residual = spec.kind == RotationKind::random_hadamard || spec.kind == RotationKind::learned_orthogonal;
  if (!rotate_residual && !spec.runtime.apply_r4) return out;

  const MatrixD r1 = residual_rotation(spec, cfg);
  const MatrixD r4 = down_rotation(spec, cfg);
  if (rotate_residual) {
    out.embedding = to_float(out.embedding.cast<double>() * r1);
    out.lm_head = to_float(out.lm_head.cast<double>() * r1);
  }
  for (int l = 0; l < cfg.n_layers; ++l) {
    LayerWeights& w = out.layers[static_cast<std::size_t>(l)];
    if (rotate_residual) {
      const std::vector<MatrixD> r2 = value_rotations(spec, cfg, l);
      for (LinearKind k : {LinearKind::q, LinearKind::k, LinearKind::gate, LinearKind::up}) {
        w.weight(k) = to_float(w.weight(k).cast<double>() * r1);
      }
      w.wv = to_float(kv_block_rotation(r2, cfg).transpose() * w.wv.cast<double>() * r1);
      w.wo = to_float(r1.transpose() * w.wo.cast<double>() * query_block_rotation(r2, cfg));
      w.w_down = to_float(r1.transpose() * w.w_down.cast<double>() * r4.transpose());
    } else {
      w.w_down = to_float(w.w_down.cast<double>() * r4.transpose());
    }
  }
  return out;
}

HessianSet rotate_hessians(const HessianSet& hessians, const RotationSpec& spec, const ModelConfig& config) {
  const MatrixD r1 = residual_rotation(spec, config);
  const MatrixD r4 = down_rotation(spec, config);
  HessianSet out;
  for (const auto& [id, entry] : hessians) {
    HessianEntry e = entry;
    switch (id.kind) {
      case SublayerKind::qkv_in:
      case SublayerKind::ffn_up_in: e.h = r1.transpose() * entry.h * r1; break;
      case SublayerKind::attn_out_in: {
        const MatrixD b = query_block_rotation(value_rotations(spec, config, id.layer), config);
        e.h = b.transpose() * entry.h * b;
        break;
      }
      case SublayerKind::ffn_down_in: e.h = r4 * entry.h * r4.transpose(); break;
    }
    e.h = (0.5 * (e.h + e.h.transpose())).eval();
    out[id] = std::move(e);
  }
  return out;
}

MatrixD apply_runtime_transforms(const MatrixD& x, const RuntimeTransforms& rt, SublayerKind site, int block) {
  const bool on = (site == SublayerKind::qkv_in && rt.apply_r3) || (site == SublayerKind::ffn_down_in && rt.apply_r4);
  if (!on) return x;
  if (block < 1 || x.cols() % block != 0 || !is_power_of_two(static_cast<std::size_t>(block))) {
    throw ShapeError("runtime transform block must be a power of two dividing the width");
  }
  const std::vector<float> signs =
      hadamard_signs(static_cast<std::size_t>(block), site == SublayerKind::qkv_in ? rt.r3_seed : rt.r4_seed);
  MatrixD out = x;
  for (Eigen::Index t = 0; t < out.rows(); ++t)
    for (Eigen::Index b = 0; b < out.cols(); b += block)
      hadamard_inplace(std::span<double>(out.row(t).data() + b, static_cast<std::size_t>(block)), signs);
  return out;
}

namespace {

MatrixD rtn_dense(const MatrixD& w) {
  const ScalarGrid grid = ScalarGrid::two_bit();
  return dequantize(rtn_quantize(w, grid), grid);
}

double weighted(const MatrixD& e, const MatrixD& h) { return (e * h).cwiseProduct(e).sum(); }

double denominator(const MatrixD& w, const MatrixD& h) {
  const double d = weighted(w, h);
  return d > 0.0 ? d : 1.0;
}

struct LayerTerms {
  MatrixD wq, wk, wv, wo, wg, wu, wd;
  MatrixD h1, h2, h3, h4;
};

std::vector<LayerTerms> cayley_terms(const Model& model, const HessianSet& hessians) {
  // R4 is fixed; fold it first so the learned rotations see the same
  // down-projection as the final model.
  const RotationSpec r4_only = [&] {
    RotationSpec s = RotationSpec::identity();
    s.runtime.apply_r4 = model.runtime.apply_r4;
    s.runtime.r4_seed = model.runtime.r4_seed;
    return s;
  }();
  const Model base = fuse_rotations(model, r4_only);
  const HessianSet hs = rotate_hessians(hessians, r4_only, model.config);
  std::vector<LayerTerms> out;
  for (int l = 0; l < model.config.n_layers; ++l) {
    const LayerWeights& w = base.layers[static_cast<std::size_t>(l)];
    auto get = [&](SublayerKind k) {
      const auto it = hs.find({l, k});
      if (it == hs.end()) throw CalibrationError("missing Hessian for layer " + std::to_string(l) + " " + std::string(sublayer_name(k)));
      return it->second.h;
    };
    out.push_back({w.wq.cast<double>(), w.wk.cast<double>(), w.wv.cast<double>(), w.wo.cast<double>(),
                   w.w_gate.cast<double>(), w.w_up.cast<double>(), w.w_down.cast<double>(), get(SublayerKind::qkv_in),
                   get(SublayerKind::attn_out_in), get(SublayerKind::ffn_up_in), get(SublayerKind::ffn_down_in)});
  }
  return out;
}

// Objective and (optionally) straight-through gradients for R1 and every R2.
double cayley_eval(const std::vector<LayerTerms>& terms, const ModelConfig& cfg, const MatrixD& r1,
                   const std::vector<std::vector<MatrixD>>& r2, MatrixD* g1, std::vector<std::vector<MatrixD>>* g2) {
  const int hd = cfg.head_dim();
  const int group = cfg.n_heads / cfg.n_kv_heads;
  double total = 0.0;
  if (g1) g1->setZero(r1.rows(), r1.cols());
  for (std::size_t l = 0; l < terms.size(); ++l) {
    const LayerTerms& t = terms[l];
    const MatrixD bv = kv_block_rotation(r2[l], cfg);
    const MatrixD bo = query_block_rotation(r2[l], cfg);
    MatrixD gbv = MatrixD::Zero(bv.rows(), bv.cols());
    MatrixD gbo = MatrixD::Zero(bo.rows(), bo.cols());

    // Input side of R1: W' = W R1, H' = R1^T H R1.
    auto input_side = [&](const MatrixD& w, const MatrixD& h, MatrixD* grad_r, const MatrixD& r) {
      const MatrixD q = rtn_dense(w * r);
      const MatrixD m = q * r.transpose() - w;
      const double den = denominator(w, h);
      if (grad_r) *grad_r += 2.0 * h * m.transpose() * q / den;
      return weighted(m, h) / den;
    };
    // Output side: W' = R^T W, H fixed.
    auto output_side = [&](const MatrixD& w, const MatrixD& h, MatrixD* grad_r, const MatrixD& r) {
      const MatrixD e = rtn_dense(r.transpose() * w) - r.transpose() * w;
      const double den = denominator(w, h);
      if (grad_r) *grad_r += -2.0 * w * h * e.transpose() / den;
      return weighted(e, h) / den;
    };

    total += input_side(t.wq, t.h1, g1, r1);
    total += input_side(t.wk, t.h1, g1, r1);
    total += input_side(t.wg, t.h3, g1, r1);
    total += input_side(t.wu, t.h3, g1, r1);
    // v: W' = Bv^T W R1.
    {
      total += input_side(bv.transpose() * t.wv, t.h1, g1, r1);
      if (g1) output_side(t.wv * r1, r1.transpose() * t.h1 * r1, &gbv, bv);
    }
    // o: W' = R1^T W Bo, H' = Bo^T H Bo.
    {
      const MatrixD hp = bo.transpose() * t.h2 * bo;
      total += output_side(t.wo * bo, hp, g1, r1);
      if (g1) input_side(r1.transpose() * t.wo, t.h2, &gbo, bo);
    }
    total += output_side(t.wd, t.h4, g1, r1);

    if (g2) {
      auto& gl = (*g2)[l];
      for (int h = 0; h < cfg.n_kv_heads; ++h) gl[static_cast<std::size_t>(h)] = gbv.block(h * hd, h * hd, hd, hd);
      for (int h = 0; h < cfg.n_heads; ++h) gl[static_cast<std::size_t>(h / group)] += gbo.block(h * hd, h * hd, hd, hd);
    }
  }
  return total;
}

MatrixD cayley_descend(const MatrixD& r, const MatrixD& grad, double lr) {
  const MatrixD a = 0.5 * (grad * r.transpose() - r * grad.transpose());
  const double norm = a.norm();
  if (norm == 0.0) return r;
  double step = lr / norm;
  for (int attempt = 0; attempt < 30; ++attempt) {
    try {
      return cayley_step(r, -grad, step);
    } catch (const StepSizeError&) {
      step *= 0.5;
    }
  }
  return r;
}

}  // namespace

double cayley_objective(const Model& model, const HessianSet& hessians, const MatrixD& r1,
                        const std::vector<std::vector<MatrixD>>& r2) {
  return cayley_eval(cayley_terms(model, hessians), model.config, r1, r2, nullptr, nullptr);
}

CayleyResult learn_cayley_rotations(const Model& model, const HessianSet& hessians, const CayleyConfig& cfg) {
  if (cfg.iters < 1) throw ConfigError("learn_cayley_rotations: iters must be >= 1");
  if (!(cfg.lr > 0.0)) throw ConfigError("learn_cayley_rotations: lr must be positive");
  const ModelConfig& mc = model.config;
  const std::vector<LayerTerms> terms = cayley_terms(model, hessians);
  const int d = mc.d_model;
  const int hd = mc.head_dim();

  MatrixD r1 = cfg.hadamard_init ? hadamard_matrix(static_cast<std::size_t>(d), mix_seed(cfg.seed, 1)) : MatrixD::Identity(d, d);
  std::vector<std::vector<MatrixD>> r2(static_cast<std::size_t>(mc.n_layers));
  for (int l = 0; l < mc.n_layers; ++l) {
    for (int h = 0; h < mc.n_kv_heads; ++h) {
      r2[static_cast<std::size_t>(l)].push_back(
          cfg.hadamard_init ? hadamard_matrix(static_cast<std::size_t>(hd), mix_seed(cfg.seed, 0x100 + l * 64 + h))
                            : MatrixD::Identity(hd, hd));
    }
  }

  CayleyResult best;
  MatrixD g1;
  std::vector<std::vector<MatrixD>> g2 = r2;
  for (int it = 0; it <= cfg.iters; ++it) {
    const double f = cayley_eval(terms, mc, r1, r2, &g1, &g2);
    if (!std::isfinite(f)) throw DivergenceError("Cayley objective is not finite at iteration " + std::to_string(it));
    best.trace.push_back(f);
    if (it == 0 || f < best.best_objective) {
      best.best_objective = f;
      best.best_iter = it;
      best.r1 = r1;
      best.r2 = r2;
    }
    if (it == cfg.iters) break;
    const double lr = cfg.lr * 0.5 * (1.0 + std::cos(std::numbers::pi * it / cfg.iters));
    r1 = cayley_descend(r1, g1, lr);
    for (std::size_t l = 0; l < r2.size(); ++l)
      for (std::size_t h = 0; h < r2[l].size(); ++h) r2[l][h] = cayley_descend(r2[l][h], g2[l][h], lr);
  }
  return best;
}

double butterfly_objective(const MatrixD& w, const MatrixD& h, const ButterflyAngles& angles) {
  const MatrixD b = butterfly_matrix(angles);
  const MatrixD q = rtn_dense(w * b.transpose());
  return weighted(q * b - w, h) / denominator(w, h);
}

ButterflyResult learn_butterfly_angles(const MatrixD& w, const MatrixD& h, const ButterflyConfig& cfg) {
  const auto n = static_cast<std::size_t>(w.cols());
  if (!is_power_of_two(n) || n < 2) throw ShapeError("learn_butterfly_angles: column count must be a power of two");
  if (h.rows() != w.cols() || h.cols() != w.cols()) throw ShapeError("learn_butterfly_angles: Hessian size mismatch");
  if (cfg.iters < 0) throw ConfigError("learn_butterfly_angles: iters must be >= 0");
  ButterflyAngles angles = ButterflyAngles::zeros(n);
  ButterflyResult out;
  out.angles = angles;
  out.initial_objective = butterfly_objective(w, h, angles);
  out.best_objective = out.initial_objective;
  const double den = denominator(w, h);

  std::vector<std::vector<double>> m(angles.stages.size()), v(angles.stages.size());
  for (std::size_t s = 0; s < angles.stages.size(); ++s) {
    m[s].assign(angles.stages[s].size(), 0.0);
    v[s].assign(angles.stages[s].size(), 0.0);
  }
  std::vector<double> basis(n, 0.0);
  std::vector<double> column(n);
  for (int it = 1; it <= cfg.iters; ++it) {
    const MatrixD b = butterfly_matrix(angles);
    const MatrixD q = rtn_dense(w * b.transpose());
    const MatrixD gb = 2.0 * q.transpose() * (q * b - w) * h / den;
    std::vector<std::vector<double>> grad(angles.stages.size());
    for (std::size_t s = 0; s < angles.stages.size(); ++s) grad[s].assign(angles.stages[s].size(), 0.0);
    for (std::size_t j = 0; j < n; ++j) {
      basis[j] = 1.0;
      for (std::size_t i = 0; i < n; ++i) column[i] = gb(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j));
      butterfly_backward(angles, basis, column, false, grad);
      basis[j] = 0.0;
    }
    for (std::size_t s = 0; s < angles.stages.size(); ++s) {
      for (std::size_t i = 0; i < angles.stages[s].size(); ++i) {
        m[s][i] = 0.9 * m[s][i] + 0.1 * grad[s][i];
        v[s][i] = 0.999 * v[s][i] + 0.001 * grad[s][i] * grad[s][i];
        const double mh = m[s][i] / (1.0 - std::pow(0.9, it));
        const double vh = v[s][i] / (1.0 - std::pow(0.999, it));
        angles.stages[s][i] -= cfg.lr * mh / (std::sqrt(vh) + 1e-12);
      }
    }
    const double f = butterfly_objective(w, h, angles);
    if (!std::isfinite(f)) throw DivergenceError("butterfly objective is not finite at iteration " + std::to_string(it));
    if (f < out.best_objective) {
      out.best_objective = f;
      out.angles = angles;
    }
  }
  return out;
}

}  // namespace bq2
