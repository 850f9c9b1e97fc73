#include "bq2/calibration.hpp"
#include "bq2/errors.hpp"
#include "bq2/grammar.hpp"
#include "bq2/rotations.hpp"
#include "support.hpp"

#include <doctest.h>

using namespace bq2;

namespace {

double max_logit_diff(const Model& a, const Model& b, int prompts = 16) {
  double worst = 0.0;
  for (const auto& p : test::probe_prompts(prompts, 24, 77)) worst = std::max(worst, test::max_abs(forward_logits(a, p), forward_logits(b, p)));
  return worst;
}

MatrixD permutation(int n, Rng& rng) {
  std::vector<int> idx(static_cast<std::size_t>(n));
  for (int i = 0; i < n; ++i) idx[static_cast<std::size_t>(i)] = i;
  for (int i = n - 1; i > 0; --i) std::swap(idx[static_cast<std::size_t>(i)], idx[rng.below(static_cast<std::uint64_t>(i) + 1)]);
  MatrixD p = MatrixD::Zero(n, n);
  for (int i = 0; i < n; ++i) p(i, idx[static_cast<std::size_t>(i)]) = 1.0;
  return p;
}

HessianSet tiny_hessians(const Model& m) {
  CalibConfig c;
  c.n_sequences = 8;
  c.seq_len = 32;
  return collect_hessians(m, generate_corpus(c, Grammar(3)));
}

}  // namespace

TEST_SUITE("rotations") {
  TEST_CASE("norm folding is exact") {
    const Model m = test::tiny_model();
    const Model f = fold_norm_scales(m);
    for (const auto& l : f.layers) {
      CHECK(l.attn_norm.isOnes(0.0f));
      CHECK(l.ffn_norm.isOnes(0.0f));
    }
    CHECK(max_logit_diff(m, f) <= 1e-4);
  }

  TEST_CASE("identity spec leaves a folded model bit-identical") {
    const Model f = fold_norm_scales(test::tiny_model());
    CHECK(fuse_rotations(f, RotationSpec::identity()).weight_hash() == f.weight_hash());
  }

  TEST_CASE("random hadamard fusion preserves logits") {
    const Model m = test::tiny_model();
    const Model fused = fuse_rotations(m, RotationSpec::random_hadamard(9));
    CHECK(fused.runtime.apply_r3);
    CHECK(fused.runtime.apply_r4);
    CHECK(fused.weight_hash() != fold_norm_scales(m).weight_hash());
    CHECK(max_logit_diff(m, fused) <= 1e-4);
    int agree = 0, total = 0;
    for (const auto& p : test::probe_prompts(16, 24, 78)) {
      const MatrixD a = forward_logits(m, p);
      const MatrixD b = forward_logits(fused, p);
      for (Eigen::Index t = 0; t < a.rows(); ++t) {
        agree += argmax(a.row(t).transpose()) == argmax(b.row(t).transpose());
        ++total;
      }
    }
    CHECK(agree >= 0.99 * total);
  }

  TEST_CASE("permutation as learned rotation preserves logits") {
    const Model m = test::tiny_model();
    Rng rng(10);
    const auto& c = m.config;
    std::vector<std::vector<MatrixD>> r2(static_cast<std::size_t>(c.n_layers));
    for (auto& layer : r2)
      for (int h = 0; h < c.n_kv_heads; ++h) layer.push_back(permutation(c.head_dim(), rng));
    const Model fused = fuse_rotations(m, RotationSpec::learned(permutation(c.d_model, rng), r2, 3, false, false));
    CHECK(max_logit_diff(m, fused) <= 1e-5);
  }

  TEST_CASE("random orthogonal learned rotation with runtime transforms") {
    const Model m = test::tiny_model();
    Rng rng(11);
    const auto& c = m.config;
    std::vector<std::vector<MatrixD>> r2(static_cast<std::size_t>(c.n_layers));
    for (auto& layer : r2)
      for (int h = 0; h < c.n_kv_heads; ++h) layer.push_back(test::random_orthogonal(c.head_dim(), rng));
    const Model fused = fuse_rotations(m, RotationSpec::learned(test::random_orthogonal(c.d_model, rng), r2, 5));
    CHECK(max_logit_diff(m, fused) <= 1e-4);
  }

  TEST_CASE("fusion rejects non-orthogonal and mis-shaped matrices") {
    const Model m = test::tiny_model();
    const auto& c = m.config;
    std::vector<std::vector<MatrixD>> r2(static_cast<std::size_t>(c.n_layers),
                                         std::vector<MatrixD>(static_cast<std::size_t>(c.n_kv_heads), MatrixD::Identity(c.head_dim(), c.head_dim())));
    MatrixD skewed = MatrixD::Identity(c.d_model, c.d_model);
    skewed(0, 1) = 0.1;
    CHECK_THROWS_AS(fuse_rotations(m, RotationSpec::learned(skewed, r2, 1)), RotationError);
    CHECK_THROWS_AS(fuse_rotations(m, RotationSpec::learned(MatrixD::Identity(8, 8), r2, 1)), ShapeError);
  }

  TEST_CASE("disabling R4 with its inverse folded is observable") {
    const Model m = test::tiny_model();
    const Model fused = fuse_rotations(m, RotationSpec::random_hadamard(12));
    auto base = make_inference(fused);
    RuntimeTransforms off = fused.runtime;
    off.apply_r4 = false;
    auto faulty = with_runtime(base, off);
    double worst = 0.0;
    for (const auto& p : test::probe_prompts(16, 24, 79)) worst = std::max(worst, test::max_abs(forward_logits(*base, p), forward_logits(*faulty, p)));
    CHECK(worst > 1e-2);
  }

  TEST_CASE("R3 is computationally invariant") {
    const Model m = test::tiny_model();
    const Model fused = fuse_rotations(m, RotationSpec::random_hadamard(13));
    auto base = make_inference(fused);
    RuntimeTransforms off = fused.runtime;
    off.apply_r3 = false;
    auto other = with_runtime(base, off);
    for (const auto& p : test::probe_prompts(4, 24, 80)) CHECK(test::max_abs(forward_logits(*base, p), forward_logits(*other, p)) <= 1e-9);
  }

  TEST_CASE("runtime transforms at a site") {
    Rng rng(14);
    const MatrixD x = test::random_matrix(5, 32, rng);
    RuntimeTransforms rt;
    CHECK(apply_runtime_transforms(x, rt, SublayerKind::ffn_down_in, 32) == x);
    CHECK(apply_runtime_transforms(x, rt, SublayerKind::qkv_in, 8) == x);
    rt.apply_r4 = true;
    rt.r4_seed = 15;
    CHECK(apply_runtime_transforms(x, rt, SublayerKind::qkv_in, 8) == x);
    const MatrixD t = hadamard_matrix(32, 15);
    const MatrixD y = apply_runtime_transforms(x, rt, SublayerKind::ffn_down_in, 32);
    CHECK(test::max_abs(y, x * t.transpose()) <= 1e-12);

    // Inverse folded into the weight: (W T^T)(T x) = W x.
    const MatrixD w = test::random_matrix(16, 32, rng);
    const MatrixD ref = x * w.transpose();
    const MatrixD fused_w = (w * t.transpose()).cast<float>().cast<double>();
    CHECK(test::max_abs(y * fused_w.transpose(), ref) <= 1e-5);

    RuntimeTransforms r3;
    r3.apply_r3 = true;
    r3.r3_seed = 16;
    const MatrixD yh = apply_runtime_transforms(x, r3, SublayerKind::qkv_in, 8);
    const MatrixD t8 = hadamard_matrix(8, 16);
    for (int b = 0; b < 4; ++b) CHECK(test::max_abs(yh.middleCols(8 * b, 8), x.middleCols(8 * b, 8) * t8.transpose()) <= 1e-12);
    CHECK_THROWS_AS(apply_runtime_transforms(x, r3, SublayerKind::qkv_in, 6), ShapeError);
  }

  TEST_CASE("unsigned hadamard applied twice is the identity") {
    Rng rng(17);
    const MatrixD x = test::random_matrix(3, 16, rng);
    MatrixD y = x;
    for (int pass = 0; pass < 2; ++pass)
      for (Eigen::Index t = 0; t < y.rows(); ++t) hadamard_inplace(std::span<double>(y.row(t).data(), 16), {});
    CHECK(test::max_abs(y, x) <= 1e-6);
  }

  TEST_CASE("rotated hessians equal hessians recollected on the fused model") {
    const Model m = fold_norm_scales(test::tiny_model());
    CalibConfig c;
    c.n_sequences = 6;
    c.seq_len = 32;
    const auto corpus = generate_corpus(c, Grammar(3));
    const auto hs = collect_hessians(m, corpus);
    const auto spec = RotationSpec::random_hadamard(18);
    const auto derived = rotate_hessians(hs, spec, m.config);
    const auto direct = collect_hessians(fuse_rotations(m, spec), corpus);
    for (const auto& [id, e] : direct) {
      const double scale = std::max(1.0, e.h.cwiseAbs().maxCoeff());
      CHECK(test::max_abs(derived.at(id).h, e.h) <= 1e-5 * scale);
    }
  }

  TEST_CASE("rotation spec serialization") {
    const auto spec = RotationSpec::random_hadamard(19, true, false);
    const auto back = rotation_from_json(rotation_to_json(spec));
    CHECK(back.kind == RotationKind::random_hadamard);
    CHECK(back.seed == 19);
    CHECK(back.runtime.apply_r3);
    CHECK(!back.runtime.apply_r4);
    CHECK(back.runtime.r3_seed == spec.runtime.r3_seed);
    CHECK(back.runtime.r4_seed == spec.runtime.r4_seed);
    CHECK_THROWS_AS(parse_rotation_kind("nope"), ConfigError);
  }

  TEST_CASE("cayley learning improves the objective and stays orthogonal") {
    const Model m = fold_norm_scales(test::tiny_model());
    const auto hs = tiny_hessians(m);
    CayleyConfig cfg;
    cfg.iters = 10;
    const auto res = learn_cayley_rotations(m, hs, cfg);
    REQUIRE(res.trace.size() >= 2);
    CHECK(res.best_objective <= res.trace[0]);
    CHECK(orthogonality_error(res.r1) <= 1e-4);
    for (const auto& layer : res.r2)
      for (const auto& r : layer) CHECK(orthogonality_error(r) <= 1e-4);
    CHECK(cayley_objective(m, hs, res.r1, res.r2) == doctest::Approx(res.best_objective).epsilon(1e-9));

    cfg.iters = 0;
    CHECK_THROWS_AS(learn_cayley_rotations(m, hs, cfg), ConfigError);
  }

  TEST_CASE("cayley zero-gradient fixpoint") {
    const Model m = fold_norm_scales(test::tiny_model());
    HessianSet zero = tiny_hessians(m);
    for (auto& [id, e] : zero) e.h.setZero();
    CayleyConfig cfg;
    cfg.iters = 1;
    cfg.hadamard_init = false;
    const auto res = learn_cayley_rotations(m, zero, cfg);
    CHECK(res.r1 == MatrixD::Identity(m.config.d_model, m.config.d_model));
  }

  TEST_CASE("butterfly learning never regresses") {
    Rng rng(20);
    for (int n : {16, 64}) {
      const MatrixD w = test::random_matrix(24, n, rng);
      const MatrixD h = test::random_spd(n, rng);
      ButterflyConfig cfg;
      cfg.iters = 15;
      const auto res = learn_butterfly_angles(w, h, cfg);
      CHECK(res.angles.parameter_count() == static_cast<std::size_t>(n / 2 * log2_exact(static_cast<std::size_t>(n))));
      CHECK(res.initial_objective == doctest::Approx(butterfly_objective(w, h, ButterflyAngles::zeros(static_cast<std::size_t>(n)))).epsilon(1e-12));
      CHECK(res.best_objective <= res.initial_objective);
      CHECK(butterfly_objective(w, h, res.angles) == doctest::Approx(res.best_objective).epsilon(1e-9));
    }
    CHECK_THROWS_AS(learn_butterfly_angles(MatrixD::Ones(4, 12), MatrixD::Identity(12, 12), {}), ShapeError);
  }
}
