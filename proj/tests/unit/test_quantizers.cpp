#include "bq2/calibration.hpp"
#include "bq2/errors.hpp"
#include "bq2/grammar.hpp"
#include "bq2/quantizers.hpp"
#include "bq2/rounding.hpp"
#include "oracles.hpp"
#include "support.hpp"

#include <doctest.h>

#include <cmath>
#include <fstream>
#include <iterator>

using namespace bq2;

namespace {

ScalarGrid unit_grid() { return ScalarGrid{{0.0, 1.0}}; }

// Column-by-column quantization with the explicit inverse Hessian, updated
// by the Schur complement after each column.
std::vector<std::uint32_t> obq_replay(const MatrixD& w, const MatrixD& h, const ScalarGrid& grid, const Vector& scales) {
  std::vector<std::uint32_t> codes;
  for (Eigen::Index r = 0; r < w.rows(); ++r) {
    const double s = scales(r);
    Eigen::RowVectorXd row = w.row(r);
    MatrixD hinv = h.inverse();
    for (Eigen::Index j = 0; j < w.cols(); ++j) {
      const std::uint32_t q = nearest_level(grid, row(j) / s);
      codes.push_back(q);
      const double e = (row(j) - s * grid.levels[q]) / hinv(j, j);
      for (Eigen::Index k = j + 1; k < w.cols(); ++k) row(k) -= e * hinv(j, k);
      const Eigen::VectorXd col = hinv.col(j);
      hinv -= col * col.transpose() / col(j);
    }
  }
  return codes;
}

// Block version of the same replay for vector codebooks.
std::vector<std::uint32_t> block_obq_replay(const MatrixD& w, const MatrixD& h, const BlockCodebook& cb, const Vector& scales) {
  const int g = cb.dim();
  const Eigen::Index n = w.cols();
  std::vector<std::uint32_t> codes;
  std::vector<double> t(static_cast<std::size_t>(g)), q(static_cast<std::size_t>(g));
  for (Eigen::Index r = 0; r < w.rows(); ++r) {
    Eigen::RowVectorXd row = w.row(r) / static_cast<double>(scales(r));
    MatrixD hinv = h.inverse();
    for (Eigen::Index b = 0; b < n; b += g) {
      for (int j = 0; j < g; ++j) t[static_cast<std::size_t>(j)] = row(b + j);
      const std::uint32_t code = cb.encode(t);
      codes.push_back(code);
      cb.decode(code, q);
      Eigen::RowVectorXd err(g);
      for (int j = 0; j < g; ++j) err(j) = row(b + j) - q[static_cast<std::size_t>(j)];
      const MatrixD hbb_inv = hinv.block(b, b, g, g).inverse();
      const Eigen::RowVectorXd e = err * hbb_inv;
      if (b + g < n) row.tail(n - b - g) -= e * hinv.block(b, b + g, g, n - b - g);
      const MatrixD cols = hinv.middleCols(b, g);
      hinv -= cols * hbb_inv * cols.transpose();
    }
  }
  return codes;
}

Model folded_tiny() { return fold_norm_scales(test::tiny_model()); }

HessianSet tiny_hessians(const Model& m) {
  CalibConfig c;
  c.n_sequences = 8;
  c.seq_len = 48;
  auto hs = collect_hessians(m, generate_corpus(c, Grammar(3)));
  round_to_storage(hs);
  return hs;
}

QuantMethodConfig method(Variant v) {
  QuantMethodConfig c;
  c.variant = v;
  c.cayley_iters = 5;
  c.butterfly_iters = 5;
  c.kmeans_iters = 5;
  c.vq_k = 64;
  c.aq_iters = 1;
  return c;
}

}  // namespace

TEST_SUITE("quantizers") {
  TEST_CASE("round-to-nearest examples") {
    const ScalarGrid g = ScalarGrid::two_bit();
    CHECK(g.levels[nearest_level(g, 0.4)] == doctest::Approx(1.0 / 3.0));
    CHECK(nearest_level(g, 0.0) == 1);
    CHECK(g.levels[nearest_level(g, 0.0)] == -1.0 / 3.0);

    MatrixD w(2, 4);
    w << -1, -1.0 / 3.0, 1.0 / 3.0, 1, 1, 1, -1, -1.0 / 3.0;
    const auto codes = rtn_quantize(w, g, Vector::Ones(2));
    CHECK((dequantize(codes, g) - w).cwiseAbs().maxCoeff() <= 1e-7);

    MatrixD z = MatrixD::Zero(1, 3);
    CHECK(row_scales(z, g)(0) == 1.0f);
    MatrixD a(1, 2);
    a << 0.5, -2.0;
    CHECK(row_scales(a, g)(0) == 2.0f);
    const ScalarGrid unsorted{{1.0, 0.0}};
    CHECK_THROWS_AS(unsorted.validate(), ConfigError);
  }

  TEST_CASE("gptq two-column recurrence") {
    MatrixD w(1, 2);
    w << 0.4, 0.4;
    MatrixD h(2, 2);
    h << 1.0, 0.9, 0.9, 1.0;
    const auto codes = gptq_quantize(w, h, unit_grid(), Vector::Ones(1));
    CHECK(codes.codes == std::vector<std::uint32_t>{0, 1});
    CHECK(rtn_quantize(w, unit_grid(), Vector::Ones(1)).codes == std::vector<std::uint32_t>{0, 0});
  }

  TEST_CASE("gptq matches the inverse-Hessian replay") {
    Rng rng(1);
    for (int trial = 0; trial < 20; ++trial) {
      const MatrixD w = test::random_matrix(6, 16, rng);
      const MatrixD h = test::random_spd(16, rng);
      const ScalarGrid g = ScalarGrid::two_bit();
      const Vector s = row_scales(w, g);
      CHECK(gptq_quantize(w, h, g, s).codes == obq_replay(w, h, g, s));
    }
  }

  TEST_CASE("gptq reduces to rtn under diagonal H on 100 instances") {
    Rng rng(2);
    int mismatches = 0;
    for (int trial = 0; trial < 100; ++trial) {
      const int n = 2 + static_cast<int>(rng.below(31));
      const MatrixD w = test::random_matrix(1 + static_cast<int>(rng.below(8)), n, rng);
      const ScalarGrid g = ScalarGrid::two_bit();
      mismatches += gptq_quantize(w, test::diag_h(n, rng), g).codes != rtn_quantize(w, g).codes;
    }
    CHECK(mismatches == 0);
  }

  TEST_CASE("gptq beats rtn on most random instances") {
    Rng rng(3);
    int wins = 0;
    for (int trial = 0; trial < 100; ++trial) {
      const MatrixD w = test::random_matrix(8, 32, rng);
      const MatrixD h = test::random_spd(32, rng);
      const ScalarGrid g = ScalarGrid::two_bit();
      const double e_gptq = proxy_error(w, dequantize(gptq_quantize(w, h, g), g), h);
      const double e_rtn = proxy_error(w, dequantize(rtn_quantize(w, g), g), h);
      wins += e_gptq <= e_rtn;
    }
    CHECK(wins >= 90);
  }

  TEST_CASE("gptq rejects indefinite Hessians") {
    MatrixD h(2, 2);
    h << 1, 2, 2, 1;
    CHECK_THROWS_AS(gptq_quantize(MatrixD::Ones(1, 2), h, ScalarGrid::two_bit()), NotPsdError);
    CHECK_THROWS_AS(gptq_quantize(MatrixD::Ones(1, 3), h, ScalarGrid::two_bit()), ShapeError);
  }

  TEST_CASE("block UDU factorization") {
    Rng rng(4);
    const MatrixD h = test::random_spd(24, rng);
    const auto f = block_udu(h, 8);
    CHECK((f.U * f.D * f.U.transpose() - h).norm() / h.norm() <= 1e-10);
    for (int i = 0; i < 24; ++i)
      for (int j = 0; j < 24; ++j) {
        if (i / 8 == j / 8) CHECK(f.U(i, j) == (i == j ? 1.0 : 0.0));
        if (i / 8 > j / 8) {
          CHECK(f.U(i, j) == 0.0);
          CHECK(f.D(i, j) == 0.0);
        }
      }
  }

  TEST_CASE("ldlq reduces to per-block nearest under diagonal H on 100 instances") {
    const auto cb = E8PCodebook::build(256, 0.5);
    Rng rng(5);
    int mismatches = 0;
    for (int trial = 0; trial < 100; ++trial) {
      const int blocks = 1 + static_cast<int>(rng.below(4));
      const MatrixD w = test::random_matrix(3, 8 * blocks, rng);
      const Vector s = Vector::Constant(3, static_cast<float>(0.5 + rng.uniform()));
      const auto codes = ldlq_block_quantize(w, test::diag_h(8 * blocks, rng), cb, s);
      std::vector<std::uint32_t> direct;
      for (Eigen::Index r = 0; r < w.rows(); ++r)
        for (int b = 0; b < blocks; ++b) {
          std::vector<double> x(8);
          for (int j = 0; j < 8; ++j) x[static_cast<std::size_t>(j)] = w(r, 8 * b + j) / s(r);
          direct.push_back(cb.encode(x));
        }
      mismatches += codes.codes != direct;
    }
    CHECK(mismatches == 0);
  }

  TEST_CASE("ldlq with a single block is nearest codeword regardless of H") {
    const auto cb = E8PCodebook::build(256, 0.5);
    Rng rng(6);
    const MatrixD w = test::random_matrix(4, 8, rng);
    const auto codes = ldlq_block_quantize(w, test::random_spd(8, rng), cb, Vector::Ones(4));
    for (Eigen::Index r = 0; r < 4; ++r) {
      std::vector<double> x(w.row(r).data(), w.row(r).data() + 8);
      CHECK(codes.codes[static_cast<std::size_t>(r)] == cb.encode(x));
    }
  }

  TEST_CASE("ldlq matches the block inverse-Hessian replay") {
    const auto cb = E8PCodebook::build(4096, 0.4);
    Rng rng(7);
    for (int trial = 0; trial < 10; ++trial) {
      const MatrixD w = test::random_matrix(5, 32, rng);
      const MatrixD h = test::random_spd(32, rng);
      const Vector s = Vector::Ones(5);
      const auto codes = ldlq_block_quantize(w, h, cb, s);
      const auto replay = block_obq_replay(w, h, cb, s);
      CHECK(codes.codes == replay);
      BlockCodes rc = codes;
      rc.codes = replay;
      CHECK(proxy_error(w, dequantize(codes, cb), h) == doctest::Approx(proxy_error(w, dequantize(rc, cb), h)).epsilon(1e-12));
    }
  }

  TEST_CASE("proxy error examples") {
    Rng rng(8);
    const MatrixD w = test::random_matrix(3, 4, rng);
    const MatrixD h = test::random_spd(4, rng);
    CHECK(proxy_error(w, w, h) == 0.0);
    const MatrixD wh = w + test::random_matrix(3, 4, rng, 0.1);
    const MatrixD eye = MatrixD::Identity(4, 4);
    CHECK(proxy_error(w, wh, eye) == doctest::Approx((w - wh).squaredNorm() / w.squaredNorm()).epsilon(1e-12));
    CHECK(proxy_error(w, wh, h) > 0.0);

    MatrixD a(2, 2), b(2, 2), hh(2, 2);
    a << 1, 2, 3, 4;
    b << 1, 1, 3, 3;
    hh << 2, 1, 1, 3;
    CHECK(proxy_error(a, b, hh) == doctest::Approx(6.0 / 108.0).epsilon(1e-15));
    CHECK(proxy_error(MatrixD::Zero(2, 2), b, hh) == doctest::Approx(70.0).epsilon(1e-15));
  }

  TEST_CASE("size accounting examples") {
    SizeInputs in;
    in.code_bytes = 250;
    in.weight_count = 1000;
    CHECK(account_size(in).bpw == doctest::Approx(2.0).epsilon(1e-15));
    in.codebook_bytes = 512;
    CHECK(account_size(in).bpw == doctest::Approx(6.096).epsilon(1e-15));

    SizeInputs paper;
    paper.code_bytes = 3.26;
    paper.weight_count = 1.0;
    paper.reference_bytes = 22.0;
    CHECK(std::abs(account_size(paper).compression_ratio - 6.75) <= 0.05);
  }

  TEST_CASE("code packing round-trips") {
    Rng rng(9);
    for (int bits : {1, 2, 3, 7, 8, 10, 16}) {
      CodeStream s;
      s.bits = bits;
      for (int i = 0; i < 101; ++i) s.values.push_back(static_cast<std::uint32_t>(rng.below(std::uint64_t{1} << bits)));
      const auto bytes = pack_codes(s);
      CHECK(bytes.size() == (101 * static_cast<std::size_t>(bits) + 7) / 8);
      CHECK(unpack_codes(bytes, bits, 101).values == s.values);
    }
  }

  TEST_CASE("method config validation") {
    QuantMethodConfig c = method(Variant::d_tcq);
    const auto back = method_from_json(method_to_json(c));
    CHECK(back.variant == Variant::d_tcq);
    CHECK(back.trellis_states == c.trellis_states);
    auto j = method_to_json(c);
    j["aq_beam"] = 4;
    CHECK_THROWS_AS(method_from_json(j), ConfigError);
    CHECK_THROWS_AS(parse_variant("G-nope"), ConfigError);
    CHECK(has_runtime_transforms(Variant::a_quip));
    CHECK(has_runtime_transforms(Variant::b_spin));
    CHECK(!has_runtime_transforms(Variant::d_tcq));
    CHECK(nominal_bits(method(Variant::rtn)) == 2.0);
    CHECK(nominal_bits(method(Variant::a_quip)) == 2.0);
  }

  TEST_CASE("identity variant round-trips bit-exactly") {
    const Model m = test::tiny_model();
    const auto qm = quantize_model(m, method(Variant::identity), {});
    const Model back = decompress_model(qm);
    CHECK(back.weight_hash() == m.weight_hash());
    test::TempDir dir("ckpt");
    save_checkpoint(m, dir.path());
    CHECK(load_checkpoint(dir.path()).weight_hash() == m.weight_hash());
  }

  TEST_CASE("missing hessians are a calibration error") {
    const Model m = folded_tiny();
    auto hs = tiny_hessians(m);
    hs.erase(hs.begin());
    CHECK_THROWS_AS(quantize_model(m, method(Variant::rtn), hs), CalibrationError);
  }

  TEST_CASE("every variant quantizes, reloads and decompresses consistently") {
    const Model m = folded_tiny();
    const auto hs = tiny_hessians(m);
    const auto probes = test::probe_prompts(4, 16, 5);
    std::map<Variant, double> proxy;
    for (Variant v : {Variant::rtn, Variant::a_quip, Variant::b_spin, Variant::c_butterfly, Variant::d_tcq, Variant::e_rvq, Variant::f_aq}) {
      CAPTURE(variant_name(v));
      const auto qm = quantize_model(m, method(v), hs);
      proxy[v] = qm.mean_proxy_error();
      CHECK(qm.layers.size() == static_cast<std::size_t>(7 * m.config.n_layers));
      for (const auto& l : qm.layers) {
        CHECK(std::isfinite(l.proxy_error));
        CHECK(l.proxy_error >= 0.0);
        for (Eigen::Index i = 0; i < l.scales.size(); ++i) CHECK(l.scales(i) > 0.0f);
      }

      test::TempDir dir(std::string("q_") + std::string(variant_name(v)));
      save_quantized(qm, dir.path());
      const auto back = load_quantized(dir.path());
      CHECK(code_hash(back) == code_hash(qm));
      CHECK(back.embedding == qm.embedding);
      CHECK(back.lm_head == qm.lm_head);
      test::TempDir dir2(std::string("q2_") + std::string(variant_name(v)));
      save_quantized(back, dir2.path());
      std::ifstream a(dir.path() / "manifest.json"), b(dir2.path() / "manifest.json");
      CHECK(std::string(std::istreambuf_iterator<char>(a), {}) == std::string(std::istreambuf_iterator<char>(b), {}));

      const Model dense = decompress_model(back);
      const auto code = code_level_model(back);
      auto dense_inf = with_runtime(make_inference(dense), back.runtime);
      for (const auto& p : probes) CHECK(test::max_abs(forward_logits(*code, p), forward_logits(*dense_inf, p)) <= 1e-6);

      if (v == Variant::rtn || v == Variant::d_tcq || v == Variant::e_rvq || v == Variant::f_aq) {
        CHECK(qm.embedding == m.embedding);
        CHECK(qm.lm_head == m.lm_head);
        CHECK(qm.final_norm == m.final_norm);
      }
      if (v == Variant::e_rvq) {
        for (const auto& l : qm.layers) CHECK(l.proxy_error < l.primary_proxy_error);
      }
    }
    CHECK(proxy[Variant::a_quip] < proxy[Variant::rtn]);
    CHECK(proxy[Variant::b_spin] < proxy[Variant::rtn]);
  }

  TEST_CASE("quantization is deterministic across worker counts") {
    const Model m = folded_tiny();
    const auto hs = tiny_hessians(m);
    for (Variant v : {Variant::a_quip, Variant::d_tcq, Variant::f_aq}) {
      CHECK(code_hash(quantize_model(m, method(v), hs, 1)) == code_hash(quantize_model(m, method(v), hs, 3)));
    }
  }

  TEST_CASE("distillation trains scales only") {
    const Model m = folded_tiny();
    const auto hs = tiny_hessians(m);
    const auto qm = quantize_model(m, method(Variant::d_tcq), hs);
    CalibConfig c;
    c.n_sequences = 4;
    c.seq_len = 32;
    c.corpus_seed = 5;
    const auto corpus = generate_corpus(c, Grammar(3));

    DistillConfig none;
    none.epochs = 0;
    const auto same = distill_scales(m, qm, corpus, none);
    CHECK(code_hash(same.student) == code_hash(qm));
    for (std::size_t i = 0; i < qm.layers.size(); ++i) {
      CHECK(same.student.layers[i].su == qm.layers[i].su);
      CHECK(same.student.layers[i].sv == qm.layers[i].sv);
    }

    DistillConfig cfg;
    cfg.epochs = 2;
    const auto res = distill_scales(m, qm, corpus, cfg);
    CHECK(code_hash(res.student) == code_hash(qm));
    REQUIRE(res.ce_trace.size() == 3);
    CHECK(res.ce_trace[static_cast<std::size_t>(res.best_epoch)] <= res.ce_trace[0]);
    const double ce = distill_ce(*make_inference(m), *code_level_model(res.student), corpus);
    CHECK(ce == doctest::Approx(res.ce_trace[static_cast<std::size_t>(res.best_epoch)]).epsilon(1e-9));
  }
}
