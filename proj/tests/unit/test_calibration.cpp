#include "bq2/calibration.hpp"
#include "bq2/errors.hpp"
#include "bq2/grammar.hpp"
#include "support.hpp"

#include <doctest.h>

#include <Eigen/Eigenvalues>

#include <cstring>
#include <fstream>
#include <iterator>

using namespace bq2;

namespace {

CalibConfig small_calib(std::uint64_t seed = 21) {
  CalibConfig c;
  c.n_sequences = 11;
  c.seq_len = 24;
  c.corpus_seed = seed;
  return c;
}

// All input rows of every site gathered in one matrix, then X^T X / N.
std::map<SublayerId, MatrixD> naive_hessians(const Model& model, const Corpus& corpus) {
  auto inf = make_inference(model);
  std::map<SublayerId, std::vector<VectorD>> rows;
  for (const auto& seq : corpus) {
    Session s(inf);
    s.set_observer([&](int layer, SublayerKind kind, const MatrixD& x) {
      for (Eigen::Index t = 0; t < x.rows(); ++t) rows[{layer, kind}].push_back(x.row(t).transpose());
    });
    s.extend(seq);
  }
  std::map<SublayerId, MatrixD> out;
  for (const auto& [id, list] : rows) {
    MatrixD x(static_cast<Eigen::Index>(list.size()), list[0].size());
    for (std::size_t i = 0; i < list.size(); ++i) x.row(static_cast<Eigen::Index>(i)) = list[i].transpose();
    out[id] = x.transpose() * x / static_cast<double>(x.rows());
  }
  return out;
}

std::vector<std::uint8_t> slurp(const std::filesystem::path& p) {
  std::ifstream f(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(f), std::istreambuf_iterator<char>()};
}

void dump(const std::filesystem::path& p, const std::vector<std::uint8_t>& bytes) {
  std::ofstream f(p, std::ios::binary | std::ios::trunc);
  f.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
}

}  // namespace

TEST_SUITE("calibration") {
  TEST_CASE("corpus determinism and seed sensitivity") {
    const Grammar g(3);
    const auto a = generate_corpus(small_calib(21), g);
    CHECK(a == generate_corpus(small_calib(21), g));
    CHECK(a != generate_corpus(small_calib(22), g));
    CHECK(a.size() == 11);
    for (const auto& s : a) {
      CHECK(s.size() == 24);
      for (int t : s) CHECK((t >= 0 && t < kVocabSize));
    }
  }

  TEST_CASE("config validation") {
    CalibConfig c = small_calib();
    c.n_sequences = 0;
    CHECK_THROWS_AS(c.validate(), ConfigError);
    CHECK_THROWS_AS(generate_corpus(c, Grammar(3)), ConfigError);
    c = small_calib();
    c.seq_len = 1;
    CHECK_THROWS_AS(c.validate(), ConfigError);
    c = small_calib();
    c.damping = -1.0;
    CHECK_THROWS_AS(c.validate(), ConfigError);
  }

  TEST_CASE("hessians equal the naive all-at-once product") {
    const Model m = test::tiny_model();
    const auto corpus = generate_corpus(small_calib(), Grammar(3));
    const auto hs = collect_hessians(m, corpus);
    const auto ref = naive_hessians(m, corpus);
    CHECK(hs.size() == static_cast<std::size_t>(4 * m.config.n_layers));
    for (const auto& [id, e] : hs) {
      CHECK(e.count == 11u * 24u);
      const MatrixD& r = ref.at(id);
      CHECK(test::max_abs(e.h, r) <= 1e-10 * std::max(1.0, r.cwiseAbs().maxCoeff()));
      CHECK(symmetry_error(e.h) == 0.0);
      const MatrixD d = damped(e.h, 0.01);
      Eigen::SelfAdjointEigenSolver<MatrixD> eig(d);
      CHECK(eig.eigenvalues().minCoeff() >= -1e-8);
    }
  }

  TEST_CASE("hessians are bit-identical across worker counts") {
    const Model m = test::tiny_model();
    const auto corpus = generate_corpus(small_calib(), Grammar(3));
    const auto one = collect_hessians(m, corpus, 1);
    const auto three = collect_hessians(m, corpus, 3);
    for (const auto& [id, e] : one) CHECK(e.h == three.at(id).h);
  }

  TEST_CASE("damping adds a multiple of the mean diagonal") {
    MatrixD h(2, 2);
    h << 2, 1, 1, 4;
    const MatrixD d = damped(h, 0.5);
    CHECK(d(0, 0) == 3.5);
    CHECK(d(1, 1) == 5.5);
    CHECK(d(0, 1) == 1.0);
  }

  TEST_CASE("persist and load round-trip bit-exactly") {
    const Model m = test::tiny_model();
    auto hs = collect_hessians(m, generate_corpus(small_calib(), Grammar(3)));
    round_to_storage(hs);
    test::TempDir dir("hess_rt");
    persist_hessians(hs, dir.path());
    std::size_t files = 0;
    for (const auto& entry : std::filesystem::directory_iterator(dir.path())) files += entry.path().extension() == ".hess";
    CHECK(files == static_cast<std::size_t>(4 * m.config.n_layers));
    CHECK(hessian_filename({1, SublayerKind::ffn_down_in}).string() == "layer1_ffn-down-in.hess");
    const auto back = load_hessians(dir.path());
    REQUIRE(back.size() == hs.size());
    for (const auto& [id, e] : hs) {
      CHECK(back.at(id).h == e.h);
      CHECK(back.at(id).count == e.count);
    }
  }

  TEST_CASE("file format layout and corruption") {
    HessianEntry e{MatrixD::Identity(3, 3) * 0.5, 42};
    e.h(0, 2) = e.h(2, 0) = 0.25;
    test::TempDir dir("hess_fmt");
    const auto p = dir.path() / "x.hess";
    write_hessian_file(p, e);
    const auto bytes = slurp(p);
    REQUIRE(bytes.size() == 4 + 4 + 4 + 4 + 8 + 9 * 4 + 4);
    CHECK(std::string(bytes.begin(), bytes.begin() + 4) == "BQ2H");
    CHECK(bytes[4] == 1);
    CHECK(bytes[8] == 3);
    CHECK(bytes[12] == 3);
    CHECK(bytes[16] == 42);
    float first = 0.0f;
    std::memcpy(&first, bytes.data() + 24, 4);
    CHECK(first == 0.5f);
    const auto back = read_hessian_file(p);
    CHECK(back.h == e.h);
    CHECK(back.count == 42);

    auto bad = bytes;
    bad[0] = 'X';
    dump(p, bad);
    CHECK_THROWS_AS(read_hessian_file(p), FormatError);

    bad = bytes;
    bad[4] = 9;
    dump(p, bad);
    CHECK_THROWS_AS(read_hessian_file(p), FormatError);

    bad = bytes;
    bad[30] ^= 0x10;
    dump(p, bad);
    CHECK_THROWS_AS(read_hessian_file(p), FormatError);

    bad = bytes;
    bad.resize(bytes.size() - 6);
    dump(p, bad);
    CHECK_THROWS_AS(read_hessian_file(p), FormatError);
  }

  TEST_CASE("empty corpus") {
    CHECK_THROWS_AS(collect_hessians(test::tiny_model(), Corpus{}), CalibrationError);
  }
}
