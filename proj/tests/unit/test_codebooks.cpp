#include "bq2/codebooks.hpp"
#include "bq2/errors.hpp"
#include "oracles.hpp"
#include "support.hpp"

#include <doctest.h>

#include <cmath>
#include <limits>
#include <set>

using namespace bq2;

namespace {

double weighted_sse(const MatrixD& v, const VectorD& w, const MatrixD& c, const std::vector<std::uint32_t>& a) {
  double s = 0.0;
  for (Eigen::Index i = 0; i < v.rows(); ++i) s += w(i) * (v.row(i) - c.row(a[static_cast<std::size_t>(i)])).squaredNorm();
  return s;
}

}  // namespace

TEST_SUITE("codebooks") {
  TEST_CASE("e8 decoder examples") {
    const Vec8 zero{};
    CHECK(e8_nearest_point(zero) == zero);
    const Vec8 root{1, 1, 0, 0, 0, 0, 0, 0};
    CHECK(e8_nearest_point(root) == root);
    const Vec8 small{0.6, 0, 0, 0, 0, 0, 0, 0};
    CHECK(e8_nearest_point(small) == zero);
    CHECK(is_e8_point(root));
    CHECK(is_e8_point({0.5, 0.5, 0.5, 0.5, 0.5, 0.5, 0.5, 0.5}));
    CHECK(!is_e8_point({1, 0, 0, 0, 0, 0, 0, 0}));
    CHECK(!is_e8_point({0.5, 0.5, 0.5, 0.5, 0.5, 0.5, 0.5, -0.5}));
  }

  TEST_CASE("e8 decoder matches brute force on 10000 inputs") {
    Rng rng(1);
    int mismatches = 0;
    for (int trial = 0; trial < 10000; ++trial) {
      Vec8 x;
      for (double& v : x) v = 4.0 * rng.uniform() - 2.0;
      const Vec8 y = e8_nearest_point(x);
      if (!is_e8_point(y) || std::abs(test::dist2(x, y) - test::brute_e8_distance(x)) > 1e-12) ++mismatches;
    }
    CHECK(mismatches == 0);
  }

  TEST_CASE("least-norm E8 points are zero and the 240 roots") {
    const auto ball = test::lattice_ball(2.0);
    CHECK(ball.size() == 241);
    const auto cb = E8PCodebook::build(241, 1.0, false);
    REQUIRE(cb.size() == 241);
    CHECK(cb.entry(0) == Vec8{});
    std::set<Vec8> expect(ball.begin(), ball.end());
    std::set<Vec8> got;
    for (std::size_t i = 0; i < cb.size(); ++i) {
      got.insert(cb.entry(i));
      if (i > 0) CHECK(test::dist2(cb.entry(i), Vec8{}) == 2.0);
    }
    CHECK(got == expect);
  }

  TEST_CASE("shifted E8P codebook construction") {
    const auto one = E8PCodebook::build(1);
    REQUIRE(one.size() == 1);
    double least = std::numeric_limits<double>::infinity();
    for (const auto& y : test::lattice_ball(4.0)) {
      Vec8 s;
      for (int i = 0; i < 8; ++i) s[i] = y[i] + 0.25;
      least = std::min(least, test::dist2(s, Vec8{}));
    }
    CHECK(test::dist2(one.entry(0), Vec8{}) == least);

    const auto a = E8PCodebook::build(1024, 0.5);
    const auto b = E8PCodebook::build(1024, 0.5);
    REQUIRE(a.size() == 1024);
    CHECK(a.index_bits() == 10);
    std::set<Vec8> seen;
    double prev = -1.0;
    for (std::size_t i = 0; i < a.size(); ++i) {
      CHECK(a.entry(i) == b.entry(i));
      Vec8 u;
      for (int k = 0; k < 8; ++k) u[k] = a.entry(i)[k] / 0.5 - 0.25;
      CHECK(is_e8_point(u));
      const double n2 = test::dist2(a.entry(i), Vec8{});
      CHECK(n2 >= prev);
      prev = n2;
      seen.insert(a.entry(i));
    }
    CHECK(seen.size() == a.size());
  }

  TEST_CASE("E8P encode equals brute force") {
    const auto cb = E8PCodebook::build(4096, 0.7);
    Rng rng(2);
    int mismatches = 0;
    for (int trial = 0; trial < 500; ++trial) {
      std::array<double, 8> x;
      for (double& v : x) v = rng.normal();
      mismatches += cb.encode(x) != cb.brute_force_encode(x);
      std::array<double, 8> y;
      cb.decode(cb.encode(x), y);
      CHECK(y == cb.entry(cb.encode(x)));
    }
    CHECK(mismatches == 0);
  }

  TEST_CASE("stateless trellis degenerates to rounding") {
    Trellis t;
    t.n_states = 1;
    t.bits = 1;
    t.next = {0, 0};
    t.values = {-1.0, 1.0};
    const std::vector<double> seq = {0.9, -0.2};
    const std::vector<double> w = {1.0, 1.0};
    const auto r = tcq_viterbi_encode(seq, t, w);
    CHECK(r.reproduction == std::vector<double>{1.0, -1.0});
    CHECK(r.path == std::vector<std::uint32_t>{1, 0});
    const auto empty = tcq_viterbi_encode({}, t, {});
    CHECK(empty.path.empty());
    CHECK(empty.cost == 0.0);
  }

  TEST_CASE("viterbi equals exhaustive search on 500 instances") {
    Rng rng(3);
    int mismatches = 0;
    for (int trial = 0; trial < 500; ++trial) {
      const int states = 1 + static_cast<int>(rng.below(8));
      const Trellis t = test::random_trellis(states, rng);
      const std::size_t n = 1 + rng.below(12);
      std::vector<double> seq(n), w(n);
      for (auto& v : seq) v = 1.5 * rng.normal();
      for (auto& v : w) v = 0.1 + rng.uniform();
      const auto r = tcq_viterbi_encode(seq, t, w);
      const double ex = test::exhaustive_tcq(t, seq, w);
      if (std::abs(r.cost - ex) > 1e-12 * std::max(1.0, ex)) ++mismatches;
      CHECK(std::abs(test::path_cost(r.path, t, seq, w) - r.cost) <= 1e-12 * std::max(1.0, r.cost));
      CHECK(tcq_decode(r.path, t) == r.reproduction);
    }
    CHECK(mismatches == 0);
  }

  TEST_CASE("viterbi never loses to greedy path following") {
    Rng rng(4);
    const Trellis t = Trellis::bitshift(16, 2);
    t.validate();
    for (int trial = 0; trial < 50; ++trial) {
      std::vector<double> seq(64), w(64, 1.0);
      for (auto& v : seq) v = rng.normal() * 0.6;
      const auto r = tcq_viterbi_encode(seq, t, w);
      double greedy = 0.0;
      int s = 0;
      for (double x : seq) {
        int best = 0;
        for (int b = 1; b < t.branches(); ++b) {
          const double vb = t.values[static_cast<std::size_t>(s * t.branches() + b)];
          const double v0 = t.values[static_cast<std::size_t>(s * t.branches() + best)];
          if ((x - vb) * (x - vb) < (x - v0) * (x - v0)) best = b;
        }
        const double v = t.values[static_cast<std::size_t>(s * t.branches() + best)];
        greedy += (x - v) * (x - v);
        s = t.next[static_cast<std::size_t>(s * t.branches() + best)];
      }
      CHECK(r.cost <= greedy + 1e-12);
    }
  }

  TEST_CASE("trellis validation") {
    Trellis t;
    CHECK_THROWS_AS(t.validate(), ConfigError);
    CHECK_THROWS_AS(Trellis::bitshift(12, 2), ConfigError);
    const std::vector<double> one = {0.0};
    CHECK_THROWS_AS(tcq_viterbi_encode(one, t, one), ConfigError);
  }

  TEST_CASE("weighted k-means examples") {
    MatrixD v(2, 1);
    v << 0.0, 2.0;
    VectorD w(2);
    w << 1.0, 3.0;
    const auto r = kmeans_weighted(v, w, 1, 5, 1);
    CHECK(r.codebook.centroids(0, 0) == doctest::Approx(1.5).epsilon(1e-15));

    Rng rng(5);
    const MatrixD pts = test::random_matrix(7, 3, rng);
    const auto all = kmeans_weighted(pts, VectorD::Ones(7), 7, 5, 2);
    CHECK(all.sse_trace.back() == 0.0);
    CHECK_THROWS_AS(kmeans_weighted(pts, VectorD::Ones(7), 0, 5, 2), ConfigError);
  }

  TEST_CASE("k-means SSE trace is monotone") {
    Rng rng(6);
    for (int trial = 0; trial < 10; ++trial) {
      const MatrixD pts = test::random_matrix(300, 4, rng);
      VectorD w(300);
      for (int i = 0; i < 300; ++i) w(i) = 0.1 + rng.uniform();
      const auto r = kmeans_weighted(pts, w, 16, 15, static_cast<std::uint64_t>(trial));
      for (std::size_t i = 1; i < r.sse_trace.size(); ++i) CHECK(r.sse_trace[i] <= r.sse_trace[i - 1] * (1 + 1e-12));
      CHECK(weighted_sse(pts, w, r.codebook.centroids, r.assignment) == doctest::Approx(r.sse_trace.back()).epsilon(1e-9));
    }
  }

  TEST_CASE("equal weights follow plain Lloyd iterations") {
    Rng rng(7);
    const MatrixD pts = test::random_matrix(200, 2, rng);
    const int k = 5;
    const MatrixD init = kmeans_init(pts, k, 8);
    const auto r = kmeans_weighted(pts, VectorD::Constant(200, 2.5), init, 6);

    MatrixD c = init;
    std::vector<std::uint32_t> assign(200);
    for (int it = 0; it < 6; ++it) {
      for (int i = 0; i < 200; ++i) {
        int best = 0;
        for (int j = 1; j < k; ++j)
          if ((pts.row(i) - c.row(j)).squaredNorm() < (pts.row(i) - c.row(best)).squaredNorm()) best = j;
        assign[static_cast<std::size_t>(i)] = static_cast<std::uint32_t>(best);
      }
      MatrixD sum = MatrixD::Zero(k, 2);
      VectorD cnt = VectorD::Zero(k);
      for (int i = 0; i < 200; ++i) {
        sum.row(assign[static_cast<std::size_t>(i)]) += pts.row(i);
        cnt(assign[static_cast<std::size_t>(i)]) += 1.0;
      }
      for (int j = 0; j < k; ++j) {
        REQUIRE(cnt(j) > 0.0);
        c.row(j) = sum.row(j) / cnt(j);
      }
    }
    CHECK(test::max_abs(r.codebook.centroids, c) <= 1e-12);
  }

  TEST_CASE("residual VQ with a zero residual centroid") {
    Rng rng(9);
    const MatrixD pts = test::random_matrix(400, 4, rng);
    const auto cb = train_residual_vq(pts, VectorD::Ones(400), 32, 8, 10, 3);
    cb.validate();
    CHECK(cb.residual.rows() == 8);
    CHECK(cb.residual.row(0).isZero(0.0));

    MatrixD exact(1, 4);
    exact.row(0) = cb.centroids.row(3);
    const auto codes1 = residual_encode(exact, cb);
    CHECK(codes1.primary[0] == 3);
    CHECK(codes1.residual[0] == 0);

    const auto codes = residual_encode(pts, cb);
    const MatrixD two = residual_decode(codes, cb);
    double e_two = 0.0, e_one = 0.0;
    for (Eigen::Index i = 0; i < pts.rows(); ++i) {
      e_two += (pts.row(i) - two.row(i)).squaredNorm();
      e_one += (pts.row(i) - cb.centroids.row(codes.primary[static_cast<std::size_t>(i)])).squaredNorm();
    }
    CHECK(e_two <= e_one);
    CHECK(e_two < e_one);

    VQCodebook bare = cb;
    bare.residual.resize(0, 0);
    CHECK_THROWS_AS(residual_encode(pts, bare), ConfigError);
  }

  TEST_CASE("beam search with a single codebook is exact nearest") {
    Rng rng(10);
    const auto cbs = test::random_books(1, 16, 4, rng);
    for (int trial = 0; trial < 50; ++trial) {
      std::vector<double> x(4);
      for (auto& v : x) v = rng.normal();
      const auto codes = aq_beam_encode(x, cbs, 1);
      CHECK(codes[0] == nearest_row(cbs.books[0], x));
    }
  }

  TEST_CASE("beam K^(M-1) equals exhaustive search on 500 instances") {
    Rng rng(11);
    int mismatches = 0;
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
      if (std::abs(test::sq_err(x, aq_decode(codes, cbs)) - best) > 1e-12) ++mismatches;
    }
    CHECK(mismatches == 0);
  }

  TEST_CASE("exact sums are recovered with a full beam") {
    Rng rng(12);
    const auto cbs = test::random_books(2, 4, 2, rng);
    for (std::uint32_t i = 0; i < 4; ++i)
      for (std::uint32_t j = 0; j < 4; ++j) {
        const std::vector<std::uint32_t> c = {i, j};
        const auto x = aq_decode(c, cbs);
        CHECK(test::sq_err(x, aq_decode(aq_beam_encode(x, cbs, 16), cbs)) <= 1e-24);
      }
  }

  TEST_CASE("two-codebook beam error is monotone in the beam width") {
    Rng rng(13);
    for (int trial = 0; trial < 100; ++trial) {
      const auto cbs = test::random_books(2, 16, 4, rng);
      std::vector<double> x(4);
      for (auto& v : x) v = rng.normal();
      double prev = std::numeric_limits<double>::infinity();
      for (int beam : {1, 2, 4, 8, 16}) {
        const double e = test::sq_err(x, aq_decode(aq_beam_encode(x, cbs, beam), cbs));
        CHECK(e <= prev);
        prev = e;
      }
    }
  }

  TEST_CASE("least-squares codebook update") {
    Rng rng(14);
    MatrixD groups = test::random_matrix(10, 3, rng);
    AdditiveCodebooks one = test::random_books(1, 4, 3, rng);
    std::vector<std::uint32_t> assign(10, 2);
    const auto upd = aq_update_codebooks(groups, assign, one);
    const VectorD mean = groups.colwise().mean().transpose();
    for (int c = 0; c < 3; ++c) CHECK(upd.books[0](2, c) == doctest::Approx(mean(c)).epsilon(1e-7));
    CHECK(upd.books[0].row(0) == one.books[0].row(0));
    CHECK(upd.books[0].row(1) == one.books[0].row(1));
    CHECK(upd.books[0].row(3) == one.books[0].row(3));

    for (int trial = 0; trial < 30; ++trial) {
      groups = test::random_matrix(200, 4, rng);
      const auto cbs = test::random_books(3, 8, 4, rng);
      std::vector<std::uint32_t> a;
      for (Eigen::Index i = 0; i < groups.rows(); ++i) {
        std::vector<double> x(groups.row(i).data(), groups.row(i).data() + 4);
        for (auto c : aq_beam_encode(x, cbs, 4)) a.push_back(c);
      }
      const double before = aq_error(groups, a, cbs);
      const double after = aq_error(groups, a, aq_update_codebooks(groups, a, cbs));
      CHECK(after <= before * (1 + 1e-12));
    }
  }
}
