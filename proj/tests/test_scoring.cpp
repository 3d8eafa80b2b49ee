#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <random>

#include "doctest.h"

#include "cemb/error.hpp"
#include "cemb/io.hpp"
#include "cemb/scoring.hpp"

using namespace cemb;

namespace {

MultiVec random_unit(std::size_t rows, std::size_t dim, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> nd(0.0, 1.0);
  Tensor t = Tensor::matrix(rows, dim);
  for (double& v : t.values()) v = nd(rng);
  return MultiVec::normalized(std::move(t));
}

// Brute-force double loop.
double brute_maxsim(const MultiVec& q, const MultiVec& d) {
  double total = 0.0;
  for (std::size_t i = 0; i < q.length(); ++i) {
    double best = -std::numeric_limits<double>::infinity();
    for (std::size_t j = 0; j < d.length(); ++j) {
      double dot = 0.0;
      for (std::size_t c = 0; c < q.dim(); ++c) dot += q.row(i)[c] * d.row(j)[c];
      best = std::max(best, dot);
    }
    total += best;
  }
  return total;
}

}  // namespace

TEST_SUITE("scoring") {

TEST_CASE("closed-form maxsim examples") {
  const MultiVec eye(Tensor::from_rows({{1, 0}, {0, 1}}));
  const auto a = maxsim(eye, eye);
  CHECK(a.total == 2.0);
  CHECK(a.argmax_index == std::vector<std::size_t>{0, 1});
  const auto b = maxsim(MultiVec(Tensor::from_rows({{0.6, 0.8}})), eye);
  CHECK(b.total == doctest::Approx(0.8).epsilon(1e-15));
  CHECK(b.argmax_index == std::vector<std::size_t>{1});
}

TEST_CASE("ties resolve to the lowest document row") {
  const MultiVec q(Tensor::from_rows({{1, 0}}));
  const MultiVec d(Tensor::from_rows({{0, 1}, {1, 0}, {1, 0}}));
  CHECK(maxsim(q, d).argmax_index == std::vector<std::size_t>{1});
}

TEST_CASE("dimension mismatch") {
  CHECK_THROWS_AS(maxsim(random_unit(2, 3, 1), random_unit(2, 4, 2)), DimensionError);
  CHECK_THROWS_AS(prefix_scores(random_unit(2, 3, 1), random_unit(2, 4, 2)), DimensionError);
}

TEST_CASE("maxsim equals a brute-force double loop") {
  for (std::uint64_t s = 0; s < 50; ++s) {
    const auto q = random_unit(4, 8, 10 + s), d = random_unit(30, 8, 500 + s);
    const auto r = maxsim(q, d, true);
    CHECK(r.total == brute_maxsim(q, d));
    CHECK(r.total == doctest::Approx(std::accumulate(r.per_query_max.begin(), r.per_query_max.end(), 0.0)));
    REQUIRE(r.sim_matrix);
    for (std::size_t i = 0; i < 4; ++i) {
      const auto j = r.argmax_index[i];
      CHECK(j < 30);
      CHECK((*r.sim_matrix)(i, j) == r.per_query_max[i]);
    }
  }
}

TEST_CASE("prefix scores match independent maxsim calls") {
  const auto q = random_unit(5, 6, 3), d = random_unit(17, 6, 4);
  const auto p = prefix_scores(q, d);
  REQUIRE(p.size() == 17);
  for (std::size_t k = 1; k <= 17; ++k) CHECK(p[k - 1] == maxsim(q, d.prefix(k)).total);
  for (std::size_t k = 1; k < 17; ++k) CHECK(p[k] >= p[k - 1]);
  CHECK(p.back() == maxsim(q, d).total);
}

TEST_CASE("permutation invariance and monotonicity") {
  const auto q = random_unit(4, 5, 5), d = random_unit(9, 5, 6);
  std::vector<std::size_t> perm(9);
  std::iota(perm.begin(), perm.end(), 0);
  std::mt19937_64 rng(7);
  std::shuffle(perm.begin(), perm.end(), rng);
  Tensor shuffled = Tensor::matrix(9, 5);
  for (std::size_t r = 0; r < 9; ++r)
    for (std::size_t c = 0; c < 5; ++c) shuffled(r, c) = d.tensor()(perm[r], c);
  const auto a = maxsim(q, d), b = maxsim(q, MultiVec(shuffled));
  CHECK(a.total == doctest::Approx(b.total).epsilon(1e-15));
  for (std::size_t i = 0; i < 4; ++i) CHECK(perm[b.argmax_index[i]] == a.argmax_index[i]);

  const auto extra = random_unit(1, 5, 8);
  Tensor grown = Tensor::matrix(10, 5);
  for (std::size_t r = 0; r < 9; ++r)
    for (std::size_t c = 0; c < 5; ++c) grown(r, c) = d.tensor()(r, c);
  for (std::size_t c = 0; c < 5; ++c) grown(9, c) = extra.row(0)[c];
  const double g = maxsim(q, MultiVec(grown)).total;
  CHECK(g >= a.total);
  CHECK(std::abs(a.total) <= 4.0);
}

TEST_CASE("heatmaps") {
  Tensor dup = Tensor::from_rows({{0.6, 0.8}, {0.6, 0.8}, {1.0, 0.0}});
  const MultiVec d(dup);
  const auto q = random_unit(3, 2, 9);
  const auto h = similarity_heatmaps(q, d);
  for (std::size_t i = 0; i < 3; ++i) CHECK(std::abs(h.qq(i, i) - 1.0) <= 1e-9);
  CHECK(h.dd(0, 1) == doctest::Approx(1.0).epsilon(1e-15));
  for (std::size_t i = 0; i < 3; ++i)
    for (std::size_t j = 0; j < 3; ++j) {
      CHECK(h.qq(i, j) == h.qq(j, i));
      CHECK(h.dd(i, j) == h.dd(j, i));
    }
  const auto ms = maxsim(q, d);
  for (std::size_t i = 0; i < 3; ++i) {
    std::size_t best = 0;
    for (std::size_t j = 1; j < 3; ++j)
      if (h.qd(i, j) > h.qd(i, best)) best = j;
    CHECK(best == ms.argmax_index[i]);
  }

  const auto dir = std::filesystem::temp_directory_path() / "cemb_test_heatmaps";
  write_heatmaps(dir, h);
  const auto text = io::read_file(dir / "qd.csv");
  CHECK(std::count(text.begin(), text.end(), '\n') == 3);
  std::filesystem::remove_all(dir);
}

TEST_CASE("graph maxsim matches the value version and routes gradient to selected rows") {
  const auto q = random_unit(3, 4, 11), d = random_unit(6, 4, 12);
  Graph g;
  auto qv = g.leaf(q.tensor(), true);
  auto dv = g.leaf(d.tensor(), true);
  auto s = maxsim(qv, dv);
  CHECK(s.item() == doctest::Approx(maxsim(q, d).total).epsilon(1e-14));
  g.backward(s);
  const auto detail = maxsim(q, d);
  for (std::size_t j = 0; j < 6; ++j) {
    const bool selected = std::find(detail.argmax_index.begin(), detail.argmax_index.end(), j) != detail.argmax_index.end();
    double n = 0.0;
    for (std::size_t c = 0; c < 4; ++c) n += std::abs(dv.grad()[j * 4 + c]);
    CHECK((n > 0.0) == selected);
  }
}

}  // TEST_SUITE
