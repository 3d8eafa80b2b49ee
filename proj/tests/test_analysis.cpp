#include <cmath>
#include <set>

#include "doctest.h"

#include "cemb/analysis.hpp"
#include "cemb/error.hpp"
#include "cemb/io.hpp"

using namespace cemb;

namespace {

CoverageConfig cfg(std::size_t nt, std::size_t nv, std::size_t nq, std::size_t nd, std::size_t trials = 100000) {
  CoverageConfig c;
  c.n_t = nt;
  c.n_v = nv;
  c.n_q = nq;
  c.n_d = nd;
  c.trials = trials;
  return c;
}

}  // namespace

TEST_SUITE("analysis") {

TEST_CASE("closed forms") {
  CHECK(coverage_closed_form(cfg(2, 4, 2, 3)).forward == 4.0);
  CHECK(coverage_closed_form(cfg(2, 4, 2, 3)).causal == 10.0);
  const auto big = coverage_closed_form(cfg(16, 1024, 16, 32));
  CHECK(big.forward == 8192.0);
  CHECK(big.causal == 16632.0);
  CHECK(big.ratio == doctest::Approx(2.03).epsilon(1e-3));
  CHECK(std::isinf(coverage_closed_form(cfg(4, 0, 4, 2)).ratio));
  CHECK_THROWS_AS(coverage_closed_form(cfg(0, 4, 2, 3)), ContractError);
}

TEST_CASE("causal exceeds forward whenever N_q >= N_t and N_v >= 1") {
  for (std::size_t nt : {1u, 3u, 8u})
    for (std::size_t extra : {0u, 2u})
      for (std::size_t nv : {1u, 7u, 100u})
        for (std::size_t nd : {1u, 5u, 40u}) {
          const auto c = coverage_closed_form(cfg(nt, nv, nt + extra, nd));
          CHECK(c.causal > c.forward);
        }
}

TEST_CASE("Monte Carlo agrees with the closed forms within 3 sigma") {
  for (const auto& c : {cfg(2, 4, 2, 3), cfg(16, 1024, 16, 32), cfg(16, 64, 16, 8)}) {
    const auto chk = check_coverage(c);
    CHECK_MESSAGE(chk.forward_ok, c.label());
    CHECK_MESSAGE(chk.causal_ok, c.label());
    CHECK(chk.pass());
  }
}

TEST_CASE("degenerate forward case") {
  const auto mc = coverage_monte_carlo(cfg(4, 0, 4, 3, 2000));
  CHECK(mc.forward_mean == 0.0);
  CHECK(mc.forward_stderr == 0.0);
  CHECK(check_coverage(cfg(4, 0, 4, 3, 2000)).pass());
  CHECK_THROWS_AS(coverage_monte_carlo(cfg(4, 4, 4, 3, 999)), ContractError);
}

TEST_CASE("serial and parallel Monte Carlo are bit-identical") {
  auto c = cfg(5, 30, 6, 7, 20000);
  c.seed = 9;
  const auto a = coverage_monte_carlo(c, false), b = coverage_monte_carlo(c, true);
  CHECK(a.forward_mean == b.forward_mean);
  CHECK(a.causal_mean == b.causal_mean);
  CHECK(a.forward_stderr == b.forward_stderr);
  CHECK(a.causal_stderr == b.causal_stderr);
}

TEST_CASE("standard error shrinks as 1/sqrt(trials)") {
  const auto small = coverage_monte_carlo(cfg(16, 1024, 16, 32, 1000));
  const auto large = coverage_monte_carlo(cfg(16, 1024, 16, 32, 100000));
  // Expected ratio 10; the sample standard deviations differ by a few percent.
  CHECK(small.forward_stderr / large.forward_stderr == doctest::Approx(10.0).epsilon(0.1));
  CHECK(small.causal_stderr / large.causal_stderr == doctest::Approx(10.0).epsilon(0.1));
  // Per-token variance of U{0..N_v} is ((N_v+1)^2 - 1)/12.
  const double sd = std::sqrt(16.0 * (1025.0 * 1025.0 - 1.0) / 12.0);
  CHECK(large.forward_stderr == doctest::Approx(sd / std::sqrt(1e5)).epsilon(0.02));
}

TEST_CASE("coverage CSV") {
  const auto path = std::filesystem::temp_directory_path() / "cemb_test_coverage.csv";
  const std::vector<CoverageCheck> checks{check_coverage(cfg(2, 4, 2, 3, 5000))};
  write_coverage_csv(path, checks);
  const auto b = io::read_file(path);
  const std::string s(b.begin(), b.end());
  CHECK(s.rfind("config,quantity,analytic,simulated,stderr,pass\n", 0) == 0);
  CHECK(s.find("\"(2,4,2,3)\",forward,4.000000") != std::string::npos);
  CHECK(s.find("\"(2,4,2,3)\",causal,10.000000") != std::string::npos);
  std::filesystem::remove(path);
}

TEST_CASE("empirical gradient coverage bounds") {
  ModelConfig m;
  m.vocab_size = 32;
  m.d_model = 16;
  m.n_layers = 2;
  m.n_heads = 2;
  m.d_emb = 8;
  m.max_context = 48;
  m.n_q = 3;
  m.n_d = 6;
  SyntheticTaskConfig t;
  t.n_docs = 6;
  t.doc_len = 20;
  t.query_len = 4;
  t.vocab_size = 32;
  t.n_topics = 4;
  const auto corpus = gen_corpus(t);
  std::vector<TrainPair> batch;
  for (std::size_t i = 0; i < 4; ++i) batch.push_back({&corpus.queries[2 * i], &corpus.docs[i]});
  const auto params = init_params(m, 1);
  const auto cov = coverage_empirical(params, batch);
  REQUIRE(cov.forward_per_doc.size() == 4);
  std::size_t forward_sum = 0;
  for (std::size_t k = 0; k < 4; ++k) {
    // Each query token selects one row of its positive and one of its hardest negative.
    CHECK(cov.forward_per_doc[k] <= 2 * t.query_len * batch.size());
    forward_sum += cov.forward_per_doc[k];
    // The chain reaches every step up to the latest selected one.
    CHECK(cov.causal_per_doc[k] >= cov.causal_last_selected[k] + 1);
    CHECK(cov.causal_per_doc[k] <= m.n_d);
  }
  CHECK(forward_sum <= 2 * t.query_len * batch.size());
  CHECK(cov.forward_touched == doctest::Approx(static_cast<double>(forward_sum) / 4.0));
  CHECK_THROWS_AS(coverage_empirical(params, std::span(batch).first(1)), BatchError);
}

}  // TEST_SUITE
