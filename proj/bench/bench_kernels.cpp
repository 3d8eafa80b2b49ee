// Serial references vs OpenMP kernels.

#include <benchmark/benchmark.h>

#include <random>
#include <vector>

#include "cemb/analysis.hpp"
#include "cemb/kernels.hpp"

using namespace cemb;

namespace {

std::vector<double> random_values(std::size_t n, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> nd(0.0, 1.0);
  std::vector<double> v(n);
  for (double& x : v) x = nd(rng);
  return v;
}

template <auto Kernel>
void BM_matmul(benchmark::State& state) {
  const auto n = static_cast<std::size_t>(state.range(0));
  const auto a = random_values(n * n, 1), b = random_values(n * n, 2);
  std::vector<double> c(n * n);
  for (auto _ : state) {
    std::fill(c.begin(), c.end(), 0.0);
    Kernel(a.data(), b.data(), c.data(), n, n, n);
    benchmark::DoNotOptimize(c.data());
  }
  state.SetItemsProcessed(state.iterations() * static_cast<std::int64_t>(n * n * n));
}

struct ScoringFixture {
  std::vector<std::vector<double>> q, d;
  std::vector<kernels::MatrixView> qv, dv;
  ScoringFixture(std::size_t n_queries, std::size_t n_docs) {
    for (std::size_t i = 0; i < n_queries; ++i) q.push_back(random_values(16 * 16, 10 + i));
    for (std::size_t i = 0; i < n_docs; ++i) d.push_back(random_values(32 * 16, 1000 + i));
    for (auto& x : q) qv.push_back({x.data(), 16, 16});
    for (auto& x : d) dv.push_back({x.data(), 32, 16});
  }
};

template <bool Parallel>
void BM_score_corpus(benchmark::State& state) {
  ScoringFixture f(64, static_cast<std::size_t>(state.range(0)));
  for (auto _ : state) {
    auto s = Parallel ? kernels::omp::score_corpus(f.qv, f.dv) : kernels::serial::score_corpus(f.qv, f.dv);
    benchmark::DoNotOptimize(s.data());
  }
}

template <bool Parallel>
void BM_monte_carlo(benchmark::State& state) {
  CoverageConfig cfg;
  cfg.trials = static_cast<std::size_t>(state.range(0));
  for (auto _ : state) benchmark::DoNotOptimize(coverage_monte_carlo(cfg, Parallel));
}

}  // namespace

BENCHMARK(BM_matmul<kernels::serial::matmul_acc>)->Name("matmul/serial")->Arg(64)->Arg(256);
BENCHMARK(BM_matmul<kernels::omp::matmul_acc>)->Name("matmul/omp")->Arg(64)->Arg(256);
BENCHMARK(BM_score_corpus<false>)->Name("score_corpus/serial")->Arg(512);
BENCHMARK(BM_score_corpus<true>)->Name("score_corpus/omp")->Arg(512);
BENCHMARK(BM_monte_carlo<false>)->Name("monte_carlo/serial")->Arg(100000);
BENCHMARK(BM_monte_carlo<true>)->Name("monte_carlo/omp")->Arg(100000);

BENCHMARK_MAIN();
