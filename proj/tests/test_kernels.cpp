#include <random>

#include "doctest.h"

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

}  // namespace

TEST_SUITE("kernels") {

TEST_CASE("serial matmul variants agree with a naive triple loop") {
  const std::size_t m = 5, k = 7, n = 3;
  const auto a = random_values(m * k, 1), b = random_values(k * n, 2), bt = random_values(n * k, 3),
             at = random_values(m * k, 4), bm = random_values(m * n, 5);

  std::vector<double> c(m * n, 0.0), ref(m * n, 0.0);
  kernels::serial::matmul_acc(a.data(), b.data(), c.data(), m, k, n);
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j)
      for (std::size_t p = 0; p < k; ++p) ref[i * n + j] += a[i * k + p] * b[p * n + j];
  for (std::size_t i = 0; i < c.size(); ++i) CHECK(c[i] == doctest::Approx(ref[i]).epsilon(1e-14));

  std::vector<double> cnt(m * n, 0.0), refnt(m * n, 0.0);
  kernels::serial::matmul_nt_acc(a.data(), bt.data(), cnt.data(), m, k, n);
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j)
      for (std::size_t p = 0; p < k; ++p) refnt[i * n + j] += a[i * k + p] * bt[j * k + p];
  for (std::size_t i = 0; i < cnt.size(); ++i) CHECK(cnt[i] == doctest::Approx(refnt[i]).epsilon(1e-14));

  // a^T b with a [m, k] and b [m, n] gives [k, n]
  std::vector<double> ctn(k * n, 0.0), reftn(k * n, 0.0);
  kernels::serial::matmul_tn_acc(at.data(), bm.data(), ctn.data(), m, k, n);
  for (std::size_t p = 0; p < k; ++p)
    for (std::size_t j = 0; j < n; ++j)
      for (std::size_t i = 0; i < m; ++i) reftn[p * n + j] += at[i * k + p] * bm[i * n + j];
  for (std::size_t i = 0; i < ctn.size(); ++i) CHECK(ctn[i] == doctest::Approx(reftn[i]).epsilon(1e-14));
}

TEST_CASE("OpenMP kernels are bit-identical to the serial references") {
  kernels::set_max_threads(4);
  const std::size_t m = 65, k = 33, n = 47;
  const auto a = random_values(m * k, 6), b = random_values(k * n, 7), bt = random_values(n * k, 8),
             bm = random_values(m * n, 9);
  auto both = [&](auto serial_fn, auto omp_fn, const double* x, const double* y, std::size_t out) {
    std::vector<double> s(out, 0.5), p(out, 0.5);  // accumulate onto a nonzero start
    serial_fn(x, y, s.data(), m, k, n);
    omp_fn(x, y, p.data(), m, k, n);
    CHECK(s == p);
  };
  both(kernels::serial::matmul_acc, kernels::omp::matmul_acc, a.data(), b.data(), m * n);
  both(kernels::serial::matmul_nt_acc, kernels::omp::matmul_nt_acc, a.data(), bt.data(), m * n);
  both(kernels::serial::matmul_tn_acc, kernels::omp::matmul_tn_acc, a.data(), bm.data(), k * n);
  kernels::set_max_threads(0);
}

TEST_CASE("corpus scoring: OpenMP equals serial equals maxsim_total") {
  kernels::set_max_threads(3);
  std::vector<std::vector<double>> qs, ds;
  std::vector<kernels::MatrixView> qv, dv;
  for (std::size_t i = 0; i < 5; ++i) qs.push_back(random_values(4 * 6, 100 + i));
  for (std::size_t i = 0; i < 37; ++i) ds.push_back(random_values((3 + i % 5) * 6, 200 + i));
  for (auto& q : qs) qv.push_back({q.data(), 4, 6});
  for (std::size_t i = 0; i < ds.size(); ++i) dv.push_back({ds[i].data(), 3 + i % 5, 6});
  const auto s = kernels::serial::score_corpus(qv, dv);
  const auto p = kernels::omp::score_corpus(qv, dv);
  CHECK(s == p);
  for (std::size_t i = 0; i < qv.size(); ++i)
    for (std::size_t j = 0; j < dv.size(); ++j) CHECK(s[i * dv.size() + j] == kernels::maxsim_total(qv[i], dv[j]));
  kernels::set_max_threads(0);
}

TEST_CASE("thread cap is respected") {
  kernels::set_max_threads(2);
  CHECK(kernels::max_threads() == 2);
  kernels::set_max_threads(0);
  CHECK(kernels::max_threads() >= 1);
}

}  // TEST_SUITE
