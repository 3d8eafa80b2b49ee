#include "cemb/kernels.hpp"

#include <omp.h>

#include <cstdint>
#include <limits>

namespace cemb::kernels {

namespace {

constexpr std::size_t kParallelFlops = std::size_t{1} << 18;

int g_max_threads = 0;

int thread_count() { return g_max_threads > 0 ? g_max_threads : omp_get_max_threads(); }

inline void matmul_row(const double* a_row, const double* b, double* c_row, std::size_t k,
                       std::size_t n) {
  for (std::size_t p = 0; p < k; ++p) {
    const double av = a_row[p];
    const double* b_row = b + p * n;
    for (std::size_t j = 0; j < n; ++j) c_row[j] += av * b_row[j];
  }
}

inline void matmul_nt_row(const double* a_row, const double* b, double* c_row, std::size_t k,
                          std::size_t n) {
  for (std::size_t j = 0; j < n; ++j) {
    const double* b_row = b + j * k;
    double acc = 0.0;
    for (std::size_t p = 0; p < k; ++p) acc += a_row[p] * b_row[p];
    c_row[j] += acc;
  }
}

// One output row of a^T b: c[p, :] += sum_i a[i, p] * b[i, :]
inline void matmul_tn_row(const double* a, const double* b, double* c_row, std::size_t p,
                          std::size_t m, std::size_t k, std::size_t n) {
  for (std::size_t i = 0; i < m; ++i) {
    const double av = a[i * k + p];
    const double* b_row = b + i * n;
    for (std::size_t j = 0; j < n; ++j) c_row[j] += av * b_row[j];
  }
}

}  // namespace

double maxsim_total(MatrixView q, MatrixView d) {
  double total = 0.0;
  for (std::size_t i = 0; i < q.rows; ++i) {
    const double* qi = q.row(i);
    double best = -std::numeric_limits<double>::infinity();
    for (std::size_t j = 0; j < d.rows; ++j) {
      const double* dj = d.row(j);
      double dot = 0.0;
      for (std::size_t c = 0; c < q.cols; ++c) dot += qi[c] * dj[c];
      if (dot > best) best = dot;
    }
    total += best;
  }
  return total;
}

namespace serial {

void matmul_acc(const double* a, const double* b, double* c, std::size_t m, std::size_t k,
                std::size_t n) {
  for (std::size_t i = 0; i < m; ++i) matmul_row(a + i * k, b, c + i * n, k, n);
}

void matmul_nt_acc(const double* a, const double* b, double* c, std::size_t m, std::size_t k,
                   std::size_t n) {
  for (std::size_t i = 0; i < m; ++i) matmul_nt_row(a + i * k, b, c + i * n, k, n);
}

void matmul_tn_acc(const double* a, const double* b, double* c, std::size_t m, std::size_t k,
                   std::size_t n) {
  for (std::size_t p = 0; p < k; ++p) matmul_tn_row(a, b, c + p * n, p, m, k, n);
}

std::vector<double> score_corpus(std::span<const MatrixView> queries,
                                 std::span<const MatrixView> docs) {
  std::vector<double> out(queries.size() * docs.size());
  for (std::size_t qi = 0; qi < queries.size(); ++qi)
    for (std::size_t di = 0; di < docs.size(); ++di)
      out[qi * docs.size() + di] = maxsim_total(queries[qi], docs[di]);
  return out;
}

}  // namespace serial

namespace omp {

void matmul_acc(const double* a, const double* b, double* c, std::size_t m, std::size_t k,
                std::size_t n) {
  const auto rows = static_cast<std::int64_t>(m);
#pragma omp parallel for schedule(static) num_threads(thread_count())
  for (std::int64_t i = 0; i < rows; ++i) matmul_row(a + i * k, b, c + i * n, k, n);
}

void matmul_nt_acc(const double* a, const double* b, double* c, std::size_t m, std::size_t k,
                   std::size_t n) {
  const auto rows = static_cast<std::int64_t>(m);
#pragma omp parallel for schedule(static) num_threads(thread_count())
  for (std::int64_t i = 0; i < rows; ++i) matmul_nt_row(a + i * k, b, c + i * n, k, n);
}

void matmul_tn_acc(const double* a, const double* b, double* c, std::size_t m, std::size_t k,
                   std::size_t n) {
  const auto rows = static_cast<std::int64_t>(k);
#pragma omp parallel for schedule(static) num_threads(thread_count())
  for (std::int64_t p = 0; p < rows; ++p) matmul_tn_row(a, b, c + p * n, p, m, k, n);
}

std::vector<double> score_corpus(std::span<const MatrixView> queries,
                                 std::span<const MatrixView> docs) {
  std::vector<double> out(queries.size() * docs.size());
  const auto pairs = static_cast<std::int64_t>(out.size());
  const std::size_t nd = docs.size();
#pragma omp parallel for schedule(dynamic, 16) num_threads(thread_count())
  for (std::int64_t p = 0; p < pairs; ++p) {
    const auto qi = static_cast<std::size_t>(p) / nd;
    const auto di = static_cast<std::size_t>(p) % nd;
    out[static_cast<std::size_t>(p)] = maxsim_total(queries[qi], docs[di]);
  }
  return out;
}

}  // namespace omp

void matmul_acc(const double* a, const double* b, double* c, std::size_t m, std::size_t k,
                std::size_t n) {
  if (m > 1 && m * k * n >= kParallelFlops && thread_count() > 1)
    omp::matmul_acc(a, b, c, m, k, n);
  else
    serial::matmul_acc(a, b, c, m, k, n);
}

void matmul_nt_acc(const double* a, const double* b, double* c, std::size_t m, std::size_t k,
                   std::size_t n) {
  if (m > 1 && m * k * n >= kParallelFlops && thread_count() > 1)
    omp::matmul_nt_acc(a, b, c, m, k, n);
  else
    serial::matmul_nt_acc(a, b, c, m, k, n);
}

void matmul_tn_acc(const double* a, const double* b, double* c, std::size_t m, std::size_t k,
                   std::size_t n) {
  if (k > 1 && m * k * n >= kParallelFlops && thread_count() > 1)
    omp::matmul_tn_acc(a, b, c, m, k, n);
  else
    serial::matmul_tn_acc(a, b, c, m, k, n);
}

void set_max_threads(int n) {
  g_max_threads = n;
  if (n > 0) omp_set_num_threads(n);
}
int max_threads() { return thread_count(); }

}  // namespace cemb::kernels
