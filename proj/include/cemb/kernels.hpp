#pragma once

#include <cstddef>
#include <span>
#include <vector>

// Dense inner loops. Each kernel has a serial reference and an OpenMP
// version; the two produce bit-identical results because every output
// element is accumulated in the same order by exactly one thread.
namespace cemb::kernels {

struct MatrixView {
  const double* data = nullptr;
  std::size_t rows = 0;
  std::size_t cols = 0;
  const double* row(std::size_t r) const { return data + r * cols; }
};

namespace serial {

// c[M,N] += a[M,K] * b[K,N]
void matmul_acc(const double* a, const double* b, double* c, std::size_t m, std::size_t k,
                std::size_t n);
// c[M,N] += a[M,K] * b[N,K]^T
void matmul_nt_acc(const double* a, const double* b, double* c, std::size_t m, std::size_t k,
                   std::size_t n);
// c[K,N] += a[M,K]^T * b[M,N]
void matmul_tn_acc(const double* a, const double* b, double* c, std::size_t m, std::size_t k,
                   std::size_t n);

// Late-interaction score for every (query, document) pair, row-major
// [queries.size(), docs.size()].
std::vector<double> score_corpus(std::span<const MatrixView> queries,
                                 std::span<const MatrixView> docs);

}  // namespace serial

namespace omp {

void matmul_acc(const double* a, const double* b, double* c, std::size_t m, std::size_t k,
                std::size_t n);
void matmul_nt_acc(const double* a, const double* b, double* c, std::size_t m, std::size_t k,
                   std::size_t n);
void matmul_tn_acc(const double* a, const double* b, double* c, std::size_t m, std::size_t k,
                   std::size_t n);
std::vector<double> score_corpus(std::span<const MatrixView> queries,
                                 std::span<const MatrixView> docs);

}  // namespace omp

// Sum over query rows of the best dot product against any document row.
double maxsim_total(MatrixView q, MatrixView d);

// Dispatchers: small products stay serial, large ones go to OpenMP.
void matmul_acc(const double* a, const double* b, double* c, std::size_t m, std::size_t k,
                std::size_t n);
void matmul_nt_acc(const double* a, const double* b, double* c, std::size_t m, std::size_t k,
                   std::size_t n);
void matmul_tn_acc(const double* a, const double* b, double* c, std::size_t m, std::size_t k,
                   std::size_t n);

// Caps the OpenMP worker count used by the parallel kernels and by the
// other OpenMP loops of the library (0 = runtime default).
void set_max_threads(int n);
int max_threads();

}  // namespace cemb::kernels
