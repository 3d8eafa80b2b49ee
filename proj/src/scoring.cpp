#include "cemb/scoring.hpp"

#include <cstdio>
#include <limits>
#include <string>

#include "cemb/error.hpp"
#include "cemb/io.hpp"

namespace cemb {

namespace {

void check_pair(const MultiVec& q, const MultiVec& d) {
  if (q.empty() || d.empty()) throw DimensionError("maxsim needs at least one query and one document row");
  if (q.dim() != d.dim())
    throw DimensionError("embedding width mismatch: query " + std::to_string(q.dim()) + " vs document " +
                         std::to_string(d.dim()));
}

double dot(std::span<const double> a, std::span<const double> b) {
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
  return s;
}

Tensor gram(const MultiVec& a, const MultiVec& b) {
  Tensor m = Tensor::matrix(a.length(), b.length());
  for (std::size_t i = 0; i < a.length(); ++i)
    for (std::size_t j = 0; j < b.length(); ++j) m(i, j) = dot(a.row(i), b.row(j));
  return m;
}

}  // namespace

ScoreDetail maxsim(const MultiVec& q, const MultiVec& d, bool keep_matrix) {
  check_pair(q, d);
  ScoreDetail out;
  out.per_query_max.resize(q.length());
  out.argmax_index.resize(q.length());
  Tensor sim;
  if (keep_matrix) sim = Tensor::matrix(q.length(), d.length());
  for (std::size_t i = 0; i < q.length(); ++i) {
    double best = -std::numeric_limits<double>::infinity();
    std::size_t arg = 0;
    for (std::size_t j = 0; j < d.length(); ++j) {
      const double s = dot(q.row(i), d.row(j));
      if (keep_matrix) sim(i, j) = s;
      if (s > best) {
        best = s;
        arg = j;
      }
    }
    out.per_query_max[i] = best;
    out.argmax_index[i] = arg;
  }
  for (double m : out.per_query_max) out.total += m;
  if (keep_matrix) out.sim_matrix = std::move(sim);
  return out;
}

std::vector<double> prefix_scores(const MultiVec& q, const MultiVec& d) {
  check_pair(q, d);
  std::vector<double> running(q.length(), -std::numeric_limits<double>::infinity());
  std::vector<double> out(d.length());
  for (std::size_t j = 0; j < d.length(); ++j) {
    for (std::size_t i = 0; i < q.length(); ++i) {
      const double s = dot(q.row(i), d.row(j));
      if (s > running[i]) running[i] = s;
    }
    double total = 0.0;
    for (double m : running) total += m;
    out[j] = total;
  }
  return out;
}

Heatmaps similarity_heatmaps(const MultiVec& q, const MultiVec& d) {
  check_pair(q, d);
  return {gram(q, q), gram(d, d), gram(q, d)};
}

void write_matrix_csv(const std::filesystem::path& path, const Tensor& m) {
  std::string text;
  char buf[32];
  for (std::size_t i = 0; i < m.rows(); ++i) {
    for (std::size_t j = 0; j < m.cols(); ++j) {
      std::snprintf(buf, sizeof buf, "%.17g", m(i, j));
      if (j) text += ',';
      text += buf;
    }
    text += '\n';
  }
  io::write_text(path, text);
}

void write_heatmaps(const std::filesystem::path& dir, const Heatmaps& h) {
  write_matrix_csv(dir / "qq.csv", h.qq);
  write_matrix_csv(dir / "dd.csv", h.dd);
  write_matrix_csv(dir / "qd.csv", h.qd);
}

Var maxsim(Var q, Var d) {
  if (q.cols() != d.cols()) throw DimensionError("maxsim width mismatch");
  return sum(row_max(matmul(q, transpose(d))).values);
}

}  // namespace cemb
