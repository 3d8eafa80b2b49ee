#pragma once

#include <cstddef>
#include <filesystem>
#include <optional>
#include <vector>

#include "cemb/autodiff.hpp"
#include "cemb/multivec.hpp"

namespace cemb {

struct ScoreDetail {
  double total = 0.0;
  std::vector<double> per_query_max;
  std::vector<std::size_t> argmax_index;  // best document row for each query row
  std::optional<Tensor> sim_matrix;       // [N_q, N_d] when requested
};

// Late-interaction score: sum over query rows of the best dot product with
// any document row. Ties resolve to the lowest document row.
ScoreDetail maxsim(const MultiVec& q, const MultiVec& d, bool keep_matrix = false);

// Entry k-1 is the score against the first k document rows, computed in
// one pass with a running per-query maximum.
std::vector<double> prefix_scores(const MultiVec& q, const MultiVec& d);

struct Heatmaps {
  Tensor qq;  // [N_q, N_q]
  Tensor dd;  // [N_d, N_d]
  Tensor qd;  // [N_q, N_d]
};

// Cosine self- and cross-similarity (rows are unit norm, so dot products).
Heatmaps similarity_heatmaps(const MultiVec& q, const MultiVec& d);

void write_matrix_csv(const std::filesystem::path& path, const Tensor& m);
// Writes qq.csv, dd.csv and qd.csv into `dir`.
void write_heatmaps(const std::filesystem::path& dir, const Heatmaps& h);

// Differentiable score on a graph; gradient flows through the selected
// document row of each query row only.
Var maxsim(Var q, Var d);

}  // namespace cemb
