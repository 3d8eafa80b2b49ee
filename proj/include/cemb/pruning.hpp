#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "cemb/multivec.hpp"

namespace cemb {

enum class PruneMethod { random, kmeans, hierarchical, pool1d };

const char* to_string(PruneMethod m);
PruneMethod parse_prune_method(const std::string& s);

struct PruneSpec {
  PruneMethod method = PruneMethod::pool1d;
  std::size_t budget = 1;
  std::uint64_t seed = 0;
  std::size_t kmeans_max_iter = 100;
  double kmeans_tol = 1e-6;
};

// True when the budget is at least the input length, so prune() returns
// the input unchanged. Callers use it to warn.
bool is_identity_prune(const MultiVec& mv, const PruneSpec& spec);

// Compresses mv to min(budget, L) unit rows. Cluster and window
// representatives are means re-normalized to unit length.
MultiVec prune(const MultiVec& mv, const PruneSpec& spec);

struct TimedPrune {
  MultiVec vectors;
  double t_a_ms = 0.0;
};
TimedPrune prune_timed(const MultiVec& mv, const PruneSpec& spec);

// Per-document seed: splitmix64 of the global seed mixed with the id.
std::uint64_t derive_seed(std::uint64_t global_seed, std::uint64_t id);

// Prunes every document in parallel, seeding each with derive_seed(spec.seed, i).
std::vector<MultiVec> prune_all(std::span<const MultiVec> docs, const PruneSpec& spec);

struct KMeansResult {
  Tensor centroids;                     // [k, D], not normalized
  std::vector<std::size_t> assignment;  // per point
  std::vector<double> objective;        // SSE after each assignment step
  std::size_t iterations = 0;
};

// k-means++ seeding followed by Lloyd iterations until the largest
// centroid shift drops below tol or max_iter is reached. Empty clusters keep
// their previous centroid.
KMeansResult kmeans(const Tensor& points, std::size_t k, std::uint64_t seed, std::size_t max_iter = 100,
                    double tol = 1e-6);

// Agglomerative Ward clustering cut at k clusters via the nearest-neighbor
// chain. Labels are 0..k-1, numbered by each cluster's smallest member.
std::vector<std::size_t> ward_labels(const Tensor& points, std::size_t k);

namespace reference {
// O(n^3) greedy Ward merging, for testing ward_labels.
std::vector<std::size_t> ward_labels_naive(const Tensor& points, std::size_t k);
}  // namespace reference

}  // namespace cemb
