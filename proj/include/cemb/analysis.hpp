#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "cemb/model.hpp"
#include "cemb/training.hpp"

namespace cemb {

// Sizes of the preceding-token coverage model: N_t query tokens against N_v
// visual tokens for the forward embedder, N_q generated query latents
// against N_v context plus N_d generated document latents for the causal one.
struct CoverageConfig {
  std::size_t n_t = 16;
  std::size_t n_v = 1024;
  std::size_t n_q = 16;
  std::size_t n_d = 32;
  std::size_t trials = 100000;
  std::uint64_t seed = 0;

  // n_v may be 0 (the degenerate forward case); everything else must be positive.
  void validate() const;
  std::string label() const;
};

struct ClosedForm {
  double forward = 0.0;
  double causal = 0.0;
  double ratio = 0.0;  // causal / forward; +inf when forward is 0
};

ClosedForm coverage_closed_form(const CoverageConfig& cfg);

struct MonteCarlo {
  double forward_mean = 0.0;
  double causal_mean = 0.0;
  double forward_stderr = 0.0;
  double causal_stderr = 0.0;
};

inline constexpr std::size_t kMonteCarloShards = 16;

// Per trial: forward sums j ~ U{0..N_v} over N_t query tokens; causal sums
// j - 1 with j ~ U{N_v+1..N_v+N_d} over N_q query latents. Trials are split
// into fixed shards with derived seeds and reduced in shard order, so the
// serial and parallel paths agree bit for bit. Requires trials >= 1000.
MonteCarlo coverage_monte_carlo(const CoverageConfig& cfg, bool parallel = true);

struct CoverageCheck {
  CoverageConfig config;
  ClosedForm analytic;
  MonteCarlo simulated;
  bool forward_ok = false;
  bool causal_ok = false;
  bool pass() const { return forward_ok && causal_ok; }
};

// Monte Carlo means within `sigmas` standard errors of the closed forms.
CoverageCheck check_coverage(const CoverageConfig& cfg, double sigmas = 3.0);

// Columns: config,quantity,analytic,simulated,stderr,pass
void write_coverage_csv(const std::filesystem::path& path, std::span<const CoverageCheck> checks);

struct EmpiricalCoverage {
  double forward_touched = 0.0;  // mean document rows with nonzero dL_m/drow, per document
  double causal_touched = 0.0;   // mean generation steps with nonzero hidden-state gradient, per document
  double ratio = 0.0;
  std::vector<std::size_t> forward_per_doc;
  std::vector<std::size_t> causal_per_doc;
  std::vector<std::size_t> causal_last_selected;  // highest document row chosen by any query latent
};

inline constexpr double kNonzeroGradient = 1e-12;

// Gradient reach of L_m on one batch. Forward: detached forward_embed rows
// as leaves, scored against forward-embedded queries. Causal: generated
// latents with trainable parameters, counting steps whose last-position
// hidden state receives gradient.
EmpiricalCoverage coverage_empirical(const ModelParams& params, std::span<const TrainPair> batch,
                                     double temperature = 1.0);

void write_empirical_csv(const std::filesystem::path& path, const EmpiricalCoverage& cov);

}  // namespace cemb
