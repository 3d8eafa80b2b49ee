#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "json.hpp"

#include "cemb/data.hpp"
#include "cemb/losses.hpp"
#include "cemb/model.hpp"

namespace cemb {

struct TrainConfig {
  std::size_t batch_size = 8;
  std::size_t epochs = 1;
  double learning_rate = 1e-3;
  std::size_t warmup_steps = 50;  // linear ramp from lr/warmup to lr; 0 disables
  LossWeights weights;
  std::uint64_t seed = 0;
  std::size_t eval_every = 0;  // 0: evaluate once, at the end
  std::size_t eval_batches = 4;
  std::string checkpoint_path;
  double max_grad_norm = 0.0;  // 0 disables clipping
  double beta1 = 0.9;
  double beta2 = 0.99;
  double adam_eps = 1e-8;

  void validate() const;
};

void to_json(nlohmann::json& j, const TrainConfig& c);
void from_json(const nlohmann::json& j, TrainConfig& c);

struct TrainPair {
  const QueryItem* query = nullptr;
  const CorpusItem* doc = nullptr;
};

struct AdamState {
  std::vector<double> m, v;
  std::uint64_t t = 0;
};

struct TrainState {
  ModelParams params;
  AdamState adam;
  std::uint64_t step = 0;
  LossBreakdown last;
};

TrainState init_train_state(const ModelConfig& model, std::uint64_t seed);

struct StepResult {
  LossBreakdown losses;
  BatchScores scores;
  double grad_norm = 0.0;
  double latent_input_grad_norm = 0.0;
};

// One Adam update on the combined objective over a batch of aligned pairs.
// A non-finite loss throws NumericError naming the batch.
StepResult train_step(TrainState& state, std::span<const TrainPair> batch, const TrainConfig& cfg);

// Loss of a batch under fixed parameters (no update).
LossBreakdown batch_loss(const ModelParams& params, std::span<const TrainPair> batch, const LossWeights& weights);

// Objective as a function of graph-bound parameters, for finite-difference
// checks of a full training step.
Var step_objective(Graph& g, const BoundParams& p, std::span<const TrainPair> batch, const LossWeights& weights);

// Batches of query indices for one epoch: a permutation seeded by
// (seed, epoch), packed greedily so no document appears twice in a batch.
// Conflicting pairs are deferred to later batches; a trailing batch smaller
// than 2 is dropped.
std::vector<std::vector<std::size_t>> epoch_batches(std::span<const QueryItem> queries, std::size_t batch_size,
                                                    std::uint64_t seed, std::uint64_t epoch);

void save_train_state(const std::filesystem::path& path, const TrainState& state, const TrainConfig& cfg);
TrainState load_train_state(const std::filesystem::path& path);

struct LogEntry {
  std::string kind;  // "train" or "eval"
  std::uint64_t step = 0;
  std::size_t epoch = 0;
  LossBreakdown losses;
  double grad_norm = 0.0;
  std::optional<double> ndcg_at_5;
};

nlohmann::json to_json_line(const LogEntry& e);

struct TrainOptions {
  std::filesystem::path log_path;  // JSON-lines; empty disables
  std::optional<TrainState> resume;
  std::optional<std::uint64_t> stop_at_step;  // for mid-epoch checkpoints
  // Called at every evaluation point; returns held-out nDCG@5.
  std::function<double(const ModelParams&)> eval_ndcg;
  std::function<void(const LogEntry&)> on_log;
};

struct TrainResult {
  TrainState state;
  std::vector<LogEntry> log;
  double initial_loss = 0.0;  // mean total over the first smoothing window
  double final_loss = 0.0;    // mean total over the last smoothing window
  std::size_t steps_per_epoch = 0;
};

inline constexpr std::size_t kSmoothingWindow = 10;

TrainResult train(const TrainConfig& cfg, const ModelConfig& model, const Corpus& corpus,
                  const TrainOptions& options = {});

}  // namespace cemb
