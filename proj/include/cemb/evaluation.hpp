#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "cemb/data.hpp"
#include "cemb/model.hpp"
#include "cemb/multivec.hpp"
#include "cemb/pruning.hpp"
#include "cemb/training.hpp"

namespace cemb {

enum class Method { causal, forward_full, random, kmeans, hierarchical, pool1d };

const char* to_string(Method m);
Method parse_method(const std::string& s);
bool is_pruning(Method m);
PruneMethod prune_method(Method m);

// Binary relevance with a single relevant document: 1/log2(rank + 1) when
// the relevant id sits at rank <= k, else 0. Duplicate ids throw RankingError.
double ndcg_at_k(std::span<const std::uint64_t> ranked, std::uint64_t relevant, std::size_t k);
double recall_at_k(std::span<const std::uint64_t> ranked, std::uint64_t relevant, std::size_t k);

struct Metrics {
  double ndcg_at_5 = 0.0;
  double ndcg_at_10 = 0.0;
  double recall_at_5 = 0.0;
  std::size_t n_queries = 0;
  std::vector<double> per_query_ndcg5;
};

// Ranks every document for every query by late-interaction score (ties by
// lower doc id) and averages the metrics. doc_ids[i] labels docs[i].
Metrics score_rankings(std::span<const MultiVec> queries, std::span<const std::uint64_t> relevant,
                       std::span<const MultiVec> docs, std::span<const std::uint64_t> doc_ids);

struct EmbeddedDocs {
  std::vector<MultiVec> docs;
  std::vector<double> t_f_ms;
  std::vector<double> t_a_ms;
};

// Causal: generate_latents(budget); forward_full: forward_embed; pruning
// methods: forward_embed then prune with per-document seeds.
EmbeddedDocs embed_documents(const ModelParams& params, std::span<const CorpusItem> docs, Method method,
                             std::size_t budget, std::uint64_t seed);
// Causal queries are generated with n_q latents; every other method embeds
// queries token by token with forward_embed.
std::vector<MultiVec> embed_queries(const ModelParams& params, std::span<const QueryItem> queries, Method method);

double median(std::vector<double> v);

struct EvalRequest {
  Method method = Method::causal;
  std::size_t budget = 0;  // 0: n_d for causal, doc_len for forward_full
  std::uint64_t seed = 0;
  std::string config_hash;
};

RunReport evaluate(const ModelParams& params, const Corpus& corpus, std::span<const QueryItem> queries,
                   const EvalRequest& request);

// Scores precomputed document embeddings (for example a store read back
// from disk) against the model's query embeddings.
RunReport evaluate_embedded(const ModelParams& params, std::span<const QueryItem> queries,
                            std::span<const MultiVec> docs, std::span<const std::uint64_t> doc_ids,
                            const EvalRequest& request);

// Causal method at every budget, reusing one generation pass truncated to
// each prefix. Budgets must be ascending and <= n_d (CapacityError).
std::vector<RunReport> scaling_sweep(const ModelParams& params, const Corpus& corpus,
                                     std::span<const QueryItem> queries, std::span<const std::size_t> budgets,
                                     std::uint64_t seed = 0, const std::string& config_hash = {});

// Spearman rank correlation with average ranks for ties.
double spearman(std::span<const double> x, std::span<const double> y);

struct AblationVariant {
  std::string name;
  LossWeights weights;
};

// Full model, w/o L_d, w/o L_q, w/o L_m, w/ ReLU(dS) derived from `base`.
std::vector<AblationVariant> default_ablation_variants(const LossWeights& base);

struct AblationRow {
  std::string variant;
  RunReport report;
  double delta = 0.0;  // (variant - full) / full, nDCG@5
};

// Trains each variant from the same seed and corpus and evaluates the
// causal method at n_d on the held-out queries. The first variant is the
// reference for deltas.
std::vector<AblationRow> ablation_run(const Corpus& corpus, const ModelConfig& model, const TrainConfig& train,
                                      std::span<const AblationVariant> variants);

struct LatencyRow {
  std::string method;
  std::size_t budget = 0;
  double t_f_ms = 0.0;
  double t_a_ms = 0.0;
  double total_ms = 0.0;
};

// Median per-document T_f and T_a over `runs` passes on `docs`, with the
// forward pass shared across the pruning methods.
std::vector<LatencyRow> latency_harness(const ModelParams& params, std::span<const CorpusItem> docs,
                                        std::span<const Method> methods, std::size_t budget, std::size_t runs);

// Adaptation time only: median prune time of each method on one
// multi-vector over `runs` repetitions.
std::vector<LatencyRow> adaptation_latency(const MultiVec& mv, std::span<const PruneMethod> methods,
                                           std::size_t budget, std::size_t runs, std::uint64_t seed = 0);

// CSV with the fixed column order method,budget,ndcg5,ndcg10,recall5,tf_ms,ta_ms.
void write_reports_csv(const std::filesystem::path& path, std::span<const RunReport> reports);
void write_ablation_csv(const std::filesystem::path& path, std::span<const AblationRow> rows);
void write_latency_csv(const std::filesystem::path& path, std::span<const LatencyRow> rows);

}  // namespace cemb
