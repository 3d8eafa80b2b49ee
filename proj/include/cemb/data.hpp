#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "json.hpp"

#include "cemb/model.hpp"
#include "cemb/multivec.hpp"

namespace cemb {

struct SyntheticTaskConfig {
  std::size_t n_docs = 512;
  std::size_t doc_len = 96;
  std::size_t query_len = 8;
  std::size_t vocab_size = 256;
  std::size_t n_topics = 16;
  double topic_purity = 0.8;
  std::size_t queries_per_doc = 2;
  std::uint64_t seed = 0;
  // Fraction of queries held out from training (hash-assigned per query).
  double heldout_fraction = 0.25;

  void validate() const;
};

void to_json(nlohmann::json& j, const SyntheticTaskConfig& c);
void from_json(const nlohmann::json& j, SyntheticTaskConfig& c);

struct CorpusItem {
  std::uint64_t doc_id = 0;
  std::vector<TokenId> tokens;
  std::size_t topic = 0;
};

struct QueryItem {
  std::uint64_t query_id = 0;
  std::vector<TokenId> tokens;
  std::uint64_t relevant_doc = 0;
  bool heldout = false;
};

struct Corpus {
  SyntheticTaskConfig config;
  std::vector<CorpusItem> docs;
  std::vector<QueryItem> queries;

  std::vector<QueryItem> train_queries() const;
  std::vector<QueryItem> heldout_queries() const;
};

// Round-robin topics; each token comes from the topic's exclusive pool with
// probability topic_purity, else uniformly from the vocabulary. Queries copy
// query_len random positions (with replacement) of their document.
Corpus gen_corpus(const SyntheticTaskConfig& cfg);

nlohmann::json corpus_to_json(const Corpus& c);
Corpus corpus_from_json(const nlohmann::json& j);
void write_corpus(const std::filesystem::path& path, const Corpus& c);
Corpus read_corpus(const std::filesystem::path& path);

// Fraction of queries whose relevant document is the unique top scorer
// under a bag-of-words overlap count (distinct query tokens present).
double bow_oracle_top1(const Corpus& c);

// ---- embedding store ----------------------------------------------------
//
// Layout (little-endian):
//   magic     4 bytes "CEMB"
//   version   u32     1
//   d_emb     u32
//   count     u64
//   meta_len  u32, then meta_len bytes of UTF-8 JSON metadata
//   records   count x { doc_id u64, L u32, L*d_emb f32 values, row-major }

struct StoreRecord {
  std::uint64_t doc_id = 0;
  MultiVec vectors;
};

struct EmbeddingStore {
  std::uint32_t d_emb = 0;
  nlohmann::json metadata = nlohmann::json::object();
  std::vector<StoreRecord> records;
};

void write_store(const std::filesystem::path& path, const EmbeddingStore& store);
// Bad magic or version throws FormatError; truncation throws CorruptionError.
EmbeddingStore read_store(const std::filesystem::path& path);

// ---- run reports ---------------------------------------------------------

struct RunReport {
  std::string config_hash;
  std::string method;
  std::size_t budget = 0;
  double ndcg_at_5 = 0.0;
  double ndcg_at_10 = 0.0;
  double recall_at_5 = 0.0;
  double t_f_ms = 0.0;
  double t_a_ms = 0.0;
  std::size_t n_queries = 0;
  std::uint64_t seed = 0;
  std::string loss_log;  // path of the training loss curve, if any
  std::string label;     // free-form tag, e.g. an ablation variant
};

void to_json(nlohmann::json& j, const RunReport& r);
// Every field is required; a missing or mistyped one throws FormatError.
void from_json(const nlohmann::json& j, RunReport& r);

void write_report(const RunReport& report, const std::filesystem::path& path);
void write_reports(const std::vector<RunReport>& reports, const std::filesystem::path& path);
std::vector<RunReport> read_reports(const std::filesystem::path& path);

}  // namespace cemb
