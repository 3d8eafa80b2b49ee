#include "cemb/data.hpp"

#include <cmath>
#include <random>

#include "cemb/error.hpp"
#include "cemb/io.hpp"

namespace cemb {

void SyntheticTaskConfig::validate() const {
  if (n_docs == 0 || doc_len == 0 || query_len == 0 || vocab_size == 0 || n_topics == 0 || queries_per_doc == 0)
    throw ConfigError("corpus sizes must be positive");
  if (n_topics > vocab_size / 4)
    throw ConfigError("n_topics " + std::to_string(n_topics) + " exceeds vocab_size/4 = " +
                      std::to_string(vocab_size / 4) + " (each topic needs >= 4 exclusive tokens)");
  if (!(topic_purity > 0.0 && topic_purity <= 1.0)) throw ConfigError("topic_purity must lie in (0, 1]");
  if (!(heldout_fraction >= 0.0 && heldout_fraction < 1.0)) throw ConfigError("heldout_fraction must lie in [0, 1)");
}

void to_json(nlohmann::json& j, const SyntheticTaskConfig& c) {
  j = {{"n_docs", c.n_docs},
       {"doc_len", c.doc_len},
       {"query_len", c.query_len},
       {"vocab_size", c.vocab_size},
       {"n_topics", c.n_topics},
       {"topic_purity", c.topic_purity},
       {"queries_per_doc", c.queries_per_doc},
       {"seed", c.seed},
       {"heldout_fraction", c.heldout_fraction}};
}

void from_json(const nlohmann::json& j, SyntheticTaskConfig& c) {
  io::reject_unknown_keys(j,
                          {"n_docs", "doc_len", "query_len", "vocab_size", "n_topics", "topic_purity",
                           "queries_per_doc", "seed", "heldout_fraction"},
                          "data config");
  auto get = [&](const char* key, auto& field) {
    if (j.contains(key)) j.at(key).get_to(field);
  };
  get("n_docs", c.n_docs);
  get("doc_len", c.doc_len);
  get("query_len", c.query_len);
  get("vocab_size", c.vocab_size);
  get("n_topics", c.n_topics);
  get("topic_purity", c.topic_purity);
  get("queries_per_doc", c.queries_per_doc);
  get("seed", c.seed);
  get("heldout_fraction", c.heldout_fraction);
  c.validate();
}

namespace {

std::uint64_t mix(std::uint64_t z) {
  z += 0x9e3779b97f4a7c15ULL;
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

bool is_heldout(std::uint64_t seed, std::uint64_t query_id, double fraction) {
  const std::uint64_t h = mix(mix(seed ^ 0x5eed0f00ULL) ^ query_id);
  return static_cast<double>(h >> 11) * 0x1.0p-53 < fraction;
}

}  // namespace

std::vector<QueryItem> Corpus::train_queries() const {
  std::vector<QueryItem> out;
  for (const auto& q : queries)
    if (!q.heldout) out.push_back(q);
  return out;
}

std::vector<QueryItem> Corpus::heldout_queries() const {
  std::vector<QueryItem> out;
  for (const auto& q : queries)
    if (q.heldout) out.push_back(q);
  return out;
}

Corpus gen_corpus(const SyntheticTaskConfig& cfg) {
  cfg.validate();
  Corpus c;
  c.config = cfg;
  std::mt19937_64 rng(cfg.seed);
  std::uniform_real_distribution<double> coin(0.0, 1.0);
  std::uniform_int_distribution<std::size_t> any_token(0, cfg.vocab_size - 1);
  const std::size_t pool = cfg.vocab_size / cfg.n_topics;
  std::uniform_int_distribution<std::size_t> pool_token(0, pool - 1);

  c.docs.resize(cfg.n_docs);
  for (std::size_t d = 0; d < cfg.n_docs; ++d) {
    auto& doc = c.docs[d];
    doc.doc_id = d;
    doc.topic = d % cfg.n_topics;
    doc.tokens.resize(cfg.doc_len);
    for (auto& t : doc.tokens) {
      const bool on_topic = coin(rng) < cfg.topic_purity;
      t = static_cast<TokenId>(on_topic ? doc.topic * pool + pool_token(rng) : any_token(rng));
    }
  }

  std::uniform_int_distribution<std::size_t> position(0, cfg.doc_len - 1);
  for (std::size_t d = 0; d < cfg.n_docs; ++d) {
    for (std::size_t r = 0; r < cfg.queries_per_doc; ++r) {
      QueryItem q;
      q.query_id = d * cfg.queries_per_doc + r;
      q.relevant_doc = d;
      q.tokens.resize(cfg.query_len);
      for (auto& t : q.tokens) t = c.docs[d].tokens[position(rng)];
      q.heldout = is_heldout(cfg.seed, q.query_id, cfg.heldout_fraction);
      c.queries.push_back(std::move(q));
    }
  }
  return c;
}

nlohmann::json corpus_to_json(const Corpus& c) {
  nlohmann::json docs = nlohmann::json::array(), queries = nlohmann::json::array();
  for (const auto& d : c.docs) docs.push_back({{"doc_id", d.doc_id}, {"topic", d.topic}, {"tokens", d.tokens}});
  for (const auto& q : c.queries)
    queries.push_back(
        {{"query_id", q.query_id}, {"relevant_doc", q.relevant_doc}, {"heldout", q.heldout}, {"tokens", q.tokens}});
  return {{"config", c.config}, {"docs", std::move(docs)}, {"queries", std::move(queries)}};
}

Corpus corpus_from_json(const nlohmann::json& j) {
  Corpus c;
  try {
    c.config = j.at("config").get<SyntheticTaskConfig>();
    for (const auto& d : j.at("docs")) {
      CorpusItem item;
      item.doc_id = d.at("doc_id").get<std::uint64_t>();
      item.topic = d.at("topic").get<std::size_t>();
      item.tokens = d.at("tokens").get<std::vector<TokenId>>();
      c.docs.push_back(std::move(item));
    }
    for (const auto& q : j.at("queries")) {
      QueryItem item;
      item.query_id = q.at("query_id").get<std::uint64_t>();
      item.relevant_doc = q.at("relevant_doc").get<std::uint64_t>();
      item.heldout = q.at("heldout").get<bool>();
      item.tokens = q.at("tokens").get<std::vector<TokenId>>();
      c.queries.push_back(std::move(item));
    }
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("malformed corpus: ") + e.what());
  }
  for (std::size_t i = 0; i < c.docs.size(); ++i)
    if (c.docs[i].doc_id != i) throw FormatError("corpus doc_id values must be 0..n-1 in order");
  for (const auto& q : c.queries)
    if (q.relevant_doc >= c.docs.size()) throw FormatError("query references a missing document");
  return c;
}

void write_corpus(const std::filesystem::path& path, const Corpus& c) {
  io::write_text(path, corpus_to_json(c).dump() + "\n");
}

Corpus read_corpus(const std::filesystem::path& path) { return corpus_from_json(io::read_json(path)); }

double bow_oracle_top1(const Corpus& c) {
  if (c.queries.empty()) return 0.0;
  const std::size_t V = c.config.vocab_size;
  std::vector<std::vector<char>> present(c.docs.size(), std::vector<char>(V, 0));
  for (std::size_t d = 0; d < c.docs.size(); ++d)
    for (TokenId t : c.docs[d].tokens) present[d][t] = 1;
  std::size_t hits = 0;
  for (const auto& q : c.queries) {
    std::vector<std::size_t> score(c.docs.size(), 0);
    for (std::size_t d = 0; d < c.docs.size(); ++d)
      for (TokenId t : q.tokens) score[d] += present[d][t];
    const std::size_t mine = score[q.relevant_doc];
    bool unique_top = true;
    for (std::size_t d = 0; d < c.docs.size() && unique_top; ++d)
      if (d != q.relevant_doc && score[d] >= mine) unique_top = false;
    hits += unique_top;
  }
  return static_cast<double>(hits) / static_cast<double>(c.queries.size());
}

// ---- embedding store ----------------------------------------------------

namespace {
constexpr char kStoreMagic[] = "CEMB";
constexpr std::uint32_t kStoreVersion = 1;
}  // namespace

void write_store(const std::filesystem::path& path, const EmbeddingStore& store) {
  io::ByteWriter w;
  w.bytes(std::string_view(kStoreMagic, 4));
  w.u32(kStoreVersion);
  w.u32(store.d_emb);
  w.u64(store.records.size());
  const std::string meta = store.metadata.dump();
  w.u32(static_cast<std::uint32_t>(meta.size()));
  w.bytes(meta);
  for (const auto& r : store.records) {
    if (r.vectors.dim() != store.d_emb)
      throw DimensionError("record " + std::to_string(r.doc_id) + " has width " + std::to_string(r.vectors.dim()) +
                           ", store expects " + std::to_string(store.d_emb));
    w.u64(r.doc_id);
    w.u32(static_cast<std::uint32_t>(r.vectors.length()));
    for (double v : r.vectors.tensor().values()) w.f32(static_cast<float>(v));
  }
  io::write_file(path, w.buffer());
}

EmbeddingStore read_store(const std::filesystem::path& path) {
  const auto bytes = io::read_file(path);
  io::ByteReader r(bytes);
  if (bytes.size() < 4 || r.bytes(4) != std::string_view(kStoreMagic, 4))
    throw FormatError(path.string() + ": not an embedding store (bad magic)");
  const std::uint32_t version = r.u32();
  if (version != kStoreVersion) throw FormatError(path.string() + ": unsupported store version " + std::to_string(version));
  EmbeddingStore store;
  store.d_emb = r.u32();
  const std::uint64_t count = r.u64();
  const std::uint32_t meta_len = r.u32();
  const std::string meta = r.bytes(meta_len);
  try {
    store.metadata = nlohmann::json::parse(meta);
  } catch (const nlohmann::json::parse_error& e) {
    throw CorruptionError(path.string() + ": store metadata is not valid JSON");
  }
  if (count > 0 && store.d_emb == 0) throw CorruptionError(path.string() + ": zero embedding width");
  for (std::uint64_t i = 0; i < count; ++i) {
    StoreRecord rec;
    rec.doc_id = r.u64();
    const std::uint32_t L = r.u32();
    if (L == 0) throw CorruptionError(path.string() + ": record with zero rows");
    if (r.remaining() / 4 / store.d_emb < L) throw CorruptionError(path.string() + ": truncated record data");
    Tensor t = Tensor::matrix(L, store.d_emb);
    for (double& v : t.values()) v = static_cast<double>(r.f32());
    rec.vectors = MultiVec(std::move(t), 1e-5);
    store.records.push_back(std::move(rec));
  }
  if (r.remaining() != 0) throw CorruptionError(path.string() + ": trailing bytes after declared records");
  return store;
}

// ---- run reports ---------------------------------------------------------

void to_json(nlohmann::json& j, const RunReport& r) {
  j = {{"config_hash", r.config_hash}, {"method", r.method},         {"budget", r.budget},
       {"ndcg_at_5", r.ndcg_at_5},     {"ndcg_at_10", r.ndcg_at_10}, {"recall_at_5", r.recall_at_5},
       {"t_f_ms", r.t_f_ms},           {"t_a_ms", r.t_a_ms},         {"n_queries", r.n_queries},
       {"seed", r.seed},               {"loss_log", r.loss_log},     {"label", r.label}};
}

void from_json(const nlohmann::json& j, RunReport& r) {
  if (!j.is_object()) throw FormatError("run report must be a JSON object");
  auto field = [&](const char* key) -> const nlohmann::json& {
    if (!j.contains(key)) throw FormatError(std::string("run report is missing field '") + key + "'");
    return j.at(key);
  };
  try {
    r.config_hash = field("config_hash").get<std::string>();
    r.method = field("method").get<std::string>();
    r.budget = field("budget").get<std::size_t>();
    r.ndcg_at_5 = field("ndcg_at_5").get<double>();
    r.ndcg_at_10 = field("ndcg_at_10").get<double>();
    r.recall_at_5 = field("recall_at_5").get<double>();
    r.t_f_ms = field("t_f_ms").get<double>();
    r.t_a_ms = field("t_a_ms").get<double>();
    r.n_queries = field("n_queries").get<std::size_t>();
    r.seed = field("seed").get<std::uint64_t>();
    r.loss_log = field("loss_log").get<std::string>();
    r.label = field("label").get<std::string>();
  } catch (const nlohmann::json::type_error& e) {
    throw FormatError(std::string("run report field has the wrong type: ") + e.what());
  }
  for (double m : {r.ndcg_at_5, r.ndcg_at_10, r.recall_at_5})
    if (!(m >= 0.0 && m <= 1.0)) throw FormatError("run report metric outside [0, 1]");
  if (!(r.t_f_ms >= 0.0) || !(r.t_a_ms >= 0.0)) throw FormatError("run report latency is negative");
}

void write_report(const RunReport& report, const std::filesystem::path& path) {
  io::write_json(path, nlohmann::json(report));
}

void write_reports(const std::vector<RunReport>& reports, const std::filesystem::path& path) {
  io::write_json(path, nlohmann::json(reports));
}

std::vector<RunReport> read_reports(const std::filesystem::path& path) {
  const auto j = io::read_json(path);
  if (j.is_array()) return j.get<std::vector<RunReport>>();
  return {j.get<RunReport>()};
}

}  // namespace cemb
