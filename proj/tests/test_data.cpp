#include <cmath>
#include <random>
#include <set>

#include "doctest.h"

#include "cemb/data.hpp"
#include "cemb/error.hpp"
#include "cemb/io.hpp"
#include "cemb/scoring.hpp"

using namespace cemb;

namespace {

SyntheticTaskConfig small_task() {
  SyntheticTaskConfig c;
  c.n_docs = 40;
  c.doc_len = 24;
  c.query_len = 6;
  c.vocab_size = 64;
  c.n_topics = 8;
  c.seed = 3;
  return c;
}

MultiVec random_unit(std::size_t rows, std::size_t dim, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> nd(0.0, 1.0);
  Tensor t = Tensor::matrix(rows, dim);
  for (double& v : t.values()) v = nd(rng);
  return MultiVec::normalized(std::move(t));
}

std::filesystem::path scratch(const char* name) {
  const auto dir = std::filesystem::temp_directory_path() / "cemb_test_data";
  std::filesystem::create_directories(dir);
  return dir / name;
}

}  // namespace

TEST_SUITE("data") {

TEST_CASE("config validation and strict keys") {
  SyntheticTaskConfig c;
  CHECK_NOTHROW(c.validate());
  c.n_topics = 65;  // more than vocab / 4
  CHECK_THROWS_AS(c.validate(), ConfigError);
  c = SyntheticTaskConfig{};
  c.topic_purity = 0.0;
  CHECK_THROWS_AS(c.validate(), ConfigError);
  c.topic_purity = 1.5;
  CHECK_THROWS_AS(c.validate(), ConfigError);
  nlohmann::json j = SyntheticTaskConfig{};
  CHECK(j.get<SyntheticTaskConfig>().n_docs == 512);
  j["purity"] = 0.5;
  CHECK_THROWS_AS(j.get<SyntheticTaskConfig>(), ConfigError);
}

TEST_CASE("generation is a pure function of the config") {
  const auto a = gen_corpus(small_task()), b = gen_corpus(small_task());
  CHECK(corpus_to_json(a).dump() == corpus_to_json(b).dump());
  auto other = small_task();
  other.seed = 4;
  CHECK(corpus_to_json(gen_corpus(other)).dump() != corpus_to_json(a).dump());
}

TEST_CASE("shapes, round-robin topics and query overlap") {
  const auto cfg = small_task();
  const auto c = gen_corpus(cfg);
  REQUIRE(c.docs.size() == cfg.n_docs);
  CHECK(c.queries.size() == cfg.n_docs * cfg.queries_per_doc);
  for (const auto& d : c.docs) {
    CHECK(d.tokens.size() == cfg.doc_len);
    CHECK(d.topic == d.doc_id % cfg.n_topics);
    for (auto t : d.tokens) CHECK(t < cfg.vocab_size);
  }
  std::size_t held = 0;
  for (const auto& q : c.queries) {
    CHECK(q.tokens.size() == cfg.query_len);
    const auto& doc = c.docs.at(q.relevant_doc).tokens;
    const std::set<TokenId> present(doc.begin(), doc.end());
    for (auto t : q.tokens) CHECK(present.count(t) == 1);
    held += q.heldout;
  }
  CHECK(c.train_queries().size() + c.heldout_queries().size() == c.queries.size());
  CHECK(held == c.heldout_queries().size());
}

TEST_CASE("purity 1 keeps every token in its topic pool") {
  auto cfg = small_task();
  cfg.topic_purity = 1.0;
  const auto c = gen_corpus(cfg);
  const std::size_t pool = cfg.vocab_size / cfg.n_topics;
  for (const auto& d : c.docs)
    for (auto t : d.tokens) CHECK(t / pool == d.topic);
}

TEST_CASE("held-out split is close to the configured fraction") {
  const auto c = gen_corpus(SyntheticTaskConfig{});
  const double frac = static_cast<double>(c.heldout_queries().size()) / static_cast<double>(c.queries.size());
  // Binomial(1024, 0.25): sigma is about 0.0135.
  CHECK(std::abs(frac - 0.25) < 0.05);
}

TEST_CASE("bag-of-words oracle on a brute-force recount") {
  const auto c = gen_corpus(small_task());
  std::size_t hits = 0;
  for (const auto& q : c.queries) {
    auto score = [&](const CorpusItem& d) {
      const std::set<TokenId> present(d.tokens.begin(), d.tokens.end());
      std::size_t s = 0;
      for (auto t : q.tokens) s += present.count(t);
      return s;
    };
    const std::size_t mine = score(c.docs[q.relevant_doc]);
    bool top = true;
    for (const auto& d : c.docs)
      if (d.doc_id != q.relevant_doc && score(d) >= mine) top = false;
    hits += top;
  }
  CHECK(bow_oracle_top1(c) == static_cast<double>(hits) / static_cast<double>(c.queries.size()));
}

TEST_CASE("bag-of-words oracle on the default corpus") {
  // Frozen from the oracle at the default config (seed 0, purity 0.8).
  const double top1 = bow_oracle_top1(gen_corpus(SyntheticTaskConfig{}));
  CHECK(top1 == doctest::Approx(0.450195).epsilon(1e-5));
  // Lower purity makes documents lexically distinctive.
  SyntheticTaskConfig low;
  low.topic_purity = 0.4;
  CHECK(bow_oracle_top1(gen_corpus(low)) >= 0.8);
}

TEST_CASE("corpus JSON round trip and validation") {
  const auto c = gen_corpus(small_task());
  const auto path = scratch("corpus.json");
  write_corpus(path, c);
  const auto back = read_corpus(path);
  CHECK(corpus_to_json(back).dump() == corpus_to_json(c).dump());
  auto j = corpus_to_json(c);
  j["queries"][0]["relevant_doc"] = 999;
  CHECK_THROWS_AS(corpus_from_json(j), FormatError);
  j = corpus_to_json(c);
  j["docs"][0].erase("tokens");
  CHECK_THROWS_AS(corpus_from_json(j), FormatError);
}

TEST_CASE("store round trips") {
  const auto path = scratch("store.cemb");
  EmbeddingStore empty;
  empty.d_emb = 4;
  write_store(path, empty);
  const auto e = read_store(path);
  CHECK(e.records.empty());
  CHECK(e.d_emb == 4);

  EmbeddingStore one;
  one.d_emb = 5;
  one.metadata = {{"method", "causal"}};
  one.records.push_back({7, random_unit(1, 5, 1)});
  write_store(path, one);
  const auto o = read_store(path);
  REQUIRE(o.records.size() == 1);
  CHECK(o.records[0].doc_id == 7);
  CHECK(o.metadata["method"] == "causal");
  for (std::size_t c = 0; c < 5; ++c) {
    const double want = one.records[0].vectors.row(0)[c];
    CHECK(std::abs(o.records[0].vectors.row(0)[c] - want) <= 1e-6 * std::max(1.0, std::abs(want)));
  }
}

TEST_CASE("store preserves maxsim scores and rewrites deterministically") {
  EmbeddingStore s;
  s.d_emb = 8;
  for (std::uint64_t i = 0; i < 64; ++i) s.records.push_back({i, random_unit(3 + i % 7, 8, 100 + i)});
  const auto a = scratch("a.cemb"), b = scratch("b.cemb");
  write_store(a, s);
  write_store(b, s);
  CHECK(io::sha256_hex(io::read_file(a)) == io::sha256_hex(io::read_file(b)));
  const auto back = read_store(a);
  REQUIRE(back.records.size() == 64);
  const auto q = random_unit(4, 8, 9);
  for (std::size_t i = 0; i < 64; ++i) {
    CHECK(back.records[i].vectors.length() == s.records[i].vectors.length());
    CHECK(std::abs(maxsim(q, back.records[i].vectors).total - maxsim(q, s.records[i].vectors).total) <= 1e-5);
  }
}

TEST_CASE("store corruption is detected") {
  EmbeddingStore s;
  s.d_emb = 4;
  s.records.push_back({0, random_unit(2, 4, 1)});
  const auto path = scratch("bad.cemb");
  write_store(path, s);
  auto bytes = io::read_file(path);

  auto truncated = bytes;
  truncated.resize(truncated.size() - 5);
  io::write_file(path, truncated);
  CHECK_THROWS_AS(read_store(path), CorruptionError);

  auto magic = bytes;
  magic[0] = 'X';
  io::write_file(path, magic);
  CHECK_THROWS_AS(read_store(path), FormatError);

  auto version = bytes;
  version[4] = 2;
  io::write_file(path, version);
  CHECK_THROWS_AS(read_store(path), FormatError);

  EmbeddingStore wrong;
  wrong.d_emb = 3;
  wrong.records.push_back({0, random_unit(2, 4, 1)});
  CHECK_THROWS_AS(write_store(path, wrong), DimensionError);
}

TEST_CASE("run report schema") {
  RunReport r;
  r.config_hash = "abc";
  r.method = "causal";
  r.budget = 8;
  r.ndcg_at_5 = 0.5;
  const auto path = scratch("report.json");
  write_report(r, path);
  const auto back = read_reports(path);
  REQUIRE(back.size() == 1);
  CHECK(back[0].ndcg_at_5 == 0.5);
  CHECK(back[0].method == "causal");

  nlohmann::json j = r;
  j.erase("t_a_ms");
  CHECK_THROWS_AS(j.get<RunReport>(), FormatError);
  j = r;
  j["ndcg_at_5"] = 1.5;
  CHECK_THROWS_AS(j.get<RunReport>(), FormatError);
  j = r;
  j["budget"] = "eight";
  CHECK_THROWS_AS(j.get<RunReport>(), FormatError);

  std::vector<RunReport> many(6, r);
  write_reports(many, path);
  CHECK(read_reports(path).size() == 6);
  std::filesystem::remove_all(path.parent_path());
}

}  // TEST_SUITE
