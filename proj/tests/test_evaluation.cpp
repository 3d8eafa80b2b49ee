#include <algorithm>
#include <numeric>
#include <cmath>
#include <random>

#include "doctest.h"

#include "cemb/error.hpp"
#include "cemb/evaluation.hpp"
#include "cemb/io.hpp"

using namespace cemb;

namespace {

ModelConfig toy_model() {
  ModelConfig c;
  c.vocab_size = 32;
  c.d_model = 16;
  c.n_layers = 2;
  c.n_heads = 2;
  c.d_emb = 8;
  c.max_context = 48;
  c.n_q = 3;
  c.n_d = 8;
  return c;
}

Corpus toy_corpus(std::size_t n_docs = 10) {
  SyntheticTaskConfig t;
  t.n_docs = n_docs;
  t.doc_len = 16;
  t.query_len = 4;
  t.vocab_size = 32;
  t.n_topics = 4;
  t.seed = 2;
  return gen_corpus(t);
}

std::string slurp(const std::filesystem::path& p) {
  const auto b = io::read_file(p);
  return {b.begin(), b.end()};
}

}  // namespace

TEST_SUITE("evaluation") {

TEST_CASE("nDCG closed forms") {
  const std::vector<std::uint64_t> r{4, 7, 1, 9, 3, 8};
  CHECK(ndcg_at_k(r, 4, 5) == 1.0);
  CHECK(ndcg_at_k(r, 7, 5) == doctest::Approx(1.0 / std::log2(3.0)).epsilon(1e-15));
  CHECK(ndcg_at_k(r, 7, 5) == doctest::Approx(0.63093).epsilon(1e-5));
  CHECK(ndcg_at_k(r, 8, 5) == 0.0);
  CHECK(ndcg_at_k(r, 8, 6) == doctest::Approx(1.0 / std::log2(7.0)).epsilon(1e-15));
  CHECK(ndcg_at_k(r, 42, 5) == 0.0);
  CHECK(recall_at_k(r, 3, 5) == 1.0);
  CHECK(recall_at_k(r, 8, 5) == 0.0);
  const std::vector<std::uint64_t> dup{1, 2, 1};
  CHECK_THROWS_AS(ndcg_at_k(dup, 1, 5), RankingError);
  CHECK_THROWS_AS(ndcg_at_k(r, 4, 0), ContractError);
}

TEST_CASE("nDCG is invariant to relabeling irrelevant documents") {
  std::mt19937_64 rng(1);
  for (int trial = 0; trial < 50; ++trial) {
    std::vector<std::uint64_t> r(20);
    std::iota(r.begin(), r.end(), 0);
    std::shuffle(r.begin(), r.end(), rng);
    const std::uint64_t rel = rng() % 20;
    auto relabeled = r;
    for (auto& id : relabeled)
      if (id != rel) id += 1000;
    for (std::size_t k : {1u, 5u, 10u}) CHECK(ndcg_at_k(r, rel, k) == ndcg_at_k(relabeled, rel, k));
  }
}

TEST_CASE("method names") {
  for (auto m : {Method::causal, Method::forward_full, Method::random, Method::kmeans, Method::hierarchical,
                 Method::pool1d})
    CHECK(parse_method(to_string(m)) == m);
  CHECK_THROWS_AS(parse_method("colbert"), SpecError);
  CHECK_FALSE(is_pruning(Method::causal));
  CHECK(is_pruning(Method::pool1d));
  CHECK(prune_method(Method::kmeans) == PruneMethod::kmeans);
  CHECK_THROWS_AS(prune_method(Method::forward_full), SpecError);
}

TEST_CASE("median") {
  CHECK(median({}) == 0.0);
  CHECK(median({3.0, 1.0, 2.0}) == 2.0);
  CHECK(median({4.0, 1.0, 2.0, 3.0}) == 2.5);
}

TEST_CASE("single-document corpus scores 1 for every method") {
  const auto params = init_params(toy_model(), 1);
  auto c = toy_corpus(1);
  for (auto m : {Method::causal, Method::forward_full, Method::random, Method::kmeans, Method::hierarchical,
                 Method::pool1d}) {
    const auto r = evaluate(params, c, c.queries, {m, 4, 0, "h"});
    CHECK(r.ndcg_at_5 == 1.0);
    CHECK(r.recall_at_5 == 1.0);
    CHECK(r.t_f_ms >= 0.0);
    CHECK(r.t_a_ms >= 0.0);
  }
  Corpus empty;
  CHECK_THROWS_AS(evaluate(params, empty, c.queries, {}), EvalError);
}

TEST_CASE("forward_full at doc_len equals unpruned scoring") {
  const auto params = init_params(toy_model(), 2);
  const auto c = toy_corpus();
  const auto full = evaluate(params, c, c.queries, {Method::forward_full, 0, 0, ""});
  CHECK(full.budget == 16);
  std::vector<MultiVec> docs;
  std::vector<std::uint64_t> ids, rel;
  for (const auto& d : c.docs) {
    docs.push_back(forward_embed(params, d.tokens));
    ids.push_back(d.doc_id);
  }
  for (const auto& q : c.queries) rel.push_back(q.relevant_doc);
  const auto qs = embed_queries(params, c.queries, Method::forward_full);
  const auto m = score_rankings(qs, rel, docs, ids);
  CHECK(full.ndcg_at_5 == m.ndcg_at_5);
  // Pruning at budget doc_len is the identity.
  const auto pooled = evaluate(params, c, c.queries, {Method::pool1d, 16, 0, ""});
  CHECK(pooled.ndcg_at_5 == full.ndcg_at_5);
}

TEST_CASE("ranking ties go to the lower document id") {
  const MultiVec q(Tensor::from_rows({{1, 0}}));
  const MultiVec d(Tensor::from_rows({{1, 0}}));
  const std::vector<MultiVec> qs{q}, ds{d, d, d};
  const std::vector<std::uint64_t> rel{5}, ids{9, 5, 7};
  const auto m = score_rankings(qs, rel, ds, ids);
  CHECK(m.ndcg_at_5 == 1.0);
  const std::vector<std::uint64_t> rel9{9};
  CHECK(score_rankings(qs, rel9, ds, ids).ndcg_at_5 == doctest::Approx(1.0 / std::log2(4.0)));
}

TEST_CASE("store round trip preserves nDCG") {
  const auto params = init_params(toy_model(), 3);
  const auto c = toy_corpus();
  const EvalRequest req{Method::causal, 8, 0, ""};
  const auto direct = evaluate(params, c, c.queries, req);
  EmbeddingStore store;
  store.d_emb = 8;
  for (const auto& d : c.docs) store.records.push_back({d.doc_id, generate_latents(params, d.tokens, 8)});
  const auto path = std::filesystem::temp_directory_path() / "cemb_test_eval_store.cemb";
  write_store(path, store);
  const auto back = read_store(path);
  std::vector<MultiVec> docs;
  std::vector<std::uint64_t> ids;
  for (const auto& r : back.records) {
    docs.push_back(r.vectors);
    ids.push_back(r.doc_id);
  }
  const auto stored = evaluate_embedded(params, c.queries, docs, ids, req);
  CHECK(std::abs(stored.ndcg_at_5 - direct.ndcg_at_5) <= 1e-5);
  std::filesystem::remove(path);
}

TEST_CASE("scaling sweep is exact prefix truncation") {
  const auto params = init_params(toy_model(), 4);
  const auto c = toy_corpus();
  const std::vector<std::size_t> budgets{1, 2, 4, 8};
  const auto sweep = scaling_sweep(params, c, c.queries, budgets);
  REQUIRE(sweep.size() == 4);
  for (std::size_t i = 0; i < 4; ++i) {
    CHECK(sweep[i].budget == budgets[i]);
    const auto alone = evaluate(params, c, c.queries, {Method::causal, budgets[i], 0, ""});
    CHECK(sweep[i].ndcg_at_5 == alone.ndcg_at_5);
    CHECK(sweep[i].ndcg_at_10 == alone.ndcg_at_10);
  }
  const std::vector<std::size_t> too_big{4, 9}, unsorted{4, 2};
  CHECK_THROWS_AS(scaling_sweep(params, c, c.queries, too_big), CapacityError);
  CHECK_THROWS_AS(scaling_sweep(params, c, c.queries, unsorted), ContractError);
}

TEST_CASE("spearman rank correlation") {
  const std::vector<double> x{1, 2, 3, 4, 5, 6};
  CHECK(spearman(x, std::vector<double>{1, 2, 3, 4, 5, 6}) == doctest::Approx(1.0));
  CHECK(spearman(x, std::vector<double>{6, 5, 4, 3, 2, 1}) == doctest::Approx(-1.0));
  // Monotone transform leaves it unchanged.
  CHECK(spearman(x, std::vector<double>{0.1, 0.2, 0.25, 0.9, 3.0, 7.0}) == doctest::Approx(1.0));
  // Hand-computed: ranks of y are 2,1,4,3,6,5, so sum d^2 = 6 and rho = 1 - 6*6/(6*35).
  CHECK(spearman(x, std::vector<double>{2, 1, 4, 3, 6, 5}) == doctest::Approx(1.0 - 36.0 / 210.0));
  // Ties take average ranks: y ranks 1.5,1.5,3,4 vs x ranks 1..4.
  const std::vector<double> x4{1, 2, 3, 4}, y4{5, 5, 6, 7};
  // Centered ranks: x -1.5,-0.5,0.5,1.5 and y -1,-1,0.5,1.5, so rho = 4.5 / sqrt(5 * 4.5).
  const double expect = 4.5 / std::sqrt(5.0 * 4.5);
  CHECK(spearman(x4, y4) == doctest::Approx(expect).epsilon(1e-12));
  CHECK(spearman(x4, std::vector<double>{1, 1, 1, 1}) == 0.0);
  CHECK_THROWS_AS(spearman(x4, x), ContractError);
}

TEST_CASE("ablation variants and CSV layouts") {
  const auto v = default_ablation_variants(LossWeights{});
  REQUIRE(v.size() == 5);
  CHECK(v[0].name == "full");
  CHECK(v[1].weights.lambda_d == 0.0);
  CHECK(v[2].weights.lambda_q == 0.0);
  CHECK(v[3].weights.lambda_m == 0.0);
  CHECK(v[4].weights.ld_variant == LdVariant::relu_clamped);

  const auto dir = std::filesystem::temp_directory_path() / "cemb_test_eval_csv";
  std::filesystem::create_directories(dir);
  RunReport r;
  r.method = "causal";
  r.budget = 4;
  r.ndcg_at_5 = 0.5;
  std::vector<RunReport> reps{r, r};
  write_reports_csv(dir / "s.csv", reps);
  const auto s = slurp(dir / "s.csv");
  CHECK(s.rfind("method,budget,ndcg5,ndcg10,recall5,tf_ms,ta_ms\n", 0) == 0);
  CHECK(std::count(s.begin(), s.end(), '\n') == 3);
  std::vector<AblationRow> rows{{"full", r, 0.0}};
  write_ablation_csv(dir / "a.csv", rows);
  CHECK(slurp(dir / "a.csv").rfind("variant,method,budget,ndcg5", 0) == 0);
  std::filesystem::remove_all(dir);
}

TEST_CASE("small ablation run: full row has zero delta") {
  const auto c = toy_corpus(8);
  TrainConfig t;
  t.batch_size = 4;
  t.eval_batches = 0;
  const auto all = default_ablation_variants(LossWeights{});
  const std::vector<AblationVariant> two{all[0], all[1]};
  const auto rows = ablation_run(c, toy_model(), t, two);
  REQUIRE(rows.size() == 2);
  CHECK(rows[0].delta == 0.0);
  CHECK(rows[1].variant == "w/o L_d");
  CHECK(rows[0].report.budget == 8);
}

TEST_CASE("latency harness shares the forward pass and reports T = T_f + T_a") {
  const auto params = init_params(toy_model(), 5);
  const auto c = toy_corpus(4);
  const std::vector<Method> methods{Method::causal, Method::random, Method::pool1d};
  const auto rows = latency_harness(params, c.docs, methods, 4, 3);
  REQUIRE(rows.size() == 3);
  for (const auto& r : rows) {
    CHECK(r.t_f_ms >= 0.0);
    CHECK(r.t_a_ms >= 0.0);
    CHECK(r.total_ms == doctest::Approx(r.t_f_ms + r.t_a_ms));
  }
  CHECK(rows[1].t_f_ms == rows[2].t_f_ms);

  const std::vector<PruneMethod> pm{PruneMethod::pool1d, PruneMethod::kmeans};
  const auto mv = forward_embed(params, c.docs[0].tokens);
  const auto ad = adaptation_latency(mv, pm, 4, 3);
  REQUIRE(ad.size() == 2);
  CHECK(ad[0].method == "pool1d");
}

}  // TEST_SUITE
