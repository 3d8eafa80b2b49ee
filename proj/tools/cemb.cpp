// cemb: command-line front end. Each subcommand writes its artifacts to
// <output_dir>/<subcommand>/ together with a manifest.json.

#include <chrono>
#include <cstdio>
#include <cstdlib>
#include <iostream>
#include <optional>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "json.hpp"

#include "cemb/analysis.hpp"
#include "cemb/data.hpp"
#include "cemb/error.hpp"
#include "cemb/evaluation.hpp"
#include "cemb/io.hpp"
#include "cemb/kernels.hpp"
#include "cemb/losses.hpp"
#include "cemb/model.hpp"
#include "cemb/pruning.hpp"
#include "cemb/scoring.hpp"
#include "cemb/training.hpp"

#ifndef CEMB_GIT_DESCRIBE
#define CEMB_GIT_DESCRIBE "unknown"
#endif

namespace fs = std::filesystem;
using nlohmann::json;
using namespace cemb;

namespace {

struct AppConfig {
  SyntheticTaskConfig data;
  ModelConfig model;
  TrainConfig train;
  LossWeights loss;

  json to_json() const {
    json t = train;
    return {{"data", data}, {"model", model}, {"train", t}, {"loss", loss}};
  }
};

AppConfig load_config(const std::string& path) {
  AppConfig c;
  if (path.empty()) return c;
  const json j = io::read_json(path);
  io::reject_unknown_keys(j, {"data", "model", "train", "loss"}, "config file");
  if (j.contains("data")) c.data = j.at("data").get<SyntheticTaskConfig>();
  if (j.contains("model")) c.model = j.at("model").get<ModelConfig>();
  if (j.contains("train")) c.train = j.at("train").get<TrainConfig>();
  if (j.contains("loss")) c.loss = j.at("loss").get<LossWeights>();
  c.model.validate();
  return c;
}

struct Common {
  std::string config_path;
  std::string output_dir;
  std::optional<std::uint64_t> seed;
  int threads = 0;
  int verbosity = 0;
};

struct Context {
  AppConfig cfg;
  fs::path dir;
  json inputs = json::object();
  std::chrono::steady_clock::time_point start = std::chrono::steady_clock::now();
  std::string subcommand;
  int verbosity = 0;

  void note(const std::string& msg) const {
    if (verbosity > 0) std::cerr << "[" << subcommand << "] " << msg << "\n";
  }
};

fs::path resolve_output_dir(const Common& c) {
  if (!c.output_dir.empty()) return c.output_dir;
  if (const char* env = std::getenv("CEMB_OUTPUT_DIR"); env && *env) return env;
  return "out";
}

Context make_context(const Common& common, const std::string& sub) {
  Context ctx;
  ctx.subcommand = sub;
  ctx.verbosity = common.verbosity;
  ctx.cfg = load_config(common.config_path);
  if (common.seed) {
    ctx.cfg.data.seed = *common.seed;
    ctx.cfg.train.seed = *common.seed;
  }
  ctx.cfg.train.weights = ctx.cfg.loss;
  if (common.threads > 0) kernels::set_max_threads(common.threads);
  ctx.dir = resolve_output_dir(common) / sub;
  fs::create_directories(ctx.dir);
  if (!common.config_path.empty()) ctx.inputs["config"] = common.config_path;
  return ctx;
}

void write_manifest(const Context& ctx, const json& extra = json::object()) {
  const double wall =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - ctx.start).count();
  json m = {{"subcommand", ctx.subcommand},
            {"inputs", ctx.inputs},
            {"config", ctx.cfg.to_json()},
            {"config_hash", io::config_hash(ctx.cfg.to_json())},
            {"git_describe", CEMB_GIT_DESCRIBE},
            {"wall_time_s", wall}};
  for (const auto& [k, v] : extra.items()) m[k] = v;
  io::write_json(ctx.dir / "manifest.json", m);
}

fs::path default_input(const Common& c, const std::string& sub, const std::string& file) {
  return resolve_output_dir(c) / sub / file;
}

std::vector<std::size_t> parse_list(const std::string& s) {
  std::vector<std::size_t> out;
  std::stringstream ss(s);
  std::string item;
  while (std::getline(ss, item, ',')) {
    if (item.empty()) continue;
    try {
      std::size_t pos = 0;
      const unsigned long long v = std::stoull(item, &pos);
      if (pos != item.size()) throw std::invalid_argument(item);
      out.push_back(static_cast<std::size_t>(v));
    } catch (const std::logic_error&) {
      throw ContractError("cannot parse integer list '" + s + "'");
    }
  }
  return out;
}

ModelParams load_params(const fs::path& ckpt) { return load_checkpoint(ckpt).params; }

// ---- subcommands -----------------------------------------------------------

int cmd_gen_data(const Common& common) {
  auto ctx = make_context(common, "gen-data");
  const Corpus c = gen_corpus(ctx.cfg.data);
  write_corpus(ctx.dir / "corpus.json", c);
  const double bow = bow_oracle_top1(c);
  ctx.note("bag-of-words top-1 " + std::to_string(bow));
  write_manifest(ctx, {{"outputs", {"corpus.json"}},
                       {"n_docs", c.docs.size()},
                       {"n_queries", c.queries.size()},
                       {"n_heldout", c.heldout_queries().size()},
                       {"bow_top1", bow}});
  std::cout << "corpus: " << c.docs.size() << " docs, " << c.queries.size() << " queries, bag-of-words top-1 "
            << bow << "\n";
  return 0;
}

struct TrainArgs {
  std::string corpus, resume;
  std::optional<std::uint64_t> stop_at;
  bool eval_ndcg = false;
};

int cmd_train(const Common& common, const TrainArgs& a) {
  auto ctx = make_context(common, "train");
  const fs::path corpus_path = a.corpus.empty() ? default_input(common, "gen-data", "corpus.json") : fs::path(a.corpus);
  ctx.inputs["corpus"] = corpus_path.string();
  const Corpus corpus = read_corpus(corpus_path);
  TrainConfig tc = ctx.cfg.train;
  tc.checkpoint_path = (ctx.dir / "checkpoint.ckpt").string();
  TrainOptions opt;
  opt.log_path = ctx.dir / "loss_log.jsonl";
  if (!a.resume.empty()) {
    ctx.inputs["resume"] = a.resume;
    opt.resume = load_train_state(a.resume);
  }
  opt.stop_at_step = a.stop_at;
  const auto heldout = corpus.heldout_queries();
  if (a.eval_ndcg && !heldout.empty())
    opt.eval_ndcg = [&](const ModelParams& p) {
      return evaluate(p, corpus, heldout, {Method::causal, p.config.n_d, tc.seed, ""}).ndcg_at_5;
    };
  opt.on_log = [&](const LogEntry& e) {
    if (ctx.verbosity > 0) std::cerr << to_json_line(e).dump() << "\n";
  };
  const auto res = train(tc, ctx.cfg.model, corpus, opt);
  const json summary = {{"steps", res.state.step},
                        {"steps_per_epoch", res.steps_per_epoch},
                        {"initial_loss", res.initial_loss},
                        {"final_loss", res.final_loss},
                        {"param_checksum", res.state.params.checksum()}};
  io::write_json(ctx.dir / "summary.json", summary);
  write_manifest(ctx, {{"outputs", {"checkpoint.ckpt", "loss_log.jsonl", "summary.json"}}});
  std::cout << "trained " << res.state.step << " steps, smoothed loss " << res.initial_loss << " -> " << res.final_loss
            << "\n";
  return 0;
}

struct EmbedArgs {
  std::string checkpoint, corpus, method = "causal";
  std::size_t budget = 0;
};

int cmd_embed(const Common& common, const EmbedArgs& a) {
  auto ctx = make_context(common, "embed");
  const fs::path ck = a.checkpoint.empty() ? default_input(common, "train", "checkpoint.ckpt") : fs::path(a.checkpoint);
  const fs::path cp = a.corpus.empty() ? default_input(common, "gen-data", "corpus.json") : fs::path(a.corpus);
  ctx.inputs["checkpoint"] = ck.string();
  ctx.inputs["corpus"] = cp.string();
  const auto params = load_params(ck);
  const Corpus corpus = read_corpus(cp);
  const Method m = parse_method(a.method);
  if (m != Method::causal && m != Method::forward_full)
    throw ContractError("embed supports --method causal or forward_full; use the prune subcommand for pruning");
  const std::size_t budget = a.budget ? a.budget : (m == Method::causal ? params.config.n_d : corpus.config.doc_len);
  const auto emb = embed_documents(params, corpus.docs, m, budget, ctx.cfg.train.seed);
  EmbeddingStore store;
  store.d_emb = static_cast<std::uint32_t>(params.config.d_emb);
  store.metadata = {{"method", a.method}, {"budget", budget}, {"checkpoint", ck.string()}};
  for (std::size_t i = 0; i < emb.docs.size(); ++i) store.records.push_back({corpus.docs[i].doc_id, emb.docs[i]});
  write_store(ctx.dir / "store.cemb", store);
  write_manifest(ctx, {{"outputs", {"store.cemb"}}, {"t_f_ms", median(emb.t_f_ms)}, {"t_a_ms", median(emb.t_a_ms)}});
  std::cout << "embedded " << store.records.size() << " documents (" << a.method << ", budget " << budget << ")\n";
  return 0;
}

struct PruneArgs {
  std::string store, method = "pool1d";
  std::size_t budget = 8;
};

int cmd_prune(const Common& common, const PruneArgs& a) {
  auto ctx = make_context(common, "prune");
  const fs::path in = a.store.empty() ? default_input(common, "embed", "store.cemb") : fs::path(a.store);
  ctx.inputs["store"] = in.string();
  const auto src = read_store(in);
  PruneSpec spec{parse_prune_method(a.method), a.budget, ctx.cfg.train.seed};
  if (spec.budget == 0) throw SpecError("--budget must be >= 1");
  EmbeddingStore out;
  out.d_emb = src.d_emb;
  out.metadata = {{"method", a.method}, {"budget", a.budget}, {"source", in.string()}, {"seed", spec.seed}};
  std::vector<double> times;
  std::size_t identity = 0;
  for (const auto& r : src.records) {
    PruneSpec s = spec;
    s.seed = derive_seed(spec.seed, r.doc_id);
    identity += is_identity_prune(r.vectors, s);
    auto t = prune_timed(r.vectors, s);
    times.push_back(t.t_a_ms);
    out.records.push_back({r.doc_id, std::move(t.vectors)});
  }
  if (identity > 0)
    std::cerr << "warning: budget " << a.budget << " >= length for " << identity << " documents; left unchanged\n";
  write_store(ctx.dir / "store.cemb", out);
  write_manifest(ctx, {{"outputs", {"store.cemb"}}, {"t_a_ms_median", median(times)}, {"identity_records", identity}});
  std::cout << "pruned " << out.records.size() << " documents with " << a.method << " to budget " << a.budget << "\n";
  return 0;
}

struct SearchArgs {
  std::string checkpoint, store, corpus, tokens, method = "causal";
  std::optional<std::uint64_t> query_id;
  std::size_t k = 10;
};

int cmd_search(const Common& common, const SearchArgs& a) {
  auto ctx = make_context(common, "search");
  const fs::path ck = a.checkpoint.empty() ? default_input(common, "train", "checkpoint.ckpt") : fs::path(a.checkpoint);
  const fs::path st = a.store.empty() ? default_input(common, "embed", "store.cemb") : fs::path(a.store);
  ctx.inputs["checkpoint"] = ck.string();
  ctx.inputs["store"] = st.string();
  const auto params = load_params(ck);
  const auto store = read_store(st);
  if (store.records.empty()) throw EvalError("store is empty");

  std::vector<TokenId> tokens;
  std::optional<std::uint64_t> relevant;
  if (a.query_id) {
    const fs::path cp = a.corpus.empty() ? default_input(common, "gen-data", "corpus.json") : fs::path(a.corpus);
    ctx.inputs["corpus"] = cp.string();
    const Corpus corpus = read_corpus(cp);
    if (*a.query_id >= corpus.queries.size()) throw InputError("query id out of range");
    tokens = corpus.queries[*a.query_id].tokens;
    relevant = corpus.queries[*a.query_id].relevant_doc;
  } else {
    for (auto t : parse_list(a.tokens)) tokens.push_back(static_cast<TokenId>(t));
    if (tokens.empty()) throw InputError("give --tokens or --query-id");
  }
  const Method m = parse_method(a.method);
  const MultiVec q = m == Method::causal ? generate_latents(params, tokens, params.config.n_q) : forward_embed(params, tokens);

  std::vector<std::pair<double, std::uint64_t>> scored;
  for (const auto& r : store.records) scored.push_back({maxsim(q, r.vectors).total, r.doc_id});
  std::stable_sort(scored.begin(), scored.end(), [](const auto& x, const auto& y) {
    return x.first != y.first ? x.first > y.first : x.second < y.second;
  });
  json hits = json::array();
  for (std::size_t i = 0; i < scored.size() && i < a.k; ++i)
    hits.push_back({{"rank", i + 1}, {"doc_id", scored[i].second}, {"score", scored[i].first}});
  json result = {{"tokens", tokens}, {"hits", hits}};
  if (relevant) result["relevant_doc"] = *relevant;
  io::write_json(ctx.dir / "results.json", result);
  write_manifest(ctx, {{"outputs", {"results.json"}}});
  for (const auto& h : hits) std::cout << h["rank"] << "\t" << h["doc_id"] << "\t" << h["score"] << "\n";
  return 0;
}

struct EvalArgs {
  std::string checkpoint, corpus, store, method = "causal", split = "heldout";
  std::size_t budget = 0;
};

std::vector<QueryItem> pick_queries(const Corpus& c, const std::string& split) {
  if (split == "heldout") return c.heldout_queries();
  if (split == "train") return c.train_queries();
  if (split == "all") return c.queries;
  throw ContractError("--split must be heldout, train or all");
}

int cmd_eval(const Common& common, const EvalArgs& a) {
  auto ctx = make_context(common, "eval");
  const fs::path ck = a.checkpoint.empty() ? default_input(common, "train", "checkpoint.ckpt") : fs::path(a.checkpoint);
  const fs::path cp = a.corpus.empty() ? default_input(common, "gen-data", "corpus.json") : fs::path(a.corpus);
  ctx.inputs["checkpoint"] = ck.string();
  ctx.inputs["corpus"] = cp.string();
  const auto params = load_params(ck);
  const Corpus corpus = read_corpus(cp);
  const auto queries = pick_queries(corpus, a.split);
  EvalRequest req{parse_method(a.method), a.budget, ctx.cfg.train.seed, io::config_hash(ctx.cfg.to_json())};
  RunReport rep;
  if (!a.store.empty()) {
    ctx.inputs["store"] = a.store;
    const auto store = read_store(a.store);
    std::vector<MultiVec> docs;
    std::vector<std::uint64_t> ids;
    for (const auto& r : store.records) {
      docs.push_back(r.vectors);
      ids.push_back(r.doc_id);
    }
    rep = evaluate_embedded(params, queries, docs, ids, req);
  } else {
    rep = evaluate(params, corpus, queries, req);
  }
  rep.loss_log = (resolve_output_dir(common) / "train" / "loss_log.jsonl").string();
  write_report(rep, ctx.dir / "report.json");
  read_reports(ctx.dir / "report.json");  // schema check on read-back
  write_manifest(ctx, {{"outputs", {"report.json"}}});
  std::cout << rep.method << " budget " << rep.budget << ": nDCG@5 " << rep.ndcg_at_5 << ", nDCG@10 " << rep.ndcg_at_10
            << ", recall@5 " << rep.recall_at_5 << " over " << rep.n_queries << " queries\n";
  return 0;
}

struct SweepArgs {
  std::string checkpoint, corpus, budgets = "1,2,4,8,16,32", split = "heldout";
};

int cmd_sweep(const Common& common, const SweepArgs& a) {
  auto ctx = make_context(common, "sweep");
  const fs::path ck = a.checkpoint.empty() ? default_input(common, "train", "checkpoint.ckpt") : fs::path(a.checkpoint);
  const fs::path cp = a.corpus.empty() ? default_input(common, "gen-data", "corpus.json") : fs::path(a.corpus);
  ctx.inputs["checkpoint"] = ck.string();
  ctx.inputs["corpus"] = cp.string();
  const auto params = load_params(ck);
  const Corpus corpus = read_corpus(cp);
  const auto budgets = parse_list(a.budgets);
  const auto reports = scaling_sweep(params, corpus, pick_queries(corpus, a.split), budgets, ctx.cfg.train.seed,
                                     io::config_hash(ctx.cfg.to_json()));
  std::vector<double> x, y;
  for (const auto& r : reports) {
    x.push_back(static_cast<double>(r.budget));
    y.push_back(r.ndcg_at_5);
  }
  const double rho = reports.size() >= 2 ? spearman(x, y) : 0.0;
  write_reports(reports, ctx.dir / "sweep.json");
  write_reports_csv(ctx.dir / "sweep.csv", reports);
  write_manifest(ctx, {{"outputs", {"sweep.json", "sweep.csv"}}, {"spearman_rho", rho}});
  for (const auto& r : reports) std::cout << "budget " << r.budget << "\tnDCG@5 " << r.ndcg_at_5 << "\n";
  std::cout << "spearman rho " << rho << "\n";
  return 0;
}

int cmd_ablate(const Common& common, const std::string& corpus_arg) {
  auto ctx = make_context(common, "ablate");
  const fs::path cp = corpus_arg.empty() ? default_input(common, "gen-data", "corpus.json") : fs::path(corpus_arg);
  ctx.inputs["corpus"] = cp.string();
  const Corpus corpus = read_corpus(cp);
  const auto variants = default_ablation_variants(ctx.cfg.loss);
  const auto rows = ablation_run(corpus, ctx.cfg.model, ctx.cfg.train, variants);
  write_ablation_csv(ctx.dir / "ablation.csv", rows);
  json j = json::array();
  for (const auto& r : rows) {
    json e = r.report;
    e["variant"] = r.variant;
    e["delta"] = r.delta;
    j.push_back(e);
  }
  io::write_json(ctx.dir / "ablation.json", j);
  write_manifest(ctx, {{"outputs", {"ablation.csv", "ablation.json"}},
                       {"note", "w/ ReLU(dS) is relu(gain_neg - gain_pos), one interpretation of the clamped variant"}});
  for (const auto& r : rows)
    std::cout << r.variant << "\tnDCG@5 " << r.report.ndcg_at_5 << "\tdelta " << r.delta * 100.0 << "%\n";
  return 0;
}

struct GradcheckArgs {
  std::string target = "loss_total";
  double tol = 1e-3;
  double h = 1e-5;
  std::size_t samples = 25;
  std::size_t seeds = 1;
};

int cmd_gradcheck(const Common& common, const GradcheckArgs& a) {
  auto ctx = make_context(common, "gradcheck");
  LossWeights w = ctx.cfg.loss;
  if (a.target == "loss_m") w = {1.0, 0.0, 0.0, w.temperature, w.ld_variant};
  else if (a.target == "loss_d") w = {0.0, 1.0, 0.0, w.temperature, w.ld_variant};
  else if (a.target == "loss_q") w = {0.0, 0.0, 1.0, w.temperature, w.ld_variant};
  else if (a.target != "loss_total") throw ContractError("--target must be loss_m, loss_d, loss_q or loss_total");

  // Two-layer toy model and corpus, small enough for finite differences.
  SyntheticTaskConfig dc;
  dc.n_docs = 4;
  dc.doc_len = 10;
  dc.query_len = 4;
  dc.vocab_size = 32;
  dc.n_topics = 4;
  dc.seed = ctx.cfg.train.seed;
  ModelConfig mc;
  mc.vocab_size = 32;
  mc.d_model = 16;
  mc.n_layers = 2;
  mc.n_heads = 2;
  mc.d_emb = 8;
  mc.max_context = 20;
  mc.n_q = 3;
  mc.n_d = 5;
  const Corpus corpus = gen_corpus(dc);
  std::vector<TrainPair> batch;
  for (std::size_t i = 0; i < 3; ++i)
    batch.push_back({&corpus.queries[i * dc.queries_per_doc], &corpus.docs[i]});

  json runs = json::array();
  bool all_pass = true;
  double worst = 0.0;
  for (std::size_t s = 0; s < a.seeds; ++s) {
    ModelParams p = init_params(mc, ctx.cfg.train.seed + s);
    auto named = p.named();
    ScalarFn f = [&](Graph& g, std::span<const Var> leaves) {
      return step_objective(g, BoundParams::from_leaves(leaves, p.config), batch, w);
    };
    GradcheckOptions opt;
    opt.h = a.h;
    opt.tol = a.tol;
    opt.samples = a.samples;
    opt.seed = ctx.cfg.train.seed + s;
    const auto rep = gradcheck(f, named, opt);
    all_pass = all_pass && rep.pass;
    worst = std::max(worst, rep.max_rel_error);
    json entries = json::array();
    for (const auto& e : rep.entries)
      entries.push_back({{"param", e.param}, {"index", e.index}, {"numeric", e.numeric}, {"analytic", e.analytic},
                         {"rel_error", e.rel_error}, {"kink_skipped", e.kink_skipped}, {"pass", e.pass}});
    runs.push_back({{"seed", opt.seed}, {"max_rel_error", rep.max_rel_error}, {"kink_skipped", rep.kink_skipped},
                    {"pass", rep.pass}, {"entries", entries}});
  }
  io::write_json(ctx.dir / "gradcheck.json", {{"target", a.target}, {"tol", a.tol}, {"h", a.h}, {"runs", runs}});
  write_manifest(ctx, {{"outputs", {"gradcheck.json"}}, {"pass", all_pass}});
  std::cout << (all_pass ? "PASS" : "FAIL") << " gradcheck " << a.target << " max_rel_error " << worst << " (tol "
            << a.tol << ")\n";
  if (!all_pass) throw ContractError("gradient check failed for " + a.target);
  return 0;
}

struct TheoremArgs {
  CoverageConfig cov;
  bool empirical = false;
  std::string checkpoint, corpus;
};

int cmd_theorem1(const Common& common, TheoremArgs a) {
  auto ctx = make_context(common, "theorem1");
  if (common.seed) a.cov.seed = *common.seed;
  const auto check = check_coverage(a.cov);
  std::vector<CoverageCheck> checks{check};
  write_coverage_csv(ctx.dir / "coverage.csv", checks);
  json extra = {{"outputs", {"coverage.csv"}},
                {"analytic", {{"forward", check.analytic.forward}, {"causal", check.analytic.causal}}},
                {"simulated",
                 {{"forward", check.simulated.forward_mean},
                  {"causal", check.simulated.causal_mean},
                  {"forward_stderr", check.simulated.forward_stderr},
                  {"causal_stderr", check.simulated.causal_stderr}}},
                {"pass", check.pass()}};
  if (a.empirical) {
    const fs::path ck = a.checkpoint.empty() ? default_input(common, "train", "checkpoint.ckpt") : fs::path(a.checkpoint);
    const fs::path cp = a.corpus.empty() ? default_input(common, "gen-data", "corpus.json") : fs::path(a.corpus);
    ctx.inputs["checkpoint"] = ck.string();
    ctx.inputs["corpus"] = cp.string();
    const auto params = load_params(ck);
    const Corpus corpus = read_corpus(cp);
    const auto train_q = corpus.train_queries();
    const auto batches = epoch_batches(train_q, ctx.cfg.train.batch_size, ctx.cfg.train.seed, 0);
    if (batches.empty()) throw InputError("not enough training queries for a batch");
    std::vector<TrainPair> batch;
    for (std::size_t i : batches.front()) batch.push_back({&train_q[i], &corpus.docs.at(train_q[i].relevant_doc)});
    const auto emp = coverage_empirical(params, batch, ctx.cfg.loss.temperature);
    write_empirical_csv(ctx.dir / "empirical.csv", emp);
    extra["outputs"].push_back("empirical.csv");
    extra["empirical"] = {{"forward_touched", emp.forward_touched}, {"causal_touched", emp.causal_touched}};
  }
  write_manifest(ctx, extra);
  std::printf("%s theorem1 %s analytic forward=%.1f causal=%.1f ratio=%.4f; simulated forward=%.2f (se %.2f) causal=%.2f (se %.2f)\n",
              check.pass() ? "PASS" : "FAIL", a.cov.label().c_str(), check.analytic.forward, check.analytic.causal,
              check.analytic.ratio, check.simulated.forward_mean, check.simulated.forward_stderr,
              check.simulated.causal_mean, check.simulated.causal_stderr);
  return check.pass() ? 0 : 1;
}

struct LatencyArgs {
  std::string checkpoint, corpus, methods = "causal,forward_full,random,kmeans,hierarchical,pool1d";
  std::size_t budget = 8, runs = 5, docs = 16, synthetic_length = 0;
};

int cmd_latency(const Common& common, const LatencyArgs& a) {
  auto ctx = make_context(common, "latency");
  std::vector<LatencyRow> rows;
  if (a.synthetic_length > 0) {
    // Adaptation-only timing on a random unit multi-vector of the given length.
    Tensor t = Tensor::matrix(a.synthetic_length, ctx.cfg.model.d_emb);
    std::mt19937_64 rng(ctx.cfg.train.seed);
    std::normal_distribution<double> nd(0.0, 1.0);
    for (double& v : t.values()) v = nd(rng);
    const MultiVec mv = MultiVec::normalized(std::move(t));
    std::vector<PruneMethod> methods;
    for (const auto& name : [&] {
           std::vector<std::string> v;
           std::stringstream ss(a.methods);
           std::string s;
           while (std::getline(ss, s, ',')) v.push_back(s);
           return v;
         }()) {
      const Method m = parse_method(name);
      if (is_pruning(m)) methods.push_back(prune_method(m));
    }
    rows = adaptation_latency(mv, methods, a.budget, a.runs, ctx.cfg.train.seed);
  } else {
    const fs::path ck = a.checkpoint.empty() ? default_input(common, "train", "checkpoint.ckpt") : fs::path(a.checkpoint);
    const fs::path cp = a.corpus.empty() ? default_input(common, "gen-data", "corpus.json") : fs::path(a.corpus);
    ctx.inputs["checkpoint"] = ck.string();
    ctx.inputs["corpus"] = cp.string();
    const auto params = load_params(ck);
    const Corpus corpus = read_corpus(cp);
    std::vector<Method> methods;
    std::stringstream ss(a.methods);
    std::string s;
    while (std::getline(ss, s, ',')) methods.push_back(parse_method(s));
    const std::size_t n = std::min(a.docs, corpus.docs.size());
    rows = latency_harness(params, std::span(corpus.docs).first(n), methods, a.budget, a.runs);
  }
  write_latency_csv(ctx.dir / "latency.csv", rows);
  write_manifest(ctx, {{"outputs", {"latency.csv"}}});
  for (const auto& r : rows)
    std::printf("%-14s budget %zu  T_f %.3f ms  T_a %.3f ms  T %.3f ms\n", r.method.c_str(), r.budget, r.t_f_ms,
                r.t_a_ms, r.total_ms);
  return 0;
}

struct HeatmapArgs {
  std::string checkpoint, corpus;
  std::uint64_t query_id = 0;
};

int cmd_heatmap(const Common& common, const HeatmapArgs& a) {
  auto ctx = make_context(common, "heatmap");
  const fs::path ck = a.checkpoint.empty() ? default_input(common, "train", "checkpoint.ckpt") : fs::path(a.checkpoint);
  const fs::path cp = a.corpus.empty() ? default_input(common, "gen-data", "corpus.json") : fs::path(a.corpus);
  ctx.inputs["checkpoint"] = ck.string();
  ctx.inputs["corpus"] = cp.string();
  const auto params = load_params(ck);
  const Corpus corpus = read_corpus(cp);
  if (a.query_id >= corpus.queries.size()) throw InputError("query id out of range");
  const auto& q = corpus.queries[a.query_id];
  const MultiVec qv = generate_latents(params, q.tokens, params.config.n_q);
  const MultiVec dv = generate_latents(params, corpus.docs.at(q.relevant_doc).tokens, params.config.n_d);
  write_heatmaps(ctx.dir, similarity_heatmaps(qv, dv));
  write_manifest(ctx, {{"outputs", {"qq.csv", "dd.csv", "qd.csv"}}, {"query_id", a.query_id}, {"doc_id", q.relevant_doc}});
  std::cout << "heatmaps for query " << a.query_id << " and document " << q.relevant_doc << " written to "
            << ctx.dir.string() << "\n";
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"desk-scale lab for auto-regressive multi-vector embeddings"};
  app.require_subcommand(1);
  Common common;
  app.add_option("-c,--config", common.config_path, "JSON config with sections data, model, train, loss");
  app.add_option("-o,--output-dir", common.output_dir, "output root (default $CEMB_OUTPUT_DIR or ./out)");
  app.add_option("--seed", common.seed, "override data and train seeds");
  app.add_option("--threads", common.threads, "cap on OpenMP worker threads")->check(CLI::NonNegativeNumber);
  app.add_flag("-v,--verbose", common.verbosity, "progress output on stderr");

  auto* gen = app.add_subcommand("gen-data", "generate the synthetic corpus");

  TrainArgs ta;
  auto* tr = app.add_subcommand("train", "train the causal embedder");
  tr->add_option("--corpus", ta.corpus);
  tr->add_option("--resume", ta.resume, "checkpoint to resume from");
  tr->add_option("--stop-at-step", ta.stop_at, "stop after this global step");
  tr->add_flag("--eval-ndcg", ta.eval_ndcg, "held-out nDCG@5 at every evaluation point");

  EmbedArgs ea;
  auto* em = app.add_subcommand("embed", "embed every document into a store");
  em->add_option("--checkpoint", ea.checkpoint);
  em->add_option("--corpus", ea.corpus);
  em->add_option("--method", ea.method, "causal or forward_full");
  em->add_option("--budget", ea.budget);

  PruneArgs pa;
  auto* pr = app.add_subcommand("prune", "prune a store");
  pr->add_option("--store", pa.store);
  pr->add_option("--method", pa.method, "random, kmeans, hierarchical or pool1d");
  pr->add_option("--budget", pa.budget);

  SearchArgs sa;
  auto* se = app.add_subcommand("search", "rank stored documents for one query");
  se->add_option("--checkpoint", sa.checkpoint);
  se->add_option("--store", sa.store);
  se->add_option("--corpus", sa.corpus);
  se->add_option("--tokens", sa.tokens, "comma-separated token ids");
  se->add_option("--query-id", sa.query_id);
  se->add_option("--method", sa.method, "query embedding: causal or forward_full");
  se->add_option("-k", sa.k);

  EvalArgs va;
  auto* ev = app.add_subcommand("eval", "evaluate one method and budget");
  ev->add_option("--checkpoint", va.checkpoint);
  ev->add_option("--corpus", va.corpus);
  ev->add_option("--store", va.store, "score a precomputed store instead of embedding");
  ev->add_option("--method", va.method);
  ev->add_option("--budget", va.budget);
  ev->add_option("--split", va.split, "heldout, train or all");

  SweepArgs swa;
  auto* sw = app.add_subcommand("sweep", "test-time scaling over document budgets");
  sw->add_option("--checkpoint", swa.checkpoint);
  sw->add_option("--corpus", swa.corpus);
  sw->add_option("--budgets", swa.budgets);
  sw->add_option("--split", swa.split);

  std::string ablate_corpus;
  auto* ab = app.add_subcommand("ablate", "train and evaluate the loss ablations");
  ab->add_option("--corpus", ablate_corpus);

  GradcheckArgs ga;
  auto* gc = app.add_subcommand("gradcheck", "finite-difference check of the training objective");
  gc->add_option("--target", ga.target, "loss_m, loss_d, loss_q or loss_total");
  gc->add_option("--tol", ga.tol);
  gc->add_option("--fd-step", ga.h, "central difference step");
  gc->add_option("--samples", ga.samples);
  gc->add_option("--seeds", ga.seeds);

  TheoremArgs th;
  auto* t1 = app.add_subcommand("theorem1", "preceding-token coverage: closed form vs Monte Carlo");
  t1->add_option("--nt", th.cov.n_t);
  t1->add_option("--nv", th.cov.n_v);
  t1->add_option("--nq", th.cov.n_q);
  t1->add_option("--nd", th.cov.n_d);
  t1->add_option("--trials", th.cov.trials);
  t1->add_flag("--empirical", th.empirical, "also measure gradient reach on a trained checkpoint");
  t1->add_option("--checkpoint", th.checkpoint);
  t1->add_option("--corpus", th.corpus);

  LatencyArgs la;
  auto* lt = app.add_subcommand("latency", "median T_f / T_a per method");
  lt->add_option("--checkpoint", la.checkpoint);
  lt->add_option("--corpus", la.corpus);
  lt->add_option("--methods", la.methods);
  lt->add_option("--budget", la.budget);
  lt->add_option("--runs", la.runs);
  lt->add_option("--docs", la.docs, "number of corpus documents to time");
  lt->add_option("--synthetic-length", la.synthetic_length, "time pruning alone on a random multi-vector of this length");

  HeatmapArgs ha;
  auto* hm = app.add_subcommand("heatmap", "query/document similarity matrices as CSV");
  hm->add_option("--checkpoint", ha.checkpoint);
  hm->add_option("--corpus", ha.corpus);
  hm->add_option("--query-id", ha.query_id);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 1;
  }

  try {
    if (*gen) return cmd_gen_data(common);
    if (*tr) return cmd_train(common, ta);
    if (*em) return cmd_embed(common, ea);
    if (*pr) return cmd_prune(common, pa);
    if (*se) return cmd_search(common, sa);
    if (*ev) return cmd_eval(common, va);
    if (*sw) return cmd_sweep(common, swa);
    if (*ab) return cmd_ablate(common, ablate_corpus);
    if (*gc) return cmd_gradcheck(common, ga);
    if (*t1) return cmd_theorem1(common, th);
    if (*lt) return cmd_latency(common, la);
    if (*hm) return cmd_heatmap(common, ha);
  } catch (const IoError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  } catch (const fs::filesystem_error& e) {
    std::cerr << "error: IoError: " << e.what() << "\n";
    return 2;
  } catch (const Error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  } catch (const nlohmann::json::exception& e) {
    std::cerr << "error: ConfigError: " << e.what() << "\n";
    return 1;
  }
  return 1;
}
