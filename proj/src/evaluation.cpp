#include "cemb/evaluation.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <numeric>
#include <set>

#include "cemb/error.hpp"
#include "cemb/io.hpp"
#include "cemb/kernels.hpp"

namespace cemb {

namespace {

using Clock = std::chrono::steady_clock;

double ms_since(Clock::time_point t0) {
  return std::chrono::duration<double, std::milli>(Clock::now() - t0).count();
}

kernels::MatrixView view(const MultiVec& mv) { return {mv.tensor().values().data(), mv.length(), mv.dim()}; }

std::string fmt(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.6f", v);
  return buf;
}

}  // namespace

const char* to_string(Method m) {
  switch (m) {
    case Method::causal: return "causal";
    case Method::forward_full: return "forward_full";
    case Method::random: return "random";
    case Method::kmeans: return "kmeans";
    case Method::hierarchical: return "hierarchical";
    case Method::pool1d: return "pool1d";
  }
  return "?";
}

Method parse_method(const std::string& s) {
  if (s == "causal") return Method::causal;
  if (s == "forward_full") return Method::forward_full;
  if (s == "random") return Method::random;
  if (s == "kmeans") return Method::kmeans;
  if (s == "hierarchical") return Method::hierarchical;
  if (s == "pool1d") return Method::pool1d;
  throw SpecError("unknown method '" + s + "'");
}

bool is_pruning(Method m) { return m != Method::causal && m != Method::forward_full; }

PruneMethod prune_method(Method m) {
  switch (m) {
    case Method::random: return PruneMethod::random;
    case Method::kmeans: return PruneMethod::kmeans;
    case Method::hierarchical: return PruneMethod::hierarchical;
    case Method::pool1d: return PruneMethod::pool1d;
    default: throw SpecError(std::string(to_string(m)) + " is not a pruning method");
  }
}

double ndcg_at_k(std::span<const std::uint64_t> ranked, std::uint64_t relevant, std::size_t k) {
  if (k == 0) throw ContractError("k must be >= 1");
  std::set<std::uint64_t> seen;
  for (auto id : ranked)
    if (!seen.insert(id).second) throw RankingError("duplicate document id " + std::to_string(id) + " in ranking");
  for (std::size_t r = 0; r < ranked.size() && r < k; ++r)
    if (ranked[r] == relevant) return 1.0 / std::log2(static_cast<double>(r) + 2.0);
  return 0.0;
}

double recall_at_k(std::span<const std::uint64_t> ranked, std::uint64_t relevant, std::size_t k) {
  for (std::size_t r = 0; r < ranked.size() && r < k; ++r)
    if (ranked[r] == relevant) return 1.0;
  return 0.0;
}

Metrics score_rankings(std::span<const MultiVec> queries, std::span<const std::uint64_t> relevant,
                       std::span<const MultiVec> docs, std::span<const std::uint64_t> doc_ids) {
  if (docs.empty()) throw EvalError("cannot evaluate against an empty corpus");
  if (queries.size() != relevant.size() || docs.size() != doc_ids.size())
    throw ContractError("query/relevance or document/id counts differ");
  for (const auto& d : docs)
    if (d.dim() != queries.front().dim()) throw DimensionError("query and document embedding widths differ");

  std::vector<kernels::MatrixView> qv, dv;
  for (const auto& q : queries) qv.push_back(view(q));
  for (const auto& d : docs) dv.push_back(view(d));
  const auto scores = kernels::omp::score_corpus(qv, dv);

  Metrics m;
  m.n_queries = queries.size();
  const std::size_t nd = docs.size();
  std::vector<std::size_t> order(nd);
  std::vector<std::uint64_t> ranked;
  for (std::size_t qi = 0; qi < queries.size(); ++qi) {
    const double* row = scores.data() + qi * nd;
    std::iota(order.begin(), order.end(), 0);
    const std::size_t top = std::min<std::size_t>(10, nd);
    std::partial_sort(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(top), order.end(),
                      [&](std::size_t a, std::size_t b) {
                        if (row[a] != row[b]) return row[a] > row[b];
                        return doc_ids[a] < doc_ids[b];
                      });
    ranked.clear();
    for (std::size_t r = 0; r < top; ++r) ranked.push_back(doc_ids[order[r]]);
    const double n5 = ndcg_at_k(ranked, relevant[qi], 5);
    m.per_query_ndcg5.push_back(n5);
    m.ndcg_at_5 += n5;
    m.ndcg_at_10 += ndcg_at_k(ranked, relevant[qi], 10);
    m.recall_at_5 += recall_at_k(ranked, relevant[qi], 5);
  }
  if (m.n_queries > 0) {
    const double n = static_cast<double>(m.n_queries);
    m.ndcg_at_5 /= n;
    m.ndcg_at_10 /= n;
    m.recall_at_5 /= n;
  }
  return m;
}

double median(std::vector<double> v) {
  if (v.empty()) return 0.0;
  std::sort(v.begin(), v.end());
  const std::size_t n = v.size();
  return n % 2 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

EmbeddedDocs embed_documents(const ModelParams& params, std::span<const CorpusItem> docs, Method method,
                             std::size_t budget, std::uint64_t seed) {
  EmbeddedDocs out;
  out.docs.reserve(docs.size());
  for (const auto& d : docs) {
    if (method == Method::causal) {
      GenTiming t;
      out.docs.push_back(generate_latents(params, d.tokens, budget, true, &t));
      out.t_f_ms.push_back(t.context_ms);
      out.t_a_ms.push_back(std::max(0.0, t.total_ms - t.context_ms));
      continue;
    }
    const auto t0 = Clock::now();
    MultiVec full = forward_embed(params, d.tokens);
    out.t_f_ms.push_back(ms_since(t0));
    if (method == Method::forward_full) {
      out.docs.push_back(std::move(full));
      out.t_a_ms.push_back(0.0);
      continue;
    }
    PruneSpec spec{prune_method(method), budget, derive_seed(seed, d.doc_id)};
    auto pr = prune_timed(full, spec);
    out.docs.push_back(std::move(pr.vectors));
    out.t_a_ms.push_back(pr.t_a_ms);
  }
  return out;
}

std::vector<MultiVec> embed_queries(const ModelParams& params, std::span<const QueryItem> queries, Method method) {
  std::vector<MultiVec> out;
  out.reserve(queries.size());
  for (const auto& q : queries)
    out.push_back(method == Method::causal ? generate_latents(params, q.tokens, params.config.n_q)
                                           : forward_embed(params, q.tokens));
  return out;
}

namespace {

std::size_t resolve_budget(const ModelParams& params, const Corpus& corpus, const EvalRequest& r) {
  if (r.budget > 0) return r.budget;
  if (r.method == Method::causal) return params.config.n_d;
  return corpus.config.doc_len;
}

RunReport make_report(const EvalRequest& r, std::size_t budget, const Metrics& m, double tf, double ta) {
  RunReport rep;
  rep.config_hash = r.config_hash;
  rep.method = to_string(r.method);
  rep.budget = budget;
  rep.ndcg_at_5 = m.ndcg_at_5;
  rep.ndcg_at_10 = m.ndcg_at_10;
  rep.recall_at_5 = m.recall_at_5;
  rep.t_f_ms = tf;
  rep.t_a_ms = ta;
  rep.n_queries = m.n_queries;
  rep.seed = r.seed;
  return rep;
}

std::vector<std::uint64_t> relevant_ids(std::span<const QueryItem> queries) {
  std::vector<std::uint64_t> out;
  for (const auto& q : queries) out.push_back(q.relevant_doc);
  return out;
}

std::vector<std::uint64_t> doc_ids(std::span<const CorpusItem> docs) {
  std::vector<std::uint64_t> out;
  for (const auto& d : docs) out.push_back(d.doc_id);
  return out;
}

}  // namespace

RunReport evaluate(const ModelParams& params, const Corpus& corpus, std::span<const QueryItem> queries,
                   const EvalRequest& request) {
  if (corpus.docs.empty()) throw EvalError("cannot evaluate against an empty corpus");
  if (queries.empty()) throw EvalError("no queries to evaluate");
  const std::size_t budget = resolve_budget(params, corpus, request);
  if (budget == 0) throw SpecError("budget must be >= 1");
  const auto docs = embed_documents(params, corpus.docs, request.method, budget, request.seed);
  const auto q = embed_queries(params, queries, request.method);
  const auto m = score_rankings(q, relevant_ids(queries), docs.docs, doc_ids(corpus.docs));
  return make_report(request, budget, m, median(docs.t_f_ms), median(docs.t_a_ms));
}

RunReport evaluate_embedded(const ModelParams& params, std::span<const QueryItem> queries,
                            std::span<const MultiVec> docs, std::span<const std::uint64_t> ids,
                            const EvalRequest& request) {
  if (docs.empty()) throw EvalError("cannot evaluate against an empty store");
  if (queries.empty()) throw EvalError("no queries to evaluate");
  const auto q = embed_queries(params, queries, request.method);
  const auto m = score_rankings(q, relevant_ids(queries), docs, ids);
  std::size_t budget = request.budget;
  if (budget == 0)
    for (const auto& d : docs) budget = std::max(budget, d.length());
  return make_report(request, budget, m, 0.0, 0.0);
}

std::vector<RunReport> scaling_sweep(const ModelParams& params, const Corpus& corpus,
                                     std::span<const QueryItem> queries, std::span<const std::size_t> budgets,
                                     std::uint64_t seed, const std::string& config_hash) {
  if (budgets.empty()) throw ContractError("no budgets given");
  if (!std::is_sorted(budgets.begin(), budgets.end()) || budgets.front() == 0)
    throw ContractError("budgets must be positive and ascending");
  if (budgets.back() > params.config.n_d)
    throw CapacityError("budget " + std::to_string(budgets.back()) + " exceeds trained n_d " +
                        std::to_string(params.config.n_d));
  if (corpus.docs.empty()) throw EvalError("cannot evaluate against an empty corpus");

  const std::size_t max_budget = budgets.back();
  std::vector<MultiVec> full;
  std::vector<double> tf;
  std::vector<std::vector<double>> steps;
  for (const auto& d : corpus.docs) {
    GenTiming t;
    full.push_back(generate_latents(params, d.tokens, max_budget, true, &t));
    tf.push_back(t.context_ms);
    steps.push_back(t.step_ms);
  }
  const auto q = embed_queries(params, queries, Method::causal);
  const auto rel = relevant_ids(queries);
  const auto ids = doc_ids(corpus.docs);

  std::vector<RunReport> out;
  for (std::size_t b : budgets) {
    std::vector<MultiVec> docs;
    std::vector<double> ta;
    for (std::size_t i = 0; i < full.size(); ++i) {
      docs.push_back(full[i].prefix(b));
      ta.push_back(std::max(0.0, steps[i][b - 1] - tf[i]));
    }
    const auto m = score_rankings(q, rel, docs, ids);
    EvalRequest r{Method::causal, b, seed, config_hash};
    out.push_back(make_report(r, b, m, median(tf), median(ta)));
  }
  return out;
}

double spearman(std::span<const double> x, std::span<const double> y) {
  if (x.size() != y.size() || x.size() < 2) throw ContractError("spearman needs two equal-length series of >= 2");
  auto ranks = [](std::span<const double> v) {
    std::vector<std::size_t> idx(v.size());
    std::iota(idx.begin(), idx.end(), 0);
    std::sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) { return v[a] < v[b]; });
    std::vector<double> r(v.size());
    for (std::size_t i = 0; i < idx.size();) {
      std::size_t j = i;
      while (j + 1 < idx.size() && v[idx[j + 1]] == v[idx[i]]) ++j;
      const double avg = 0.5 * static_cast<double>(i + j) + 1.0;
      for (std::size_t k = i; k <= j; ++k) r[idx[k]] = avg;
      i = j + 1;
    }
    return r;
  };
  const auto rx = ranks(x), ry = ranks(y);
  const double n = static_cast<double>(x.size());
  const double mx = std::accumulate(rx.begin(), rx.end(), 0.0) / n;
  const double my = std::accumulate(ry.begin(), ry.end(), 0.0) / n;
  double sxy = 0.0, sxx = 0.0, syy = 0.0;
  for (std::size_t i = 0; i < rx.size(); ++i) {
    sxy += (rx[i] - mx) * (ry[i] - my);
    sxx += (rx[i] - mx) * (rx[i] - mx);
    syy += (ry[i] - my) * (ry[i] - my);
  }
  if (sxx == 0.0 || syy == 0.0) return 0.0;
  return sxy / std::sqrt(sxx * syy);
}

std::vector<AblationVariant> default_ablation_variants(const LossWeights& base) {
  std::vector<AblationVariant> v;
  v.push_back({"full", base});
  auto w = base;
  w.lambda_d = 0.0;
  v.push_back({"w/o L_d", w});
  w = base;
  w.lambda_q = 0.0;
  v.push_back({"w/o L_q", w});
  w = base;
  w.lambda_m = 0.0;
  v.push_back({"w/o L_m", w});
  w = base;
  w.ld_variant = LdVariant::relu_clamped;
  v.push_back({"w/ ReLU(dS)", w});
  return v;
}

std::vector<AblationRow> ablation_run(const Corpus& corpus, const ModelConfig& model, const TrainConfig& train_cfg,
                                      std::span<const AblationVariant> variants) {
  if (variants.empty()) throw ContractError("no ablation variants");
  const auto heldout = corpus.heldout_queries();
  std::vector<AblationRow> rows;
  for (const auto& v : variants) {
    TrainConfig t = train_cfg;
    t.weights = v.weights;
    t.checkpoint_path.clear();
    const auto res = train(t, model, corpus);
    EvalRequest req{Method::causal, model.n_d, train_cfg.seed, io::config_hash(nlohmann::json(t))};
    AblationRow row;
    row.variant = v.name;
    row.report = evaluate(res.state.params, corpus, heldout, req);
    row.report.label = v.name;
    rows.push_back(std::move(row));
  }
  const double full = rows.front().report.ndcg_at_5;
  for (auto& r : rows) r.delta = full > 0.0 ? (r.report.ndcg_at_5 - full) / full : 0.0;
  return rows;
}

std::vector<LatencyRow> latency_harness(const ModelParams& params, std::span<const CorpusItem> docs,
                                        std::span<const Method> methods, std::size_t budget, std::size_t runs) {
  if (runs == 0) throw ContractError("runs must be >= 1");
  const int saved = kernels::max_threads();
  kernels::set_max_threads(1);
  std::vector<std::vector<double>> tf(methods.size()), ta(methods.size());
  std::vector<double> shared_tf;
  for (std::size_t r = 0; r < runs; ++r) {
    for (const auto& d : docs) {
      const auto t0 = Clock::now();
      const MultiVec full = forward_embed(params, d.tokens);
      const double forward_ms = ms_since(t0);
      for (std::size_t m = 0; m < methods.size(); ++m) {
        if (methods[m] == Method::causal) {
          GenTiming t;
          generate_latents(params, d.tokens, budget, true, &t);
          tf[m].push_back(t.context_ms);
          ta[m].push_back(std::max(0.0, t.total_ms - t.context_ms));
        } else if (methods[m] == Method::forward_full) {
          tf[m].push_back(forward_ms);
          ta[m].push_back(0.0);
        } else {
          PruneSpec spec{prune_method(methods[m]), budget, derive_seed(r, d.doc_id)};
          tf[m].push_back(forward_ms);
          ta[m].push_back(prune_timed(full, spec).t_a_ms);
        }
      }
    }
  }
  kernels::set_max_threads(saved);
  std::vector<LatencyRow> rows;
  for (std::size_t m = 0; m < methods.size(); ++m) {
    LatencyRow row{to_string(methods[m]), budget, median(tf[m]), median(ta[m]), 0.0};
    row.total_ms = row.t_f_ms + row.t_a_ms;
    rows.push_back(row);
  }
  return rows;
}

std::vector<LatencyRow> adaptation_latency(const MultiVec& mv, std::span<const PruneMethod> methods,
                                           std::size_t budget, std::size_t runs, std::uint64_t seed) {
  if (runs == 0) throw ContractError("runs must be >= 1");
  std::vector<LatencyRow> rows;
  for (PruneMethod pm : methods) {
    std::vector<double> times;
    for (std::size_t r = 0; r < runs; ++r) times.push_back(prune_timed(mv, {pm, budget, derive_seed(seed, r)}).t_a_ms);
    LatencyRow row{to_string(pm), budget, 0.0, median(times), 0.0};
    row.total_ms = row.t_a_ms;
    rows.push_back(row);
  }
  return rows;
}

void write_reports_csv(const std::filesystem::path& path, std::span<const RunReport> reports) {
  std::string s = "method,budget,ndcg5,ndcg10,recall5,tf_ms,ta_ms\n";
  for (const auto& r : reports)
    s += r.method + "," + std::to_string(r.budget) + "," + fmt(r.ndcg_at_5) + "," + fmt(r.ndcg_at_10) + "," +
         fmt(r.recall_at_5) + "," + fmt(r.t_f_ms) + "," + fmt(r.t_a_ms) + "\n";
  io::write_text(path, s);
}

void write_ablation_csv(const std::filesystem::path& path, std::span<const AblationRow> rows) {
  std::string s = "variant,method,budget,ndcg5,ndcg10,recall5,tf_ms,ta_ms,delta\n";
  for (const auto& row : rows) {
    const auto& r = row.report;
    s += row.variant + "," + r.method + "," + std::to_string(r.budget) + "," + fmt(r.ndcg_at_5) + "," +
         fmt(r.ndcg_at_10) + "," + fmt(r.recall_at_5) + "," + fmt(r.t_f_ms) + "," + fmt(r.t_a_ms) + "," +
         fmt(row.delta) + "\n";
  }
  io::write_text(path, s);
}

void write_latency_csv(const std::filesystem::path& path, std::span<const LatencyRow> rows) {
  std::string s = "method,budget,tf_ms,ta_ms,total_ms\n";
  for (const auto& r : rows)
    s += r.method + "," + std::to_string(r.budget) + "," + fmt(r.t_f_ms) + "," + fmt(r.t_a_ms) + "," +
         fmt(r.total_ms) + "\n";
  io::write_text(path, s);
}

}  // namespace cemb
