#include "cemb/analysis.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <limits>
#include <random>

#include "cemb/error.hpp"
#include "cemb/io.hpp"
#include "cemb/losses.hpp"
#include "cemb/pruning.hpp"

namespace cemb {

void CoverageConfig::validate() const {
  if (n_t == 0 || n_q == 0 || n_d == 0 || trials == 0)
    throw ContractError("coverage sizes and trials must be positive (n_v may be 0)");
}

std::string CoverageConfig::label() const {
  return "(" + std::to_string(n_t) + "," + std::to_string(n_v) + "," + std::to_string(n_q) + "," +
         std::to_string(n_d) + ")";
}

ClosedForm coverage_closed_form(const CoverageConfig& cfg) {
  cfg.validate();
  ClosedForm out;
  out.forward = static_cast<double>(cfg.n_t) * static_cast<double>(cfg.n_v) / 2.0;
  out.causal = static_cast<double>(cfg.n_q) * (static_cast<double>(cfg.n_v) + (static_cast<double>(cfg.n_d) - 1.0) / 2.0);
  out.ratio = out.forward > 0.0 ? out.causal / out.forward : std::numeric_limits<double>::infinity();
  return out;
}

namespace {

struct ShardSums {
  double f_sum = 0.0, f_sq = 0.0, c_sum = 0.0, c_sq = 0.0;
};

ShardSums run_shard(const CoverageConfig& cfg, std::size_t shard, std::size_t trials) {
  std::mt19937_64 rng(derive_seed(cfg.seed, shard));
  std::uniform_int_distribution<std::size_t> fwd(0, cfg.n_v);
  std::uniform_int_distribution<std::size_t> cau(cfg.n_v + 1, cfg.n_v + cfg.n_d);
  ShardSums s;
  for (std::size_t t = 0; t < trials; ++t) {
    double f = 0.0, c = 0.0;
    for (std::size_t i = 0; i < cfg.n_t; ++i) f += static_cast<double>(fwd(rng));
    for (std::size_t i = 0; i < cfg.n_q; ++i) c += static_cast<double>(cau(rng) - 1);
    s.f_sum += f;
    s.f_sq += f * f;
    s.c_sum += c;
    s.c_sq += c * c;
  }
  return s;
}

double stderr_of(double sum, double sq, double n) {
  const double var = std::max(0.0, (sq - sum * sum / n) / (n - 1.0));
  return std::sqrt(var / n);
}

}  // namespace

MonteCarlo coverage_monte_carlo(const CoverageConfig& cfg, bool parallel) {
  cfg.validate();
  if (cfg.trials < 1000) throw ContractError("Monte Carlo needs at least 1000 trials");
  std::vector<std::size_t> counts(kMonteCarloShards, cfg.trials / kMonteCarloShards);
  for (std::size_t i = 0; i < cfg.trials % kMonteCarloShards; ++i) ++counts[i];
  std::vector<ShardSums> sums(kMonteCarloShards);
  const auto shards = static_cast<std::int64_t>(kMonteCarloShards);
#pragma omp parallel for schedule(static) if (parallel)
  for (std::int64_t s = 0; s < shards; ++s) sums[s] = run_shard(cfg, static_cast<std::size_t>(s), counts[s]);

  ShardSums total;
  for (const auto& s : sums) {
    total.f_sum += s.f_sum;
    total.f_sq += s.f_sq;
    total.c_sum += s.c_sum;
    total.c_sq += s.c_sq;
  }
  const double n = static_cast<double>(cfg.trials);
  return {total.f_sum / n, total.c_sum / n, stderr_of(total.f_sum, total.f_sq, n), stderr_of(total.c_sum, total.c_sq, n)};
}

CoverageCheck check_coverage(const CoverageConfig& cfg, double sigmas) {
  CoverageCheck c;
  c.config = cfg;
  c.analytic = coverage_closed_form(cfg);
  c.simulated = coverage_monte_carlo(cfg);
  c.forward_ok = std::abs(c.simulated.forward_mean - c.analytic.forward) <= sigmas * c.simulated.forward_stderr;
  c.causal_ok = std::abs(c.simulated.causal_mean - c.analytic.causal) <= sigmas * c.simulated.causal_stderr;
  return c;
}

void write_coverage_csv(const std::filesystem::path& path, std::span<const CoverageCheck> checks) {
  std::string s = "config,quantity,analytic,simulated,stderr,pass\n";
  char buf[256];
  for (const auto& c : checks) {
    std::snprintf(buf, sizeof buf, "\"%s\",forward,%.6f,%.6f,%.6f,%s\n", c.config.label().c_str(), c.analytic.forward,
                  c.simulated.forward_mean, c.simulated.forward_stderr, c.forward_ok ? "pass" : "fail");
    s += buf;
    std::snprintf(buf, sizeof buf, "\"%s\",causal,%.6f,%.6f,%.6f,%s\n", c.config.label().c_str(), c.analytic.causal,
                  c.simulated.causal_mean, c.simulated.causal_stderr, c.causal_ok ? "pass" : "fail");
    s += buf;
  }
  io::write_text(path, s);
}

namespace {

std::size_t nonzero_rows(const std::vector<double>& grad, std::size_t rows, std::size_t cols, std::size_t begin,
                         std::size_t count) {
  std::size_t n = 0;
  for (std::size_t r = begin; r < begin + count && r < rows; ++r) {
    bool any = false;
    for (std::size_t c = 0; c < cols && !any; ++c) any = std::abs(grad[r * cols + c]) > kNonzeroGradient;
    n += any;
  }
  return n;
}

bool any_nonzero(const std::vector<double>& grad) {
  for (double v : grad)
    if (std::abs(v) > kNonzeroGradient) return true;
  return false;
}

}  // namespace

EmpiricalCoverage coverage_empirical(const ModelParams& params, std::span<const TrainPair> batch, double temperature) {
  if (batch.size() < 2) throw BatchError("coverage needs a batch of at least two pairs");
  EmpiricalCoverage out;
  const std::size_t b = batch.size();

  {
    Graph g;
    std::vector<Var> queries, docs;
    for (const auto& p : batch) {
      queries.push_back(g.constant(forward_embed(params, p.query->tokens).tensor()));
      docs.push_back(g.leaf(forward_embed(params, p.doc->tokens).tensor(), true));
    }
    auto lm = loss_m(score_matrix(queries, docs), temperature);
    g.backward(lm.loss);
    for (const auto& d : docs) {
      const auto& grad = d.grad();
      out.forward_per_doc.push_back(grad.empty() ? 0 : nonzero_rows(grad, d.rows(), d.cols(), 0, d.rows()));
    }
  }

  {
    ModelParams local = params;
    Graph g;
    const auto bound = BoundParams::bind(g, local, true);
    std::vector<Var> queries, docs;
    std::vector<Generation> doc_gen;
    for (const auto& p : batch) {
      queries.push_back(generate_latents(bound, p.query->tokens, params.config.n_q).latents);
      doc_gen.push_back(generate_latents(bound, p.doc->tokens, params.config.n_d));
      docs.push_back(doc_gen.back().latents);
    }
    auto lm = loss_m(score_matrix(queries, docs), temperature);
    g.backward(lm.loss);
    for (std::size_t k = 0; k < b; ++k) {
      std::size_t touched = 0;
      for (const auto& h : doc_gen[k].step_hidden) touched += any_nonzero(h.grad());
      out.causal_per_doc.push_back(touched);
      const auto row = row_max(matmul(queries[k], transpose(docs[k])));
      out.causal_last_selected.push_back(*std::max_element(row.argmax.begin(), row.argmax.end()));
    }
  }

  double f = 0.0, c = 0.0;
  for (std::size_t k = 0; k < b; ++k) {
    f += static_cast<double>(out.forward_per_doc[k]);
    c += static_cast<double>(out.causal_per_doc[k]);
  }
  out.forward_touched = f / static_cast<double>(b);
  out.causal_touched = c / static_cast<double>(b);
  out.ratio = out.forward_touched > 0.0 ? out.causal_touched / out.forward_touched
                                        : std::numeric_limits<double>::infinity();
  return out;
}

void write_empirical_csv(const std::filesystem::path& path, const EmpiricalCoverage& cov) {
  std::string s = "doc,forward_touched,causal_touched,causal_last_selected\n";
  for (std::size_t k = 0; k < cov.forward_per_doc.size(); ++k)
    s += std::to_string(k) + "," + std::to_string(cov.forward_per_doc[k]) + "," + std::to_string(cov.causal_per_doc[k]) +
         "," + std::to_string(cov.causal_last_selected[k]) + "\n";
  char buf[128];
  std::snprintf(buf, sizeof buf, "mean,%.6f,%.6f,\n", cov.forward_touched, cov.causal_touched);
  s += buf;
  io::write_text(path, s);
}

}  // namespace cemb
