#include "cemb/losses.hpp"

#include <cmath>
#include <limits>
#include <string>

#include "cemb/error.hpp"
#include "cemb/io.hpp"
#include "cemb/scoring.hpp"

namespace cemb {

const char* to_string(LdVariant v) { return v == LdVariant::telescoping ? "telescoping" : "relu_clamped"; }

LdVariant parse_ld_variant(const std::string& s) {
  if (s == "telescoping") return LdVariant::telescoping;
  if (s == "relu_clamped") return LdVariant::relu_clamped;
  throw ConfigError("unknown ld_variant '" + s + "' (expected telescoping or relu_clamped)");
}

void LossWeights::validate() const {
  auto finite_nonneg = [](double v) { return std::isfinite(v) && v >= 0.0; };
  if (!finite_nonneg(lambda_m) || !finite_nonneg(lambda_d) || !finite_nonneg(lambda_q))
    throw ConfigError("loss weights must be finite and >= 0");
  if (!(temperature > 0.0) || !std::isfinite(temperature)) throw ConfigError("temperature must be > 0");
}

void to_json(nlohmann::json& j, const LossWeights& w) {
  j = {{"lambda_m", w.lambda_m},
       {"lambda_d", w.lambda_d},
       {"lambda_q", w.lambda_q},
       {"temperature", w.temperature},
       {"ld_variant", to_string(w.ld_variant)}};
}

void from_json(const nlohmann::json& j, LossWeights& w) {
  io::reject_unknown_keys(j, {"lambda_m", "lambda_d", "lambda_q", "temperature", "ld_variant"}, "loss config");
  if (j.contains("lambda_m")) w.lambda_m = j.at("lambda_m").get<double>();
  if (j.contains("lambda_d")) w.lambda_d = j.at("lambda_d").get<double>();
  if (j.contains("lambda_q")) w.lambda_q = j.at("lambda_q").get<double>();
  if (j.contains("temperature")) w.temperature = j.at("temperature").get<double>();
  if (j.contains("ld_variant")) w.ld_variant = parse_ld_variant(j.at("ld_variant").get<std::string>());
  w.validate();
}

std::size_t hardest_negative(std::span<const double> row, std::size_t k) {
  if (row.size() < 2) throw BatchError("a hardest negative needs at least two columns");
  if (k >= row.size()) throw ContractError("row index out of range");
  std::size_t best = k == 0 ? 1 : 0;
  for (std::size_t l = best + 1; l < row.size(); ++l)
    if (l != k && row[l] > row[best]) best = l;
  return best;
}

LossM loss_m(Var s, double temperature) {
  const Tensor& m = s.value();
  if (m.rank() != 2 || m.rows() != m.cols()) throw DimensionError("score matrix must be square, got " + m.shape_string());
  const std::size_t b = m.rows();
  if (b < 2) throw BatchError("batch size " + std::to_string(b) + " < 2: no in-batch negative exists");
  if (!(temperature > 0.0)) throw ContractError("temperature must be > 0");

  BatchScores sc;
  sc.b = b;
  std::vector<std::size_t> pos_idx(b), neg_idx(b);
  for (std::size_t k = 0; k < b; ++k) {
    const std::size_t l = hardest_negative(m.row(k), k);
    sc.neg_index.push_back(l);
    sc.s_pos.push_back(m(k, k));
    sc.s_neg.push_back(m(k, l));
    pos_idx[k] = k * b + k;
    neg_idx[k] = k * b + l;
  }
  const Var margin = scale(sub(gather_elements(s, neg_idx), gather_elements(s, pos_idx)), 1.0 / temperature);
  return {mean(softplus(margin)), std::move(sc)};
}

namespace {

// Score against the full document minus the score against its first row.
Var prefix_gain(Var q, Var d) { return sub(maxsim(q, d), maxsim(q, slice_rows(d, 0, 1))); }

}  // namespace

Var loss_d(Var q, Var d_pos, Var d_neg, LdVariant variant) {
  if (d_pos.rows() != d_neg.rows())
    throw DimensionError("positive and negative documents differ in length: " + std::to_string(d_pos.rows()) +
                         " vs " + std::to_string(d_neg.rows()));
  if (q.cols() != d_pos.cols() || q.cols() != d_neg.cols()) throw DimensionError("embedding width mismatch in loss_d");
  const Var gain_pos = prefix_gain(q, d_pos);
  const Var gain_neg = prefix_gain(q, d_neg);
  const Var diff = sub(gain_neg, gain_pos);
  return variant == LdVariant::telescoping ? diff : relu(diff);
}

LossQ loss_q(Var q) {
  const std::size_t n = q.rows();
  Graph& g = *q.graph;
  if (n < 2) return {g.constant(Tensor::scalar(0.0)), true};
  const Var qn = l2_normalize(q);
  const Var cos = matmul(qn, transpose(qn));
  Tensor mask = Tensor::matrix(n, n, 1.0);
  for (std::size_t i = 0; i < n; ++i) mask(i, i) = 0.0;
  const Var off = mul(square(cos), g.constant(std::move(mask)));
  return {scale(sum(off), 1.0 / static_cast<double>(n * (n - 1))), false};
}

Tensor grad_lq_analytic(const Tensor& q) {
  const std::size_t n = q.rows(), d = q.cols();
  if (n < 2) throw ContractError("grad_lq_analytic needs at least two rows");
  std::vector<double> norm(n);
  for (std::size_t i = 0; i < n; ++i) {
    double s = 0.0;
    for (double v : q.row(i)) s += v * v;
    norm[i] = std::sqrt(s);
    if (norm[i] <= 1e-12) throw DegenerateInputError("row " + std::to_string(i) + " has zero norm");
  }
  Tensor c = Tensor::matrix(n, n);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < n; ++j) {
      double s = 0.0;
      for (std::size_t k = 0; k < d; ++k) s += q(i, k) * q(j, k);
      c(i, j) = s / (norm[i] * norm[j]);
    }
  // Every unordered pair appears twice in the ordered-pair sum, hence 4/Z.
  const double coef = 4.0 / static_cast<double>(n * (n - 1));
  Tensor g = Tensor::matrix(n, d);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < n; ++j) {
      if (j == i) continue;
      for (std::size_t k = 0; k < d; ++k)
        g(i, k) += coef * c(i, j) * (q(j, k) / (norm[i] * norm[j]) - c(i, j) * q(i, k) / (norm[i] * norm[i]));
    }
  return g;
}

Var score_matrix(std::span<const Var> queries, std::span<const Var> docs) {
  if (queries.size() != docs.size() || queries.empty())
    throw BatchError("score matrix needs equally many queries and documents");
  const std::size_t b = queries.size();
  std::vector<Var> cells;
  cells.reserve(b * b);
  for (std::size_t k = 0; k < b; ++k)
    for (std::size_t l = 0; l < b; ++l) cells.push_back(maxsim(queries[k], docs[l]));
  return stack(cells, b, b);
}

LossTotal loss_total(std::span<const Var> queries, std::span<const Var> docs, const LossWeights& w) {
  w.validate();
  const std::size_t b = queries.size();
  LossTotal out;
  auto lm = loss_m(score_matrix(queries, docs), w.temperature);
  out.l_m = lm.loss;
  out.scores = std::move(lm.scores);

  std::vector<Var> ld_terms, lq_terms;
  for (std::size_t k = 0; k < b; ++k) {
    ld_terms.push_back(loss_d(queries[k], docs[k], docs[out.scores.neg_index[k]], w.ld_variant));
    lq_terms.push_back(loss_q(queries[k]).loss);
  }
  out.l_d = mean(stack(ld_terms, b, 1));
  out.l_q = mean(stack(lq_terms, b, 1));
  out.total = add(add(scale(out.l_m, w.lambda_m), scale(out.l_d, w.lambda_d)), scale(out.l_q, w.lambda_q));
  out.breakdown = {out.l_m.item(), out.l_d.item(), out.l_q.item(), out.total.item()};
  return out;
}

}  // namespace cemb
