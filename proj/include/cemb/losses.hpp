#pragma once

#include <cstddef>
#include <span>
#include <vector>

#include "json.hpp"

#include "cemb/autodiff.hpp"
#include "cemb/multivec.hpp"

namespace cemb {

enum class LdVariant { telescoping, relu_clamped };

const char* to_string(LdVariant v);
LdVariant parse_ld_variant(const std::string& s);

struct LossWeights {
  double lambda_m = 1.0;
  double lambda_d = 0.1;
  double lambda_q = 0.1;
  double temperature = 1.0;
  LdVariant ld_variant = LdVariant::telescoping;

  void validate() const;
};

void to_json(nlohmann::json& j, const LossWeights& w);
void from_json(const nlohmann::json& j, LossWeights& w);

struct BatchScores {
  std::vector<double> s_pos;
  std::vector<double> s_neg;
  std::vector<std::size_t> neg_index;
  std::size_t b = 0;
};

// Highest off-diagonal entry of row k; ties go to the lowest index.
std::size_t hardest_negative(std::span<const double> row, std::size_t k);

struct LossM {
  Var loss;
  BatchScores scores;
};

// Mean softplus of the temperature-scaled margin between each query's
// hardest in-batch negative and its positive (the diagonal).
LossM loss_m(Var score_matrix, double temperature = 1.0);

// Score gained by document rows 2..N over the first row, rewarded on the
// positive and penalized on the negative. relu_clamped returns
// relu(gain_neg - gain_pos) instead of the signed difference.
Var loss_d(Var q, Var d_pos, Var d_neg, LdVariant variant = LdVariant::telescoping);

struct LossQ {
  Var loss;
  bool degenerate = false;  // fewer than two rows: no pairs, loss is 0
};

// Mean squared cosine similarity over ordered pairs of distinct rows.
LossQ loss_q(Var q);

// Closed-form gradient of loss_q with respect to the rows of q.
Tensor grad_lq_analytic(const Tensor& q);

struct LossBreakdown {
  double l_m = 0.0;
  double l_d = 0.0;
  double l_q = 0.0;
  double total = 0.0;
};

struct LossTotal {
  Var total;
  Var l_m, l_d, l_q;
  LossBreakdown breakdown;
  BatchScores scores;
};

// b x b late-interaction score matrix, entry (k, l) = S(queries[k], docs[l]).
Var score_matrix(std::span<const Var> queries, std::span<const Var> docs);

// Weighted combination over a batch of aligned (query, positive document)
// latents. L_d uses each query's hardest negative from L_m; L_d and L_q are
// averaged over the batch.
LossTotal loss_total(std::span<const Var> queries, std::span<const Var> docs, const LossWeights& weights);

}  // namespace cemb
