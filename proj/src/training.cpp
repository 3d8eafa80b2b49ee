#include "cemb/training.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>
#include <random>
#include <set>
#include <string>

#include "cemb/error.hpp"
#include "cemb/io.hpp"

namespace cemb {

void TrainConfig::validate() const {
  if (batch_size < 2) throw ConfigError("batch_size must be >= 2 (a hardest negative needs another document)");
  if (epochs == 0) throw ConfigError("epochs must be >= 1");
  if (!(learning_rate > 0.0) || !std::isfinite(learning_rate)) throw ConfigError("learning_rate must be > 0");
  if (!(beta1 >= 0.0 && beta1 < 1.0) || !(beta2 >= 0.0 && beta2 < 1.0)) throw ConfigError("Adam betas must lie in [0, 1)");
  if (!(adam_eps > 0.0)) throw ConfigError("adam_eps must be > 0");
  if (!(max_grad_norm >= 0.0)) throw ConfigError("max_grad_norm must be >= 0");
  weights.validate();
}

void to_json(nlohmann::json& j, const TrainConfig& c) {
  j = {{"batch_size", c.batch_size},       {"epochs", c.epochs},
       {"learning_rate", c.learning_rate}, {"warmup_steps", c.warmup_steps},
       {"seed", c.seed},
       {"eval_every", c.eval_every},       {"eval_batches", c.eval_batches},
       {"checkpoint_path", c.checkpoint_path}, {"max_grad_norm", c.max_grad_norm},
       {"beta1", c.beta1},                 {"beta2", c.beta2},
       {"adam_eps", c.adam_eps}};
}

void from_json(const nlohmann::json& j, TrainConfig& c) {
  io::reject_unknown_keys(j,
                          {"batch_size", "epochs", "learning_rate", "warmup_steps", "seed", "eval_every", "eval_batches",
                           "checkpoint_path", "max_grad_norm", "beta1", "beta2", "adam_eps"},
                          "train config");
  auto get = [&](const char* key, auto& field) {
    if (j.contains(key)) j.at(key).get_to(field);
  };
  get("batch_size", c.batch_size);
  get("epochs", c.epochs);
  get("learning_rate", c.learning_rate);
  get("warmup_steps", c.warmup_steps);
  get("seed", c.seed);
  get("eval_every", c.eval_every);
  get("eval_batches", c.eval_batches);
  get("checkpoint_path", c.checkpoint_path);
  get("max_grad_norm", c.max_grad_norm);
  get("beta1", c.beta1);
  get("beta2", c.beta2);
  get("adam_eps", c.adam_eps);
}

TrainState init_train_state(const ModelConfig& model, std::uint64_t seed) {
  TrainState s;
  s.params = init_params(model, seed);
  const std::size_t n = s.params.parameter_count();
  s.adam.m.assign(n, 0.0);
  s.adam.v.assign(n, 0.0);
  return s;
}

namespace {

std::string describe_batch(std::span<const TrainPair> batch) {
  std::string s = "batch (query_id->doc_id):";
  for (const auto& p : batch) s += " " + std::to_string(p.query->query_id) + "->" + std::to_string(p.doc->doc_id);
  return s;
}

LossTotal build_loss(Graph& g, const BoundParams& p, std::span<const TrainPair> batch, const LossWeights& w) {
  (void)g;
  const ModelConfig& mc = *p.config;
  std::vector<Var> queries, docs;
  queries.reserve(batch.size());
  docs.reserve(batch.size());
  for (const auto& pair : batch) {
    queries.push_back(generate_latents(p, pair.query->tokens, mc.n_q).latents);
    docs.push_back(generate_latents(p, pair.doc->tokens, mc.n_d).latents);
  }
  return loss_total(queries, docs, w);
}

void check_batch(std::span<const TrainPair> batch) {
  if (batch.size() < 2) throw BatchError("batch of " + std::to_string(batch.size()) + " pairs; need >= 2");
  std::set<std::uint64_t> seen;
  for (const auto& p : batch) {
    if (!p.query || !p.doc) throw BatchError("batch contains an empty pair");
    if (p.query->relevant_doc != p.doc->doc_id) throw BatchError("pair is not aligned with its relevant document");
    if (!seen.insert(p.doc->doc_id).second)
      throw BatchError("document " + std::to_string(p.doc->doc_id) + " appears twice in a batch");
  }
}

double norm_of(const std::vector<double>& g) {
  double s = 0.0;
  for (double v : g) s += v * v;
  return std::sqrt(s);
}

}  // namespace

Var step_objective(Graph& g, const BoundParams& p, std::span<const TrainPair> batch, const LossWeights& weights) {
  return build_loss(g, p, batch, weights).total;
}

LossBreakdown batch_loss(const ModelParams& params, std::span<const TrainPair> batch, const LossWeights& weights) {
  check_batch(batch);
  Graph g;
  const auto p = BoundParams::bind(g, params);
  return build_loss(g, p, batch, weights).breakdown;
}

StepResult train_step(TrainState& state, std::span<const TrainPair> batch, const TrainConfig& cfg) {
  check_batch(batch);
  auto& params = state.params;
  params.zero_grad();
  StepResult out;
  {
    Graph g;
    const auto p = BoundParams::bind(g, params, true);
    LossTotal lt;
    try {
      lt = build_loss(g, p, batch, cfg.weights);
      if (!std::isfinite(lt.breakdown.total)) throw NumericError("loss is not finite");
      g.backward(lt.total);
    } catch (const NumericError& e) {
      throw NumericError(std::string(e.what()) + " at step " + std::to_string(state.step) + "; " +
                         describe_batch(batch));
    }
    out.losses = lt.breakdown;
    out.scores = std::move(lt.scores);
  }

  auto named = params.named();
  double sq = 0.0;
  for (auto& np : named) {
    auto& grad = np.tensor->ensure_grad();
    for (double v : grad) sq += v * v;
  }
  out.grad_norm = std::sqrt(sq);
  out.latent_input_grad_norm = norm_of(params.latent_input_proj.grad());
  if (!std::isfinite(out.grad_norm))
    throw NumericError("non-finite gradient at step " + std::to_string(state.step) + "; " + describe_batch(batch));
  const double clip =
      cfg.max_grad_norm > 0.0 && out.grad_norm > cfg.max_grad_norm ? cfg.max_grad_norm / out.grad_norm : 1.0;

  auto& adam = state.adam;
  if (adam.m.size() != params.parameter_count()) {
    adam.m.assign(params.parameter_count(), 0.0);
    adam.v.assign(params.parameter_count(), 0.0);
  }
  ++adam.t;
  const double bc1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(adam.t));
  const double bc2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(adam.t));
  double lr = cfg.learning_rate;
  if (cfg.warmup_steps > 0 && adam.t < cfg.warmup_steps)
    lr *= static_cast<double>(adam.t) / static_cast<double>(cfg.warmup_steps);
  std::size_t off = 0;
  for (auto& np : named) {
    auto values = np.tensor->values();
    const auto& grad = np.tensor->grad();
    for (std::size_t i = 0; i < values.size(); ++i, ++off) {
      const double gi = grad[i] * clip;
      adam.m[off] = cfg.beta1 * adam.m[off] + (1.0 - cfg.beta1) * gi;
      adam.v[off] = cfg.beta2 * adam.v[off] + (1.0 - cfg.beta2) * gi * gi;
      const double mhat = adam.m[off] / bc1;
      const double vhat = adam.v[off] / bc2;
      values[i] -= lr * mhat / (std::sqrt(vhat) + cfg.adam_eps);
    }
  }
  params.zero_grad();
  ++state.step;
  state.last = out.losses;
  return out;
}

std::vector<std::vector<std::size_t>> epoch_batches(std::span<const QueryItem> queries, std::size_t batch_size,
                                                    std::uint64_t seed, std::uint64_t epoch) {
  if (batch_size < 2) throw BatchError("batch_size must be >= 2");
  std::vector<std::size_t> pending(queries.size());
  std::iota(pending.begin(), pending.end(), 0);
  std::seed_seq sseq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                     static_cast<std::uint32_t>(epoch), static_cast<std::uint32_t>(epoch >> 32), 0xba7c4u};
  std::mt19937_64 rng(sseq);
  std::shuffle(pending.begin(), pending.end(), rng);

  std::vector<std::vector<std::size_t>> batches;
  while (!pending.empty()) {
    std::vector<std::size_t> batch;
    std::set<std::uint64_t> docs;
    std::vector<std::size_t> rest;
    rest.reserve(pending.size());
    for (std::size_t idx : pending) {
      if (batch.size() < batch_size && docs.insert(queries[idx].relevant_doc).second)
        batch.push_back(idx);
      else
        rest.push_back(idx);
    }
    if (batch.size() < 2) break;
    batches.push_back(std::move(batch));
    pending = std::move(rest);
  }
  return batches;
}

void save_train_state(const std::filesystem::path& path, const TrainState& state, const TrainConfig& cfg) {
  Checkpoint ck;
  ck.params = state.params;
  ck.seed = cfg.seed;
  ck.step = state.step;
  // The output location is not part of the training state.
  nlohmann::json train_cfg = cfg;
  train_cfg.erase("checkpoint_path");
  ck.extra = {{"adam_t", state.adam.t}, {"train", train_cfg}, {"weights", cfg.weights}};
  ck.sections.push_back({"adam_m", state.adam.m});
  ck.sections.push_back({"adam_v", state.adam.v});
  save_checkpoint(path, ck);
}

TrainState load_train_state(const std::filesystem::path& path) {
  Checkpoint ck = load_checkpoint(path);
  TrainState s;
  s.params = std::move(ck.params);
  s.step = ck.step;
  s.adam.t = ck.extra.value("adam_t", std::uint64_t{0});
  const std::size_t n = s.params.parameter_count();
  s.adam.m.assign(n, 0.0);
  s.adam.v.assign(n, 0.0);
  for (auto& sec : ck.sections) {
    if (sec.name != "adam_m" && sec.name != "adam_v") continue;
    if (sec.values.size() != n) throw CorruptionError("optimizer section " + sec.name + " has the wrong length");
    (sec.name == "adam_m" ? s.adam.m : s.adam.v) = std::move(sec.values);
  }
  return s;
}

nlohmann::json to_json_line(const LogEntry& e) {
  nlohmann::json j = {{"kind", e.kind},          {"step", e.step},          {"epoch", e.epoch},
                      {"l_m", e.losses.l_m},     {"l_d", e.losses.l_d},     {"l_q", e.losses.l_q},
                      {"total", e.losses.total}};
  if (e.kind == "train") j["grad_norm"] = e.grad_norm;
  if (e.ndcg_at_5) j["ndcg_at_5"] = *e.ndcg_at_5;
  return j;
}

TrainResult train(const TrainConfig& cfg, const ModelConfig& model, const Corpus& corpus, const TrainOptions& options) {
  cfg.validate();
  model.validate();
  if (corpus.config.vocab_size > model.vocab_size)
    throw ConfigError("corpus vocabulary exceeds the model vocabulary");

  const auto train_q = corpus.train_queries();
  const auto heldout_q = corpus.heldout_queries();
  if (train_q.size() < 2) throw ConfigError("fewer than two training queries");

  auto pairs_for = [&](const std::vector<QueryItem>& qs, const std::vector<std::size_t>& idx) {
    std::vector<TrainPair> out;
    for (std::size_t i : idx) out.push_back({&qs[i], &corpus.docs.at(qs[i].relevant_doc)});
    return out;
  };

  std::vector<std::vector<TrainPair>> eval_sets;
  if (heldout_q.size() >= 2 && cfg.eval_batches > 0) {
    const auto hb = epoch_batches(heldout_q, cfg.batch_size, cfg.seed ^ 0xe7a1ULL, 0);
    for (std::size_t i = 0; i < hb.size() && i < cfg.eval_batches; ++i) eval_sets.push_back(pairs_for(heldout_q, hb[i]));
  }

  TrainResult res;
  res.state = options.resume ? *options.resume : init_train_state(model, cfg.seed);
  if (res.state.params.config.vocab_size != model.vocab_size || res.state.params.config.d_model != model.d_model ||
      res.state.params.config.n_layers != model.n_layers || res.state.params.config.d_emb != model.d_emb)
    throw ConfigError("resumed checkpoint does not match the model config");
  auto& state = res.state;

  std::vector<std::vector<std::vector<std::size_t>>> schedule(cfg.epochs);
  for (std::size_t e = 0; e < cfg.epochs; ++e) schedule[e] = epoch_batches(train_q, cfg.batch_size, cfg.seed, e);
  res.steps_per_epoch = schedule[0].size();
  std::uint64_t total_steps = 0;
  for (const auto& s : schedule) total_steps += s.size();
  const std::uint64_t stop = options.stop_at_step ? std::min(*options.stop_at_step, total_steps) : total_steps;

  std::ofstream log;
  if (!options.log_path.empty()) {
    if (options.log_path.has_parent_path()) std::filesystem::create_directories(options.log_path.parent_path());
    log.open(options.log_path, options.resume ? std::ios::app : std::ios::trunc);
    if (!log) throw IoError("cannot open loss log " + options.log_path.string());
  }
  auto emit = [&](const LogEntry& e) {
    res.log.push_back(e);
    if (log) log << to_json_line(e).dump() << '\n';
    if (options.on_log) options.on_log(e);
  };

  auto run_eval = [&](std::size_t epoch) {
    LogEntry e;
    e.kind = "eval";
    e.step = state.step;
    e.epoch = epoch;
    if (!eval_sets.empty()) {
      for (const auto& b : eval_sets) {
        const auto l = batch_loss(state.params, b, cfg.weights);
        e.losses.l_m += l.l_m;
        e.losses.l_d += l.l_d;
        e.losses.l_q += l.l_q;
        e.losses.total += l.total;
      }
      const double n = static_cast<double>(eval_sets.size());
      e.losses = {e.losses.l_m / n, e.losses.l_d / n, e.losses.l_q / n, e.losses.total / n};
    }
    if (options.eval_ndcg) e.ndcg_at_5 = options.eval_ndcg(state.params);
    emit(e);
  };

  std::vector<double> totals;
  std::uint64_t global = 0;
  for (std::size_t epoch = 0; epoch < cfg.epochs && state.step < stop; ++epoch) {
    for (const auto& idx : schedule[epoch]) {
      if (global++ < state.step) continue;
      if (state.step >= stop) break;
      const auto batch = pairs_for(train_q, idx);
      const auto r = train_step(state, batch, cfg);
      totals.push_back(r.losses.total);
      LogEntry e;
      e.kind = "train";
      e.step = state.step;
      e.epoch = epoch;
      e.losses = r.losses;
      e.grad_norm = r.grad_norm;
      emit(e);
      if (cfg.eval_every > 0 && state.step % cfg.eval_every == 0 && state.step < stop) run_eval(epoch);
    }
  }
  run_eval(cfg.epochs - 1);

  if (!totals.empty()) {
    const std::size_t w = std::min(kSmoothingWindow, totals.size());
    res.initial_loss = std::accumulate(totals.begin(), totals.begin() + w, 0.0) / static_cast<double>(w);
    res.final_loss = std::accumulate(totals.end() - w, totals.end(), 0.0) / static_cast<double>(w);
  }
  if (!cfg.checkpoint_path.empty()) save_train_state(cfg.checkpoint_path, state, cfg);
  return res;
}

}  // namespace cemb
