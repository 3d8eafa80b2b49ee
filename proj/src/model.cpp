#include "cemb/model.hpp"

#include <chrono>
#include <utility>
#include <cmath>
#include <cstring>
#include <random>

#include "cemb/error.hpp"
#include "cemb/io.hpp"

namespace cemb {

// ---- config ----------------------------------------------------------------

void ModelConfig::validate() const {
  auto positive = [](std::size_t v, const char* name) {
    if (v == 0) throw ConfigError(std::string("model.") + name + " must be positive");
  };
  positive(vocab_size, "vocab_size");
  positive(d_model, "d_model");
  positive(n_layers, "n_layers");
  positive(n_heads, "n_heads");
  positive(d_emb, "d_emb");
  positive(max_context, "max_context");
  positive(n_q, "n_q");
  positive(n_d, "n_d");
  if (d_model % n_heads != 0) throw ConfigError("model.d_model must be divisible by model.n_heads");
}

void to_json(nlohmann::json& j, const ModelConfig& c) {
  j = {{"vocab_size", c.vocab_size}, {"d_model", c.d_model},         {"n_layers", c.n_layers},
       {"n_heads", c.n_heads},       {"d_emb", c.d_emb},             {"max_context", c.max_context},
       {"n_q", c.n_q},               {"n_d", c.n_d}};
}

void from_json(const nlohmann::json& j, ModelConfig& c) {
  io::reject_unknown_keys(j, {"vocab_size", "d_model", "n_layers", "n_heads", "d_emb", "max_context", "n_q", "n_d"},
                          "model config");
  auto get = [&](const char* key, std::size_t& field) {
    if (j.contains(key)) field = j.at(key).get<std::size_t>();
  };
  get("vocab_size", c.vocab_size);
  get("d_model", c.d_model);
  get("n_layers", c.n_layers);
  get("n_heads", c.n_heads);
  get("d_emb", c.d_emb);
  get("max_context", c.max_context);
  get("n_q", c.n_q);
  get("n_d", c.n_d);
}

// ---- params ----------------------------------------------------------------

std::vector<NamedParam> ModelParams::named() {
  std::vector<NamedParam> out;
  out.push_back({"token_embedding", &token_embedding});
  out.push_back({"position_embedding", &position_embedding});
  for (std::size_t l = 0; l < layers.size(); ++l) {
    auto& L = layers[l];
    const std::string p = "layers." + std::to_string(l) + ".";
    out.push_back({p + "attn_norm", &L.attn_norm});
    out.push_back({p + "wq", &L.wq});
    out.push_back({p + "wk", &L.wk});
    out.push_back({p + "wv", &L.wv});
    out.push_back({p + "wo", &L.wo});
    out.push_back({p + "mlp_norm", &L.mlp_norm});
    out.push_back({p + "w_up", &L.w_up});
    out.push_back({p + "w_down", &L.w_down});
  }
  out.push_back({"final_norm", &final_norm});
  out.push_back({"latent_input_proj", &latent_input_proj});
  out.push_back({"retrieval_proj", &retrieval_proj});
  return out;
}

std::vector<std::pair<std::string, const Tensor*>> ModelParams::named() const {
  std::vector<std::pair<std::string, const Tensor*>> out;
  for (auto& np : const_cast<ModelParams*>(this)->named()) out.emplace_back(np.name, np.tensor);
  return out;
}

std::size_t ModelParams::parameter_count() const {
  std::size_t n = 0;
  for (const auto& [_, t] : named()) n += t->size();
  return n;
}

void ModelParams::zero_grad() {
  for (auto& np : named()) np.tensor->zero_grad();
}

std::uint64_t ModelParams::checksum() const {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (const auto& [_, t] : named()) {
    const auto* bytes = reinterpret_cast<const unsigned char*>(t->values().data());
    for (std::size_t i = 0; i < t->size() * sizeof(double); ++i) {
      h ^= bytes[i];
      h *= 0x100000001b3ULL;
    }
  }
  return h;
}

ModelParams init_params(const ModelConfig& config, std::uint64_t seed) {
  config.validate();
  std::mt19937_64 rng(seed);
  auto normal = [&](std::vector<std::size_t> shape, double std) {
    Tensor t(std::move(shape));
    std::normal_distribution<double> dist(0.0, std);
    for (double& v : t.values()) v = dist(rng);
    return t;
  };
  const std::size_t d = config.d_model;
  const double base = 0.02;
  const double resid = 0.02 / std::sqrt(2.0 * static_cast<double>(config.n_layers));

  ModelParams p;
  p.config = config;
  p.token_embedding = normal({config.vocab_size, d}, base);
  p.position_embedding = normal({config.max_context, d}, base);
  for (std::size_t l = 0; l < config.n_layers; ++l) {
    LayerParams L;
    L.attn_norm = Tensor({d}, 1.0);
    L.wq = normal({d, d}, base);
    L.wk = normal({d, d}, base);
    L.wv = normal({d, d}, base);
    L.wo = normal({d, d}, resid);
    L.mlp_norm = Tensor({d}, 1.0);
    L.w_up = normal({d, config.d_ff()}, base);
    L.w_down = normal({config.d_ff(), d}, resid);
    p.layers.push_back(std::move(L));
  }
  p.final_norm = Tensor({d}, 1.0);
  p.latent_input_proj = normal({config.d_emb, d}, base);
  p.retrieval_proj = normal({d, config.d_emb}, base);
  return p;
}

// ---- forward ---------------------------------------------------------------

namespace {

Var bind_one(Graph& g, Tensor& t, bool trainable) {
  return trainable ? g.param(t) : g.constant(Tensor(t.shape(), std::vector<double>(t.values().begin(), t.values().end())));
}

void check_tokens(const ModelConfig& c, std::span<const TokenId> tokens) {
  if (tokens.empty()) throw InputError("empty token sequence");
  for (TokenId t : tokens)
    if (t >= c.vocab_size)
      throw InputError("token " + std::to_string(t) + " out of range for vocab " + std::to_string(c.vocab_size));
  if (tokens.size() > c.max_context)
    throw CapacityError("input of " + std::to_string(tokens.size()) + " tokens exceeds max_context " +
                        std::to_string(c.max_context));
}

}  // namespace

BoundParams BoundParams::bind(Graph& g, ModelParams& params, bool trainable) {
  BoundParams b;
  b.config = &params.config;
  b.token_embedding = bind_one(g, params.token_embedding, trainable);
  b.position_embedding = bind_one(g, params.position_embedding, trainable);
  for (auto& L : params.layers) {
    b.layers.push_back({bind_one(g, L.attn_norm, trainable), bind_one(g, L.wq, trainable),
                        bind_one(g, L.wk, trainable), bind_one(g, L.wv, trainable), bind_one(g, L.wo, trainable),
                        bind_one(g, L.mlp_norm, trainable), bind_one(g, L.w_up, trainable),
                        bind_one(g, L.w_down, trainable)});
  }
  b.final_norm = bind_one(g, params.final_norm, trainable);
  b.latent_input_proj = bind_one(g, params.latent_input_proj, trainable);
  b.retrieval_proj = bind_one(g, params.retrieval_proj, trainable);
  return b;
}

BoundParams BoundParams::bind(Graph& g, const ModelParams& params) {
  return bind(g, const_cast<ModelParams&>(params), false);
}

BoundParams BoundParams::from_leaves(std::span<const Var> leaves, const ModelConfig& config) {
  const std::size_t expected = 5 + 8 * config.n_layers;
  if (leaves.size() != expected)
    throw ContractError("expected " + std::to_string(expected) + " parameter leaves, got " + std::to_string(leaves.size()));
  BoundParams b;
  b.config = &config;
  std::size_t i = 0;
  b.token_embedding = leaves[i++];
  b.position_embedding = leaves[i++];
  for (std::size_t l = 0; l < config.n_layers; ++l, i += 8)
    b.layers.push_back({leaves[i], leaves[i + 1], leaves[i + 2], leaves[i + 3], leaves[i + 4], leaves[i + 5],
                        leaves[i + 6], leaves[i + 7]});
  b.final_norm = leaves[i++];
  b.latent_input_proj = leaves[i++];
  b.retrieval_proj = leaves[i++];
  return b;
}

Var embed_tokens(const BoundParams& p, std::span<const TokenId> tokens, std::size_t start) {
  std::vector<std::size_t> ids(tokens.begin(), tokens.end());
  Var tok = gather_rows(p.token_embedding, ids);
  Var pos = slice_rows(p.position_embedding, start, start + tokens.size());
  return add(tok, pos);
}

Var run_layers(const BoundParams& p, Var x, GenCache& cache) {
  const ModelConfig& c = *p.config;
  const std::size_t n = x.rows();
  const std::size_t start = cache.length;
  if (start + n > c.max_context)
    throw CapacityError("sequence of " + std::to_string(start + n) + " positions exceeds max_context " +
                        std::to_string(c.max_context));
  if (cache.keys.empty()) {
    cache.keys.resize(c.n_layers);
    cache.values.resize(c.n_layers);
  }
  const std::size_t dh = c.d_model / c.n_heads;
  const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(dh));

  for (std::size_t l = 0; l < c.n_layers; ++l) {
    const auto& L = p.layers[l];
    Var h = rms_norm(x, L.attn_norm);
    Var q = matmul(h, L.wq);
    Var k = matmul(h, L.wk);
    Var v = matmul(h, L.wv);
    if (start > 0) {
      const Var ks[] = {cache.keys[l], k};
      const Var vs[] = {cache.values[l], v};
      k = concat_rows(ks);
      v = concat_rows(vs);
    }
    cache.keys[l] = k;
    cache.values[l] = v;

    std::vector<Var> heads;
    heads.reserve(c.n_heads);
    for (std::size_t hd = 0; hd < c.n_heads; ++hd) {
      Var qh = c.n_heads == 1 ? q : slice_cols(q, hd * dh, (hd + 1) * dh);
      Var kh = c.n_heads == 1 ? k : slice_cols(k, hd * dh, (hd + 1) * dh);
      Var vh = c.n_heads == 1 ? v : slice_cols(v, hd * dh, (hd + 1) * dh);
      Var scores = scale(matmul(qh, transpose(kh)), inv_sqrt);
      heads.push_back(matmul(softmax_causal(scores, start), vh));
    }
    Var attn = c.n_heads == 1 ? heads[0] : concat_cols(heads);
    x = add(x, matmul(attn, L.wo));

    Var h2 = rms_norm(x, L.mlp_norm);
    x = add(x, matmul(relu(matmul(h2, L.w_up)), L.w_down));
  }
  cache.length += n;
  return rms_norm(x, p.final_norm);
}

Var encode_context(const BoundParams& p, std::span<const TokenId> tokens) {
  check_tokens(*p.config, tokens);
  GenCache cache;
  return run_layers(p, embed_tokens(p, tokens), cache);
}

Tensor encode_context(const ModelParams& params, std::span<const TokenId> tokens) {
  Graph g;
  auto p = BoundParams::bind(g, params);
  return encode_context(p, tokens).value();
}

Generation generate_latents(const BoundParams& p, std::span<const TokenId> tokens, std::size_t budget,
                            bool use_cache) {
  const ModelConfig& c = *p.config;
  check_tokens(c, tokens);
  if (budget == 0) throw ContractError("latent budget must be at least 1");
  const std::size_t n = tokens.size();
  if (n + budget > c.max_context)
    throw CapacityError("context " + std::to_string(n) + " + budget " + std::to_string(budget) +
                        " exceeds max_context " + std::to_string(c.max_context));

  Generation out;
  const auto t0 = std::chrono::steady_clock::now();
  Var inputs = embed_tokens(p, tokens);
  std::vector<Var> latents;
  latents.reserve(budget);

  auto emit = [&](Var last_hidden) {
    out.step_hidden.push_back(last_hidden);
    latents.push_back(l2_normalize(matmul(last_hidden, p.retrieval_proj)));
    out.step_ms.push_back(std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count());
  };
  auto feedback = [&](std::size_t k) {
    // Input embedding for the k-th generated latent (0-based) at position n + k.
    Var pos = slice_rows(p.position_embedding, n + k, n + k + 1);
    return add(matmul(latents[k], p.latent_input_proj), pos);
  };

  if (use_cache) {
    GenCache cache;
    Var hidden = run_layers(p, inputs, cache);
    out.context_hidden = hidden;
    out.context_ms = std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count();
    emit(slice_rows(hidden, n - 1, n));
    for (std::size_t k = 1; k < budget; ++k) emit(run_layers(p, feedback(k - 1), cache));
  } else {
    std::vector<Var> fed;
    for (std::size_t k = 0; k < budget; ++k) {
      std::vector<Var> parts{inputs};
      parts.insert(parts.end(), fed.begin(), fed.end());
      Var seq = parts.size() == 1 ? inputs : concat_rows(parts);
      GenCache cache;
      Var hidden = run_layers(p, seq, cache);
      if (k == 0) {
        out.context_hidden = hidden;
        out.context_ms = std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count();
      }
      const std::size_t len = hidden.rows();
      emit(slice_rows(hidden, len - 1, len));
      fed.push_back(feedback(k));
    }
  }
  out.latents = latents.size() == 1 ? latents[0] : concat_rows(latents);
  out.total_ms = std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count();
  return out;
}

MultiVec generate_latents(const ModelParams& params, std::span<const TokenId> tokens, std::size_t budget,
                          bool use_cache, GenTiming* timing) {
  Graph g;
  auto p = BoundParams::bind(g, params);
  const auto gen = generate_latents(p, tokens, budget, use_cache);
  if (timing) *timing = {gen.context_ms, gen.total_ms, gen.step_ms};
  return MultiVec(gen.latents.value());
}

Var forward_embed(const BoundParams& p, std::span<const TokenId> tokens) {
  Var hidden = encode_context(p, tokens);
  return l2_normalize(matmul(hidden, p.retrieval_proj));
}

MultiVec forward_embed(const ModelParams& params, std::span<const TokenId> tokens) {
  Graph g;
  auto p = BoundParams::bind(g, params);
  return MultiVec(forward_embed(p, tokens).value());
}

// ---- checkpoints -----------------------------------------------------------

namespace {
constexpr std::string_view kCheckpointMagic = "CEMBCKPT";
constexpr std::uint32_t kCheckpointVersion = 1;
}  // namespace

std::vector<double> flatten(const ModelParams& params) {
  std::vector<double> out;
  out.reserve(params.parameter_count());
  for (const auto& [_, t] : params.named()) out.insert(out.end(), t->values().begin(), t->values().end());
  return out;
}

void unflatten(ModelParams& params, std::span<const double> values) {
  if (values.size() != params.parameter_count())
    throw CorruptionError("parameter blob has " + std::to_string(values.size()) + " values, expected " +
                          std::to_string(params.parameter_count()));
  std::size_t at = 0;
  for (auto& np : params.named()) {
    auto dst = np.tensor->values();
    std::copy(values.begin() + static_cast<std::ptrdiff_t>(at),
              values.begin() + static_cast<std::ptrdiff_t>(at + dst.size()), dst.begin());
    at += dst.size();
  }
}

void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt) {
  nlohmann::json header;
  header["config"] = ckpt.params.config;
  header["seed"] = ckpt.seed;
  header["step"] = ckpt.step;
  header["extra"] = ckpt.extra;
  auto& tensors = header["tensors"] = nlohmann::json::array();
  for (const auto& [name, t] : ckpt.params.named()) tensors.push_back({{"name", name}, {"shape", t->shape()}});
  auto& sections = header["sections"] = nlohmann::json::array();
  sections.push_back({{"name", "params"}, {"count", ckpt.params.parameter_count()}});
  for (const auto& s : ckpt.sections) sections.push_back({{"name", s.name}, {"count", s.values.size()}});

  const std::string hdr = header.dump();
  io::ByteWriter w;
  w.bytes(kCheckpointMagic);
  w.u32(kCheckpointVersion);
  w.u64(hdr.size());
  w.bytes(hdr);
  for (double v : flatten(ckpt.params)) w.f64(v);
  for (const auto& s : ckpt.sections)
    for (double v : s.values) w.f64(v);
  io::write_file(path, w.buffer());
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
  const auto bytes = io::read_file(path);
  io::ByteReader r(bytes);
  if (r.remaining() < kCheckpointMagic.size() || r.bytes(kCheckpointMagic.size()) != kCheckpointMagic)
    throw FormatError(path.string() + " is not a checkpoint (bad magic)");
  if (const auto v = r.u32(); v != kCheckpointVersion)
    throw FormatError("unsupported checkpoint version " + std::to_string(v));
  const auto hlen = r.u64();
  nlohmann::json header;
  try {
    header = nlohmann::json::parse(r.bytes(static_cast<std::size_t>(hlen)));
  } catch (const nlohmann::json::parse_error& e) {
    throw CorruptionError(std::string("checkpoint header: ") + e.what());
  }

  Checkpoint ckpt;
  const auto config = header.at("config").get<ModelConfig>();
  ckpt.params = init_params(config, 0);
  ckpt.seed = header.at("seed").get<std::uint64_t>();
  ckpt.step = header.at("step").get<std::uint64_t>();
  ckpt.extra = header.value("extra", nlohmann::json::object());

  const auto& tensors = header.at("tensors");
  const auto named = std::as_const(ckpt.params).named();
  if (tensors.size() != named.size()) throw CorruptionError("checkpoint tensor list does not match config");
  for (std::size_t i = 0; i < named.size(); ++i) {
    if (tensors[i].at("name").get<std::string>() != named[i].first ||
        tensors[i].at("shape").get<std::vector<std::size_t>>() != named[i].second->shape())
      throw CorruptionError("checkpoint tensor " + named[i].first + " does not match config");
  }

  for (const auto& sec : header.at("sections")) {
    const auto count = sec.at("count").get<std::size_t>();
    std::vector<double> values(count);
    for (auto& v : values) v = r.f64();
    const auto name = sec.at("name").get<std::string>();
    if (name == "params")
      unflatten(ckpt.params, values);
    else
      ckpt.sections.push_back({name, std::move(values)});
  }
  if (r.remaining() != 0) throw CorruptionError("trailing bytes after checkpoint blob");
  return ckpt;
}

}  // namespace cemb
