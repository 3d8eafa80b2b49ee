#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "json.hpp"

#include "cemb/autodiff.hpp"
#include "cemb/multivec.hpp"
#include "cemb/tensor.hpp"

namespace cemb {

using TokenId = std::uint32_t;

struct ModelConfig {
  std::size_t vocab_size = 256;
  std::size_t d_model = 64;
  std::size_t n_layers = 2;
  std::size_t n_heads = 2;
  std::size_t d_emb = 16;
  std::size_t max_context = 160;
  std::size_t n_q = 16;
  std::size_t n_d = 32;

  std::size_t d_ff() const { return 4 * d_model; }
  // Throws ConfigError on any violated invariant.
  void validate() const;
};

void to_json(nlohmann::json& j, const ModelConfig& c);
// Strict: unknown keys throw ConfigError.
void from_json(const nlohmann::json& j, ModelConfig& c);

struct LayerParams {
  Tensor attn_norm;  // [d_model]
  Tensor wq, wk, wv;  // [d_model, d_model]
  Tensor wo;          // [d_model, d_model], residual output
  Tensor mlp_norm;    // [d_model]
  Tensor w_up;        // [d_model, d_ff]
  Tensor w_down;      // [d_ff, d_model], residual output
};

struct ModelParams {
  ModelConfig config;
  Tensor token_embedding;     // [vocab, d_model]; stands in for the page encoder
  Tensor position_embedding;  // [max_context, d_model]
  std::vector<LayerParams> layers;
  Tensor final_norm;         // [d_model]
  Tensor latent_input_proj;  // [d_emb, d_model]; feeds generated latents back in
  Tensor retrieval_proj;     // [d_model, d_emb]

  // Fixed traversal order used by checkpoints and optimizers.
  std::vector<NamedParam> named();
  std::vector<std::pair<std::string, const Tensor*>> named() const;
  std::size_t parameter_count() const;
  void zero_grad();
  // FNV-1a over the raw bytes of every weight, in traversal order.
  std::uint64_t checksum() const;
};

ModelParams init_params(const ModelConfig& config, std::uint64_t seed);

// Graph leaves for every weight. Trainable binds gradients back into the
// ModelParams; otherwise the weights enter as constants.
struct BoundParams {
  Var token_embedding, position_embedding;
  struct Layer {
    Var attn_norm, wq, wk, wv, wo, mlp_norm, w_up, w_down;
  };
  std::vector<Layer> layers;
  Var final_norm, latent_input_proj, retrieval_proj;
  const ModelConfig* config = nullptr;

  static BoundParams bind(Graph& g, ModelParams& params, bool trainable);
  static BoundParams bind(Graph& g, const ModelParams& params);
  // Leaves in ModelParams::named() order, e.g. those handed out by gradcheck.
  static BoundParams from_leaves(std::span<const Var> leaves, const ModelConfig& config);
};

// Per-layer keys and values of every position processed so far.
struct GenCache {
  std::vector<Var> keys;
  std::vector<Var> values;
  std::size_t length = 0;
};

// Runs a block of new positions through every layer, attending to the
// cached prefix. Positions of `x` start at cache.length. Returns the
// final-normed hidden states of the new positions.
Var run_layers(const BoundParams& p, Var x, GenCache& cache);

// Token embeddings plus positional embeddings for positions start.. .
Var embed_tokens(const BoundParams& p, std::span<const TokenId> tokens, std::size_t start = 0);

Var encode_context(const BoundParams& p, std::span<const TokenId> tokens);
Tensor encode_context(const ModelParams& params, std::span<const TokenId> tokens);

struct Generation {
  Var latents;                    // [L, d_emb], unit rows
  Var context_hidden;             // [N, d_model]
  std::vector<Var> step_hidden;   // last-position hidden state of each step
  double context_ms = 0.0;        // wall time of the context pass
  double total_ms = 0.0;          // wall time of the whole generation
  std::vector<double> step_ms;    // elapsed time when latent k was emitted
};

struct GenTiming {
  double context_ms = 0.0;
  double total_ms = 0.0;
  std::vector<double> step_ms;
};

// Auto-regressive latent generation: step k runs the model on the context
// followed by the k-1 previously generated latents (each mapped back to
// d_model by latent_input_proj) and emits the projected, normalized hidden
// state of the final position.
Generation generate_latents(const BoundParams& p, std::span<const TokenId> tokens, std::size_t budget,
                            bool use_cache = true);
MultiVec generate_latents(const ModelParams& params, std::span<const TokenId> tokens, std::size_t budget,
                          bool use_cache = true, GenTiming* timing = nullptr);

// Patch-level baseline: every context position projected and normalized.
Var forward_embed(const BoundParams& p, std::span<const TokenId> tokens);
MultiVec forward_embed(const ModelParams& params, std::span<const TokenId> tokens);

// ---- checkpoints ---------------------------------------------------------
//
// Layout (all integers little-endian):
//   magic    8 bytes  "CEMBCKPT"
//   version  u32      1
//   hlen     u64      byte length of the JSON header
//   header   hlen bytes of UTF-8 JSON: {config, seed, step, tensors:[{name,shape}],
//                     sections:[{name,count}], extra}
//   blob     for each section in order, `count` IEEE-754 binary64 values
// The "params" section holds every tensor of ModelParams::named() in order.

struct CheckpointSection {
  std::string name;
  std::vector<double> values;
};

struct Checkpoint {
  ModelParams params;
  std::uint64_t seed = 0;
  std::uint64_t step = 0;
  nlohmann::json extra = nlohmann::json::object();
  std::vector<CheckpointSection> sections;  // sections beyond "params"
};

void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt);
Checkpoint load_checkpoint(const std::filesystem::path& path);

std::vector<double> flatten(const ModelParams& params);
void unflatten(ModelParams& params, std::span<const double> values);

}  // namespace cemb
