#pragma once

// Pre-norm decoder-only transformer over the task vocabulary.
//
// Residual stream indexing: h^0 is the embedding output (token + learned
// position), h^{l+1} is the output of block l. Inside block l,
//   h~ = h^l + Attn(RMSNorm(h^l)),   h^{l+1} = h~ + MLP(RMSNorm(h~)).
// Hooks see h^l (post-block) and may rewrite it in place.

#include <cstdint>
#include <functional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "terse/tensor.hpp"

namespace terse::model {

struct ModelConfig {
  int vocab_size = 22;
  int d_model = 64;
  int n_layers = 4;
  int n_heads = 4;
  int d_ff = 256;
  int max_context = 256;
  double norm_eps = 1e-6;

  void validate() const;
  int head_dim() const { return d_model / n_heads; }
};

nlohmann::json to_json(const ModelConfig& c);
ModelConfig model_config_from_json(const nlohmann::json& j);

// Called once per (layer, position) with the residual row of that position.
struct ResidualHook {
  int layer = 0;  // residual index in [0, n_layers]
  std::function<void(std::size_t position, std::span<double> residual)> fn;
};

struct ForwardOptions {
  std::vector<ResidualHook> hooks;
  // Return h^l for l in [0, L] and h~^l for l in [0, L).
  bool capture_residuals = false;
};

struct ForwardResult {
  Tensor logits;                    // [T, vocab]
  std::vector<Tensor> residuals;    // h^l, [T, d]
  std::vector<Tensor> mid_residuals;  // h~^l, [T, d]
};

struct ResidualSnapshot {
  int layer = 0;
  std::size_t position = 0;
  std::vector<double> vector;
};

struct LayerParams {
  Tensor attn_norm, wq, wk, wv, wo;
  Tensor mlp_norm, w1, b1, w2, b2;
};

class Transformer {
 public:
  Transformer() = default;
  // Normal(0, 0.02) weights, residual output projections scaled by
  // 1/sqrt(2L), unit norm gains, zero biases.
  Transformer(ModelConfig cfg, std::uint64_t seed);

  const ModelConfig& config() const { return cfg_; }

  // Canonical names, fixed order.
  std::vector<std::pair<std::string, Tensor>> named_parameters() const;
  std::vector<Tensor> parameters() const;
  std::size_t parameter_count() const;
  // Parameters are shared handles; this copies storage.
  Transformer deep_copy() const;
  void zero_grad();
  void set_requires_grad(bool on);

  // Replace the value of a named parameter (checkpoint loading).
  void assign(const std::string& name, const Shape& shape, std::vector<double> values);

  ForwardResult forward(Graph& g, std::span<const int> tokens, const ForwardOptions& opts = {}) const;

  // MLP sublayer update for one row of h~ at layer l, without the residual
  // add: h^{l+1} = h~ + mlp_update(l, h~).
  std::vector<double> mlp_update(int layer, std::span<const double> h_tilde) const;

  const LayerParams& layer(int l) const { return layers_.at(static_cast<std::size_t>(l)); }
  const Tensor& token_embedding() const { return tok_emb_; }
  const Tensor& position_embedding() const { return pos_emb_; }
  const Tensor& final_norm() const { return final_norm_; }
  const Tensor& unembedding() const { return unembed_; }

 private:
  ModelConfig cfg_;
  Tensor tok_emb_, pos_emb_;
  std::vector<LayerParams> layers_;
  Tensor final_norm_, unembed_;
};

// Incremental decoder with a key/value cache. Feeding tokens one at a time
// produces logits bit-identical to the rows of Transformer::forward.
class DecodeState {
 public:
  DecodeState(const Transformer& model, std::vector<ResidualHook> hooks = {},
              bool capture_residuals = false);

  std::size_t length() const { return len_; }
  std::size_t capacity() const { return static_cast<std::size_t>(model_->config().max_context); }

  // Consume one token; returns the logits row for its position.
  std::span<const double> step(int token);
  // Residual h^l at an already processed position (capture must be on).
  std::span<const double> residual(int layer, std::size_t position) const;
  void set_hooks(std::vector<ResidualHook> hooks) { hooks_ = std::move(hooks); }

 private:
  void run_hooks(int layer, std::span<double> row);

  const Transformer* model_;
  std::vector<ResidualHook> hooks_;
  bool capture_;
  std::size_t len_ = 0;
  std::vector<std::vector<double>> kcache_, vcache_;  // per layer [ctx, d]
  std::vector<std::vector<double>> captured_;         // per layer [ctx, d]
  std::vector<double> x_, a_, q_, k_, v_, att_, o_, ht_, m_, f_, f2_, probs_, logits_;
};

// Per-position residual vectors at a single position from a captured forward.
std::vector<ResidualSnapshot> snapshots_at(const ForwardResult& fr, std::size_t position);

}  // namespace terse::model
