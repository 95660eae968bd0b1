#pragma once

#include <cstddef>
#include <filesystem>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "bindlab/numerics.hpp"
#include "bindlab/tasks.hpp"
#include "bindlab/zcontext.hpp"

namespace bindlab {

struct ModelConfig {
  std::size_t n_layers = 4;
  std::size_t d_model = 128;
  std::size_t n_heads = 4;
  std::size_t d_mlp = 512;
  std::size_t vocab_size = 0;
  double rope_base = 10000.0;
  std::size_t max_positions = 64;

  std::size_t d_head() const { return d_model / n_heads; }
  /// Throws ConfigError unless d_model % n_heads == 0 and d_head is even.
  void validate() const;
  nlohmann::json to_json() const;
  static ModelConfig from_json(const nlohmann::json& j);
  friend bool operator==(const ModelConfig&, const ModelConfig&) = default;
};

/// Weights of one pre-norm block. Projection matrices are stored
/// [in][out] so that y = x W.
struct LayerParams {
  Vector attn_gain;
  Matrix wq, wk, wv, wo;
  Vector mlp_gain;
  Matrix w_in, w_out;
  friend bool operator==(const LayerParams&, const LayerParams&) = default;
};

/// Decoder-only transformer: token embedding, pre-norm blocks with RMS
/// normalization, rotary attention and a SiLU MLP, final norm, untied
/// unembedding. No absolute position embedding exists.
struct ModelParams {
  ModelConfig config;
  Matrix embed;  // vocab x d_model
  std::vector<LayerParams> layers;
  Vector final_gain;
  Matrix unembed;  // d_model x vocab

  /// Gains at 1, matrices ~ N(0, 1/fan_in), residual outputs scaled by
  /// 1/sqrt(2 n_layers).
  static ModelParams init(const ModelConfig& config, SeededRng& rng);
  /// Same shapes, all zeros (gradient accumulator).
  static ModelParams zeros(const ModelConfig& config);

  /// Visits every tensor in a fixed order: (name, values, decays).
  /// `decays` is false for normalization gains.
  void for_each_tensor(const std::function<void(const std::string&, std::span<double>, bool)>& f);
  void for_each_tensor(const std::function<void(const std::string&, std::span<const double>, bool)>& f) const;
  std::size_t parameter_count() const;
  /// Throws ConfigError on shape/config mismatch, NumericError on non-finite.
  void validate() const;
  friend bool operator==(const ModelParams&, const ModelParams&) = default;
};

/// Pre-layer residual stream per token plus pre-softmax logits.
struct ActivationRecord {
  std::vector<LayerStack> residuals;  // residuals[p](l, :) is the input to layer l at token p
  Matrix logits;                      // n_tokens x vocab

  std::size_t n_tokens() const { return residuals.size(); }
  Vector residual(std::size_t layer, std::size_t position) const {
    return residuals[position].row_vector(layer);
  }
  Vector logits_at(std::size_t position) const { return logits.row_vector(position); }
};

/// Rotates dimension pairs (2i, 2i+1) by position * base^(-2i/d).
/// Throws ConfigError for odd dimension.
Vector rope_rotate(const Vector& v, double position, double base);

/// Full causal forward pass. Rotary angles use the apparent positions.
/// Throws InputError for out-of-vocabulary tokens or too many tokens.
ActivationRecord forward(const ModelParams& params, std::span<const Token> tokens,
                         const PositionMap& positions);
ActivationRecord forward(const ModelParams& params, std::span<const Token> tokens);

/// Runs the query continuation against a frozen (possibly patched) context:
/// context residuals at every layer are taken from `context` rather than
/// recomputed; their keys/values are recomputed from them with the
/// context's apparent positions. Query tokens take positions
/// context.length() + j. The returned record covers context + query tokens.
ActivationRecord forward_frozen(const ModelParams& params, const ZContext& context,
                                std::span<const Token> query_tokens);

/// Builds the ZContext for the first `context_tokens.size()` positions of a
/// base run.
ZContext capture_zcontext(const ActivationRecord& base, std::span<const Token> context_tokens,
                          const ContextLayout& layout = {});

/// Patches the base run's context residuals per `spec`, then continues with
/// the query tokens (freezing semantics). Throws InterventionError for
/// out-of-region targets or bad layer ranges.
ActivationRecord forward_intervened(const ModelParams& params, std::span<const Token> context_tokens,
                                    const ActivationRecord& base, const InterventionSpec& spec,
                                    std::span<const Token> query_tokens);

// Training support: a forward pass that keeps everything the backward pass
// needs, restricted to the rows whose logits are scored.
struct ForwardCache;

/// Transposed weight matrices, built once and shared by every backward pass
/// against the same parameters.
struct TransposedWeights {
  struct Layer {
    std::vector<double> wq, wk, wv, wo, w_in, w_out;
  };
  std::vector<double> unembed;
  std::vector<Layer> layers;
  static TransposedWeights build(const ModelParams& params);
};

class TrainingPass {
 public:
  TrainingPass(const ModelParams& params, std::span<const Token> tokens,
               std::span<const std::size_t> logit_rows);
  ~TrainingPass();
  TrainingPass(const TrainingPass&) = delete;
  TrainingPass& operator=(const TrainingPass&) = delete;

  /// logits for logit_rows, one row each.
  const Matrix& logits() const;
  /// Accumulates parameter gradients for dL/dlogits (same shape as logits()).
  /// `transposed` must come from the same parameters when given.
  void backward(const Matrix& dlogits, ModelParams& grads, const TransposedWeights* transposed = nullptr) const;

 private:
  const ModelParams& params_;
  std::unique_ptr<ForwardCache> cache_;
};

/// Checkpoint = tensor archive with meta {"kind": "transformer", "config",
/// "vocab": [words]}. The loader validates every shape against the config.
void save_checkpoint(const std::filesystem::path& path, const ModelParams& params,
                     const Vocabulary& vocab, const nlohmann::json& extra = {});
struct LoadedModel {
  ModelParams params;
  std::vector<std::string> vocab_words;
  nlohmann::json meta;
};
LoadedModel load_checkpoint(const std::filesystem::path& path);

}  // namespace bindlab
