#pragma once

#include <cstddef>
#include <cstdint>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "bindlab/numerics.hpp"
#include "bindlab/tasks.hpp"
#include "bindlab/tensor_archive.hpp"
#include "bindlab/zcontext.hpp"

namespace bindlab {

struct ReferenceConfig {
  std::size_t n_layers = 4;
  std::size_t d_model = 128;
  std::size_t max_ids = 8;   // K: number of binding IDs representable
  double separation = 1.0;   // ||b(k) - b(j)|| for k != j
  double beta = 50.0;        // softmax sharpness over -squared distance
  double feature_scale = 1.0;
  std::uint64_t seed = 0x0b1d0c0deULL;
};

/// Per-attribute-span query distribution. `attributes[j]` is the phrase
/// decoded at attribute span j (nullopt when the span is not decodable).
struct AttributeDistribution {
  std::vector<std::optional<Phrase>> attributes;
  std::vector<double> probs;
  bool entity_found = true;

  /// Total probability assigned to spans holding `a`.
  double mass(const Phrase& a) const;
};

/// Outcome of symbolic belief prediction.
struct Belief {
  enum class Status { Ok, Confused, OutOfAlgebra };
  Status status = Status::Ok;
  std::map<Token, Phrase> pairing;  // entity -> attribute, filled when Ok
  std::string reason;

  bool ok() const { return status == Status::Ok; }
};

/// Executable binding-ID oracle.
///
/// Activations live in the flattened (n_layers x d_model) stack space. Binding
/// ID k has coordinates c_k = (separation / sqrt 2) e_k in R^K, embedded as
/// b_E(k) = s B_E c_k and b_A(k) = s B_A c_k with B_E, B_A orthonormal and
/// mutually orthogonal; s is the binding scale (1 unless rescaled). Feature
/// vectors f_E, f_A are seeded per token (per phrase for attributes) and have
/// their component in span(B_E, B_A) removed. Non-span positions hold zeros.
class ReferenceSemantics {
 public:
  /// Feature maps cover the entity and attribute pools of every given task.
  static ReferenceSemantics build(const ReferenceConfig& config, std::span<const TaskSpec* const> tasks);
  static ReferenceSemantics build(const ReferenceConfig& config, const TaskSpec& task);

  const ReferenceConfig& config() const { return config_; }
  std::size_t max_ids() const { return config_.max_ids; }
  double binding_scale() const { return scale_; }

  /// Same features, binding vectors multiplied by s >= 0.
  ReferenceSemantics with_binding_scale(double s) const;

  LayerStack b_E(std::size_t k) const;
  LayerStack b_A(std::size_t k) const;
  /// Throws InputError for tokens outside the pools.
  const LayerStack& f_E(Token e) const;
  const LayerStack& f_A(const Phrase& a) const;
  LayerStack gamma_E(Token e, std::size_t k) const;
  LayerStack gamma_A(const Phrase& a, std::size_t k) const;

  /// c_k as a K-vector.
  std::vector<double> id_coords(std::size_t k) const;
  /// B_E^T v and B_A^T v: binding coordinates of a stack (unscaled).
  std::vector<double> entity_coords(const LayerStack& v) const;
  std::vector<double> attribute_coords(const LayerStack& v) const;
  /// Orthogonal projection onto span(B_E, B_A); idempotent.
  LayerStack project(const LayerStack& v) const;

  /// Nearest feature on the off-subspace part, if within the decode radius.
  std::optional<Token> decode_entity(const LayerStack& v) const;
  std::optional<Phrase> decode_attribute(const LayerStack& v) const;
  double entity_radius() const { return radius_E_; }
  double attribute_radius() const { return radius_A_; }

  /// Gamma_E(e_k, pi_E(k)) at entity spans, Gamma_A(a_k, pi_A(k)) at
  /// attribute spans (every token of a span holds the span's vector), zeros
  /// elsewhere. Throws InputError on arity mismatch or ids beyond max_ids.
  ZContext synth_zcontext(const ContextInstance& ctx, std::span<const std::size_t> pi_E,
                          std::span<const std::size_t> pi_A) const;
  ZContext synth_zcontext(const ContextInstance& ctx) const;

  /// Softmax over attribute spans of -beta * squared ID distance to the
  /// queried entity's recovered ID. Squared distances are snapped to a 1e-9
  /// grid so that algebraically equal IDs tie exactly. Uniform when the
  /// entity is not found; averaged when it occupies several spans.
  AttributeDistribution query(const ZContext& z, Token entity) const;

  /// Applies `spec` to the symbolic (feature, ID) content of every context
  /// token and reads off the resulting pairing. Position remaps are ignored.
  Belief predict_belief(const ContextInstance& ctx, const InterventionSpec& spec) const;

  TensorArchive to_archive(const Vocabulary& vocab) const;
  /// Throws FormatError when the archive is not a reference oracle.
  static ReferenceSemantics from_archive(const TensorArchive& archive, const Vocabulary& vocab);

 private:
  ReferenceConfig config_;
  double scale_ = 1.0;
  std::vector<LayerStack> basis_E_, basis_A_;  // K orthonormal stacks each
  std::map<Token, LayerStack> f_E_;
  std::map<Phrase, LayerStack> f_A_;
  double radius_E_ = 0.0, radius_A_ = 0.0;

  void compute_radii();
};

struct DirectConfig {
  std::size_t n_layers = 4;
  std::size_t d_model = 128;
  std::uint64_t seed = 0xd1ec7b1dULL;
};

/// Direct-binding alternative: Lambda(option, label) is a seeded vector
/// placed at the option (entity) span; label spans hold zeros and are inert.
class DirectBindingSemantics {
 public:
  static DirectBindingSemantics build(const DirectConfig& config, const TaskSpec& task);

  const DirectConfig& config() const { return config_; }
  /// Throws InputError for pairs outside the task pools.
  const LayerStack& lambda(Token option, const Phrase& label) const;
  ZContext synth_zcontext(const ContextInstance& ctx) const;
  /// Spans whose nearest key has option `option` vote for that key's label;
  /// ties and multiple spans share mass. Uniform over the label pool when no
  /// span matches.
  AttributeDistribution query(const ZContext& z, Token option) const;

  TensorArchive to_archive(const Vocabulary& vocab) const;
  static DirectBindingSemantics from_archive(const TensorArchive& archive, const Vocabulary& vocab);

 private:
  DirectConfig config_;
  std::vector<Token> options_;
  std::vector<Phrase> labels_;
  std::map<std::pair<Token, Phrase>, LayerStack> lambda_;
  double radius_ = 0.0;

  void compute_radius();
};

}  // namespace bindlab
