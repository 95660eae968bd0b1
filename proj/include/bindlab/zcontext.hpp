#pragma once

#include <cstddef>
#include <limits>
#include <variant>
#include <vector>

#include "bindlab/numerics.hpp"
#include "bindlab/tasks.hpp"

namespace bindlab {

/// Apparent position X_p of every token (identity by default).
struct PositionMap {
  std::vector<std::size_t> apparent;

  static PositionMap identity(std::size_t n);
  std::size_t size() const { return apparent.size(); }
  bool is_identity() const;
  friend bool operator==(const PositionMap&, const PositionMap&) = default;
};

/// Per-token, per-layer residual activations of a context region: residuals[p]
/// is the (n_layers x d_model) stack entering each layer at token p.
struct ZContext {
  std::vector<Token> tokens;
  std::vector<LayerStack> residuals;
  ContextLayout layout;
  PositionMap position_map;

  std::size_t length() const { return residuals.size(); }
  std::size_t n_layers() const { return residuals.empty() ? 0 : residuals.front().rows(); }
  std::size_t d_model() const { return residuals.empty() ? 0 : residuals.front().cols(); }
  /// Mean of the stacks over a span's tokens.
  LayerStack span_mean(const Span& s) const;
  /// Throws InterventionError if shapes or spans are inconsistent.
  void check() const;
  friend bool operator==(const ZContext&, const ZContext&) = default;
};

/// Half-open layer range [begin, end); default covers every layer.
struct LayerRange {
  std::size_t begin = 0;
  std::size_t end = std::numeric_limits<std::size_t>::max();
  static LayerRange all() { return {}; }
  friend bool operator==(const LayerRange&, const LayerRange&) = default;
};

/// {Z_p -> Z_*} for every token of `target`, restricted to `layers`.
struct Substitution {
  Span target;
  std::vector<LayerStack> replacement;  // one stack per target token
  LayerRange layers;
};

/// {Z_p -> Z_p + sign * vector} for every token of `target`.
struct Offset {
  Span target;
  LayerStack vector;
  double sign = 1.0;
};

/// {X_p -> position + j} for the j-th token of `target`.
struct Remap {
  Span target;
  std::size_t position = 0;
};

using InterventionStep = std::variant<Substitution, Offset, Remap>;

/// An ordered recipe of substitutions, vector edits, and position remaps.
struct InterventionSpec {
  std::vector<InterventionStep> steps;

  bool empty() const { return steps.empty(); }
  InterventionSpec& substitute(Span target, std::vector<LayerStack> replacement,
                               LayerRange layers = LayerRange::all());
  /// Copies source's `source_span` stacks into `target`.
  InterventionSpec& substitute_from(Span target, const ZContext& source, Span source_span,
                                    LayerRange layers = LayerRange::all());
  InterventionSpec& offset(Span target, LayerStack vector, double sign = 1.0);
  InterventionSpec& remap(Span target, std::size_t position);
  /// Appends every step of `other`.
  InterventionSpec& then(const InterventionSpec& other);
};

/// Applies the steps in order; the input is not modified.
/// Throws InterventionError for targets outside the context region, bad
/// layer ranges, or shape mismatches.
ZContext apply_intervention(const ZContext& z, const InterventionSpec& spec);

/// Z_context /. {Z_span -> source's Z_source_span} on the chosen layers.
ZContext substitute(const ZContext& z, Span span, const ZContext& source, Span source_span,
                    LayerRange layers = LayerRange::all());

}  // namespace bindlab
