#include "bindlab/zcontext.hpp"

#include <numeric>
#include <string>

#include "bindlab/error.hpp"

namespace bindlab {

PositionMap PositionMap::identity(std::size_t n) {
  PositionMap m;
  m.apparent.resize(n);
  std::iota(m.apparent.begin(), m.apparent.end(), std::size_t{0});
  return m;
}

bool PositionMap::is_identity() const {
  for (std::size_t i = 0; i < apparent.size(); ++i) {
    if (apparent[i] != i) return false;
  }
  return true;
}

LayerStack ZContext::span_mean(const Span& s) const {
  if (s.length == 0 || s.end() > length()) throw InterventionError("span_mean: span outside context");
  LayerStack acc = residuals[s.begin];
  for (std::size_t p = s.begin + 1; p < s.end(); ++p) acc += residuals[p];
  if (s.length > 1) acc *= 1.0 / static_cast<double>(s.length);
  return acc;
}

void ZContext::check() const {
  if (position_map.size() != length()) throw InterventionError("ZContext: position map length mismatch");
  for (const auto& r : residuals) {
    if (r.rows() != n_layers() || r.cols() != d_model()) throw InterventionError("ZContext: ragged residual stacks");
  }
  auto check_spans = [this](const std::vector<Span>& spans) {
    for (const auto& s : spans) {
      if (s.end() > length()) throw InterventionError("ZContext: layout span outside context");
    }
  };
  check_spans(layout.entity);
  check_spans(layout.attribute);
  check_spans(layout.line);
}

InterventionSpec& InterventionSpec::substitute(Span target, std::vector<LayerStack> replacement,
                                               LayerRange layers) {
  steps.emplace_back(Substitution{target, std::move(replacement), layers});
  return *this;
}

InterventionSpec& InterventionSpec::substitute_from(Span target, const ZContext& source,
                                                    Span source_span, LayerRange layers) {
  if (source_span.length != target.length) {
    throw InterventionError("substitute: span lengths differ (" + std::to_string(target.length) +
                            " vs " + std::to_string(source_span.length) + ")");
  }
  if (source_span.end() > source.length()) throw InterventionError("substitute: source span outside source context");
  std::vector<LayerStack> rep(source.residuals.begin() + static_cast<std::ptrdiff_t>(source_span.begin),
                              source.residuals.begin() + static_cast<std::ptrdiff_t>(source_span.end()));
  return substitute(target, std::move(rep), layers);
}

InterventionSpec& InterventionSpec::offset(Span target, LayerStack vector, double sign) {
  steps.emplace_back(Offset{target, std::move(vector), sign});
  return *this;
}

InterventionSpec& InterventionSpec::remap(Span target, std::size_t position) {
  steps.emplace_back(Remap{target, position});
  return *this;
}

InterventionSpec& InterventionSpec::then(const InterventionSpec& other) {
  steps.insert(steps.end(), other.steps.begin(), other.steps.end());
  return *this;
}

namespace {

void check_target(const ZContext& z, const Span& s) {
  if (s.length == 0 || s.end() > z.length()) {
    throw InterventionError("intervention targets positions [" + std::to_string(s.begin) + ", " +
                            std::to_string(s.end()) + ") outside the context region of length " +
                            std::to_string(z.length()));
  }
}

struct Applier {
  ZContext& z;

  void operator()(const Substitution& s) const {
    check_target(z, s.target);
    if (s.replacement.size() != s.target.length) throw InterventionError("substitution: replacement length mismatch");
    const std::size_t end = std::min(s.layers.end, z.n_layers());
    if (s.layers.begin >= end || (s.layers.end != LayerRange::all().end && s.layers.end > z.n_layers())) {
      throw InterventionError("substitution: layer range out of range");
    }
    for (std::size_t j = 0; j < s.target.length; ++j) {
      const auto& src = s.replacement[j];
      auto& dst = z.residuals[s.target.begin + j];
      if (!src.same_shape(dst)) throw InterventionError("substitution: stack shape mismatch");
      for (std::size_t l = s.layers.begin; l < end; ++l) dst.set_row(l, src.row(l));
    }
  }

  void operator()(const Offset& o) const {
    check_target(z, o.target);
    for (std::size_t j = 0; j < o.target.length; ++j) {
      auto& dst = z.residuals[o.target.begin + j];
      if (!o.vector.same_shape(dst)) throw InterventionError("offset: vector shape mismatch");
      dst.add_scaled(o.vector, o.sign);
    }
  }

  void operator()(const Remap& r) const {
    check_target(z, r.target);
    for (std::size_t j = 0; j < r.target.length; ++j) {
      z.position_map.apparent[r.target.begin + j] = r.position + j;
    }
  }
};

}  // namespace

ZContext apply_intervention(const ZContext& z, const InterventionSpec& spec) {
  ZContext out = z;
  if (out.position_map.size() != out.length()) out.position_map = PositionMap::identity(out.length());
  for (const auto& step : spec.steps) std::visit(Applier{out}, step);
  return out;
}

ZContext substitute(const ZContext& z, Span span, const ZContext& source, Span source_span,
                    LayerRange layers) {
  InterventionSpec spec;
  spec.substitute_from(span, source, source_span, layers);
  return apply_intervention(z, spec);
}

}  // namespace bindlab
