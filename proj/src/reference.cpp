#include "bindlab/reference.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <set>

#include "bindlab/error.hpp"

namespace bindlab {

namespace {

constexpr double kSnap = 1e-9;
constexpr double kRadiusFraction = 0.45;

double snap(double d2) { return std::round(d2 / kSnap) * kSnap; }

double coord_distance2(const std::vector<double>& a, const std::vector<double>& b) {
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const double d = a[i] - b[i];
    s += d * d;
  }
  return s;
}

LayerStack random_stack(std::size_t layers, std::size_t d, std::uint64_t seed, double scale) {
  SeededRng rng(seed);
  LayerStack s(layers, d);
  for (double& x : s.values()) x = scale * rng.normal();
  return s;
}

std::uint64_t phrase_seed(std::uint64_t seed, const Phrase& p) {
  std::uint64_t s = derive_seed(seed, 0xa771b);
  for (Token t : p) s = derive_seed(s, static_cast<std::uint64_t>(t));
  return s;
}

// Modified Gram-Schmidt, two passes.
std::vector<LayerStack> orthonormalize(std::vector<LayerStack> vs) {
  for (std::size_t i = 0; i < vs.size(); ++i) {
    for (int pass = 0; pass < 2; ++pass) {
      for (std::size_t j = 0; j < i; ++j) vs[i].add_scaled(vs[j], -dot(vs[i], vs[j]));
    }
    const double n = vs[i].norm();
    if (!(n > 1e-8)) throw NumericError("orthonormalize: degenerate basis");
    vs[i] *= 1.0 / n;
  }
  return vs;
}

double min_pairwise_distance(const std::vector<const LayerStack*>& vs) {
  if (vs.empty()) return 0.0;
  if (vs.size() == 1) return vs.front()->norm();
  double best = std::numeric_limits<double>::infinity();
  for (std::size_t i = 0; i < vs.size(); ++i) {
    for (std::size_t j = i + 1; j < vs.size(); ++j) best = std::min(best, squared_distance(*vs[i], *vs[j]));
  }
  return std::sqrt(best);
}

std::vector<double> flatten(const std::vector<LayerStack>& stacks) {
  std::vector<double> out;
  for (const auto& s : stacks) out.insert(out.end(), s.values().begin(), s.values().end());
  return out;
}

std::vector<LayerStack> unflatten(const TensorEntry& t, std::size_t layers, std::size_t d) {
  const std::size_t m = layers * d;
  if (m == 0 || t.data.size() % m != 0) throw FormatError("tensor " + t.name + " has the wrong size");
  std::vector<LayerStack> out;
  for (std::size_t i = 0; i < t.data.size() / m; ++i) {
    out.emplace_back(layers, d,
                     std::vector<double>(t.data.begin() + static_cast<std::ptrdiff_t>(i * m),
                                         t.data.begin() + static_cast<std::ptrdiff_t>((i + 1) * m)));
  }
  return out;
}

std::string phrase_text(const Vocabulary& vocab, const Phrase& p) { return vocab.detokenize(p); }

}  // namespace

double AttributeDistribution::mass(const Phrase& a) const {
  double m = 0.0;
  for (std::size_t j = 0; j < attributes.size(); ++j) {
    if (attributes[j] && *attributes[j] == a) m += probs[j];
  }
  return m;
}

// ---------------------------------------------------------------- build

ReferenceSemantics ReferenceSemantics::build(const ReferenceConfig& config, std::span<const TaskSpec* const> tasks) {
  if (config.n_layers == 0 || config.d_model == 0 || config.max_ids == 0) {
    throw ConfigError("ReferenceConfig: sizes must be positive");
  }
  const std::size_t m = config.n_layers * config.d_model;
  if (2 * config.max_ids >= m) throw ConfigError("ReferenceConfig: stack dimension too small for 2*max_ids IDs");
  if (!(config.separation > 0.0) || !(config.beta > 0.0)) {
    throw ConfigError("ReferenceConfig: separation and beta must be positive");
  }
  ReferenceSemantics s;
  s.config_ = config;
  std::vector<LayerStack> raw;
  for (std::size_t i = 0; i < 2 * config.max_ids; ++i) {
    raw.push_back(random_stack(config.n_layers, config.d_model, derive_seed(config.seed, 0xb000 + i), 1.0));
  }
  raw = orthonormalize(std::move(raw));
  s.basis_E_.assign(raw.begin(), raw.begin() + static_cast<std::ptrdiff_t>(config.max_ids));
  s.basis_A_.assign(raw.begin() + static_cast<std::ptrdiff_t>(config.max_ids), raw.end());

  const auto feature = [&s, &config](std::uint64_t seed) {
    LayerStack f = random_stack(config.n_layers, config.d_model, seed, config.feature_scale);
    f -= s.project(f);
    return f;
  };
  for (const TaskSpec* t : tasks) {
    for (Token e : t->entities) {
      if (!s.f_E_.count(e)) s.f_E_.emplace(e, feature(derive_seed(config.seed, 0xe0000000ULL + static_cast<std::uint64_t>(e))));
    }
    for (const Phrase& a : t->attributes) {
      if (!s.f_A_.count(a)) s.f_A_.emplace(a, feature(phrase_seed(config.seed, a)));
    }
  }
  s.compute_radii();
  return s;
}

ReferenceSemantics ReferenceSemantics::build(const ReferenceConfig& config, const TaskSpec& task) {
  const TaskSpec* tasks[] = {&task};
  return build(config, tasks);
}

void ReferenceSemantics::compute_radii() {
  std::vector<const LayerStack*> fe, fa;
  for (const auto& [_, v] : f_E_) fe.push_back(&v);
  for (const auto& [_, v] : f_A_) fa.push_back(&v);
  radius_E_ = kRadiusFraction * min_pairwise_distance(fe);
  radius_A_ = kRadiusFraction * min_pairwise_distance(fa);
}

ReferenceSemantics ReferenceSemantics::with_binding_scale(double s) const {
  if (!(s >= 0.0) || !std::isfinite(s)) throw ConfigError("binding scale must be finite and non-negative");
  ReferenceSemantics out = *this;
  out.scale_ = s;
  return out;
}

// ---------------------------------------------------------------- algebra

LayerStack ReferenceSemantics::b_E(std::size_t k) const {
  if (k >= max_ids()) throw InputError("binding index " + std::to_string(k) + " exceeds max_ids");
  return basis_E_[k] * (scale_ * config_.separation / std::sqrt(2.0));
}

LayerStack ReferenceSemantics::b_A(std::size_t k) const {
  if (k >= max_ids()) throw InputError("binding index " + std::to_string(k) + " exceeds max_ids");
  return basis_A_[k] * (scale_ * config_.separation / std::sqrt(2.0));
}

const LayerStack& ReferenceSemantics::f_E(Token e) const {
  auto it = f_E_.find(e);
  if (it == f_E_.end()) throw InputError("entity token " + std::to_string(e) + " is not in the oracle's pools");
  return it->second;
}

const LayerStack& ReferenceSemantics::f_A(const Phrase& a) const {
  auto it = f_A_.find(a);
  if (it == f_A_.end()) throw InputError("attribute phrase is not in the oracle's pools");
  return it->second;
}

LayerStack ReferenceSemantics::gamma_E(Token e, std::size_t k) const { return f_E(e) + b_E(k); }
LayerStack ReferenceSemantics::gamma_A(const Phrase& a, std::size_t k) const { return f_A(a) + b_A(k); }

std::vector<double> ReferenceSemantics::id_coords(std::size_t k) const {
  if (k >= max_ids()) throw InputError("binding index exceeds max_ids");
  std::vector<double> c(max_ids(), 0.0);
  c[k] = config_.separation / std::sqrt(2.0);
  return c;
}

std::vector<double> ReferenceSemantics::entity_coords(const LayerStack& v) const {
  std::vector<double> c(max_ids());
  for (std::size_t i = 0; i < max_ids(); ++i) c[i] = dot(basis_E_[i], v);
  return c;
}

std::vector<double> ReferenceSemantics::attribute_coords(const LayerStack& v) const {
  std::vector<double> c(max_ids());
  for (std::size_t i = 0; i < max_ids(); ++i) c[i] = dot(basis_A_[i], v);
  return c;
}

LayerStack ReferenceSemantics::project(const LayerStack& v) const {
  LayerStack out(v.rows(), v.cols());
  for (const auto& b : basis_E_) out.add_scaled(b, dot(b, v));
  for (const auto& b : basis_A_) out.add_scaled(b, dot(b, v));
  return out;
}

std::optional<Token> ReferenceSemantics::decode_entity(const LayerStack& v) const {
  const LayerStack off = v - project(v);
  std::optional<Token> best;
  double best_d = std::numeric_limits<double>::infinity();
  for (const auto& [e, f] : f_E_) {
    const double d = squared_distance(off, f);
    if (d < best_d) {
      best_d = d;
      best = e;
    }
  }
  if (best && std::sqrt(best_d) <= radius_E_) return best;
  return std::nullopt;
}

std::optional<Phrase> ReferenceSemantics::decode_attribute(const LayerStack& v) const {
  const LayerStack off = v - project(v);
  std::optional<Phrase> best;
  double best_d = std::numeric_limits<double>::infinity();
  for (const auto& [a, f] : f_A_) {
    const double d = squared_distance(off, f);
    if (d < best_d) {
      best_d = d;
      best = a;
    }
  }
  if (best && std::sqrt(best_d) <= radius_A_) return best;
  return std::nullopt;
}

// ---------------------------------------------------------------- contexts

ZContext ReferenceSemantics::synth_zcontext(const ContextInstance& ctx, std::span<const std::size_t> pi_E,
                                            std::span<const std::size_t> pi_A) const {
  if (pi_E.size() != ctx.n || pi_A.size() != ctx.n) {
    throw InputError("synth_zcontext: permutation arity does not match n=" + std::to_string(ctx.n));
  }
  if (ctx.layout.entity.size() != ctx.n || ctx.layout.attribute.size() != ctx.n) {
    throw InputError("synth_zcontext: layout does not have n spans of each kind");
  }
  ZContext z;
  z.tokens = ctx.tokens;
  z.residuals.assign(ctx.tokens.size(), LayerStack(config_.n_layers, config_.d_model));
  z.layout = ctx.layout;
  z.position_map = PositionMap::identity(ctx.tokens.size());
  for (std::size_t k = 0; k < ctx.n; ++k) {
    const LayerStack ge = gamma_E(ctx.entities[k], pi_E[k]);
    const LayerStack ga = gamma_A(ctx.attributes[k], pi_A[k]);
    const Span se = ctx.layout.entity[k];
    const Span sa = ctx.layout.attribute[k];
    for (std::size_t p = se.begin; p < se.end(); ++p) z.residuals[p] = ge;
    for (std::size_t p = sa.begin; p < sa.end(); ++p) z.residuals[p] = ga;
  }
  return z;
}

ZContext ReferenceSemantics::synth_zcontext(const ContextInstance& ctx) const {
  std::vector<std::size_t> id(ctx.n);
  for (std::size_t k = 0; k < ctx.n; ++k) id[k] = k;
  return synth_zcontext(ctx, id, id);
}

AttributeDistribution ReferenceSemantics::query(const ZContext& z, Token entity) const {
  const std::size_t na = z.layout.attribute.size();
  AttributeDistribution out;
  out.attributes.resize(na);
  out.probs.assign(na, 0.0);
  if (na == 0) {
    out.entity_found = false;
    return out;
  }
  std::vector<std::vector<double>> attr_coords(na);
  for (std::size_t j = 0; j < na; ++j) {
    const LayerStack m = z.span_mean(z.layout.attribute[j]);
    out.attributes[j] = decode_attribute(m);
    attr_coords[j] = attribute_coords(m);
  }
  auto fit = f_E_.find(entity);
  std::size_t matches = 0;
  if (fit != f_E_.end()) {
    for (const Span& span : z.layout.entity) {
      const LayerStack m = z.span_mean(span);
      const auto dec = decode_entity(m);
      if (!dec || *dec != entity) continue;
      ++matches;
      const std::vector<double> ce = entity_coords(m - fit->second);
      std::vector<double> score(na);
      double mx = -std::numeric_limits<double>::infinity();
      for (std::size_t j = 0; j < na; ++j) {
        score[j] = -config_.beta * snap(coord_distance2(ce, attr_coords[j]));
        mx = std::max(mx, score[j]);
      }
      double sum = 0.0;
      for (std::size_t j = 0; j < na; ++j) {
        score[j] = std::exp(score[j] - mx);
        sum += score[j];
      }
      for (std::size_t j = 0; j < na; ++j) out.probs[j] += score[j] / sum;
    }
  }
  if (matches == 0) {
    out.entity_found = false;
    for (double& p : out.probs) p = 1.0 / static_cast<double>(na);
  } else {
    for (double& p : out.probs) p /= static_cast<double>(matches);
  }
  return out;
}

// ---------------------------------------------------------------- symbolic beliefs

namespace {

struct Sym {
  enum class Kind { Neutral, Entity, Attribute, Unknown };
  Kind kind = Kind::Neutral;
  Token entity = -1;
  Phrase attribute;
  std::vector<double> cE, cA;
  LayerStack drift;
};

}  // namespace

Belief ReferenceSemantics::predict_belief(const ContextInstance& ctx, const InterventionSpec& spec) const {
  const std::size_t L = config_.n_layers;
  const std::size_t D = config_.d_model;
  const std::size_t K = max_ids();
  const double shift_radius = std::min(radius_E_, radius_A_);
  Belief belief;
  const auto fail = [&belief](Belief::Status st, std::string why) {
    belief.status = st;
    belief.reason = std::move(why);
    belief.pairing.clear();
    return belief;
  };

  std::vector<Sym> tok(ctx.tokens.size());
  for (auto& t : tok) {
    t.cE.assign(K, 0.0);
    t.cA.assign(K, 0.0);
    t.drift = LayerStack(L, D);
  }
  for (std::size_t k = 0; k < ctx.n; ++k) {
    for (std::size_t p = ctx.layout.entity[k].begin; p < ctx.layout.entity[k].end(); ++p) {
      tok[p].kind = Sym::Kind::Entity;
      tok[p].entity = ctx.entities[k];
      tok[p].cE = entity_coords(b_E(k));
    }
    for (std::size_t p = ctx.layout.attribute[k].begin; p < ctx.layout.attribute[k].end(); ++p) {
      tok[p].kind = Sym::Kind::Attribute;
      tok[p].attribute = ctx.attributes[k];
      tok[p].cA = attribute_coords(b_A(k));
    }
  }

  const auto materialize = [&](const Sym& s) {
    LayerStack v = s.drift;
    if (s.kind == Sym::Kind::Entity) v += f_E(s.entity);
    if (s.kind == Sym::Kind::Attribute) v += f_A(s.attribute);
    for (std::size_t i = 0; i < K; ++i) {
      v.add_scaled(basis_E_[i], s.cE[i]);
      v.add_scaled(basis_A_[i], s.cA[i]);
    }
    return v;
  };
  const auto decode = [&](const LayerStack& v) {
    Sym s;
    s.cE = entity_coords(v);
    s.cA = attribute_coords(v);
    const LayerStack off = v - project(v);
    if (off.norm() < shift_radius) {
      s.kind = Sym::Kind::Neutral;
      s.drift = off;
    } else if (auto e = decode_entity(v)) {
      s.kind = Sym::Kind::Entity;
      s.entity = *e;
      s.drift = off - f_E(*e);
    } else if (auto a = decode_attribute(v)) {
      s.kind = Sym::Kind::Attribute;
      s.attribute = *a;
      s.drift = off - f_A(*a);
    } else {
      s.kind = Sym::Kind::Unknown;
      s.drift = off;
    }
    return s;
  };

  for (const auto& step : spec.steps) {
    if (const auto* sub = std::get_if<Substitution>(&step)) {
      const Span t = sub->target;
      if (t.length == 0 || t.end() > tok.size() || sub->replacement.size() != t.length) {
        throw InterventionError("predict_belief: substitution outside the context");
      }
      const std::size_t end = std::min(sub->layers.end, L);
      for (std::size_t j = 0; j < t.length; ++j) {
        const LayerStack& r = sub->replacement[j];
        if (r.rows() != L || r.cols() != D) throw InterventionError("predict_belief: replacement shape mismatch");
        LayerStack merged = sub->layers.begin == 0 && end == L ? r : materialize(tok[t.begin + j]);
        if (!(sub->layers.begin == 0 && end == L)) {
          for (std::size_t l = sub->layers.begin; l < end; ++l) merged.set_row(l, r.row(l));
        }
        tok[t.begin + j] = decode(merged);
      }
    } else if (const auto* off = std::get_if<Offset>(&step)) {
      const Span t = off->target;
      if (t.length == 0 || t.end() > tok.size()) throw InterventionError("predict_belief: offset outside the context");
      const LayerStack outside = off->vector - project(off->vector);
      if (outside.norm() >= shift_radius) {
        return fail(Belief::Status::OutOfAlgebra, "offset has a large component outside the binding subspace");
      }
      const std::vector<double> dE = entity_coords(off->vector);
      const std::vector<double> dA = attribute_coords(off->vector);
      for (std::size_t p = t.begin; p < t.end(); ++p) {
        for (std::size_t i = 0; i < K; ++i) {
          tok[p].cE[i] += off->sign * dE[i];
          tok[p].cA[i] += off->sign * dA[i];
        }
        tok[p].drift.add_scaled(outside, off->sign);
      }
    }
    // Remaps do not change content.
  }

  struct SpanState {
    Sym::Kind kind;
    Token entity;
    Phrase attribute;
    std::vector<double> cE, cA;
  };
  const auto span_state = [&](const Span& s) -> std::optional<SpanState> {
    const Sym& first = tok[s.begin];
    SpanState st{first.kind, first.entity, first.attribute, std::vector<double>(K, 0.0), std::vector<double>(K, 0.0)};
    LayerStack drift(L, D);
    for (std::size_t p = s.begin; p < s.end(); ++p) {
      const Sym& x = tok[p];
      if (x.kind != first.kind || x.entity != first.entity || x.attribute != first.attribute) return std::nullopt;
      for (std::size_t i = 0; i < K; ++i) {
        st.cE[i] += x.cE[i];
        st.cA[i] += x.cA[i];
      }
      drift += x.drift;
    }
    const double inv = 1.0 / static_cast<double>(s.length);
    for (std::size_t i = 0; i < K; ++i) {
      st.cE[i] *= inv;
      st.cA[i] *= inv;
    }
    const double radius = first.kind == Sym::Kind::Entity ? radius_E_ : radius_A_;
    if (first.kind != Sym::Kind::Neutral && drift.norm() * inv >= radius) return std::nullopt;
    return st;
  };

  std::vector<std::pair<Token, std::vector<double>>> ents;
  for (const Span& s : ctx.layout.entity) {
    auto st = span_state(s);
    if (!st) return fail(Belief::Status::OutOfAlgebra, "entity span content is not a single Gamma value");
    if (st->kind == Sym::Kind::Entity) ents.emplace_back(st->entity, st->cE);
  }
  std::vector<std::pair<std::optional<Phrase>, std::vector<double>>> attrs;
  for (const Span& s : ctx.layout.attribute) {
    auto st = span_state(s);
    if (!st) return fail(Belief::Status::OutOfAlgebra, "attribute span content is not a single Gamma value");
    if (st->kind == Sym::Kind::Attribute) {
      attrs.emplace_back(st->attribute, st->cA);
    } else {
      attrs.emplace_back(std::nullopt, st->cA);
    }
  }

  for (std::size_t i = 0; i < attrs.size(); ++i) {
    for (std::size_t j = i + 1; j < attrs.size(); ++j) {
      if (snap(coord_distance2(attrs[i].second, attrs[j].second)) == 0.0) {
        return fail(Belief::Status::Confused, "two attributes share a binding vector");
      }
    }
  }
  for (std::size_t i = 0; i < ents.size(); ++i) {
    for (std::size_t j = i + 1; j < ents.size(); ++j) {
      if (snap(coord_distance2(ents[i].second, ents[j].second)) == 0.0) {
        return fail(Belief::Status::Confused, "two entities share a binding vector");
      }
    }
  }
  for (const auto& [e, ce] : ents) {
    double best = std::numeric_limits<double>::infinity();
    std::vector<std::size_t> arg;
    for (std::size_t j = 0; j < attrs.size(); ++j) {
      const double d = snap(coord_distance2(ce, attrs[j].second));
      if (d < best) {
        best = d;
        arg = {j};
      } else if (d == best) {
        arg.push_back(j);
      }
    }
    if (arg.size() != 1) return fail(Belief::Status::Confused, "an entity is equidistant from several attributes");
    const auto& a = attrs[arg.front()].first;
    if (!a) return fail(Belief::Status::OutOfAlgebra, "an entity binds to an undecodable attribute span");
    auto [it, inserted] = belief.pairing.emplace(e, *a);
    if (!inserted && it->second != *a) return fail(Belief::Status::Confused, "an entity appears twice with different bindings");
  }
  return belief;
}

// ---------------------------------------------------------------- serialization

TensorArchive ReferenceSemantics::to_archive(const Vocabulary& vocab) const {
  TensorArchive a;
  const std::size_t m = config_.n_layers * config_.d_model;
  nlohmann::json entity_keys = nlohmann::json::array();
  nlohmann::json attribute_keys = nlohmann::json::array();
  std::vector<LayerStack> fe, fa;
  for (const auto& [e, f] : f_E_) {
    entity_keys.push_back(vocab.word(e));
    fe.push_back(f);
  }
  for (const auto& [p, f] : f_A_) {
    attribute_keys.push_back(phrase_text(vocab, p));
    fa.push_back(f);
  }
  a.meta = {{"kind", "oracle:reference"},
            {"n_layers", config_.n_layers},
            {"d_model", config_.d_model},
            {"max_ids", config_.max_ids},
            {"separation", config_.separation},
            {"beta", config_.beta},
            {"feature_scale", config_.feature_scale},
            {"seed", config_.seed},
            {"binding_scale", scale_},
            {"entity_keys", entity_keys},
            {"attribute_keys", attribute_keys}};
  a.add("basis_E", {config_.max_ids, m}, flatten(basis_E_));
  a.add("basis_A", {config_.max_ids, m}, flatten(basis_A_));
  a.add("f_E", {fe.size(), m}, flatten(fe));
  a.add("f_A", {fa.size(), m}, flatten(fa));
  return a;
}

ReferenceSemantics ReferenceSemantics::from_archive(const TensorArchive& archive, const Vocabulary& vocab) {
  if (archive.meta.value("kind", "") != "oracle:reference") throw FormatError("archive is not an oracle:reference");
  try {
    ReferenceSemantics s;
    const auto& m = archive.meta;
    s.config_.n_layers = m.at("n_layers");
    s.config_.d_model = m.at("d_model");
    s.config_.max_ids = m.at("max_ids");
    s.config_.separation = m.at("separation");
    s.config_.beta = m.at("beta");
    s.config_.feature_scale = m.at("feature_scale");
    s.config_.seed = m.at("seed");
    s.scale_ = m.at("binding_scale");
    const std::size_t L = s.config_.n_layers, D = s.config_.d_model;
    s.basis_E_ = unflatten(archive.get("basis_E"), L, D);
    s.basis_A_ = unflatten(archive.get("basis_A"), L, D);
    if (s.basis_E_.size() != s.config_.max_ids || s.basis_A_.size() != s.config_.max_ids) {
      throw FormatError("oracle basis size does not match max_ids");
    }
    const auto fe = unflatten(archive.get("f_E"), L, D);
    const auto fa = unflatten(archive.get("f_A"), L, D);
    const auto& ek = m.at("entity_keys");
    const auto& ak = m.at("attribute_keys");
    if (ek.size() != fe.size() || ak.size() != fa.size()) throw FormatError("oracle feature keys do not match tensors");
    for (std::size_t i = 0; i < fe.size(); ++i) s.f_E_.emplace(vocab.id(ek[i].get<std::string>()), fe[i]);
    for (std::size_t i = 0; i < fa.size(); ++i) s.f_A_.emplace(vocab.tokenize(ak[i].get<std::string>()), fa[i]);
    s.compute_radii();
    return s;
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("malformed oracle archive: ") + e.what());
  }
}

// ---------------------------------------------------------------- direct binding

DirectBindingSemantics DirectBindingSemantics::build(const DirectConfig& config, const TaskSpec& task) {
  if (config.n_layers == 0 || config.d_model == 0) throw ConfigError("DirectConfig: sizes must be positive");
  DirectBindingSemantics s;
  s.config_ = config;
  s.options_ = task.entities;
  s.labels_ = task.attributes;
  for (Token o : s.options_) {
    for (const Phrase& l : s.labels_) {
      const std::uint64_t seed = derive_seed(phrase_seed(config.seed, l), static_cast<std::uint64_t>(o));
      s.lambda_.emplace(std::make_pair(o, l), random_stack(config.n_layers, config.d_model, seed, 1.0));
    }
  }
  s.compute_radius();
  return s;
}

void DirectBindingSemantics::compute_radius() {
  std::vector<const LayerStack*> vs;
  for (const auto& [_, v] : lambda_) vs.push_back(&v);
  radius_ = kRadiusFraction * min_pairwise_distance(vs);
}

const LayerStack& DirectBindingSemantics::lambda(Token option, const Phrase& label) const {
  auto it = lambda_.find({option, label});
  if (it == lambda_.end()) throw InputError("direct binding: (option, label) pair outside the pools");
  return it->second;
}

ZContext DirectBindingSemantics::synth_zcontext(const ContextInstance& ctx) const {
  if (ctx.layout.entity.size() != ctx.n) throw InputError("direct binding: layout does not have n option spans");
  ZContext z;
  z.tokens = ctx.tokens;
  z.residuals.assign(ctx.tokens.size(), LayerStack(config_.n_layers, config_.d_model));
  z.layout = ctx.layout;
  z.position_map = PositionMap::identity(ctx.tokens.size());
  for (std::size_t k = 0; k < ctx.n; ++k) {
    const LayerStack& v = lambda(ctx.entities[k], ctx.attributes[k]);
    const Span s = ctx.layout.entity[k];
    for (std::size_t p = s.begin; p < s.end(); ++p) z.residuals[p] = v;
  }
  return z;
}

AttributeDistribution DirectBindingSemantics::query(const ZContext& z, Token option) const {
  AttributeDistribution out;
  for (const Phrase& l : labels_) out.attributes.emplace_back(l);
  out.probs.assign(labels_.size(), 0.0);
  std::size_t matches = 0;
  for (const Span& span : z.layout.entity) {
    const LayerStack m = z.span_mean(span);
    double best = std::numeric_limits<double>::infinity();
    std::vector<std::pair<Token, Phrase>> arg;
    for (const auto& [key, v] : lambda_) {
      const double d = snap(squared_distance(m, v));
      if (d < best) {
        best = d;
        arg = {key};
      } else if (d == best) {
        arg.push_back(key);
      }
    }
    if (!(std::sqrt(best) <= radius_)) continue;
    std::size_t hits = 0;
    for (const auto& key : arg) hits += key.first == option ? 1 : 0;
    if (hits == 0) continue;
    ++matches;
    for (const auto& key : arg) {
      if (key.first != option) continue;
      for (std::size_t j = 0; j < labels_.size(); ++j) {
        if (labels_[j] == key.second) out.probs[j] += 1.0 / static_cast<double>(hits);
      }
    }
  }
  if (matches == 0) {
    out.entity_found = false;
    for (double& p : out.probs) p = 1.0 / static_cast<double>(labels_.size());
  } else {
    for (double& p : out.probs) p /= static_cast<double>(matches);
  }
  return out;
}

TensorArchive DirectBindingSemantics::to_archive(const Vocabulary& vocab) const {
  TensorArchive a;
  nlohmann::json options = nlohmann::json::array();
  nlohmann::json labels = nlohmann::json::array();
  for (Token o : options_) options.push_back(vocab.word(o));
  for (const Phrase& l : labels_) labels.push_back(phrase_text(vocab, l));
  std::vector<LayerStack> vs;
  for (Token o : options_) {
    for (const Phrase& l : labels_) vs.push_back(lambda(o, l));
  }
  a.meta = {{"kind", "oracle:direct"},
            {"n_layers", config_.n_layers},
            {"d_model", config_.d_model},
            {"seed", config_.seed},
            {"options", options},
            {"labels", labels}};
  a.add("lambda", {vs.size(), config_.n_layers * config_.d_model}, flatten(vs));
  return a;
}

DirectBindingSemantics DirectBindingSemantics::from_archive(const TensorArchive& archive, const Vocabulary& vocab) {
  if (archive.meta.value("kind", "") != "oracle:direct") throw FormatError("archive is not an oracle:direct");
  try {
    DirectBindingSemantics s;
    const auto& m = archive.meta;
    s.config_.n_layers = m.at("n_layers");
    s.config_.d_model = m.at("d_model");
    s.config_.seed = m.at("seed");
    for (const auto& o : m.at("options")) s.options_.push_back(vocab.id(o.get<std::string>()));
    for (const auto& l : m.at("labels")) s.labels_.push_back(vocab.tokenize(l.get<std::string>()));
    const auto vs = unflatten(archive.get("lambda"), s.config_.n_layers, s.config_.d_model);
    if (vs.size() != s.options_.size() * s.labels_.size()) throw FormatError("direct oracle tensor count mismatch");
    std::size_t i = 0;
    for (Token o : s.options_) {
      for (const Phrase& l : s.labels_) s.lambda_.emplace(std::make_pair(o, l), vs[i++]);
    }
    s.compute_radius();
    return s;
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("malformed direct oracle archive: ") + e.what());
  }
}

}  // namespace bindlab
