#include "bindlab/interventions.hpp"

#include <cmath>
#include <iomanip>
#include <sstream>

#include "bindlab/error.hpp"

namespace bindlab {

// ---------------------------------------------------------------- difference vectors

TensorArchive DifferenceVectors::to_archive() const {
  TensorArchive a;
  const std::size_t L = delta_A.empty() ? 0 : delta_A.front().rows();
  const std::size_t D = delta_A.empty() ? 0 : delta_A.front().cols();
  a.meta = {{"kind", "difference_vectors"}, {"task", task},       {"model_id", model_id},
            {"sample_count", sample_count}, {"k_max", k_max()}, {"n_layers", L},
            {"d_model", D}};
  for (std::size_t k = 0; k < delta_A.size(); ++k) {
    a.add("delta_E." + std::to_string(k), {L, D}, delta_E[k].raw());
    a.add("delta_A." + std::to_string(k), {L, D}, delta_A[k].raw());
  }
  return a;
}

DifferenceVectors DifferenceVectors::from_archive(const TensorArchive& archive) {
  if (archive.meta.value("kind", "") != "difference_vectors") throw FormatError("archive does not hold difference vectors");
  try {
    DifferenceVectors d;
    d.task = archive.meta.at("task");
    d.model_id = archive.meta.at("model_id");
    d.sample_count = archive.meta.at("sample_count");
    const std::size_t k_max = archive.meta.at("k_max");
    const std::size_t L = archive.meta.at("n_layers");
    const std::size_t D = archive.meta.at("d_model");
    for (std::size_t k = 0; k <= k_max; ++k) {
      d.delta_E.emplace_back(L, D, archive.get("delta_E." + std::to_string(k)).data);
      d.delta_A.emplace_back(L, D, archive.get("delta_A." + std::to_string(k)).data);
    }
    return d;
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("malformed difference-vector archive: ") + e.what());
  }
}

namespace {

ContextInstance swap_pairs(const TaskSpec& task, const ContextInstance& c, std::size_t a, std::size_t b) {
  std::vector<Token> es = c.entities;
  std::vector<Phrase> as = c.attributes;
  std::swap(es[a], es[b]);
  std::swap(as[a], as[b]);
  return make_context(task, es, as);
}

}  // namespace

DifferenceVectors estimate_difference_vectors(const BindingSubject& subject, const TaskSpec& task, std::size_t n,
                                              std::size_t k_max, std::size_t N, std::uint64_t seed,
                                              Pairing pairing, unsigned jobs) {
  if (N == 0) throw ConfigError("estimate_difference_vectors: N must be at least 1");
  if (k_max >= n) throw ConfigError("estimate_difference_vectors: k_max must be below n");
  if (n < 2 || n > task.max_pairs()) throw ConfigError("estimate_difference_vectors: n out of range for task " + task.name);
  const std::size_t L = subject.n_layers();
  const std::size_t D = subject.d_model();

  struct Sample {
    std::vector<LayerStack> dE, dA;
  };
  std::vector<Sample> samples(N);
  parallel_for(N, jobs, [&](std::size_t i) {
    SeededRng rng(derive_seed(seed, i));
    const ContextInstance c = generate_context(task, n, rng);
    const ZContext z = subject.encode(task, c);
    Sample s;
    s.dE.assign(k_max + 1, LayerStack(L, D));
    s.dA.assign(k_max + 1, LayerStack(L, D));
    if (pairing == Pairing::Independent) {
      const ContextInstance c2 = generate_context(task, n, rng);
      const ZContext z2 = subject.encode(task, c2);
      const LayerStack e0 = z2.span_mean(c2.layout.entity[0]);
      const LayerStack a0 = z2.span_mean(c2.layout.attribute[0]);
      for (std::size_t k = 1; k <= k_max; ++k) {
        s.dE[k] = z.span_mean(c.layout.entity[k]) - e0;
        s.dA[k] = z.span_mean(c.layout.attribute[k]) - a0;
      }
    } else {
      for (std::size_t k = 1; k <= k_max; ++k) {
        const ContextInstance c2 = swap_pairs(task, c, 0, k);
        const ZContext z2 = subject.encode(task, c2);
        s.dE[k] = z.span_mean(c.layout.entity[k]) - z2.span_mean(c2.layout.entity[0]);
        s.dA[k] = z.span_mean(c.layout.attribute[k]) - z2.span_mean(c2.layout.attribute[0]);
      }
    }
    samples[i] = std::move(s);
  });

  DifferenceVectors out;
  out.task = task.name;
  out.model_id = subject.id();
  out.sample_count = N;
  out.delta_E.assign(k_max + 1, LayerStack(L, D));
  out.delta_A.assign(k_max + 1, LayerStack(L, D));
  for (std::size_t i = 0; i < N; ++i) {
    for (std::size_t k = 1; k <= k_max; ++k) {
      out.delta_E[k] += samples[i].dE[k];
      out.delta_A[k] += samples[i].dA[k];
    }
  }
  const double inv = 1.0 / static_cast<double>(N);
  for (std::size_t k = 1; k <= k_max; ++k) {
    out.delta_E[k] *= inv;
    out.delta_A[k] *= inv;
  }
  return out;
}

DifferenceVectors random_direction_baseline(const DifferenceVectors& delta, std::uint64_t seed) {
  DifferenceVectors out = delta;
  SeededRng rng(seed);
  const auto randomize = [&rng](LayerStack& s) {
    if (!s.all_finite()) throw NumericError("random_direction_baseline: non-finite input");
    for (std::size_t l = 0; l < s.rows(); ++l) {
      auto row = s.row(l);
      double target = 0.0;
      for (double x : row) target += x * x;
      target = std::sqrt(target);
      std::vector<double> g(row.size());
      double norm = 0.0;
      for (double& x : g) {
        x = rng.normal();
        norm += x * x;
      }
      norm = std::sqrt(norm);
      for (std::size_t i = 0; i < row.size(); ++i) row[i] = target == 0.0 ? 0.0 : g[i] * (target / norm);
    }
  };
  for (auto& s : out.delta_E) randomize(s);
  for (auto& s : out.delta_A) randomize(s);
  out.model_id = delta.model_id + "+random";
  return out;
}

// ---------------------------------------------------------------- results

void ResultTable::append(const ResultTable& other) { rows.insert(rows.end(), other.rows.begin(), other.rows.end()); }

bool ResultTable::contains(const std::string& condition, const std::string& query_slot, const std::string& metric) const {
  for (const auto& r : rows) {
    if (r.condition == condition && r.query_slot == query_slot && r.metric == metric) return true;
  }
  return false;
}

double ResultTable::value(const std::string& condition, const std::string& query_slot, const std::string& metric) const {
  for (const auto& r : rows) {
    if (r.condition == condition && r.query_slot == query_slot && r.metric == metric) return r.value;
  }
  throw InputError("no result row for " + condition + "/" + query_slot + "/" + metric);
}

namespace {

const char* kCsvHeader = "experiment,condition,query_slot,metric,value,n,seed,model_id";

void check_field(const std::string& s) {
  if (s.find_first_of(",\n\r\"") != std::string::npos) throw InputError("result field contains a delimiter: " + s);
}

std::vector<std::string> split(const std::string& line, char sep) {
  std::vector<std::string> out;
  std::string cur;
  for (char c : line) {
    if (c == sep) {
      out.push_back(cur);
      cur.clear();
    } else {
      cur.push_back(c);
    }
  }
  out.push_back(cur);
  return out;
}

}  // namespace

std::string ResultTable::to_csv() const {
  std::ostringstream out;
  out << std::setprecision(17);
  out << kCsvHeader << '\n';
  for (const auto& r : rows) {
    check_field(r.experiment);
    check_field(r.condition);
    check_field(r.query_slot);
    check_field(r.metric);
    check_field(r.model_id);
    out << r.experiment << ',' << r.condition << ',' << r.query_slot << ',' << r.metric << ',' << r.value << ','
        << r.n << ',' << r.seed << ',' << r.model_id << '\n';
  }
  return out.str();
}

ResultTable ResultTable::from_csv(const std::string& text) {
  std::istringstream in(text);
  std::string line;
  if (!std::getline(in, line) || line != kCsvHeader) throw FormatError("result CSV: unexpected header");
  ResultTable t;
  std::size_t line_no = 1;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    const auto f = split(line, ',');
    if (f.size() != 8) throw FormatError("result CSV line " + std::to_string(line_no) + ": expected 8 fields");
    try {
      ResultRow r;
      r.experiment = f[0];
      r.condition = f[1];
      r.query_slot = f[2];
      r.metric = f[3];
      r.value = std::stod(f[4]);
      r.n = std::stoull(f[5]);
      r.seed = std::stoull(f[6]);
      r.model_id = f[7];
      t.rows.push_back(std::move(r));
    } catch (const std::exception&) {
      throw FormatError("result CSV line " + std::to_string(line_no) + ": malformed number");
    }
  }
  return t;
}

nlohmann::json ResultTable::to_json(const nlohmann::json& manifest) const {
  nlohmann::json rs = nlohmann::json::array();
  for (const auto& r : rows) {
    rs.push_back({{"experiment", r.experiment},
                  {"condition", r.condition},
                  {"query_slot", r.query_slot},
                  {"metric", r.metric},
                  {"value", r.value},
                  {"n", r.n},
                  {"seed", r.seed},
                  {"model_id", r.model_id}});
  }
  return {{"manifest", manifest}, {"rows", rs}};
}

// ---------------------------------------------------------------- specs

std::string to_string(MeanCondition c) {
  switch (c) {
    case MeanCondition::Control: return "Control";
    case MeanCondition::Attribute: return "Attribute";
    case MeanCondition::Entity: return "Entity";
    case MeanCondition::Both: return "Both";
  }
  return "?";
}

InterventionSpec mean_intervention_spec(const ContextLayout& layout, MeanCondition c, const DifferenceVectors& delta) {
  InterventionSpec spec;
  if (c == MeanCondition::Control) return spec;
  if (delta.k_max() < 1) throw ConfigError("mean intervention needs Delta(1)");
  if (layout.entity.size() < 2 || layout.attribute.size() < 2) throw InterventionError("mean intervention needs two pairs");
  if (c == MeanCondition::Entity || c == MeanCondition::Both) {
    spec.offset(layout.entity[0], delta.delta_E[1], +1.0);
    spec.offset(layout.entity[1], delta.delta_E[1], -1.0);
  }
  if (c == MeanCondition::Attribute || c == MeanCondition::Both) {
    spec.offset(layout.attribute[0], delta.delta_A[1], +1.0);
    spec.offset(layout.attribute[1], delta.delta_A[1], -1.0);
  }
  return spec;
}

InterventionSpec attribute_alignment_spec(const ContextLayout& layout) {
  InterventionSpec spec;
  if (layout.attribute.empty()) return spec;
  const std::size_t x = layout.attribute.front().begin;
  for (const Span& s : layout.attribute) spec.remap(s, x);
  return spec;
}

std::vector<std::vector<double>> score_queries(const BindingSubject& subject, const TaskSpec& task,
                                               const ContextInstance& ctx, const ZContext& z,
                                               const std::vector<Token>& query_entities,
                                               const std::vector<Phrase>& attributes) {
  std::vector<Token> candidates;
  candidates.reserve(attributes.size());
  for (const Phrase& a : attributes) candidates.push_back(answer_token(task, a));
  std::vector<std::vector<double>> phi;
  phi.reserve(query_entities.size());
  for (Token q : query_entities) {
    const QueryRendering r = render_query(task, ctx, q);
    phi.push_back(subject.answer_log_probs(task, z, r, candidates));
  }
  return phi;
}

}  // namespace bindlab
