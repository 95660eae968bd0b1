#include <algorithm>
#include <cmath>
#include <iomanip>
#include <sstream>
#include <string>

#include "bindlab/error.hpp"
#include "bindlab/interventions.hpp"
#include "bindlab/reference.hpp"

namespace bindlab {

namespace {

using Phi = std::vector<std::vector<double>>;

struct RowWriter {
  ResultTable& table;
  std::string experiment;
  std::size_t n;
  std::uint64_t seed;
  std::string model_id;

  void add(const std::string& condition, const std::string& slot, const std::string& metric, double value) {
    table.rows.push_back({experiment, condition, slot, metric, value, n, seed, model_id});
  }
};

std::string slot_name(std::size_t k) { return "E" + std::to_string(k); }

ContextInstance sample_context(const TaskSpec& task, std::size_t n, std::uint64_t seed, std::size_t i) {
  SeededRng rng(derive_seed(seed, i));
  return generate_context(task, n, rng);
}

// Builds the table with query k placed on row correct[k], so the standard
// diagonal scoring measures agreement with `correct`.
LogProbTable relabeled_table(const std::vector<Phi>& phis, const std::vector<std::size_t>& correct) {
  const std::size_t n = correct.size();
  LogProbTable t(phis.size(), n);
  for (std::size_t i = 0; i < phis.size(); ++i) {
    for (std::size_t k = 0; k < n; ++k) {
      for (std::size_t l = 0; l < n; ++l) t(i, correct[k], l) = phis[i][k][l];
    }
  }
  return t;
}

std::vector<std::size_t> identity_perm(std::size_t n) {
  std::vector<std::size_t> p(n);
  for (std::size_t k = 0; k < n; ++k) p[k] = k;
  return p;
}

// Per-slot and mean rows for the three statistics.
void add_summary(RowWriter& w, const std::string& condition, const LogProbTable& t,
                 const std::vector<std::size_t>& correct) {
  const SummaryStatistic cal = median_calibrated_accuracy(t);
  const SummaryStatistic top = top1_accuracy(t);
  const SummaryStatistic mlp = mean_log_prob(t);
  const std::pair<const char*, const SummaryStatistic*> stats[] = {
      {"median_calibrated_accuracy", &cal}, {"top1_accuracy", &top}, {"mean_log_prob", &mlp}};
  for (const auto& [name, s] : stats) {
    for (std::size_t k = 0; k < correct.size(); ++k) w.add(condition, slot_name(k), name, s->sigma[correct[k]]);
    w.add(condition, "mean", name, s->mean());
  }
}

InterventionSpec with_alignment(const ExperimentContext& ctx, const ContextLayout& layout, InterventionSpec spec) {
  if (!ctx.align_attribute_positions) return spec;
  InterventionSpec out = attribute_alignment_spec(layout);
  out.then(spec);
  return out;
}

void require_delta(const DifferenceVectors& d, std::size_t k_max, const BindingSubject& subject, const char* what) {
  if (d.k_max() < k_max) {
    throw ConfigError(std::string(what) + ": difference vectors need k_max >= " + std::to_string(k_max));
  }
  if (d.delta_A.front().rows() != subject.n_layers() || d.delta_A.front().cols() != subject.d_model()) {
    throw ConfigError(std::string(what) + ": difference vectors do not match the subject's shape");
  }
}

double argmax_credit(const std::vector<double>& row, std::size_t expected) {
  const double best = *std::max_element(row.begin(), row.end());
  std::size_t ties = 0;
  for (double x : row) ties += x == best ? 1 : 0;
  return row[expected] == best ? 1.0 / static_cast<double>(ties) : 0.0;
}

}  // namespace

// ---------------------------------------------------------------- factorizability

ResultTable run_factorizability(const ExperimentContext& ctx, std::size_t N) {
  if (N == 0) throw ConfigError("run_factorizability: N must be at least 1");
  const TaskSpec& task = ctx.task;
  constexpr std::size_t n = 2;
  if (task.max_pairs() < 2 * n) throw ConfigError("run_factorizability: task pools too small for two disjoint contexts");
  const ReferenceSemantics predictor = ReferenceSemantics::build(ReferenceConfig{}, task);

  struct Condition {
    std::string name;
    bool entity;
    bool attribute;
    std::size_t k;
  };
  std::vector<Condition> conds = {{"None", false, false, 0}};
  for (std::size_t k = 0; k < n; ++k) {
    conds.push_back({"Entity" + std::to_string(k), true, false, k});
    conds.push_back({"Attribute" + std::to_string(k), false, true, k});
    conds.push_back({"Both" + std::to_string(k), true, true, k});
  }
  const auto build_spec = [](const Condition& c, const ContextInstance& target, const ZContext& source_z,
                             const ContextInstance& source) {
    InterventionSpec spec;
    if (c.entity) spec.substitute_from(target.layout.entity[c.k], source_z, source.layout.entity[c.k]);
    if (c.attribute) spec.substitute_from(target.layout.attribute[c.k], source_z, source.layout.attribute[c.k]);
    return spec;
  };

  struct PerContext {
    std::vector<Phi> phi;  // per condition, 4 x 4
    std::vector<double> agree_sum, agree_count;
  };
  std::vector<PerContext> per(N);
  parallel_for(N, ctx.jobs, [&](std::size_t i) {
    SeededRng rng(derive_seed(ctx.seed, i));
    const ContextInstance c = generate_context(task, n, rng);
    ContextInstance c2;
    for (;;) {
      c2 = generate_context(task, n, rng);
      bool disjoint = true;
      for (std::size_t a = 0; a < n; ++a) {
        for (std::size_t b = 0; b < n; ++b) {
          if (c.entities[a] == c2.entities[b] || c.attributes[a] == c2.attributes[b]) disjoint = false;
        }
      }
      if (disjoint) break;
    }
    const ZContext z = ctx.subject.encode(task, c);
    const ZContext z2 = ctx.subject.encode(task, c2);
    const ZContext oz2 = predictor.synth_zcontext(c2);
    const std::vector<Token> queries = {c.entities[0], c.entities[1], c2.entities[0], c2.entities[1]};
    const std::vector<Phrase> cands = {c.attributes[0], c.attributes[1], c2.attributes[0], c2.attributes[1]};
    PerContext pc;
    for (const auto& cond : conds) {
      const ZContext zi = apply_intervention(z, with_alignment(ctx, c.layout, build_spec(cond, c, z2, c2)));
      const Phi phi = score_queries(ctx.subject, task, c, zi, queries, cands);
      const Belief belief = predictor.predict_belief(c, build_spec(cond, c, oz2, c2));
      double sum = 0.0, count = 0.0;
      if (belief.ok()) {
        for (std::size_t q = 0; q < queries.size(); ++q) {
          auto it = belief.pairing.find(queries[q]);
          if (it == belief.pairing.end()) continue;
          const auto pos = std::find(cands.begin(), cands.end(), it->second);
          if (pos == cands.end()) continue;
          sum += argmax_credit(phi[q], static_cast<std::size_t>(pos - cands.begin()));
          count += 1.0;
        }
      }
      pc.phi.push_back(phi);
      pc.agree_sum.push_back(sum);
      pc.agree_count.push_back(count);
    }
    per[i] = std::move(pc);
  });

  ResultTable table;
  RowWriter w{table, "factorizability", N, ctx.seed, ctx.subject.id()};
  const char* qnames[] = {"E0", "E1", "E'0", "E'1"};
  const char* anames[] = {"A0", "A1", "A'0", "A'1"};
  for (std::size_t ci = 0; ci < conds.size(); ++ci) {
    for (std::size_t q = 0; q < 4; ++q) {
      for (std::size_t a = 0; a < 4; ++a) {
        double s = 0.0;
        for (std::size_t i = 0; i < N; ++i) s += per[i].phi[ci][q][a];
        w.add(conds[ci].name, qnames[q], std::string("mean_log_prob[") + anames[a] + "]", s / static_cast<double>(N));
      }
    }
    double sum = 0.0, count = 0.0;
    for (std::size_t i = 0; i < N; ++i) {
      sum += per[i].agree_sum[ci];
      count += per[i].agree_count[ci];
    }
    w.add(conds[ci].name, "all", "agreement", count > 0.0 ? sum / count : 0.0);
  }
  return table;
}

// ---------------------------------------------------------------- position sweep

ResultTable run_position_sweep(const ExperimentContext& ctx, SweepTarget target, std::size_t N) {
  if (N == 0) throw ConfigError("run_position_sweep: N must be at least 1");
  const TaskSpec& task = ctx.task;
  constexpr std::size_t n = 2;
  const ContextInstance probe = sample_context(task, n, ctx.seed, 0);
  const auto spans_of = [target](const ContextInstance& c) {
    return target == SweepTarget::Entities ? c.layout.entity : c.layout.attribute;
  };
  const auto probe_spans = spans_of(probe);
  if (probe_spans[1].begin < probe_spans[0].begin) throw InputError("run_position_sweep: spans are not in order");
  const std::size_t width = probe_spans[1].begin - probe_spans[0].begin;

  std::vector<std::vector<Phi>> per(N);  // [i][d]
  parallel_for(N, ctx.jobs, [&](std::size_t i) {
    const ContextInstance c = sample_context(task, n, ctx.seed, i);
    const auto spans = spans_of(c);
    if (spans[1].begin - spans[0].begin != width) throw InputError("run_position_sweep: layout varies across contexts");
    const ZContext z = ctx.subject.encode(task, c);
    const std::size_t x0 = spans[0].begin, x1 = spans[1].begin;
    for (std::size_t d = 0; d <= width; ++d) {
      InterventionSpec spec;
      if (d > 0) {
        spec.remap(spans[0], x0 + d);
        spec.remap(spans[1], x1 - d);
      }
      const ZContext zi = apply_intervention(z, spec);
      per[i].push_back(score_queries(ctx.subject, task, c, zi, c.entities, c.attributes));
    }
  });

  ResultTable table;
  const std::string experiment =
      target == SweepTarget::Entities ? "position_sweep_entities" : "position_sweep_attributes";
  RowWriter w{table, experiment, N, ctx.seed, ctx.subject.id()};
  for (std::size_t d = 0; d <= width; ++d) {
    const std::string cond = "shift=" + std::to_string(d);
    std::vector<Phi> phis;
    for (std::size_t i = 0; i < N; ++i) phis.push_back(per[i][d]);
    for (std::size_t k = 0; k < n; ++k) {
      for (std::size_t l = 0; l < n; ++l) {
        double s = 0.0;
        for (std::size_t i = 0; i < N; ++i) s += phis[i][k][l];
        w.add(cond, slot_name(k), "mean_log_prob[A" + std::to_string(l) + "]", s / static_cast<double>(N));
      }
    }
    const LogProbTable t = relabeled_table(phis, identity_perm(n));
    w.add(cond, "mean", "median_calibrated_accuracy", median_calibrated_accuracy(t).mean());
  }
  return table;
}

// ---------------------------------------------------------------- mean interventions

ResultTable run_mean_intervention(const ExperimentContext& ctx, std::size_t n,
                                  const std::vector<MeanCondition>& conditions, const DifferenceVectors& delta,
                                  std::size_t N, const DifferenceVectors* random) {
  if (N == 0) throw ConfigError("run_mean_intervention: N must be at least 1");
  require_delta(delta, 1, ctx.subject, "run_mean_intervention");
  if (random) require_delta(*random, 1, ctx.subject, "run_mean_intervention");
  struct Cond {
    std::string name;
    MeanCondition c;
    const DifferenceVectors* d;
  };
  std::vector<Cond> conds;
  for (auto c : conditions) conds.push_back({to_string(c), c, &delta});
  if (random) {
    for (auto c : conditions) {
      if (c != MeanCondition::Control) conds.push_back({"Random-" + to_string(c), c, random});
    }
  }
  std::vector<std::vector<Phi>> per(N);
  parallel_for(N, ctx.jobs, [&](std::size_t i) {
    const ContextInstance c = sample_context(ctx.task, n, ctx.seed, i);
    const ZContext z = ctx.subject.encode(ctx.task, c);
    for (const auto& cond : conds) {
      const InterventionSpec spec = with_alignment(ctx, c.layout, mean_intervention_spec(c.layout, cond.c, *cond.d));
      per[i].push_back(score_queries(ctx.subject, ctx.task, c, apply_intervention(z, spec), c.entities, c.attributes));
    }
  });
  ResultTable table;
  RowWriter w{table, "mean_intervention", N, ctx.seed, ctx.subject.id()};
  const auto id = identity_perm(n);
  for (std::size_t ci = 0; ci < conds.size(); ++ci) {
    std::vector<Phi> phis;
    for (std::size_t i = 0; i < N; ++i) phis.push_back(per[i][ci]);
    add_summary(w, conds[ci].name, relabeled_table(phis, id), id);
  }
  return table;
}

// ---------------------------------------------------------------- geometry grid

std::vector<double> GridSpec::values() const {
  if (steps < 2 || !(max > min)) throw ConfigError("GridSpec: need steps >= 2 and max > min");
  std::vector<double> v(steps);
  for (std::size_t i = 0; i < steps; ++i) {
    v[i] = min + static_cast<double>(i) * (max - min) / static_cast<double>(steps - 1);
  }
  return v;
}

GeometryResult run_geometry_grid(const ExperimentContext& ctx, double eta0, double nu0, const GridSpec& grid,
                                 const DifferenceVectors& basis, std::size_t N) {
  if (N == 0) throw ConfigError("run_geometry_grid: N must be at least 1");
  require_delta(basis, 2, ctx.subject, "run_geometry_grid");
  const std::vector<double> axis = grid.values();
  const auto h = [&basis](const std::vector<LayerStack>& d, double eta, double nu) {
    LayerStack v = d[1] * eta;
    v.add_scaled(d[2], nu);
    return v;
  };
  const LayerStack hE0 = h(basis.delta_E, eta0, nu0);
  const LayerStack hA0 = h(basis.delta_A, eta0, nu0);
  const std::size_t P = axis.size() * axis.size();

  std::vector<std::vector<Phi>> per(N);  // [i][point], last entry = erased only
  parallel_for(N, ctx.jobs, [&](std::size_t i) {
    const ContextInstance c = sample_context(ctx.task, 2, ctx.seed, i);
    const ZContext z = ctx.subject.encode(ctx.task, c);
    const auto run = [&](const InterventionSpec& spec) {
      return score_queries(ctx.subject, ctx.task, c, apply_intervention(z, with_alignment(ctx, c.layout, spec)),
                           c.entities, c.attributes);
    };
    for (double eta : axis) {
      for (double nu : axis) {
        InterventionSpec spec;
        LayerStack vE1 = h(basis.delta_E, eta, nu) - basis.delta_E[1];
        LayerStack vA1 = h(basis.delta_A, eta, nu) - basis.delta_A[1];
        spec.offset(c.layout.entity[0], hE0).offset(c.layout.attribute[0], hA0);
        spec.offset(c.layout.entity[1], vE1).offset(c.layout.attribute[1], vA1);
        per[i].push_back(run(spec));
      }
    }
    InterventionSpec erase;
    erase.offset(c.layout.entity[1], basis.delta_E[1], -1.0).offset(c.layout.attribute[1], basis.delta_A[1], -1.0);
    per[i].push_back(run(erase));
  });

  GeometryResult result;
  RowWriter w{result.table, "geometry_grid", N, ctx.seed, ctx.subject.id()};
  const auto id = identity_perm(2);
  const auto accuracy_at = [&](std::size_t p) {
    std::vector<Phi> phis;
    for (std::size_t i = 0; i < N; ++i) phis.push_back(per[i][p]);
    return median_calibrated_accuracy(relabeled_table(phis, id)).mean();
  };
  result.erased_accuracy = accuracy_at(P);
  w.add("erased", "mean", "median_calibrated_accuracy", result.erased_accuracy);
  std::size_t p = 0;
  for (double eta : axis) {
    for (double nu : axis) {
      const double acc = accuracy_at(p++);
      result.points.push_back({eta, nu, acc});
      std::ostringstream cond;
      cond << std::setprecision(17) << "eta=" << eta << ";nu=" << nu;
      w.add(cond.str(), "mean", "median_calibrated_accuracy", acc);
    }
  }
  return result;
}

// ---------------------------------------------------------------- cyclic shift

ResultTable run_cyclic_shift(const ExperimentContext& ctx, std::size_t n, std::size_t shift,
                             const DifferenceVectors& delta, std::size_t N) {
  if (N == 0) throw ConfigError("run_cyclic_shift: N must be at least 1");
  if (n < 2) throw ConfigError("run_cyclic_shift: n must be at least 2");
  require_delta(delta, n - 1, ctx.subject, "run_cyclic_shift");
  std::vector<std::size_t> pi(n), pi_inv(n);
  for (std::size_t k = 0; k < n; ++k) {
    pi[k] = (k + shift) % n;
    pi_inv[pi[k]] = k;
  }
  // spec shifting the IDs of one kind by perm; entity / attribute.
  const auto shift_spec = [&delta](const ContextLayout& layout, bool entity, const std::vector<std::size_t>& perm) {
    InterventionSpec spec;
    for (std::size_t k = 0; k < perm.size(); ++k) {
      if (perm[k] == k) continue;
      const auto& d = entity ? delta.delta_E : delta.delta_A;
      LayerStack v = d[perm[k]] - d[k];
      spec.offset(entity ? layout.entity[k] : layout.attribute[k], std::move(v));
    }
    return spec;
  };
  struct Cond {
    std::string name;
    bool intervene;
    bool entity;
    const std::vector<std::size_t>* perm;
    std::vector<std::size_t> correct;
  };
  std::vector<Cond> conds = {{"Control", false, false, nullptr, identity_perm(n)},
                             {"Entity[pi]", true, true, &pi, pi},
                             {"Entity[pi_inv]", true, true, &pi_inv, pi_inv},
                             {"Attribute[pi]", true, false, &pi, pi_inv},
                             {"Attribute[pi_inv]", true, false, &pi_inv, pi}};
  std::vector<std::vector<Phi>> per(N);
  parallel_for(N, ctx.jobs, [&](std::size_t i) {
    const ContextInstance c = sample_context(ctx.task, n, ctx.seed, i);
    const ZContext z = ctx.subject.encode(ctx.task, c);
    for (const auto& cond : conds) {
      InterventionSpec spec = cond.intervene ? shift_spec(c.layout, cond.entity, *cond.perm) : InterventionSpec{};
      spec = with_alignment(ctx, c.layout, std::move(spec));
      per[i].push_back(score_queries(ctx.subject, ctx.task, c, apply_intervention(z, spec), c.entities, c.attributes));
    }
  });
  ResultTable table;
  RowWriter w{table, "cyclic_shift", N, ctx.seed, ctx.subject.id()};
  std::vector<double> means(conds.size());
  for (std::size_t ci = 0; ci < conds.size(); ++ci) {
    std::vector<Phi> phis;
    for (std::size_t i = 0; i < N; ++i) phis.push_back(per[i][ci]);
    const LogProbTable t = relabeled_table(phis, conds[ci].correct);
    add_summary(w, conds[ci].name, t, conds[ci].correct);
    means[ci] = median_calibrated_accuracy(t).mean();
  }
  w.add("Entity", "mean", "median_calibrated_accuracy", 0.5 * (means[1] + means[2]));
  w.add("Attribute", "mean", "median_calibrated_accuracy", 0.5 * (means[3] + means[4]));
  return table;
}

// ---------------------------------------------------------------- transfer

ResultTable run_transfer(const ExperimentContext& ctx, std::size_t n, const DifferenceVectors& target_delta,
                         const std::vector<TransferSource>& sources, std::size_t N) {
  if (N == 0) throw ConfigError("run_transfer: N must be at least 1");
  require_delta(target_delta, n - 1, ctx.subject, "run_transfer");
  for (const auto& s : sources) require_delta(*s.delta, n - 1, ctx.subject, "run_transfer");
  const DifferenceVectors random = random_direction_baseline(target_delta, derive_seed(ctx.seed, 0x7a5d0));

  enum class Kind { Control, Transfer, Zeros, Random, RandomErased };
  struct Cond {
    std::string name;
    Kind kind;
    const DifferenceVectors* src;
  };
  std::vector<Cond> conds = {{"Control", Kind::Control, nullptr}};
  for (const auto& s : sources) conds.push_back({"Transfer:" + s.name, Kind::Transfer, s.delta});
  conds.push_back({"Zeros", Kind::Zeros, nullptr});
  conds.push_back({"Random", Kind::Random, &random});
  conds.push_back({"RandomErased", Kind::RandomErased, &random});

  const auto build = [&](const Cond& cond, const ContextLayout& layout) {
    InterventionSpec spec;
    if (cond.kind == Kind::Control) return spec;
    for (std::size_t k = 0; k < n; ++k) {
      LayerStack vE(target_delta.delta_E[k].rows(), target_delta.delta_E[k].cols());
      LayerStack vA = vE;
      if (cond.kind != Kind::Random) {
        vE -= target_delta.delta_E[k];
        vA -= target_delta.delta_A[k];
      }
      if (cond.src) {
        vE += cond.src->delta_E[k];
        vA += cond.src->delta_A[k];
      }
      spec.offset(layout.entity[k], std::move(vE));
      spec.offset(layout.attribute[k], std::move(vA));
    }
    return spec;
  };

  std::vector<std::vector<Phi>> per(N);
  parallel_for(N, ctx.jobs, [&](std::size_t i) {
    const ContextInstance c = sample_context(ctx.task, n, ctx.seed, i);
    const ZContext z = ctx.subject.encode(ctx.task, c);
    for (const auto& cond : conds) {
      const InterventionSpec spec = with_alignment(ctx, c.layout, build(cond, c.layout));
      per[i].push_back(score_queries(ctx.subject, ctx.task, c, apply_intervention(z, spec), c.entities, c.attributes));
    }
  });
  ResultTable table;
  RowWriter w{table, "transfer", N, ctx.seed, ctx.subject.id()};
  const auto id = identity_perm(n);
  for (std::size_t ci = 0; ci < conds.size(); ++ci) {
    std::vector<Phi> phis;
    for (std::size_t i = 0; i < N; ++i) phis.push_back(per[i][ci]);
    add_summary(w, conds[ci].name, relabeled_table(phis, id), id);
  }
  return table;
}

// ---------------------------------------------------------------- MCQ suffix copy

ResultTable run_mcq_suffix_copy(const ExperimentContext& ctx, const std::vector<std::size_t>& suffix_lengths,
                                std::size_t N) {
  if (N == 0) throw ConfigError("run_mcq_suffix_copy: N must be at least 1");
  constexpr std::size_t n = 2;
  const ContextInstance probe = sample_context(ctx.task, n, ctx.seed, 0);
  if (probe.layout.line.size() != n) throw ConfigError("run_mcq_suffix_copy: task " + ctx.task.name + " has no line layout");
  for (std::size_t s : suffix_lengths) {
    for (const Span& line : probe.layout.line) {
      if (s > line.length) throw ConfigError("run_mcq_suffix_copy: suffix length exceeds the line length");
    }
  }
  std::vector<std::vector<Phi>> per(N);
  parallel_for(N, ctx.jobs, [&](std::size_t i) {
    const ContextInstance c = sample_context(ctx.task, n, ctx.seed, i);
    std::vector<Phrase> swapped(c.attributes.rbegin(), c.attributes.rend());
    const ContextInstance src = make_context(ctx.task, c.entities, swapped);
    const ZContext z = ctx.subject.encode(ctx.task, c);
    const ZContext zs = ctx.subject.encode(ctx.task, src);
    for (std::size_t s : suffix_lengths) {
      InterventionSpec spec;
      if (s > 0) {
        for (std::size_t k = 0; k < c.layout.line.size(); ++k) {
          const Span t{c.layout.line[k].end() - s, s};
          const Span from{src.layout.line[k].end() - s, s};
          spec.substitute_from(t, zs, from);
        }
      }
      per[i].push_back(score_queries(ctx.subject, ctx.task, c, apply_intervention(z, spec), c.entities, c.attributes));
    }
  });
  ResultTable table;
  RowWriter w{table, "mcq_suffix_copy", N, ctx.seed, ctx.subject.id()};
  std::vector<std::size_t> swapped_perm(n);
  for (std::size_t k = 0; k < n; ++k) swapped_perm[k] = n - 1 - k;
  for (std::size_t si = 0; si < suffix_lengths.size(); ++si) {
    std::vector<Phi> phis;
    for (std::size_t i = 0; i < N; ++i) phis.push_back(per[i][si]);
    add_summary(w, "suffix=" + std::to_string(suffix_lengths[si]), relabeled_table(phis, swapped_perm), swapped_perm);
  }
  return table;
}

}  // namespace bindlab
