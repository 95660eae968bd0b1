#include <doctest.h>

#include <cmath>

#include "bindlab/error.hpp"
#include "bindlab/interventions.hpp"
#include "bindlab/reference.hpp"
#include "bindlab/tolerances.hpp"

using namespace bindlab;

namespace {

const TaskSuite& suite() {
  static const TaskSuite s = TaskSuite::builtin();
  return s;
}

const ReferenceSubject& oracle() {
  static const ReferenceSubject s(ReferenceSemantics::build(ReferenceConfig{}, suite().task("capitals")));
  return s;
}

double max_abs_diff(const LayerStack& a, const LayerStack& b) {
  double m = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a.raw()[i] - b.raw()[i]));
  return m;
}

double max_abs_diff(const ZContext& a, const ZContext& b) {
  double m = 0.0;
  for (std::size_t p = 0; p < a.length(); ++p) m = std::max(m, max_abs_diff(a.residuals[p], b.residuals[p]));
  return m;
}

const DifferenceVectors& capitals_delta(std::size_t n) {
  static std::map<std::size_t, DifferenceVectors> cache;
  auto it = cache.find(n);
  if (it == cache.end()) {
    it = cache.emplace(n, estimate_difference_vectors(oracle(), suite().task("capitals"), n, n - 1, 200, 7)).first;
  }
  return it->second;
}

ZContext random_z(const ContextInstance& c, SeededRng& rng) {
  ZContext z;
  z.tokens = c.tokens;
  z.layout = c.layout;
  z.position_map = PositionMap::identity(c.tokens.size());
  for (std::size_t p = 0; p < c.tokens.size(); ++p) {
    LayerStack s(2, 8);
    for (double& x : s.values()) x = rng.normal();
    z.residuals.push_back(s);
  }
  return z;
}

}  // namespace

TEST_CASE("substitution and offset algebra") {
  const auto& task = suite().task("capitals");
  SeededRng rng(3);
  for (int trial = 0; trial < 100; ++trial) {
    const ContextInstance c = generate_context(task, 2 + rng.uniform_index(3), rng);
    const ZContext z = random_z(c, rng);
    const Span s = c.layout.attribute[rng.uniform_index(c.n)];
    CHECK(substitute(z, s, z, s) == z);
    CHECK(apply_intervention(z, InterventionSpec{}) == z);

    LayerStack v(2, 8);
    for (double& x : v.values()) x = rng.normal();
    InterventionSpec there_and_back;
    there_and_back.offset(s, v).offset(s, v, -1.0);
    CHECK(max_abs_diff(apply_intervention(z, there_and_back), z) <= 1e-12);

    // Composition: one spec built with then() equals applying its parts in turn.
    const Span e = c.layout.entity[0];
    InterventionSpec first, second;
    first.offset(e, v);
    second.substitute_from(s, z, c.layout.attribute[0]);
    InterventionSpec both = first;
    both.then(second);
    CHECK(apply_intervention(z, both) == apply_intervention(apply_intervention(z, first), second));

    InterventionSpec moved;
    moved.remap(s, 0);
    const ZContext zr = apply_intervention(z, moved);
    CHECK(zr.residuals == z.residuals);
    for (std::size_t j = 0; j < s.length; ++j) CHECK(zr.position_map.apparent[s.begin + j] == j);
  }
}

TEST_CASE("layer-restricted substitution") {
  const auto& task = suite().task("capitals");
  SeededRng rng(4);
  const ContextInstance c = generate_context(task, 2, rng);
  const ZContext z = random_z(c, rng);
  const ZContext donor = random_z(c, rng);
  const Span s = c.layout.entity[1];
  const ZContext out = substitute(z, s, donor, s, LayerRange{1, 2});
  for (std::size_t p = s.begin; p < s.end(); ++p) {
    CHECK(out.residuals[p].row_vector(0) == z.residuals[p].row_vector(0));
    CHECK(out.residuals[p].row_vector(1) == donor.residuals[p].row_vector(1));
  }
  CHECK_THROWS_AS(substitute(z, s, donor, s, LayerRange{1, 1}), InterventionError);
  CHECK_THROWS_AS(substitute(z, s, donor, s, LayerRange{0, 3}), InterventionError);
  CHECK_THROWS_AS(substitute(z, Span{c.tokens.size() - 1, 2}, donor, s), InterventionError);
  CHECK_THROWS_AS(substitute(z, s, donor, c.layout.attribute[0]), InterventionError);
  InterventionSpec bad;
  bad.offset(s, LayerStack(3, 8));
  CHECK_THROWS_AS(apply_intervention(z, bad), InterventionError);
}

TEST_CASE("matched pairing recovers the binding vectors exactly") {
  const auto& task = suite().task("capitals");
  const auto& sem = oracle().semantics();
  const auto d = estimate_difference_vectors(oracle(), task, 3, 2, 50, 11, Pairing::MatchedAttribute);
  REQUIRE(d.k_max() == 2);
  CHECK(d.delta_A[0].norm() == 0.0);
  for (std::size_t k = 1; k <= 2; ++k) {
    CHECK(max_abs_diff(d.delta_A[k], sem.b_A(k) - sem.b_A(0)) <= tol::kAlgebraic);
    CHECK(max_abs_diff(d.delta_E[k], sem.b_E(k) - sem.b_E(0)) <= tol::kAlgebraic);
  }
  // Independent pairing adds feature noise off the binding subspace only.
  const auto di = estimate_difference_vectors(oracle(), task, 3, 2, 50, 11);
  for (std::size_t k = 1; k <= 2; ++k) {
    CHECK(max_abs_diff(sem.project(di.delta_A[k]), sem.b_A(k) - sem.b_A(0)) <= 1e-9);
  }
  CHECK_THROWS_AS(estimate_difference_vectors(oracle(), task, 2, 2, 10, 0), ConfigError);
  CHECK_THROWS_AS(estimate_difference_vectors(oracle(), task, 2, 1, 0, 0), ConfigError);
  const auto back = DifferenceVectors::from_archive(d.to_archive());
  CHECK(back.delta_A == d.delta_A);
  CHECK(back.delta_E == d.delta_E);
  CHECK(back.sample_count == d.sample_count);
}

TEST_CASE("difference vectors are reproducible and parallel-invariant") {
  const auto& task = suite().task("capitals");
  const auto a = estimate_difference_vectors(oracle(), task, 2, 1, 40, 5, Pairing::Independent, 1);
  const auto b = estimate_difference_vectors(oracle(), task, 2, 1, 40, 5, Pairing::Independent, 4);
  CHECK(a.delta_A == b.delta_A);
  CHECK(a.delta_E == b.delta_E);
}

TEST_CASE("random-direction baseline") {
  const auto& d = capitals_delta(3);
  const auto r = random_direction_baseline(d, 99);
  CHECK(r.delta_A[0].norm() == 0.0);
  double worst_cos = 0.0;
  for (std::size_t k = 1; k <= d.k_max(); ++k) {
    for (std::size_t l = 0; l < d.delta_A[k].rows(); ++l) {
      const Vector a = d.delta_A[k].row_vector(l), b = r.delta_A[k].row_vector(l);
      CHECK(std::abs(b.norm() - a.norm()) <= 1e-12 * (1.0 + a.norm()));
      if (a.norm() > 0.0) worst_cos = std::max(worst_cos, std::abs(a.dot(b)) / (a.norm() * b.norm()));
    }
  }
  CHECK(worst_cos < 0.4);
  CHECK(random_direction_baseline(d, 99).delta_A == r.delta_A);
  CHECK_FALSE(random_direction_baseline(d, 100).delta_A == r.delta_A);
}

TEST_CASE("mean interventions on the reference oracle") {
  const ExperimentContext ctx{oracle(), suite().task("capitals"), 3};
  const auto& d = capitals_delta(2);
  const auto rnd = random_direction_baseline(d, 1);
  const auto t = run_mean_intervention(
      ctx, 2, {MeanCondition::Control, MeanCondition::Attribute, MeanCondition::Entity, MeanCondition::Both}, d, 30,
      &rnd);
  const std::string m = "median_calibrated_accuracy";
  CHECK(t.value("Control", "mean", m) == 1.0);
  CHECK(t.value("Attribute", "mean", m) == 0.0);
  CHECK(t.value("Entity", "mean", m) == 0.0);
  CHECK(t.value("Both", "mean", m) == 1.0);
  CHECK(t.value("Random-Both", "mean", m) == 1.0);
  CHECK(t.contains("Random-Entity", "E1", "top1_accuracy"));
  CHECK_FALSE(t.contains("Random-Control", "mean", m));
}

TEST_CASE("cyclic shift on the reference oracle") {
  const ExperimentContext ctx{oracle(), suite().task("capitals"), 5};
  const auto t = run_cyclic_shift(ctx, 3, 1, capitals_delta(3), 20);
  for (const char* c : {"Control", "Entity[pi]", "Entity[pi_inv]", "Attribute[pi]", "Attribute[pi_inv]", "Entity",
                        "Attribute"}) {
    CHECK(t.value(c, "mean", "median_calibrated_accuracy") == 1.0);
  }
}

TEST_CASE("geometry grid on the reference oracle") {
  const ExperimentContext ctx{oracle(), suite().task("capitals"), 6};
  const auto d = estimate_difference_vectors(oracle(), suite().task("capitals"), 3, 2, 100, 6);
  const auto g = run_geometry_grid(ctx, 0.5, 0.5, GridSpec{-1.0, 2.0, 7}, d, 10);
  CHECK(g.erased_accuracy == 0.5);
  REQUIRE(g.points.size() == 49);
  for (const auto& p : g.points) {
    if (p.eta == 0.5 && p.nu == 0.5) CHECK(p.accuracy == 0.5);
    else CHECK(p.accuracy == 1.0);
  }
}

TEST_CASE("transfer on the reference oracle") {
  const auto sem = ReferenceSemantics::build(ReferenceConfig{}, std::vector<const TaskSpec*>{
                                                                     &suite().task("capitals"),
                                                                     &suite().task("parallel")});
  const ReferenceSubject subject(sem);
  const auto& tar = suite().task("capitals");
  const auto dt = estimate_difference_vectors(subject, tar, 3, 2, 100, 1);
  const auto ds = estimate_difference_vectors(subject, suite().task("parallel"), 3, 2, 100, 2);
  const ExperimentContext ctx{subject, tar, 8};
  const auto t = run_transfer(ctx, 3, dt, {{"capitals", &dt}, {"parallel", &ds}}, 20);
  const std::string m = "median_calibrated_accuracy";
  CHECK(t.value("Control", "mean", m) == 1.0);
  CHECK(t.value("Transfer:capitals", "mean", m) == 1.0);
  CHECK(t.value("Transfer:parallel", "mean", m) == 1.0);
  CHECK(t.value("Zeros", "mean", m) == doctest::Approx(1.0 / 3.0).epsilon(1e-12));
  CHECK(t.value("Random", "mean", m) == 1.0);
  CHECK(t.contains("RandomErased", "mean", m));
}

TEST_CASE("factorizability and position sweep on the reference oracle") {
  const ExperimentContext ctx{oracle(), suite().task("capitals"), 2};
  const auto f = run_factorizability(ctx, 10);
  for (const char* c : {"None", "Entity0", "Attribute1", "Both1"}) CHECK(f.value(c, "all", "agreement") == 1.0);
  const auto p = run_position_sweep(ctx, SweepTarget::Entities, 10);
  for (const auto& row : p.rows) {
    if (row.metric == "median_calibrated_accuracy") CHECK(row.value == 1.0);
  }
}

TEST_CASE("MCQ suffix copy separates direct binding from binding IDs") {
  const auto& task = suite().task("mcq");
  const ReferenceSubject ref(ReferenceSemantics::build(ReferenceConfig{}, task));
  const DirectSubject direct(DirectBindingSemantics::build(DirectConfig{}, task));
  const std::vector<std::size_t> lengths = {0, 1, 2, 3, 4};
  const auto tr = run_mcq_suffix_copy(ExperimentContext{ref, task, 1}, lengths, 10);
  const auto td = run_mcq_suffix_copy(ExperimentContext{direct, task, 1}, lengths, 10);
  const std::string m = "median_calibrated_accuracy";
  CHECK(td.value("suffix=0", "mean", m) == 0.0);
  CHECK(td.value("suffix=1", "mean", m) == 0.5);
  CHECK(td.value("suffix=2", "mean", m) == 1.0);
  for (const char* s : {"suffix=0", "suffix=1", "suffix=2", "suffix=3"}) CHECK(tr.value(s, "mean", m) == 0.0);
  CHECK(tr.value("suffix=4", "mean", m) == 1.0);
  CHECK_THROWS_AS(run_mcq_suffix_copy(ExperimentContext{ref, task, 1}, {9}, 2), ConfigError);
}

TEST_CASE("ResultTable CSV and lookups") {
  ResultTable t;
  t.rows.push_back({"e", "c=1;d=2", "E0", "m", 0.1, 3, 4, "runs/model.ckpt"});
  t.rows.push_back({"e", "c", "mean", "m", -1.0 / 3.0, 3, 4, "id"});
  const ResultTable back = ResultTable::from_csv(t.to_csv());
  CHECK(back.rows == t.rows);
  CHECK(back.value("c", "mean", "m") == -1.0 / 3.0);
  CHECK_THROWS_AS(t.value("nope", "mean", "m"), InputError);
  CHECK(t.to_json(nlohmann::json{{"seed", 4}})["manifest"]["seed"] == 4);
  ResultTable bad;
  bad.rows.push_back({"e", "a,b", "E0", "m", 0.0, 1, 0, "id"});
  CHECK_THROWS_AS(bad.to_csv(), InputError);
}
