#pragma once

#include <cstddef>
#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include <json.hpp>

#include "bindlab/metrics.hpp"
#include "bindlab/subjects.hpp"
#include "bindlab/tasks.hpp"
#include "bindlab/tensor_archive.hpp"
#include "bindlab/zcontext.hpp"

namespace bindlab {

// ---------------------------------------------------------------- difference vectors

/// delta_E[k], delta_A[k] for k = 0..k_max; index 0 is the zero stack.
struct DifferenceVectors {
  std::vector<LayerStack> delta_E;
  std::vector<LayerStack> delta_A;
  std::size_t sample_count = 0;
  std::string task;
  std::string model_id;

  std::size_t k_max() const { return delta_A.empty() ? 0 : delta_A.size() - 1; }
  TensorArchive to_archive() const;
  static DifferenceVectors from_archive(const TensorArchive& archive);
};

enum class Pairing {
  Independent,      // c and c' sampled independently
  MatchedAttribute  // c' is c with pairs 0 and k exchanged, so features cancel
};

/// Delta(k) = mean over N context pairs of Z_{A_k}(c) - Z_{A_0}(c'); entity
/// spans are averaged over their tokens. Throws ConfigError when k_max >= n,
/// N == 0, or the subject's shape does not fit the task.
DifferenceVectors estimate_difference_vectors(const BindingSubject& subject, const TaskSpec& task, std::size_t n,
                                              std::size_t k_max, std::size_t N, std::uint64_t seed,
                                              Pairing pairing = Pairing::Independent, unsigned jobs = 1);

/// Per layer and per k: an isotropic Gaussian direction rescaled to the
/// layer norm of the input. Zero-norm layers stay zero.
DifferenceVectors random_direction_baseline(const DifferenceVectors& delta, std::uint64_t seed);

// ---------------------------------------------------------------- results

struct ResultRow {
  std::string experiment;
  std::string condition;
  std::string query_slot;
  std::string metric;
  double value = 0.0;
  std::size_t n = 0;
  std::uint64_t seed = 0;
  std::string model_id;
  friend bool operator==(const ResultRow&, const ResultRow&) = default;
};

struct ResultTable {
  std::vector<ResultRow> rows;

  void append(const ResultTable& other);
  /// Throws InputError when no row matches.
  double value(const std::string& condition, const std::string& query_slot, const std::string& metric) const;
  bool contains(const std::string& condition, const std::string& query_slot, const std::string& metric) const;

  /// Header: experiment,condition,query_slot,metric,value,n,seed,model_id.
  std::string to_csv() const;
  static ResultTable from_csv(const std::string& text);
  nlohmann::json to_json(const nlohmann::json& manifest) const;
};

// ---------------------------------------------------------------- experiments

struct ExperimentContext {
  const BindingSubject& subject;
  const TaskSpec& task;
  std::uint64_t seed = 0;
  unsigned jobs = 1;
  /// Remaps every attribute span to attribute span 0's apparent position
  /// before the experiment's own intervention (position-bias mitigation).
  bool align_attribute_positions = false;
};

/// Entity/attribute offsets for the standard swap of pairs 0 and 1.
enum class MeanCondition { Control, Attribute, Entity, Both };
std::string to_string(MeanCondition c);
InterventionSpec mean_intervention_spec(const ContextLayout& layout, MeanCondition c, const DifferenceVectors& delta);

/// Remaps every attribute span onto attribute span 0's position.
InterventionSpec attribute_alignment_spec(const ContextLayout& layout);

/// n == 2. Conditions None, Entity{k}, Attribute{k}, Both{k}; queries E0, E1,
/// E'0, E'1; metric "mean_log_prob[X]" for candidates A0, A1, A'0, A'1, plus
/// an "agreement" row per condition against the reference oracle's
/// predict_belief on the same intervention.
ResultTable run_factorizability(const ExperimentContext& ctx, std::size_t N);

enum class SweepTarget { Entities, Attributes };
/// n == 2; condition "shift=d" for d = x - X_0 in [0, X_1 - X_0].
ResultTable run_position_sweep(const ExperimentContext& ctx, SweepTarget target, std::size_t N);

/// Median-calibrated accuracy (plus top-1 and mean log prob) against the
/// original pairing. `random` adds Random-* conditions built from it.
ResultTable run_mean_intervention(const ExperimentContext& ctx, std::size_t n,
                                  const std::vector<MeanCondition>& conditions, const DifferenceVectors& delta,
                                  std::size_t N, const DifferenceVectors* random = nullptr);

struct GridSpec {
  double min = -1.0;
  double max = 2.0;
  std::size_t steps = 9;
  std::vector<double> values() const;
};
struct GridPoint {
  double eta = 0.0;
  double nu = 0.0;
  double accuracy = 0.0;
};
struct GeometryResult {
  ResultTable table;
  std::vector<GridPoint> points;  // row-major over (eta, nu)
  double erased_accuracy = 0.0;
};
/// n == 2 contexts, basis Delta(1), Delta(2) (k_max >= 2). Pair 0 receives
/// h(eta0, nu0), pair 1 loses Delta(1) and receives h(eta, nu).
GeometryResult run_geometry_grid(const ExperimentContext& ctx, double eta0, double nu0, const GridSpec& grid,
                                 const DifferenceVectors& basis, std::size_t N);

/// pi(k) = (k + shift) mod n. Entity condition is scored against
/// E_k <-> A_pi(k), attribute condition against the inverse shift; rows
/// "pi", "pi_inv" and "mean" per condition, plus Control.
ResultTable run_cyclic_shift(const ExperimentContext& ctx, std::size_t n, std::size_t shift,
                             const DifferenceVectors& delta, std::size_t N);

struct TransferSource {
  std::string name;
  const DifferenceVectors* delta;
};
/// On target-task contexts: subtract Delta^tar(k) from pair k, add
/// Delta^src(k). Baselines: Zeros (erase only), Random (random-direction
/// vectors added to the unerased context), RandomErased (erase, then add
/// random-direction vectors).
ResultTable run_transfer(const ExperimentContext& ctx, std::size_t n, const DifferenceVectors& target_delta,
                         const std::vector<TransferSource>& sources, std::size_t N);

/// MCQ task, n == 2. Source = same options with labels exchanged. For each
/// suffix length s, the last s tokens of every line are copied from the
/// source; accuracy is measured against the swapped belief.
ResultTable run_mcq_suffix_copy(const ExperimentContext& ctx, const std::vector<std::size_t>& suffix_lengths,
                                std::size_t N);

// ---------------------------------------------------------------- shared helpers

/// Phi[k][l] for queries of `query_entities[k]` against candidates
/// answer_token(attributes[l]).
std::vector<std::vector<double>> score_queries(const BindingSubject& subject, const TaskSpec& task,
                                               const ContextInstance& ctx, const ZContext& z,
                                               const std::vector<Token>& query_entities,
                                               const std::vector<Phrase>& attributes);

}  // namespace bindlab
