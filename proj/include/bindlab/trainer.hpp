#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "bindlab/error.hpp"
#include "bindlab/model.hpp"
#include "bindlab/tasks.hpp"

namespace bindlab {

struct MixtureEntry {
  std::string task;
  double weight = 1.0;
  friend bool operator==(const MixtureEntry&, const MixtureEntry&) = default;
};

struct TrainConfig {
  std::vector<MixtureEntry> mixture = {{"capitals", 1.0}};
  std::size_t n_min = 2;
  std::size_t n_max = 2;
  std::size_t batch_size = 16;
  std::size_t steps = 30000;
  double peak_lr = 2e-3;
  std::size_t warmup_steps = 200;
  double final_lr_ratio = 0.1;  // cosine decay floor, as a fraction of peak_lr
  double beta1 = 0.9;
  double beta2 = 0.98;
  double epsilon = 1e-8;
  double weight_decay = 0.01;
  double clip_norm = 1.0;
  std::size_t eval_interval = 250;
  std::size_t eval_contexts = 200;
  double early_stop_accuracy = 0.98;
  bool full_sequence_loss = false;
  std::uint64_t seed = 0;
  unsigned jobs = 1;

  /// Throws ConfigError: negative weights, weights not summing to 1 within
  /// 1e-9, steps == 0, empty n range, non-positive batch, bad moments.
  void validate() const;
  nlohmann::json to_json() const;
  static TrainConfig from_json(const nlohmann::json& j);
};

/// Learning rate at 0-based step: linear warmup, then cosine decay to
/// peak_lr * final_lr_ratio at the last step.
double learning_rate(const TrainConfig& config, std::size_t step);

/// One scored sequence: logits at `rows` must predict `targets`.
struct TrainingExample {
  std::vector<Token> tokens;
  std::vector<std::size_t> rows;
  std::vector<Token> targets;
  std::string task;
};

/// Context plus query for `query_slot`; the answer row only, or every
/// next-token position when `full_sequence` is set.
TrainingExample make_example(const TaskSpec& task, const ContextInstance& ctx, std::size_t query_slot,
                             bool full_sequence = false);

/// Examples are split into this many contiguous groups; each group
/// accumulates its gradient in example order and groups are summed in
/// order, so results never depend on the worker count.
inline constexpr std::size_t kGradientGroups = 4;

/// Reusable gradient buffers for cross_entropy_loss.
struct GradientWorkspace {
  std::vector<ModelParams> groups;
};

/// Mean negative log likelihood over every scored row of the batch. When
/// `grads` is non-null it is overwritten with dLoss/dparams. Throws
/// NumericError (with the offending example) on a non-finite loss and
/// InputError on out-of-vocabulary targets.
double cross_entropy_loss(const ModelParams& params, const std::vector<TrainingExample>& batch,
                          ModelParams* grads, unsigned jobs = 1, GradientWorkspace* workspace = nullptr);

/// Whether (entity, attribute) is one of the held-out combinations (about
/// one in ten, fixed by a hash of the pair). Tokens themselves are never held
/// out.
bool is_held_out(Token entity, const Phrase& attribute);

/// Context with exactly one held-out pair, at `slot`, when `held_out`;
/// otherwise a context with none.
ContextInstance sample_split_context(const TaskSpec& task, std::size_t n, bool held_out, SeededRng& rng,
                                     std::size_t* held_out_slot = nullptr);

/// Top-1 accuracy (argmax over the full vocabulary) on held-out queries.
double held_out_accuracy(const ModelParams& params, const TaskSpec& task, std::size_t n, std::size_t contexts,
                         std::uint64_t seed, unsigned jobs = 1);

struct LossReport {
  std::size_t step = 0;        // optimizer steps completed
  double train_loss = 0.0;     // mean over the steps since the previous report
  double grad_norm = 0.0;      // pre-clip norm at the last step
  double learning_rate = 0.0;  // at the last step
  double eval_loss = 0.0;      // fixed held-out batch
  std::map<std::string, double> accuracy;
  friend bool operator==(const LossReport&, const LossReport&) = default;
};

std::string loss_report_csv_header(const std::vector<MixtureEntry>& mixture);
std::string loss_report_csv_row(const LossReport& r);

/// Adam state, flattened in ModelParams::for_each_tensor order.
struct AdamState {
  std::vector<double> m, v;
  std::size_t t = 0;
};

/// Upper bound on |m_hat / (sqrt(v_hat) + eps)| after t >= 1 updates,
/// whatever the gradient sequence.
double adam_ratio_bound(double beta1, double beta2, std::size_t t);

/// Clips `grads` to clip_norm in place, returns the pre-clip global norm.
double clip_gradients(ModelParams& grads, double clip_norm);

/// One decoupled-weight-decay Adam update with learning rate `lr`.
void adam_step(ModelParams& params, const ModelParams& grads, AdamState& state, const TrainConfig& config,
               double lr);

class TrainingDiverged : public NumericError {
 public:
  TrainingDiverged(const std::string& what, std::vector<LossReport> reports)
      : NumericError(what), reports_(std::move(reports)) {}
  const std::vector<LossReport>& reports() const { return reports_; }

 private:
  std::vector<LossReport> reports_;
};

struct TrainOptions {
  /// When set, checkpoints step_XXXXXXX.ckpt and latest.ckpt are written at
  /// every eval, and loss_report.csv is appended.
  std::optional<std::filesystem::path> output_dir;
  const Vocabulary* vocab = nullptr;  // required with output_dir
  bool verbose = false;
};

struct TrainResult {
  ModelParams params;
  std::vector<LossReport> reports;
  std::size_t steps_run = 0;
  bool early_stopped = false;
};

/// Deterministic given config.seed and `init`. Stops early once every
/// mixture task reaches early_stop_accuracy. Throws TrainingDiverged when
/// the loss stays above ten times the first step's loss for 100 steps.
TrainResult train(const TrainConfig& config, const TaskSuite& suite, ModelParams init,
                  const TrainOptions& options = {});

}  // namespace bindlab
