#include "bindlab/trainer.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <numbers>
#include <set>
#include <sstream>

namespace bindlab {

// ---------------------------------------------------------------- config

void TrainConfig::validate() const {
  if (mixture.empty()) throw ConfigError("train: mixture is empty");
  double total = 0.0;
  for (const auto& m : mixture) {
    if (!(m.weight >= 0.0) || !std::isfinite(m.weight)) throw ConfigError("train: mixture weight for " + m.task + " is negative");
    total += m.weight;
  }
  if (std::abs(total - 1.0) > 1e-9) throw ConfigError("train: mixture weights must sum to 1");
  if (steps == 0) throw ConfigError("train: steps must be at least 1");
  if (n_min < 2 || n_max < n_min) throw ConfigError("train: need 2 <= n_min <= n_max");
  if (batch_size == 0) throw ConfigError("train: batch_size must be positive");
  if (!(peak_lr >= 0.0) || !(final_lr_ratio >= 0.0 && final_lr_ratio <= 1.0)) throw ConfigError("train: bad learning-rate schedule");
  if (!(beta1 >= 0.0 && beta1 < 1.0) || !(beta2 >= 0.0 && beta2 < 1.0)) throw ConfigError("train: moment decays must lie in [0, 1)");
  if (beta1 * beta1 >= beta2 && beta1 > 0.0) throw ConfigError("train: need beta1^2 < beta2");
  if (!(epsilon > 0.0)) throw ConfigError("train: epsilon must be positive");
  if (!(weight_decay >= 0.0)) throw ConfigError("train: weight_decay must be non-negative");
  if (!(clip_norm > 0.0)) throw ConfigError("train: clip_norm must be positive");
  if (eval_interval == 0 || eval_contexts == 0) throw ConfigError("train: eval_interval and eval_contexts must be positive");
}

nlohmann::json TrainConfig::to_json() const {
  nlohmann::json mix = nlohmann::json::array();
  for (const auto& m : mixture) mix.push_back({{"task", m.task}, {"weight", m.weight}});
  return {{"mixture", mix},
          {"n_min", n_min},
          {"n_max", n_max},
          {"batch_size", batch_size},
          {"steps", steps},
          {"peak_lr", peak_lr},
          {"warmup_steps", warmup_steps},
          {"final_lr_ratio", final_lr_ratio},
          {"beta1", beta1},
          {"beta2", beta2},
          {"epsilon", epsilon},
          {"weight_decay", weight_decay},
          {"clip_norm", clip_norm},
          {"eval_interval", eval_interval},
          {"eval_contexts", eval_contexts},
          {"early_stop_accuracy", early_stop_accuracy},
          {"full_sequence_loss", full_sequence_loss},
          {"seed", seed}};
}

TrainConfig TrainConfig::from_json(const nlohmann::json& j) {
  TrainConfig c;
  static const std::set<std::string> known = {
      "mixture", "n_min",     "n_max",        "batch_size", "steps",         "peak_lr",
      "warmup_steps", "final_lr_ratio", "beta1", "beta2", "epsilon", "weight_decay",
      "clip_norm", "eval_interval", "eval_contexts", "early_stop_accuracy", "full_sequence_loss", "seed", "jobs"};
  if (!j.is_object()) throw ConfigError("train config: expected an object");
  for (const auto& [key, value] : j.items()) {
    if (!known.contains(key)) throw ConfigError("train config: unknown key '" + key + "'");
  }
  try {
    if (j.contains("mixture")) {
      c.mixture.clear();
      for (const auto& m : j.at("mixture")) c.mixture.push_back({m.at("task"), m.value("weight", 1.0)});
    }
    c.n_min = j.value("n_min", c.n_min);
    c.n_max = j.value("n_max", c.n_max);
    c.batch_size = j.value("batch_size", c.batch_size);
    c.steps = j.value("steps", c.steps);
    c.peak_lr = j.value("peak_lr", c.peak_lr);
    c.warmup_steps = j.value("warmup_steps", c.warmup_steps);
    c.final_lr_ratio = j.value("final_lr_ratio", c.final_lr_ratio);
    c.beta1 = j.value("beta1", c.beta1);
    c.beta2 = j.value("beta2", c.beta2);
    c.epsilon = j.value("epsilon", c.epsilon);
    c.weight_decay = j.value("weight_decay", c.weight_decay);
    c.clip_norm = j.value("clip_norm", c.clip_norm);
    c.eval_interval = j.value("eval_interval", c.eval_interval);
    c.eval_contexts = j.value("eval_contexts", c.eval_contexts);
    c.early_stop_accuracy = j.value("early_stop_accuracy", c.early_stop_accuracy);
    c.full_sequence_loss = j.value("full_sequence_loss", c.full_sequence_loss);
    c.seed = j.value("seed", c.seed);
    c.jobs = j.value("jobs", c.jobs);
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("train config: ") + e.what());
  }
  c.validate();
  return c;
}

double learning_rate(const TrainConfig& c, std::size_t step) {
  if (step < c.warmup_steps) {
    return c.peak_lr * static_cast<double>(step + 1) / static_cast<double>(c.warmup_steps);
  }
  const std::size_t decay_steps = c.steps > c.warmup_steps ? c.steps - c.warmup_steps : 1;
  const double progress = std::min(1.0, static_cast<double>(step - c.warmup_steps) / static_cast<double>(decay_steps));
  const double floor = c.peak_lr * c.final_lr_ratio;
  return floor + (c.peak_lr - floor) * 0.5 * (1.0 + std::cos(std::numbers::pi * progress));
}

// ---------------------------------------------------------------- loss

TrainingExample make_example(const TaskSpec& task, const ContextInstance& ctx, std::size_t query_slot,
                             bool full_sequence) {
  if (query_slot >= ctx.entities.size()) throw InputError("make_example: query slot out of range");
  const QueryRendering q = render_query(task, ctx, ctx.entities[query_slot]);
  TrainingExample ex;
  ex.task = task.name;
  ex.tokens = ctx.tokens;
  ex.tokens.insert(ex.tokens.end(), q.tokens.begin(), q.tokens.end());
  const std::size_t answer_row = ctx.tokens.size() + q.answer_slot;
  const Token answer = answer_token(task, ctx.attributes[query_slot]);
  if (full_sequence) {
    for (std::size_t r = 0; r + 1 < ex.tokens.size(); ++r) {
      ex.rows.push_back(r);
      ex.targets.push_back(ex.tokens[r + 1]);
    }
  }
  ex.rows.push_back(answer_row);
  ex.targets.push_back(answer);
  return ex;
}

namespace {

void fill_zero(ModelParams& p) {
  p.for_each_tensor([](const std::string&, std::span<double> v, bool) { std::fill(v.begin(), v.end(), 0.0); });
}

void accumulate(ModelParams& into, const ModelParams& from) {
  std::vector<std::span<const double>> src;
  from.for_each_tensor([&src](const std::string&, std::span<const double> v, bool) { src.push_back(v); });
  std::size_t i = 0;
  into.for_each_tensor([&](const std::string&, std::span<double> v, bool) {
    const auto s = src[i++];
    for (std::size_t j = 0; j < v.size(); ++j) v[j] += s[j];
  });
}

std::string describe(const TrainingExample& ex) {
  std::ostringstream out;
  out << "task " << ex.task << ", tokens [";
  for (std::size_t i = 0; i < ex.tokens.size(); ++i) out << (i ? " " : "") << ex.tokens[i];
  out << "]";
  return out.str();
}

}  // namespace

double cross_entropy_loss(const ModelParams& params, const std::vector<TrainingExample>& batch, ModelParams* grads,
                          unsigned jobs, GradientWorkspace* workspace) {
  if (batch.empty()) throw InputError("cross_entropy_loss: empty batch");
  std::size_t total_rows = 0;
  for (const auto& ex : batch) {
    if (ex.rows.size() != ex.targets.size() || ex.rows.empty()) throw InputError("cross_entropy_loss: rows/targets mismatch");
    for (Token t : ex.targets) {
      if (t < 0 || static_cast<std::size_t>(t) >= params.config.vocab_size) {
        throw InputError("cross_entropy_loss: target token " + std::to_string(t) + " outside the vocabulary");
      }
    }
    total_rows += ex.rows.size();
  }
  const double inv_rows = 1.0 / static_cast<double>(total_rows);

  std::vector<double> losses(batch.size());
  // Forward, loss and dL/dlogits for one example; backward when asked.
  const auto run = [&](std::size_t b, ModelParams* acc, const TransposedWeights* tw) {
    const TrainingExample& ex = batch[b];
    TrainingPass pass(params, ex.tokens, ex.rows);
    Matrix dlogits = pass.logits();
    double loss = 0.0;
    for (std::size_t r = 0; r < ex.rows.size(); ++r) {
      auto row = dlogits.row(r);
      log_softmax_inplace(row);
      const auto target = static_cast<std::size_t>(ex.targets[r]);
      loss -= row[target];
      for (double& x : row) x = std::exp(x) * inv_rows;
      row[target] -= inv_rows;
    }
    losses[b] = loss;
    if (acc) pass.backward(dlogits, *acc, tw);
  };

  if (!grads) {
    parallel_for(batch.size(), jobs, [&](std::size_t b) { run(b, nullptr, nullptr); });
  } else {
    GradientWorkspace local;
    GradientWorkspace& ws = workspace ? *workspace : local;
    const std::size_t G = std::min(kGradientGroups, batch.size());
    if (ws.groups.size() < G - 1) ws.groups.resize(G - 1);
    const TransposedWeights tw = TransposedWeights::build(params);
    parallel_for(G, jobs, [&](std::size_t g) {
      ModelParams& acc = g == 0 ? *grads : ws.groups[g - 1];
      if (!(acc.config == params.config) || acc.layers.size() != params.layers.size()) {
        acc = ModelParams::zeros(params.config);
      } else {
        fill_zero(acc);
      }
      const std::size_t begin = g * batch.size() / G, end = (g + 1) * batch.size() / G;
      for (std::size_t b = begin; b < end; ++b) run(b, &acc, &tw);
    });
    for (std::size_t g = 1; g < G; ++g) accumulate(*grads, ws.groups[g - 1]);
  }
  double total = 0.0;
  for (std::size_t b = 0; b < batch.size(); ++b) {
    if (!std::isfinite(losses[b])) throw NumericError("cross_entropy_loss: non-finite loss on " + describe(batch[b]));
    total += losses[b];
  }
  return total * inv_rows;
}

// ---------------------------------------------------------------- data split

bool is_held_out(Token entity, const Phrase& attribute) {
  std::uint64_t h = derive_seed(0x68656c646f7574ULL, static_cast<std::uint64_t>(entity));
  for (Token t : attribute) h = derive_seed(h, static_cast<std::uint64_t>(t));
  return h % 10 == 0;
}

ContextInstance sample_split_context(const TaskSpec& task, std::size_t n, bool held_out, SeededRng& rng,
                                     std::size_t* held_out_slot) {
  constexpr int kAttempts = 100000;
  for (int attempt = 0; attempt < kAttempts; ++attempt) {
    ContextInstance c = generate_context(task, n, rng);
    std::size_t count = 0, slot = 0;
    for (std::size_t k = 0; k < n; ++k) {
      if (is_held_out(c.entities[k], c.attributes[k])) {
        ++count;
        slot = k;
      }
    }
    if (held_out ? count == 1 : count == 0) {
      if (held_out_slot) *held_out_slot = slot;
      return c;
    }
  }
  throw SamplingError("sample_split_context: task " + task.name + " has no usable " +
                      (held_out ? "held-out" : "training") + " combinations");
}

double held_out_accuracy(const ModelParams& params, const TaskSpec& task, std::size_t n, std::size_t contexts,
                         std::uint64_t seed, unsigned jobs) {
  if (contexts == 0) throw EmptyPopulationError("held_out_accuracy: no contexts");
  std::vector<double> hit(contexts);
  parallel_for(contexts, jobs, [&](std::size_t i) {
    SeededRng rng(derive_seed(seed, i));
    std::size_t slot = 0;
    const ContextInstance c = sample_split_context(task, n, true, rng, &slot);
    const TrainingExample ex = make_example(task, c, slot);
    TrainingPass pass(params, ex.tokens, ex.rows);
    const auto row = pass.logits().row(0);
    const auto best = std::max_element(row.begin(), row.end()) - row.begin();
    hit[i] = best == ex.targets[0] ? 1.0 : 0.0;
  });
  double s = 0.0;
  for (double h : hit) s += h;
  return s / static_cast<double>(contexts);
}

// ---------------------------------------------------------------- reports

std::string loss_report_csv_header(const std::vector<MixtureEntry>& mixture) {
  std::string h = "step,train_loss,grad_norm,learning_rate,eval_loss";
  std::map<std::string, bool> names;  // same order as LossReport::accuracy
  for (const auto& m : mixture) {
    if (m.weight > 0.0) names[m.task] = true;
  }
  for (const auto& [name, _] : names) h += ",accuracy:" + name;
  return h;
}

std::string loss_report_csv_row(const LossReport& r) {
  std::ostringstream out;
  out << std::setprecision(17) << r.step << ',' << r.train_loss << ',' << r.grad_norm << ',' << r.learning_rate << ','
      << r.eval_loss;
  for (const auto& [task, acc] : r.accuracy) out << ',' << acc;
  return out.str();
}

// ---------------------------------------------------------------- optimizer

double adam_ratio_bound(double beta1, double beta2, std::size_t t) {
  if (t == 0) return 0.0;
  // Cauchy-Schwarz on m_t = (1-b1) sum b1^(t-i) g_i against v_t.
  const double gamma = beta1 * beta1 / beta2;
  double geometric = 0.0, term = 1.0;
  for (std::size_t j = 0; j < t; ++j, term *= gamma) geometric += term;
  const double td = static_cast<double>(t);
  return (1.0 - beta1) / std::sqrt(1.0 - beta2) * std::sqrt(geometric) * std::sqrt(1.0 - std::pow(beta2, td)) /
         (1.0 - std::pow(beta1, td));
}

double clip_gradients(ModelParams& grads, double clip_norm) {
  double sq = 0.0;
  grads.for_each_tensor([&sq](const std::string&, std::span<const double> v, bool) {
    for (double x : v) sq += x * x;
  });
  const double norm = std::sqrt(sq);
  if (!std::isfinite(norm)) throw NumericError("clip_gradients: non-finite gradient norm");
  if (norm > clip_norm) {
    const double s = clip_norm / norm;
    grads.for_each_tensor([s](const std::string&, std::span<double> v, bool) {
      for (double& x : v) x *= s;
    });
  }
  return norm;
}

void adam_step(ModelParams& params, const ModelParams& grads, AdamState& state, const TrainConfig& c, double lr) {
  std::vector<std::span<const double>> g;
  grads.for_each_tensor([&g](const std::string&, std::span<const double> v, bool) { g.push_back(v); });
  if (state.m.empty()) {
    state.m.assign(params.parameter_count(), 0.0);
    state.v.assign(params.parameter_count(), 0.0);
  }
  state.t += 1;
  const double td = static_cast<double>(state.t);
  const double bc1 = 1.0 - std::pow(c.beta1, td);
  const double bc2 = 1.0 - std::pow(c.beta2, td);
  std::size_t tensor = 0, offset = 0;
  params.for_each_tensor([&](const std::string&, std::span<double> p, bool decays) {
    const auto gt = g[tensor++];
    for (std::size_t j = 0; j < p.size(); ++j) {
      double& m = state.m[offset + j];
      double& v = state.v[offset + j];
      m = c.beta1 * m + (1.0 - c.beta1) * gt[j];
      v = c.beta2 * v + (1.0 - c.beta2) * gt[j] * gt[j];
      if (lr == 0.0) continue;
      const double update = (m / bc1) / (std::sqrt(v / bc2) + c.epsilon);
      const double decay = decays ? c.weight_decay * p[j] : 0.0;
      p[j] -= lr * (update + decay);
    }
    offset += p.size();
  });
}

// ---------------------------------------------------------------- training loop

namespace {

std::size_t pick_task(const std::vector<MixtureEntry>& mixture, double u) {
  double acc = 0.0;
  for (std::size_t i = 0; i < mixture.size(); ++i) {
    acc += mixture[i].weight;
    if (u < acc) return i;
  }
  return mixture.size() - 1;
}

std::vector<TrainingExample> training_batch(const TrainConfig& c, const std::vector<const TaskSpec*>& tasks,
                                            std::size_t step) {
  std::vector<TrainingExample> batch(c.batch_size);
  parallel_for(c.batch_size, c.jobs, [&](std::size_t b) {
    SeededRng rng(derive_seed(derive_seed(c.seed, step), b));
    const TaskSpec& task = *tasks[pick_task(c.mixture, rng.uniform())];
    const std::size_t n = c.n_min + rng.uniform_index(c.n_max - c.n_min + 1);
    const ContextInstance ctx = sample_split_context(task, n, false, rng);
    const std::size_t slot = rng.uniform_index(n);
    batch[b] = make_example(task, ctx, slot, c.full_sequence_loss);
  });
  return batch;
}

std::vector<TrainingExample> eval_batch(const TrainConfig& c, const std::vector<const TaskSpec*>& tasks) {
  std::vector<TrainingExample> batch;
  const std::uint64_t seed = derive_seed(c.seed, 0xe7a1b47c4ULL);
  for (std::size_t t = 0; t < tasks.size(); ++t) {
    if (c.mixture[t].weight == 0.0) continue;
    for (std::size_t i = 0; i < 32; ++i) {
      SeededRng rng(derive_seed(derive_seed(seed, t), i));
      std::size_t slot = 0;
      const ContextInstance ctx = sample_split_context(*tasks[t], c.n_min, true, rng, &slot);
      batch.push_back(make_example(*tasks[t], ctx, slot));
    }
  }
  return batch;
}

}  // namespace

TrainResult train(const TrainConfig& config, const TaskSuite& suite, ModelParams init, const TrainOptions& options) {
  config.validate();
  init.validate();
  std::vector<const TaskSpec*> tasks;
  for (const auto& m : config.mixture) {
    const TaskSpec& t = suite.task(m.task);
    if (config.n_max > t.max_pairs()) throw ConfigError("train: n_max exceeds the pools of task " + t.name);
    tasks.push_back(&t);
  }
  if (options.output_dir) {
    if (!options.vocab) throw ConfigError("train: output_dir requires a vocabulary");
    std::filesystem::create_directories(*options.output_dir);
    std::ofstream(*options.output_dir / "loss_report.csv") << loss_report_csv_header(config.mixture) << '\n';
  }

  TrainResult result;
  result.params = std::move(init);
  const std::vector<TrainingExample> held = eval_batch(config, tasks);
  const std::uint64_t eval_seed = derive_seed(config.seed, 0xacc0acc0ULL);
  ModelParams grads = ModelParams::zeros(result.params.config);
  GradientWorkspace workspace;
  AdamState adam;
  double initial_loss = 0.0;
  std::size_t above = 0;
  double interval_loss = 0.0;
  std::size_t interval_steps = 0;
  LossReport last;

  for (std::size_t step = 0; step < config.steps; ++step) {
    const auto batch = training_batch(config, tasks, step);
    const double loss = cross_entropy_loss(result.params, batch, &grads, config.jobs, &workspace);
    if (step == 0) initial_loss = loss;
    above = loss > 10.0 * initial_loss ? above + 1 : 0;
    const double gnorm = clip_gradients(grads, config.clip_norm);
    const double lr = learning_rate(config, step);
    adam_step(result.params, grads, adam, config, lr);
    interval_loss += loss;
    ++interval_steps;
    last.grad_norm = gnorm;
    last.learning_rate = lr;
    result.steps_run = step + 1;

    if (above >= 100) {
      throw TrainingDiverged("train: loss above ten times its initial value (" + std::to_string(initial_loss) +
                                 ") for 100 consecutive steps at step " + std::to_string(step + 1),
                             result.reports);
    }
    const bool final = step + 1 == config.steps;
    if ((step + 1) % config.eval_interval != 0 && !final) continue;

    LossReport r = last;
    r.step = step + 1;
    r.train_loss = interval_loss / static_cast<double>(interval_steps);
    r.eval_loss = cross_entropy_loss(result.params, held, nullptr, config.jobs);
    bool all_done = true;
    for (std::size_t t = 0; t < tasks.size(); ++t) {
      if (config.mixture[t].weight == 0.0) continue;
      const double acc =
          held_out_accuracy(result.params, *tasks[t], config.n_min, config.eval_contexts, derive_seed(eval_seed, t),
                            config.jobs);
      r.accuracy[tasks[t]->name] = acc;
      all_done = all_done && acc >= config.early_stop_accuracy;
    }
    interval_loss = 0.0;
    interval_steps = 0;
    result.reports.push_back(r);
    if (options.verbose) std::cerr << loss_report_csv_row(r) << '\n';
    if (options.output_dir) {
      std::ofstream(*options.output_dir / "loss_report.csv", std::ios::app) << loss_report_csv_row(r) << '\n';
      std::ostringstream name;
      name << "step_" << std::setw(7) << std::setfill('0') << r.step << ".ckpt";
      const nlohmann::json extra = {{"train_config", config.to_json()}, {"step", r.step}};
      save_checkpoint(*options.output_dir / name.str(), result.params, *options.vocab, extra);
      save_checkpoint(*options.output_dir / "latest.ckpt", result.params, *options.vocab, extra);
    }
    if (all_done) {
      result.early_stopped = true;
      break;
    }
  }
  return result;
}

}  // namespace bindlab
