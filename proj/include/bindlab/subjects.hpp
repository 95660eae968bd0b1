#pragma once

#include <memory>
#include <span>
#include <string>
#include <vector>

#include "bindlab/model.hpp"
#include "bindlab/reference.hpp"
#include "bindlab/tasks.hpp"
#include "bindlab/zcontext.hpp"

namespace bindlab {

/// Probability floor for oracle answers: log((1 - eps) p + eps).
inline constexpr double kOracleSmoothing = 1e-12;

/// Anything the experiments can probe: encodes a context into a ZContext and
/// answers a query against a (possibly patched) ZContext.
class BindingSubject {
 public:
  virtual ~BindingSubject() = default;
  virtual std::string id() const = 0;
  virtual std::size_t n_layers() const = 0;
  virtual std::size_t d_model() const = 0;
  /// False for the oracles, whose answers ignore apparent positions.
  virtual bool position_sensitive() const = 0;
  virtual ZContext encode(const TaskSpec& task, const ContextInstance& ctx) const = 0;
  /// Log probabilities of `candidates` at the query's answer slot.
  virtual std::vector<double> answer_log_probs(const TaskSpec& task, const ZContext& z, const QueryRendering& query,
                                               std::span<const Token> candidates) const = 0;
};

class TransformerSubject final : public BindingSubject {
 public:
  TransformerSubject(ModelParams params, std::string id);
  std::string id() const override { return id_; }
  std::size_t n_layers() const override { return params_.config.n_layers; }
  std::size_t d_model() const override { return params_.config.d_model; }
  bool position_sensitive() const override { return true; }
  ZContext encode(const TaskSpec& task, const ContextInstance& ctx) const override;
  std::vector<double> answer_log_probs(const TaskSpec& task, const ZContext& z, const QueryRendering& query,
                                       std::span<const Token> candidates) const override;
  const ModelParams& params() const { return params_; }

 private:
  ModelParams params_;
  std::string id_;
};

class ReferenceSubject final : public BindingSubject {
 public:
  ReferenceSubject(ReferenceSemantics semantics, std::string id = "oracle:reference");
  std::string id() const override { return id_; }
  std::size_t n_layers() const override { return sem_.config().n_layers; }
  std::size_t d_model() const override { return sem_.config().d_model; }
  bool position_sensitive() const override { return false; }
  ZContext encode(const TaskSpec& task, const ContextInstance& ctx) const override;
  std::vector<double> answer_log_probs(const TaskSpec& task, const ZContext& z, const QueryRendering& query,
                                       std::span<const Token> candidates) const override;
  const ReferenceSemantics& semantics() const { return sem_; }

 private:
  ReferenceSemantics sem_;
  std::string id_;
};

class DirectSubject final : public BindingSubject {
 public:
  DirectSubject(DirectBindingSemantics semantics, std::string id = "oracle:direct");
  std::string id() const override { return id_; }
  std::size_t n_layers() const override { return sem_.config().n_layers; }
  std::size_t d_model() const override { return sem_.config().d_model; }
  bool position_sensitive() const override { return false; }
  ZContext encode(const TaskSpec& task, const ContextInstance& ctx) const override;
  std::vector<double> answer_log_probs(const TaskSpec& task, const ZContext& z, const QueryRendering& query,
                                       std::span<const Token> candidates) const override;
  const DirectBindingSemantics& semantics() const { return sem_; }

 private:
  DirectBindingSemantics sem_;
  std::string id_;
};

/// Maps an attribute distribution onto answer-token log probabilities.
std::vector<double> smoothed_answer_log_probs(const TaskSpec& task, const AttributeDistribution& dist,
                                              std::span<const Token> candidates);

}  // namespace bindlab
