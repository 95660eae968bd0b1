#include "bindlab/subjects.hpp"

#include <cmath>

#include "bindlab/error.hpp"

namespace bindlab {

std::vector<double> smoothed_answer_log_probs(const TaskSpec& task, const AttributeDistribution& dist,
                                              std::span<const Token> candidates) {
  std::vector<double> out;
  out.reserve(candidates.size());
  for (Token c : candidates) {
    double p = 0.0;
    for (std::size_t j = 0; j < dist.attributes.size(); ++j) {
      if (dist.attributes[j] && answer_token(task, *dist.attributes[j]) == c) p += dist.probs[j];
    }
    out.push_back(std::log((1.0 - kOracleSmoothing) * std::min(p, 1.0) + kOracleSmoothing));
  }
  return out;
}

TransformerSubject::TransformerSubject(ModelParams params, std::string id)
    : params_(std::move(params)), id_(std::move(id)) {
  params_.validate();
}

ZContext TransformerSubject::encode(const TaskSpec&, const ContextInstance& ctx) const {
  const ActivationRecord rec = forward(params_, ctx.tokens);
  return capture_zcontext(rec, ctx.tokens, ctx.layout);
}

std::vector<double> TransformerSubject::answer_log_probs(const TaskSpec&, const ZContext& z,
                                                         const QueryRendering& query,
                                                         std::span<const Token> candidates) const {
  const ActivationRecord rec = forward_frozen(params_, z, query.tokens);
  Vector lp = log_softmax(rec.logits_at(rec.n_tokens() - 1));
  std::vector<double> out;
  out.reserve(candidates.size());
  for (Token c : candidates) {
    if (c < 0 || static_cast<std::size_t>(c) >= lp.dim()) throw InputError("candidate token outside the vocabulary");
    out.push_back(lp[static_cast<std::size_t>(c)]);
  }
  return out;
}

ReferenceSubject::ReferenceSubject(ReferenceSemantics semantics, std::string id)
    : sem_(std::move(semantics)), id_(std::move(id)) {}

ZContext ReferenceSubject::encode(const TaskSpec&, const ContextInstance& ctx) const { return sem_.synth_zcontext(ctx); }

std::vector<double> ReferenceSubject::answer_log_probs(const TaskSpec& task, const ZContext& z,
                                                       const QueryRendering& query,
                                                       std::span<const Token> candidates) const {
  return smoothed_answer_log_probs(task, sem_.query(z, query.entity), candidates);
}

DirectSubject::DirectSubject(DirectBindingSemantics semantics, std::string id)
    : sem_(std::move(semantics)), id_(std::move(id)) {}

ZContext DirectSubject::encode(const TaskSpec&, const ContextInstance& ctx) const { return sem_.synth_zcontext(ctx); }

std::vector<double> DirectSubject::answer_log_probs(const TaskSpec& task, const ZContext& z,
                                                    const QueryRendering& query,
                                                    std::span<const Token> candidates) const {
  return smoothed_answer_log_probs(task, sem_.query(z, query.entity), candidates);
}

}  // namespace bindlab
