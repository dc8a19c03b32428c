#include "claps/perturb.hpp"

#include <cmath>

#include "claps/errors.hpp"
#include "claps/objective.hpp"

namespace claps {

namespace {

constexpr double kZeroGradNorm = 1e-12;

double frobenius_norm(const std::vector<double>& v) {
  double s = 0.0;
  for (double x : v) s += x * x;
  return std::sqrt(s);
}

// Gradient of `leaf` after a backward pass; empty when the loss did not
// reach it (treated as zero).
const std::vector<double>* leaf_gradient(const Tensor& leaf) {
  return leaf.has_grad() ? &leaf.grad() : nullptr;
}

}  // namespace

Tensor perturbed_states(const Tensor& states, const std::vector<double>& gradient,
                        double step_norm) {
  if (!(step_norm > 0.0)) {
    throw ValueError("perturbed_states: step norm must be positive");
  }
  if (gradient.size() != states.value().size()) {
    throw ShapeError("perturbed_states: gradient shape mismatch");
  }
  const double norm = frobenius_norm(gradient);
  if (norm < kZeroGradNorm) {
    throw ZeroGradientError("perturbed_states: zero driving gradient");
  }
  const double factor = step_norm / norm;
  std::vector<double> out(states.value().size());
  for (std::size_t i = 0; i < out.size(); ++i) {
    out[i] = states.value()[i] - factor * gradient[i];
  }
  return Tensor::from_data(states.shape(), std::move(out));
}

std::vector<std::optional<Tensor>> make_imposters(
    const Seq2SeqModel& model, const std::vector<DecoderStates>& decs,
    const std::vector<TokenSeq>& targets, double epsilon) {
  if (decs.size() != targets.size()) {
    throw ShapeError("make_imposters: decs/targets length mismatch");
  }
  // One tape for the whole batch: the per-example leaves keep the gradient
  // slices separate.
  std::vector<Tensor> leaves;
  std::vector<Tensor> logliks;
  leaves.reserve(decs.size());
  for (std::size_t i = 0; i < decs.size(); ++i) {
    Tensor leaf = decs[i].states.detach(/*requires_grad=*/true);
    leaves.push_back(leaf);
    const auto step_mask = Seq2SeqModel::prediction_step_mask(targets[i]);
    bool any = false;
    for (bool b : step_mask) any = any || b;
    if (!any) continue;
    Tensor logits = model.output_logits(leaf);
    logliks.push_back(neg(cross_entropy_cols(
        logits, Seq2SeqModel::shifted_targets(targets[i]), step_mask)));
  }
  if (!logliks.empty()) {
    backward(sum(stack_scalars(logliks)));
  }

  std::vector<std::optional<Tensor>> out(decs.size());
  for (std::size_t i = 0; i < decs.size(); ++i) {
    const std::vector<double>* g = leaf_gradient(leaves[i]);
    if (g == nullptr) continue;
    try {
      out[i] = perturbed_states(decs[i].states, *g, epsilon);
    } catch (const ZeroGradientError&) {
      // skipped; the trainer counts it
    }
  }
  return out;
}

std::vector<std::optional<Tensor>> make_distant_stage1(
    const Seq2SeqModel& model, const std::vector<EncoderStates>& encs,
    const std::vector<DecoderStates>& decs, double eta, double tau,
    bool include_positive_in_denominator) {
  if (encs.size() != decs.size()) {
    throw ShapeError("make_distant_stage1: encs/decs length mismatch");
  }
  ContrastiveBatch batch;
  batch.temperature = tau;
  batch.include_positive_in_denominator = include_positive_in_denominator;
  std::vector<Tensor> leaves;
  leaves.reserve(decs.size());
  for (std::size_t i = 0; i < decs.size(); ++i) {
    Tensor leaf = decs[i].states.detach(/*requires_grad=*/true);
    leaves.push_back(leaf);
    batch.anchors.push_back(model.project(encs[i].states.detach(), encs[i].pad_mask));
    batch.positives.push_back(model.project(leaf, decs[i].pad_mask));
  }
  ContrastiveResult cont = contrastive_term(batch, PositiveSource::Target);
  backward(cont.sum);

  std::vector<std::optional<Tensor>> out(decs.size());
  for (std::size_t i = 0; i < decs.size(); ++i) {
    const std::vector<double>* g = leaf_gradient(leaves[i]);
    if (g == nullptr) continue;
    try {
      out[i] = perturbed_states(decs[i].states, *g, eta);
    } catch (const ZeroGradientError&) {
    }
  }
  return out;
}

std::vector<std::optional<Tensor>> make_distant_stage2(
    const Seq2SeqModel& model, const std::vector<DecoderStates>& decs,
    const std::vector<TokenSeq>& targets,
    const std::vector<std::optional<Tensor>>& stage1, double eta) {
  if (decs.size() != targets.size() || decs.size() != stage1.size()) {
    throw ShapeError("make_distant_stage2: input length mismatch");
  }
  std::vector<std::optional<Tensor>> leaves(decs.size());
  std::vector<Tensor> kls;
  for (std::size_t i = 0; i < decs.size(); ++i) {
    if (!stage1[i].has_value()) continue;
    const auto step_mask = Seq2SeqModel::prediction_step_mask(targets[i]);
    bool any = false;
    for (bool b : step_mask) any = any || b;
    if (!any) continue;
    Tensor leaf = stage1[i]->detach(/*requires_grad=*/true);
    leaves[i] = leaf;
    Tensor frozen = decs[i].logits.detach();  // theta* side, constant
    kls.push_back(kl_term(frozen, model.output_logits(leaf), step_mask));
  }
  if (!kls.empty()) {
    backward(kls.size() == 1 ? kls[0] : sum(stack_scalars(kls)));
  }

  std::vector<std::optional<Tensor>> out(decs.size());
  for (std::size_t i = 0; i < decs.size(); ++i) {
    if (!leaves[i].has_value()) continue;
    const std::vector<double>* g = leaf_gradient(*leaves[i]);
    if (g == nullptr) continue;
    try {
      out[i] = perturbed_states(*stage1[i], *g, eta);
    } catch (const ZeroGradientError&) {
    }
  }
  return out;
}

TokenSeq decode_states(const Seq2SeqModel& model, const Tensor& states) {
  NoGradGuard no_grad;
  Tensor logits = model.output_logits(states);
  const int v = logits.dim(0), t = logits.dim(1);
  TokenSeq out(static_cast<std::size_t>(t));
  for (int c = 0; c < t; ++c) {
    int best = 0;
    double best_val = logits.at(0, c);
    for (int r = 1; r < v; ++r) {
      const double val = logits.at(r, c);
      if (val > best_val) {
        best_val = val;
        best = r;
      }
    }
    out[static_cast<std::size_t>(c)] = best;
  }
  return out;
}

}  // namespace claps
