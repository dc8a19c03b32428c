#include "claps/objective.hpp"

#include "claps/errors.hpp"

namespace claps {

ContrastiveResult contrastive_term(const ContrastiveBatch& batch,
                                   PositiveSource positive_source,
                                   bool require_extra_negative) {
  const std::size_t n = batch.anchors.size();
  if (n == 0) throw InsufficientCandidatesError("contrastive_term: empty batch");
  if (batch.positives.size() != n) {
    throw ShapeError("contrastive_term: anchors/positives length mismatch");
  }
  if (!batch.extra_negatives.empty() && batch.extra_negatives.size() != n) {
    throw ShapeError("contrastive_term: extra_negatives length mismatch");
  }
  if (!batch.extra_positives.empty() && batch.extra_positives.size() != n) {
    throw ShapeError("contrastive_term: extra_positives length mismatch");
  }
  if (!(batch.temperature > 0.0)) {
    throw ValueError("contrastive_term: temperature must be positive");
  }
  const double inv_tau = 1.0 / batch.temperature;

  auto extra_negative = [&](std::size_t i) -> const std::optional<Tensor>* {
    if (batch.extra_negatives.empty()) return nullptr;
    return &batch.extra_negatives[i];
  };

  std::vector<Tensor> terms;
  for (std::size_t i = 0; i < n; ++i) {
    const std::optional<Tensor>* extra_neg = extra_negative(i);
    if (require_extra_negative && (extra_neg == nullptr || !extra_neg->has_value())) {
      continue;
    }

    Tensor positive;
    if (positive_source == PositiveSource::Target) {
      positive = batch.positives[i];
    } else {
      if (batch.extra_positives.empty() || !batch.extra_positives[i].has_value()) {
        continue;
      }
      positive = *batch.extra_positives[i];
    }

    Tensor pos_sim = scale(cosine_similarity(batch.anchors[i], positive), inv_tau);

    std::vector<Tensor> denom;
    if (batch.include_positive_in_denominator) denom.push_back(pos_sim);
    for (std::size_t j = 0; j < n; ++j) {
      if (j == i) continue;
      denom.push_back(
          scale(cosine_similarity(batch.anchors[i], batch.positives[j]), inv_tau));
    }
    if (extra_neg != nullptr && extra_neg->has_value()) {
      denom.push_back(scale(cosine_similarity(batch.anchors[i], **extra_neg), inv_tau));
    }
    if (denom.empty() || (batch.include_positive_in_denominator && denom.size() < 2)) {
      throw InsufficientCandidatesError(
          "contrastive_term: anchor has no candidates to contrast against");
    }
    terms.push_back(sub(pos_sim, logsumexp(stack_scalars(denom))));
  }

  ContrastiveResult result;
  result.n_terms = static_cast<int>(terms.size());
  if (terms.empty()) {
    result.sum = Tensor::scalar(0.0);
  } else if (terms.size() == 1) {
    result.sum = terms[0];
  } else {
    result.sum = sum(stack_scalars(terms));
  }
  return result;
}

Tensor kl_term(const Tensor& frozen_logits, const Tensor& perturbed_logits,
               const std::vector<bool>& step_mask) {
  return kl_cols(frozen_logits, perturbed_logits, step_mask);
}

Tensor total_objective(const Tensor& mle, const Tensor& cont_neg,
                       const Tensor& cont_pos, const Tensor& kl, double alpha,
                       double beta) {
  if (alpha < 0.0 || beta < 0.0) {
    throw ValueError("total_objective: alpha and beta must be nonnegative");
  }
  Tensor contrast = add(cont_neg, cont_pos);
  return add(sub(mle, scale(kl, alpha)), scale(contrast, beta));
}

}  // namespace claps
