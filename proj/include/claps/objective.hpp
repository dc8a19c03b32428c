#pragma once

#include <optional>
#include <vector>

#include "claps/tensor.hpp"

namespace claps {

// One contrastive batch in embedding space. anchors[i] pairs with
// positives[i]; extra_negatives/extra_positives hold each anchor's imposter
// and distant-target embeddings when generated (nullopt when skipped).
struct ContrastiveBatch {
  std::vector<Tensor> anchors;
  std::vector<Tensor> positives;
  std::vector<std::optional<Tensor>> extra_negatives;
  std::vector<std::optional<Tensor>> extra_positives;
  double temperature = 0.1;
  // InfoNCE form: the numerator's positive also appears in the denominator,
  // which bounds every term in [-log(#candidates), 0]. Switch off for the
  // positive-excluded variant.
  bool include_positive_in_denominator = true;
};

// Which embedding plays the numerator positive for anchor i.
enum class PositiveSource {
  Target,   // positives[i]
  Distant,  // extra_positives[i]; anchors without one are skipped
};

struct ContrastiveResult {
  Tensor sum;    // scalar; sum of per-anchor log terms
  int n_terms;   // anchors that contributed
};

// Per-anchor candidates: the positive, every other anchor's target
// embedding, and the anchor's own extra negative when present.
// require_extra_negative drops anchors without one (hard-negative mode);
// PositiveSource::Distant drops anchors without an extra positive.
ContrastiveResult contrastive_term(const ContrastiveBatch& batch,
                                   PositiveSource positive_source,
                                   bool require_extra_negative = false);

// Sum over unmasked steps of KL(softmax(frozen col) || softmax(perturbed
// col)). The frozen side is expected to be detached by the caller.
Tensor kl_term(const Tensor& frozen_logits, const Tensor& perturbed_logits,
               const std::vector<bool>& step_mask);

// Eq.-style combination: mle - alpha * kl + beta * (cont_neg + cont_pos).
// The trainer maximizes this scalar.
Tensor total_objective(const Tensor& mle, const Tensor& cont_neg,
                       const Tensor& cont_pos, const Tensor& kl, double alpha,
                       double beta);

}  // namespace claps
