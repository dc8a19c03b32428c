#pragma once

#include <optional>
#include <vector>

#include "claps/model.hpp"
#include "claps/tensor.hpp"
#include "claps/types.hpp"

namespace claps {

struct PerturbationConfig {
  double epsilon = 1.0;  // imposter step norm
  double eta = 1.0;      // distant-target step norm (both stages)
};

// Closed-form normalized-gradient step: states - step_norm * g / ||g||_F.
// The result is a constant (off-tape): perturbed states are fixed once
// generated. ||g||_F < 1e-12 raises ZeroGradientError.
Tensor perturbed_states(const Tensor& states, const std::vector<double>& gradient,
                        double step_norm);

// Imposter H~ per example: driven by the gradient of the conditional
// log-likelihood with respect to the decoder states. nullopt marks examples
// skipped for zero gradient.
std::vector<std::optional<Tensor>> make_imposters(
    const Seq2SeqModel& model, const std::vector<DecoderStates>& decs,
    const std::vector<TokenSeq>& targets, double epsilon);

// Stage 1 of the distant-target: step against the batch contrastive
// objective so the perturbed states move away from the source embedding.
std::vector<std::optional<Tensor>> make_distant_stage1(
    const Seq2SeqModel& model, const std::vector<EncoderStates>& encs,
    const std::vector<DecoderStates>& decs, double eta, double tau,
    bool include_positive_in_denominator);

// Stage 2: step against the KL divergence from the frozen unperturbed
// distribution, restoring high conditional likelihood. stage1[i] == nullopt
// propagates the skip.
std::vector<std::optional<Tensor>> make_distant_stage2(
    const Seq2SeqModel& model, const std::vector<DecoderStates>& decs,
    const std::vector<TokenSeq>& targets,
    const std::vector<std::optional<Tensor>>& stage1, double eta);

// Per-position argmax of the output head over a state matrix; ties go to
// the lowest token id.
TokenSeq decode_states(const Seq2SeqModel& model, const Tensor& states);

}  // namespace claps
