#pragma once

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "claps/rng.hpp"
#include "claps/tensor.hpp"
#include "claps/types.hpp"

namespace claps {

struct ModelConfig {
  int d_model = 64;
  int n_layers = 2;
  int n_heads = 4;
  int d_ff = 128;
  int vocab_size = 0;  // required; includes the 4 reserved ids
  int max_len = 32;
  double dropout_rate = 0.0;
  std::uint64_t seed = 0;
};

// Encoder output M, one column per source position. pad_mask[t] is true at
// PAD positions; those columns are excluded from attention keys and pooling.
struct EncoderStates {
  Tensor states;  // {d, L}
  std::vector<bool> pad_mask;
};

// Decoder states H plus output-head logits. Column t holds the hidden state
// that predicts target position t+1.
struct DecoderStates {
  Tensor states;  // {d, T}
  Tensor logits;  // {V, T}
  std::vector<bool> pad_mask;
};

// Pre-norm transformer encoder-decoder with a shared token embedding,
// untied output projection and the contrastive projection head.
class Seq2SeqModel {
 public:
  explicit Seq2SeqModel(const ModelConfig& config);

  const ModelConfig& config() const { return config_; }

  EncoderStates encode(const TokenSeq& source) const;
  DecoderStates decode_teacher_forced(const EncoderStates& enc,
                                      const TokenSeq& target) const;

  // Projection head: mean over non-pad columns of ReLU(W1 v + b1).
  Tensor project(const Tensor& states, const std::vector<bool>& pad_mask) const;

  // Output head W h + b applied column-wise; used on both decoder states
  // and perturbed state matrices.
  Tensor output_logits(const Tensor& states) const;

  // Sum over real prediction steps of log p(target[t+1] | ...). Scalar
  // tensor on the tape; <= 0.
  Tensor conditional_log_likelihood(const DecoderStates& dec,
                                    const TokenSeq& target) const;

  // step_mask[t]: column t predicts a real (non-PAD) next token.
  static std::vector<bool> prediction_step_mask(const TokenSeq& target);
  // next_tokens[t] = target[t+1] (PAD at the final column).
  static std::vector<int> shifted_targets(const TokenSeq& target);

  std::vector<std::pair<std::string, Tensor>>& parameters() { return params_; }
  const std::vector<std::pair<std::string, Tensor>>& parameters() const {
    return params_;
  }
  Tensor parameter(const std::string& name) const;

  void set_training(bool training) { training_ = training; }
  bool training() const { return training_; }

  Rng& dropout_rng() const { return dropout_rng_; }

 private:
  struct Attention {
    Tensor wq, bq, wk, bk, wv, bv, wo, bo;
  };
  struct LayerNormParams {
    Tensor gain, bias;
  };
  struct FeedForward {
    Tensor w1, b1, w2, b2;
  };
  struct EncoderLayer {
    LayerNormParams ln_attn, ln_ff;
    Attention self_attn;
    FeedForward ff;
  };
  struct DecoderLayer {
    LayerNormParams ln_self, ln_cross, ln_ff;
    Attention self_attn, cross_attn;
    FeedForward ff;
  };

  Tensor embed(const TokenSeq& ids) const;
  Tensor maybe_dropout(const Tensor& x) const;
  Tensor attention(const Attention& p, const Tensor& queries, const Tensor& keys,
                   const Tensor& mask) const;
  Tensor feed_forward(const FeedForward& p, const Tensor& x) const;
  Tensor layer_norm(const LayerNormParams& p, const Tensor& x) const;

  Tensor register_param(const std::string& name, Tensor t);
  Attention make_attention(const std::string& prefix, Rng& rng);
  LayerNormParams make_layer_norm(const std::string& prefix);
  FeedForward make_feed_forward(const std::string& prefix, Rng& rng);

  void validate_ids(const TokenSeq& seq, const char* what) const;

  ModelConfig config_;
  Tensor tok_embed_;  // {V, d}
  std::vector<EncoderLayer> enc_layers_;
  std::vector<DecoderLayer> dec_layers_;
  LayerNormParams enc_final_ln_, dec_final_ln_;
  Tensor w_out_, b_out_;    // {V, d}, {V}
  Tensor w_proj_, b_proj_;  // {d, d}, {d} — the projection head
  Tensor pos_encoding_;     // {d, max_len} constant
  std::vector<std::pair<std::string, Tensor>> params_;
  bool training_ = false;
  mutable Rng dropout_rng_;
};

}  // namespace claps
