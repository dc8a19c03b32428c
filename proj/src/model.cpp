#include "claps/model.hpp"

#include <cmath>

#include "claps/errors.hpp"

namespace claps {

namespace {

constexpr double kMaskValue = -1e30;

// First t columns of a constant {d, max_len} tensor.
Tensor slice_cols_constant(const Tensor& x, int t) {
  const int d = x.dim(0), full = x.dim(1);
  std::vector<double> out(static_cast<std::size_t>(d) * t);
  for (int r = 0; r < d; ++r) {
    for (int c = 0; c < t; ++c) {
      out[static_cast<std::size_t>(r) * t + c] =
          x.value()[static_cast<std::size_t>(r) * full + c];
    }
  }
  return Tensor::from_data({d, t}, std::move(out));
}

Tensor glorot_uniform(const Shape& shape, Rng& rng) {
  const double fan_in = shape.size() == 2 ? shape[1] : shape[0];
  const double fan_out = shape[0];
  const double a = std::sqrt(6.0 / (fan_in + fan_out));
  return Tensor::random_uniform(shape, -a, a, rng, /*requires_grad=*/true);
}

// Additive attention mask {Tq, Tk}: 0 where allowed, large negative where
// blocked. Causal masking is query-relative; key_pad blocks PAD keys.
Tensor attention_mask(int t_query, int t_key, bool causal,
                      const std::vector<bool>* key_pad) {
  std::vector<double> m(static_cast<std::size_t>(t_query) * t_key, 0.0);
  for (int q = 0; q < t_query; ++q) {
    for (int k = 0; k < t_key; ++k) {
      const bool blocked = (causal && k > q) ||
                           (key_pad != nullptr && (*key_pad)[static_cast<std::size_t>(k)]);
      if (blocked) m[static_cast<std::size_t>(q) * t_key + k] = kMaskValue;
    }
  }
  return Tensor::from_data({t_query, t_key}, std::move(m));
}

}  // namespace

Seq2SeqModel::Seq2SeqModel(const ModelConfig& config)
    : config_(config), dropout_rng_(config.seed ^ 0x7a9d3bULL) {
  if (config_.vocab_size <= kNumReservedIds) {
    throw ConfigError("ModelConfig: vocab_size must exceed the 4 reserved ids");
  }
  if (config_.d_model <= 0 || config_.n_layers <= 0 || config_.n_heads <= 0 ||
      config_.d_ff <= 0 || config_.max_len <= 0) {
    throw ConfigError("ModelConfig: dimensions must be positive");
  }
  if (config_.d_model % config_.n_heads != 0) {
    throw ConfigError("ModelConfig: d_model must be divisible by n_heads");
  }
  if (config_.dropout_rate < 0.0 || config_.dropout_rate >= 1.0) {
    throw ConfigError("ModelConfig: dropout_rate must be in [0, 1)");
  }

  Rng rng(config_.seed);
  const int d = config_.d_model;
  const int v = config_.vocab_size;

  tok_embed_ = register_param(
      "embed.tok", Tensor::random_normal({v, d}, 0.0, 1.0 / std::sqrt(double(d)),
                                         rng, /*requires_grad=*/true));

  for (int l = 0; l < config_.n_layers; ++l) {
    const std::string p = "enc." + std::to_string(l) + ".";
    EncoderLayer layer;
    layer.ln_attn = make_layer_norm(p + "ln_attn");
    layer.self_attn = make_attention(p + "self", rng);
    layer.ln_ff = make_layer_norm(p + "ln_ff");
    layer.ff = make_feed_forward(p + "ff", rng);
    enc_layers_.push_back(std::move(layer));
  }
  enc_final_ln_ = make_layer_norm("enc.final_ln");

  for (int l = 0; l < config_.n_layers; ++l) {
    const std::string p = "dec." + std::to_string(l) + ".";
    DecoderLayer layer;
    layer.ln_self = make_layer_norm(p + "ln_self");
    layer.self_attn = make_attention(p + "self", rng);
    layer.ln_cross = make_layer_norm(p + "ln_cross");
    layer.cross_attn = make_attention(p + "cross", rng);
    layer.ln_ff = make_layer_norm(p + "ln_ff");
    layer.ff = make_feed_forward(p + "ff", rng);
    dec_layers_.push_back(std::move(layer));
  }
  dec_final_ln_ = make_layer_norm("dec.final_ln");

  w_out_ = register_param("head.w", glorot_uniform({v, d}, rng));
  b_out_ = register_param("head.b", Tensor::zeros({v}, true));
  w_proj_ = register_param("proj.w", glorot_uniform({d, d}, rng));
  b_proj_ = register_param("proj.b", Tensor::zeros({d}, true));

  // Sinusoidal position encoding, column per position.
  std::vector<double> pe(static_cast<std::size_t>(d) * config_.max_len, 0.0);
  for (int pos = 0; pos < config_.max_len; ++pos) {
    for (int i = 0; i < d; i += 2) {
      const double angle = pos * std::exp(-std::log(10000.0) * i / d);
      pe[static_cast<std::size_t>(i) * config_.max_len + pos] = std::sin(angle);
      if (i + 1 < d) {
        pe[static_cast<std::size_t>(i + 1) * config_.max_len + pos] = std::cos(angle);
      }
    }
  }
  pos_encoding_ = Tensor::from_data({d, config_.max_len}, std::move(pe));
}

Tensor Seq2SeqModel::register_param(const std::string& name, Tensor t) {
  params_.emplace_back(name, t);
  return t;
}

Seq2SeqModel::Attention Seq2SeqModel::make_attention(const std::string& prefix,
                                                     Rng& rng) {
  const int d = config_.d_model;
  Attention a;
  a.wq = register_param(prefix + ".wq", glorot_uniform({d, d}, rng));
  a.bq = register_param(prefix + ".bq", Tensor::zeros({d}, true));
  a.wk = register_param(prefix + ".wk", glorot_uniform({d, d}, rng));
  a.bk = register_param(prefix + ".bk", Tensor::zeros({d}, true));
  a.wv = register_param(prefix + ".wv", glorot_uniform({d, d}, rng));
  a.bv = register_param(prefix + ".bv", Tensor::zeros({d}, true));
  a.wo = register_param(prefix + ".wo", glorot_uniform({d, d}, rng));
  a.bo = register_param(prefix + ".bo", Tensor::zeros({d}, true));
  return a;
}

Seq2SeqModel::LayerNormParams Seq2SeqModel::make_layer_norm(const std::string& prefix) {
  LayerNormParams ln;
  ln.gain = register_param(prefix + ".gain", Tensor::full({config_.d_model}, 1.0, true));
  ln.bias = register_param(prefix + ".bias", Tensor::zeros({config_.d_model}, true));
  return ln;
}

Seq2SeqModel::FeedForward Seq2SeqModel::make_feed_forward(const std::string& prefix,
                                                          Rng& rng) {
  const int d = config_.d_model, f = config_.d_ff;
  FeedForward ff;
  ff.w1 = register_param(prefix + ".w1", glorot_uniform({f, d}, rng));
  ff.b1 = register_param(prefix + ".b1", Tensor::zeros({f}, true));
  ff.w2 = register_param(prefix + ".w2", glorot_uniform({d, f}, rng));
  ff.b2 = register_param(prefix + ".b2", Tensor::zeros({d}, true));
  return ff;
}

Tensor Seq2SeqModel::parameter(const std::string& name) const {
  for (const auto& [pname, tensor] : params_) {
    if (pname == name) return tensor;
  }
  throw ValueError("Seq2SeqModel::parameter: unknown name " + name);
}

void Seq2SeqModel::validate_ids(const TokenSeq& seq, const char* what) const {
  if (seq.empty()) throw InputError(std::string(what) + ": empty sequence");
  if (static_cast<int>(seq.size()) > config_.max_len) {
    throw InputError(std::string(what) + ": sequence exceeds max_len");
  }
  for (int id : seq) {
    if (id < 0 || id >= config_.vocab_size) {
      throw InputError(std::string(what) + ": token id out of range");
    }
  }
}

Tensor Seq2SeqModel::embed(const TokenSeq& ids) const {
  Tensor x = embedding_lookup(tok_embed_, ids);
  const int t = static_cast<int>(ids.size());
  Tensor pe = (t == config_.max_len)
                  ? pos_encoding_
                  : slice_cols_constant(pos_encoding_, t);
  return add(x, pe);
}

Tensor Seq2SeqModel::maybe_dropout(const Tensor& x) const {
  if (!training_ || config_.dropout_rate == 0.0) return x;
  return dropout(x, config_.dropout_rate, dropout_rng_);
}

Tensor Seq2SeqModel::layer_norm(const LayerNormParams& p, const Tensor& x) const {
  return layer_norm_cols(x, p.gain, p.bias, 1e-6);
}

Tensor Seq2SeqModel::attention(const Attention& p, const Tensor& queries,
                               const Tensor& keys, const Tensor& mask) const {
  const int d = config_.d_model;
  const int n_heads = config_.n_heads;
  const int dh = d / n_heads;
  const double inv_sqrt_dh = 1.0 / std::sqrt(static_cast<double>(dh));

  Tensor q = col_bias_add(matmul(p.wq, queries), p.bq);
  Tensor k = col_bias_add(matmul(p.wk, keys), p.bk);
  Tensor v = col_bias_add(matmul(p.wv, keys), p.bv);

  std::vector<Tensor> heads;
  heads.reserve(static_cast<std::size_t>(n_heads));
  for (int h = 0; h < n_heads; ++h) {
    Tensor qh = slice_rows(q, h * dh, dh);
    Tensor kh = slice_rows(k, h * dh, dh);
    Tensor vh = slice_rows(v, h * dh, dh);
    Tensor scores = scale(matmul(transpose(qh), kh), inv_sqrt_dh);
    scores = add(scores, mask);
    Tensor weights = softmax_rows(scores);
    heads.push_back(matmul(vh, transpose(weights)));
  }
  Tensor merged = concat_rows(heads);
  return maybe_dropout(col_bias_add(matmul(p.wo, merged), p.bo));
}

Tensor Seq2SeqModel::feed_forward(const FeedForward& p, const Tensor& x) const {
  Tensor hidden = relu(col_bias_add(matmul(p.w1, x), p.b1));
  return maybe_dropout(col_bias_add(matmul(p.w2, hidden), p.b2));
}

EncoderStates Seq2SeqModel::encode(const TokenSeq& source) const {
  validate_ids(source, "encode");
  std::vector<bool> pad_mask(source.size());
  for (std::size_t i = 0; i < source.size(); ++i) pad_mask[i] = source[i] == kPadId;

  const int t = static_cast<int>(source.size());
  Tensor mask = attention_mask(t, t, /*causal=*/false, &pad_mask);

  Tensor x = maybe_dropout(embed(source));
  for (const auto& layer : enc_layers_) {
    Tensor normed = layer_norm(layer.ln_attn, x);
    x = add(x, attention(layer.self_attn, normed, normed, mask));
    x = add(x, feed_forward(layer.ff, layer_norm(layer.ln_ff, x)));
  }
  EncoderStates out;
  out.states = layer_norm(enc_final_ln_, x);
  out.pad_mask = std::move(pad_mask);
  return out;
}

DecoderStates Seq2SeqModel::decode_teacher_forced(const EncoderStates& enc,
                                                  const TokenSeq& target) const {
  validate_ids(target, "decode_teacher_forced");
  if (target[0] != kBosId) {
    throw InputError("decode_teacher_forced: target must begin with BOS");
  }
  std::vector<bool> pad_mask(target.size());
  for (std::size_t i = 0; i < target.size(); ++i) pad_mask[i] = target[i] == kPadId;

  const int t = static_cast<int>(target.size());
  const int l = static_cast<int>(enc.pad_mask.size());
  Tensor self_mask = attention_mask(t, t, /*causal=*/true, nullptr);
  Tensor cross_mask = attention_mask(t, l, /*causal=*/false, &enc.pad_mask);

  Tensor x = maybe_dropout(embed(target));
  for (const auto& layer : dec_layers_) {
    Tensor normed = layer_norm(layer.ln_self, x);
    x = add(x, attention(layer.self_attn, normed, normed, self_mask));
    x = add(x, attention(layer.cross_attn, layer_norm(layer.ln_cross, x),
                         enc.states, cross_mask));
    x = add(x, feed_forward(layer.ff, layer_norm(layer.ln_ff, x)));
  }
  DecoderStates out;
  out.states = layer_norm(dec_final_ln_, x);
  out.logits = output_logits(out.states);
  out.pad_mask = std::move(pad_mask);
  return out;
}

Tensor Seq2SeqModel::project(const Tensor& states,
                             const std::vector<bool>& pad_mask) const {
  std::vector<bool> keep(pad_mask.size());
  bool any = false;
  for (std::size_t i = 0; i < pad_mask.size(); ++i) {
    keep[i] = !pad_mask[i];
    any = any || keep[i];
  }
  if (!any) throw DegenerateInputError("project: all positions are PAD");
  Tensor u = relu(col_bias_add(matmul(w_proj_, states), b_proj_));
  return masked_mean_cols(u, keep);
}

Tensor Seq2SeqModel::output_logits(const Tensor& states) const {
  return col_bias_add(matmul(w_out_, states), b_out_);
}

std::vector<bool> Seq2SeqModel::prediction_step_mask(const TokenSeq& target) {
  std::vector<bool> mask(target.size(), false);
  for (std::size_t t = 0; t + 1 < target.size(); ++t) {
    mask[t] = target[t] != kPadId && target[t + 1] != kPadId;
  }
  return mask;
}

std::vector<int> Seq2SeqModel::shifted_targets(const TokenSeq& target) {
  std::vector<int> next(target.size(), kPadId);
  for (std::size_t t = 0; t + 1 < target.size(); ++t) next[t] = target[t + 1];
  return next;
}

Tensor Seq2SeqModel::conditional_log_likelihood(const DecoderStates& dec,
                                                const TokenSeq& target) const {
  const std::vector<bool> step_mask = prediction_step_mask(target);
  bool any = false;
  for (bool b : step_mask) any = any || b;
  if (!any) return Tensor::scalar(0.0);
  return neg(cross_entropy_cols(dec.logits, shifted_targets(target), step_mask));
}

}  // namespace claps
