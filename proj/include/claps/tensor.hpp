#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <string>
#include <vector>

#include "claps/rng.hpp"

namespace claps {

using Shape = std::vector<int>;

namespace detail {

// One record on the tape. Nodes are created in topological order (parents
// always exist before children), so ascending id is a valid evaluation order.
struct Node {
  Shape shape;
  std::vector<double> value;
  std::vector<double> grad;  // allocated lazily on first backward touch
  bool requires_grad = false;
  std::uint64_t id = 0;
  std::vector<std::shared_ptr<Node>> parents;
  std::function<void(Node&)> backward_fn;
};

}  // namespace detail

// Dense row-major 64-bit tensor participating in a reverse-mode tape.
// Value-semantic handle; the underlying buffer is written once by its
// producing op and treated as immutable afterwards (leaves excepted:
// the optimizer mutates parameter values between forward passes).
class Tensor {
 public:
  Tensor() = default;

  static Tensor zeros(const Shape& shape, bool requires_grad = false);
  static Tensor full(const Shape& shape, double fill, bool requires_grad = false);
  static Tensor from_data(const Shape& shape, std::vector<double> data,
                          bool requires_grad = false);
  static Tensor scalar(double v);
  static Tensor random_uniform(const Shape& shape, double lo, double hi, Rng& rng,
                               bool requires_grad = false);
  static Tensor random_normal(const Shape& shape, double mean, double stddev,
                              Rng& rng, bool requires_grad = false);

  bool defined() const { return node_ != nullptr; }
  const Shape& shape() const { return node_->shape; }
  int dim(int i) const { return node_->shape[static_cast<std::size_t>(i)]; }
  int rank() const { return static_cast<int>(node_->shape.size()); }
  std::int64_t numel() const { return static_cast<std::int64_t>(node_->value.size()); }

  const std::vector<double>& value() const { return node_->value; }
  // Leaf mutation only (parameter init / optimizer step).
  std::vector<double>& mutable_value();

  double scalar_value() const;
  double at(int i) const { return node_->value[static_cast<std::size_t>(i)]; }
  double at(int i, int j) const;

  bool requires_grad() const { return node_->requires_grad; }
  void set_requires_grad(bool v);

  bool has_grad() const { return !node_->grad.empty(); }
  const std::vector<double>& grad() const;
  void zero_grad();

  // Copy of the value as a fresh leaf, cut from the tape.
  Tensor detach(bool requires_grad = false) const;

  std::uint64_t node_id() const { return node_->id; }

  // Internal: used by ops.
  explicit Tensor(std::shared_ptr<detail::Node> node) : node_(std::move(node)) {}
  const std::shared_ptr<detail::Node>& node() const { return node_; }

 private:
  std::shared_ptr<detail::Node> node_;
};

// Scoped tape suppression: ops built while a guard is alive produce constant
// nodes with no parents. Thread-local, nestable.
class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;
};

bool grad_enabled();

// Reverse-mode sweep from a scalar root. Gradients accumulate into the
// grad buffers of every requires_grad node reachable from the root; each
// node's backward_fn runs exactly once, in reverse creation order.
void backward(const Tensor& root);

// ---- elementwise and scalar ops ----
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor neg(const Tensor& a);
Tensor scale(const Tensor& a, double c);
Tensor add_scalar(const Tensor& a, double c);
Tensor relu(const Tensor& a);
Tensor dropout(const Tensor& a, double rate, Rng& rng);

// ---- linear algebra ----
Tensor matmul(const Tensor& a, const Tensor& b);  // {m,k} x {k,n} -> {m,n}
Tensor transpose(const Tensor& a);                // {m,n} -> {n,m}
Tensor slice_rows(const Tensor& a, int row0, int nrows);
Tensor concat_rows(const std::vector<Tensor>& parts);
Tensor dot(const Tensor& u, const Tensor& v);  // 1-D -> scalar
Tensor sum(const Tensor& a);                   // -> scalar

// ---- sequence ops (feature-major {d, T} layout) ----
Tensor col_bias_add(const Tensor& x, const Tensor& bias);  // {d,T} + {d}
Tensor layer_norm_cols(const Tensor& x, const Tensor& gain, const Tensor& bias,
                       double eps = 1e-6);
Tensor embedding_lookup(const Tensor& table, const std::vector<int>& ids);
Tensor masked_mean_cols(const Tensor& x, const std::vector<bool>& keep);

// ---- probability ops ----
Tensor softmax(const Tensor& logits, double temperature);       // 1-D
Tensor softmax_rows(const Tensor& x, double temperature = 1.0); // 2-D, last axis
Tensor cross_entropy(const Tensor& logits, int target);         // 1-D -> scalar
Tensor cross_entropy_cols(const Tensor& logits, const std::vector<int>& targets,
                          const std::vector<bool>& step_mask);  // {V,T} -> scalar
Tensor kl_divergence(const Tensor& p_logits, const Tensor& q_logits);  // 1-D
Tensor kl_cols(const Tensor& p_logits, const Tensor& q_logits,
               const std::vector<bool>& step_mask);  // {V,T} -> scalar
Tensor logsumexp(const Tensor& v);                   // 1-D -> scalar
Tensor cosine_similarity(const Tensor& u, const Tensor& v);  // 1-D -> scalar
Tensor stack_scalars(const std::vector<Tensor>& scalars);    // -> {n}

}  // namespace claps
