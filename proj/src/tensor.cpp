#include "claps/tensor.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstddef>
#include <limits>
#include <unordered_set>

#include "claps/errors.hpp"

namespace claps {

namespace {

std::atomic<std::uint64_t> g_next_node_id{1};

thread_local int g_no_grad_depth = 0;

std::int64_t shape_numel(const Shape& shape) {
  std::int64_t n = 1;
  for (int d : shape) {
    if (d <= 0) throw ShapeError("tensor dimensions must be positive");
    n *= d;
  }
  return n;
}

std::shared_ptr<detail::Node> make_node(const Shape& shape) {
  auto node = std::make_shared<detail::Node>();
  node->shape = shape;
  node->value.assign(static_cast<std::size_t>(shape_numel(shape)), 0.0);
  node->id = g_next_node_id.fetch_add(1, std::memory_order_relaxed);
  return node;
}

void check_finite(const detail::Node& node, const char* op) {
  for (double v : node.value) {
    if (!std::isfinite(v)) {
      throw NumericError(std::string("non-finite value produced by ") + op);
    }
  }
}

// Wires parents and the backward closure iff the tape is active and any
// parent carries gradient.
void attach(const std::shared_ptr<detail::Node>& out,
            std::vector<std::shared_ptr<detail::Node>> parents,
            std::function<void(detail::Node&)> backward_fn) {
  if (g_no_grad_depth > 0) return;
  bool any = false;
  for (const auto& p : parents) any = any || p->requires_grad;
  if (!any) return;
  out->requires_grad = true;
  out->parents = std::move(parents);
  out->backward_fn = std::move(backward_fn);
}

std::vector<double>& grad_buffer(detail::Node& node) {
  if (node.grad.empty()) node.grad.assign(node.value.size(), 0.0);
  return node.grad;
}

void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  if (a.shape() != b.shape()) {
    throw ShapeError(std::string(op) + ": shape mismatch");
  }
}

void require_rank(const Tensor& t, int rank, const char* op) {
  if (t.rank() != rank) {
    throw ShapeError(std::string(op) + ": expected rank " + std::to_string(rank));
  }
}

void require_finite_inputs(const Tensor& t, const char* op) {
  for (double v : t.value()) {
    if (!std::isfinite(v)) {
      throw NumericError(std::string(op) + ": non-finite input");
    }
  }
}

}  // namespace

// ---------------------------------------------------------------------------
// Tensor basics

Tensor Tensor::zeros(const Shape& shape, bool requires_grad) {
  auto node = make_node(shape);
  node->requires_grad = requires_grad;
  return Tensor(node);
}

Tensor Tensor::full(const Shape& shape, double fill, bool requires_grad) {
  auto node = make_node(shape);
  std::fill(node->value.begin(), node->value.end(), fill);
  node->requires_grad = requires_grad;
  return Tensor(node);
}

Tensor Tensor::from_data(const Shape& shape, std::vector<double> data,
                         bool requires_grad) {
  if (static_cast<std::int64_t>(data.size()) != shape_numel(shape)) {
    throw ShapeError("from_data: data length does not match shape");
  }
  auto node = make_node(shape);
  node->value = std::move(data);
  node->requires_grad = requires_grad;
  return Tensor(node);
}

Tensor Tensor::scalar(double v) { return from_data({1}, {v}); }

Tensor Tensor::random_uniform(const Shape& shape, double lo, double hi, Rng& rng,
                              bool requires_grad) {
  auto node = make_node(shape);
  for (double& v : node->value) v = rng.uniform(lo, hi);
  node->requires_grad = requires_grad;
  return Tensor(node);
}

Tensor Tensor::random_normal(const Shape& shape, double mean, double stddev,
                             Rng& rng, bool requires_grad) {
  auto node = make_node(shape);
  for (double& v : node->value) v = rng.normal(mean, stddev);
  node->requires_grad = requires_grad;
  return Tensor(node);
}

std::vector<double>& Tensor::mutable_value() {
  if (node_->backward_fn) {
    throw ValueError("mutable_value: only leaf tensors may be mutated");
  }
  return node_->value;
}

double Tensor::scalar_value() const {
  if (numel() != 1) throw ShapeError("scalar_value: tensor is not a scalar");
  return node_->value[0];
}

double Tensor::at(int i, int j) const {
  if (rank() != 2) throw ShapeError("at(i,j): tensor is not 2-D");
  return node_->value[static_cast<std::size_t>(i) * static_cast<std::size_t>(dim(1)) +
                      static_cast<std::size_t>(j)];
}

void Tensor::set_requires_grad(bool v) {
  if (node_->backward_fn) {
    throw ValueError("set_requires_grad: only valid on leaf tensors");
  }
  node_->requires_grad = v;
}

const std::vector<double>& Tensor::grad() const {
  if (node_->grad.empty()) {
    throw ValueError("grad: no gradient recorded for this tensor");
  }
  return node_->grad;
}

void Tensor::zero_grad() {
  std::fill(node_->grad.begin(), node_->grad.end(), 0.0);
}

Tensor Tensor::detach(bool requires_grad) const {
  auto node = make_node(node_->shape);
  node->value = node_->value;
  node->requires_grad = requires_grad;
  return Tensor(node);
}

// ---------------------------------------------------------------------------
// Tape

NoGradGuard::NoGradGuard() { ++g_no_grad_depth; }
NoGradGuard::~NoGradGuard() { --g_no_grad_depth; }

bool grad_enabled() { return g_no_grad_depth == 0; }

void backward(const Tensor& root) {
  if (!root.defined() || root.numel() != 1) {
    throw ValueError("backward: root must be a defined scalar");
  }
  if (!root.node()->requires_grad) return;

  // Collect the reachable subgraph (iterative DFS), then order by node id:
  // creation order is a topological order by construction, so the sweep is
  // deterministic regardless of visitation order.
  std::vector<detail::Node*> order;
  std::vector<detail::Node*> stack{root.node().get()};
  std::unordered_set<detail::Node*> visited{root.node().get()};
  while (!stack.empty()) {
    detail::Node* node = stack.back();
    stack.pop_back();
    order.push_back(node);
    for (const auto& parent : node->parents) {
      if (parent->requires_grad && visited.insert(parent.get()).second) {
        stack.push_back(parent.get());
      }
    }
  }
  std::sort(order.begin(), order.end(),
            [](const detail::Node* a, const detail::Node* b) { return a->id > b->id; });

  grad_buffer(*root.node())[0] += 1.0;
  for (detail::Node* node : order) {
    if (node->backward_fn && !node->grad.empty()) {
      node->backward_fn(*node);
    }
  }
}

// ---------------------------------------------------------------------------
// Elementwise ops

namespace {

Tensor binary_elementwise(const Tensor& a, const Tensor& b, const char* name,
                          double (*fwd)(double, double),
                          void (*bwd)(detail::Node&, detail::Node&, detail::Node&)) {
  require_same_shape(a, b, name);
  auto out = make_node(a.shape());
  const std::size_t n = out->value.size();
  for (std::size_t i = 0; i < n; ++i) {
    out->value[i] = fwd(a.value()[i], b.value()[i]);
  }
  check_finite(*out, name);
  attach(out, {a.node(), b.node()}, [bwd](detail::Node& o) {
    bwd(o, *o.parents[0], *o.parents[1]);
  });
  return Tensor(out);
}

}  // namespace

Tensor add(const Tensor& a, const Tensor& b) {
  return binary_elementwise(
      a, b, "add", [](double x, double y) { return x + y; },
      [](detail::Node& o, detail::Node& pa, detail::Node& pb) {
        if (pa.requires_grad) {
          auto& g = grad_buffer(pa);
          for (std::size_t i = 0; i < g.size(); ++i) g[i] += o.grad[i];
        }
        if (pb.requires_grad) {
          auto& g = grad_buffer(pb);
          for (std::size_t i = 0; i < g.size(); ++i) g[i] += o.grad[i];
        }
      });
}

Tensor sub(const Tensor& a, const Tensor& b) {
  return binary_elementwise(
      a, b, "sub", [](double x, double y) { return x - y; },
      [](detail::Node& o, detail::Node& pa, detail::Node& pb) {
        if (pa.requires_grad) {
          auto& g = grad_buffer(pa);
          for (std::size_t i = 0; i < g.size(); ++i) g[i] += o.grad[i];
        }
        if (pb.requires_grad) {
          auto& g = grad_buffer(pb);
          for (std::size_t i = 0; i < g.size(); ++i) g[i] -= o.grad[i];
        }
      });
}

Tensor mul(const Tensor& a, const Tensor& b) {
  return binary_elementwise(
      a, b, "mul", [](double x, double y) { return x * y; },
      [](detail::Node& o, detail::Node& pa, detail::Node& pb) {
        if (pa.requires_grad) {
          auto& g = grad_buffer(pa);
          for (std::size_t i = 0; i < g.size(); ++i) g[i] += o.grad[i] * pb.value[i];
        }
        if (pb.requires_grad) {
          auto& g = grad_buffer(pb);
          for (std::size_t i = 0; i < g.size(); ++i) g[i] += o.grad[i] * pa.value[i];
        }
      });
}

Tensor neg(const Tensor& a) { return scale(a, -1.0); }

Tensor scale(const Tensor& a, double c) {
  if (!std::isfinite(c)) throw ValueError("scale: non-finite factor");
  auto out = make_node(a.shape());
  for (std::size_t i = 0; i < out->value.size(); ++i) out->value[i] = a.value()[i] * c;
  check_finite(*out, "scale");
  attach(out, {a.node()}, [c](detail::Node& o) {
    auto& g = grad_buffer(*o.parents[0]);
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += o.grad[i] * c;
  });
  return Tensor(out);
}

Tensor add_scalar(const Tensor& a, double c) {
  if (!std::isfinite(c)) throw ValueError("add_scalar: non-finite addend");
  auto out = make_node(a.shape());
  for (std::size_t i = 0; i < out->value.size(); ++i) out->value[i] = a.value()[i] + c;
  check_finite(*out, "add_scalar");
  attach(out, {a.node()}, [](detail::Node& o) {
    auto& g = grad_buffer(*o.parents[0]);
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += o.grad[i];
  });
  return Tensor(out);
}

Tensor relu(const Tensor& a) {
  auto out = make_node(a.shape());
  for (std::size_t i = 0; i < out->value.size(); ++i) {
    out->value[i] = a.value()[i] > 0.0 ? a.value()[i] : 0.0;
  }
  check_finite(*out, "relu");
  attach(out, {a.node()}, [](detail::Node& o) {
    auto& pa = *o.parents[0];
    auto& g = grad_buffer(pa);
    for (std::size_t i = 0; i < g.size(); ++i) {
      if (pa.value[i] > 0.0) g[i] += o.grad[i];
    }
  });
  return Tensor(out);
}

Tensor dropout(const Tensor& a, double rate, Rng& rng) {
  if (rate < 0.0 || rate >= 1.0) throw ValueError("dropout: rate must be in [0, 1)");
  if (rate == 0.0) return a;
  auto keep = std::make_shared<std::vector<std::uint8_t>>(a.value().size());
  const double inv_keep = 1.0 / (1.0 - rate);
  auto out = make_node(a.shape());
  for (std::size_t i = 0; i < out->value.size(); ++i) {
    (*keep)[i] = rng.uniform() >= rate ? 1 : 0;
    out->value[i] = (*keep)[i] ? a.value()[i] * inv_keep : 0.0;
  }
  check_finite(*out, "dropout");
  attach(out, {a.node()}, [keep, inv_keep](detail::Node& o) {
    auto& g = grad_buffer(*o.parents[0]);
    for (std::size_t i = 0; i < g.size(); ++i) {
      if ((*keep)[i]) g[i] += o.grad[i] * inv_keep;
    }
  });
  return Tensor(out);
}

// ---------------------------------------------------------------------------
// Linear algebra

Tensor matmul(const Tensor& a, const Tensor& b) {
  require_rank(a, 2, "matmul");
  require_rank(b, 2, "matmul");
  const int m = a.dim(0), k = a.dim(1), k2 = b.dim(0), n = b.dim(1);
  if (k != k2) throw ShapeError("matmul: inner dimensions disagree");
  auto out = make_node({m, n});
  const double* av = a.value().data();
  const double* bv = b.value().data();
  double* cv = out->value.data();
  for (int i = 0; i < m; ++i) {
    for (int p = 0; p < k; ++p) {
      const double aip = av[i * k + p];
      const double* brow = bv + static_cast<std::size_t>(p) * n;
      double* crow = cv + static_cast<std::size_t>(i) * n;
      for (int j = 0; j < n; ++j) crow[j] += aip * brow[j];
    }
  }
  check_finite(*out, "matmul");
  attach(out, {a.node(), b.node()}, [m, k, n](detail::Node& o) {
    auto& pa = *o.parents[0];
    auto& pb = *o.parents[1];
    if (pa.requires_grad) {
      auto& ga = grad_buffer(pa);
      for (int i = 0; i < m; ++i) {
        for (int p = 0; p < k; ++p) {
          double s = 0.0;
          const double* grow = o.grad.data() + static_cast<std::size_t>(i) * n;
          const double* brow = pb.value.data() + static_cast<std::size_t>(p) * n;
          for (int j = 0; j < n; ++j) s += grow[j] * brow[j];
          ga[static_cast<std::size_t>(i) * k + p] += s;
        }
      }
    }
    if (pb.requires_grad) {
      auto& gb = grad_buffer(pb);
      for (int i = 0; i < m; ++i) {
        const double* grow = o.grad.data() + static_cast<std::size_t>(i) * n;
        for (int p = 0; p < k; ++p) {
          const double aip = pa.value[static_cast<std::size_t>(i) * k + p];
          double* gbrow = gb.data() + static_cast<std::size_t>(p) * n;
          for (int j = 0; j < n; ++j) gbrow[j] += aip * grow[j];
        }
      }
    }
  });
  return Tensor(out);
}

Tensor transpose(const Tensor& a) {
  require_rank(a, 2, "transpose");
  const int m = a.dim(0), n = a.dim(1);
  auto out = make_node({n, m});
  for (int i = 0; i < m; ++i) {
    for (int j = 0; j < n; ++j) {
      out->value[static_cast<std::size_t>(j) * m + i] =
          a.value()[static_cast<std::size_t>(i) * n + j];
    }
  }
  attach(out, {a.node()}, [m, n](detail::Node& o) {
    auto& g = grad_buffer(*o.parents[0]);
    for (int i = 0; i < m; ++i) {
      for (int j = 0; j < n; ++j) {
        g[static_cast<std::size_t>(i) * n + j] +=
            o.grad[static_cast<std::size_t>(j) * m + i];
      }
    }
  });
  return Tensor(out);
}

Tensor slice_rows(const Tensor& a, int row0, int nrows) {
  require_rank(a, 2, "slice_rows");
  const int m = a.dim(0), n = a.dim(1);
  if (row0 < 0 || nrows <= 0 || row0 + nrows > m) {
    throw ShapeError("slice_rows: range out of bounds");
  }
  auto out = make_node({nrows, n});
  std::copy_n(a.value().data() + static_cast<std::size_t>(row0) * n,
              static_cast<std::size_t>(nrows) * n, out->value.data());
  attach(out, {a.node()}, [row0, n](detail::Node& o) {
    auto& g = grad_buffer(*o.parents[0]);
    const std::size_t base = static_cast<std::size_t>(row0) * n;
    for (std::size_t i = 0; i < o.grad.size(); ++i) g[base + i] += o.grad[i];
  });
  return Tensor(out);
}

Tensor concat_rows(const std::vector<Tensor>& parts) {
  if (parts.empty()) throw ShapeError("concat_rows: no parts");
  int n = -1, total_rows = 0;
  for (const auto& p : parts) {
    if (p.rank() != 2) throw ShapeError("concat_rows: parts must be 2-D");
    if (n < 0) n = p.dim(1);
    if (p.dim(1) != n) throw ShapeError("concat_rows: column counts disagree");
    total_rows += p.dim(0);
  }
  auto out = make_node({total_rows, n});
  std::size_t offset = 0;
  std::vector<std::shared_ptr<detail::Node>> parents;
  std::vector<std::size_t> offsets;
  for (const auto& p : parts) {
    std::copy(p.value().begin(), p.value().end(), out->value.begin() + offset);
    parents.push_back(p.node());
    offsets.push_back(offset);
    offset += p.value().size();
  }
  attach(out, std::move(parents), [offsets](detail::Node& o) {
    for (std::size_t pi = 0; pi < o.parents.size(); ++pi) {
      auto& p = *o.parents[pi];
      if (!p.requires_grad) continue;
      auto& g = grad_buffer(p);
      const std::size_t base = offsets[pi];
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += o.grad[base + i];
    }
  });
  return Tensor(out);
}

Tensor dot(const Tensor& u, const Tensor& v) {
  require_rank(u, 1, "dot");
  require_same_shape(u, v, "dot");
  auto out = make_node({1});
  double s = 0.0;
  for (std::size_t i = 0; i < u.value().size(); ++i) s += u.value()[i] * v.value()[i];
  out->value[0] = s;
  check_finite(*out, "dot");
  attach(out, {u.node(), v.node()}, [](detail::Node& o) {
    auto& pu = *o.parents[0];
    auto& pv = *o.parents[1];
    const double g0 = o.grad[0];
    if (pu.requires_grad) {
      auto& g = grad_buffer(pu);
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += g0 * pv.value[i];
    }
    if (pv.requires_grad) {
      auto& g = grad_buffer(pv);
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += g0 * pu.value[i];
    }
  });
  return Tensor(out);
}

Tensor sum(const Tensor& a) {
  auto out = make_node({1});
  double s = 0.0;
  for (double v : a.value()) s += v;
  out->value[0] = s;
  check_finite(*out, "sum");
  attach(out, {a.node()}, [](detail::Node& o) {
    auto& g = grad_buffer(*o.parents[0]);
    const double g0 = o.grad[0];
    for (double& gi : g) gi += g0;
  });
  return Tensor(out);
}

// ---------------------------------------------------------------------------
// Sequence ops, feature-major {d, T}

Tensor col_bias_add(const Tensor& x, const Tensor& bias) {
  require_rank(x, 2, "col_bias_add");
  require_rank(bias, 1, "col_bias_add");
  const int d = x.dim(0), t = x.dim(1);
  if (bias.dim(0) != d) throw ShapeError("col_bias_add: bias length != rows");
  auto out = make_node({d, t});
  for (int r = 0; r < d; ++r) {
    const double b = bias.value()[static_cast<std::size_t>(r)];
    const double* xr = x.value().data() + static_cast<std::size_t>(r) * t;
    double* or_ = out->value.data() + static_cast<std::size_t>(r) * t;
    for (int c = 0; c < t; ++c) or_[c] = xr[c] + b;
  }
  check_finite(*out, "col_bias_add");
  attach(out, {x.node(), bias.node()}, [d, t](detail::Node& o) {
    auto& px = *o.parents[0];
    auto& pb = *o.parents[1];
    if (px.requires_grad) {
      auto& g = grad_buffer(px);
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += o.grad[i];
    }
    if (pb.requires_grad) {
      auto& g = grad_buffer(pb);
      for (int r = 0; r < d; ++r) {
        double s = 0.0;
        const double* grow = o.grad.data() + static_cast<std::size_t>(r) * t;
        for (int c = 0; c < t; ++c) s += grow[c];
        g[static_cast<std::size_t>(r)] += s;
      }
    }
  });
  return Tensor(out);
}

Tensor layer_norm_cols(const Tensor& x, const Tensor& gain, const Tensor& bias,
                       double eps) {
  require_rank(x, 2, "layer_norm_cols");
  const int d = x.dim(0), t = x.dim(1);
  if (gain.rank() != 1 || gain.dim(0) != d || bias.rank() != 1 || bias.dim(0) != d) {
    throw ShapeError("layer_norm_cols: gain/bias length != rows");
  }
  auto out = make_node({d, t});
  auto xhat = std::make_shared<std::vector<double>>(x.value().size());
  auto inv_std = std::make_shared<std::vector<double>>(static_cast<std::size_t>(t));
  for (int c = 0; c < t; ++c) {
    double mean = 0.0;
    for (int r = 0; r < d; ++r) mean += x.value()[static_cast<std::size_t>(r) * t + c];
    mean /= d;
    double var = 0.0;
    for (int r = 0; r < d; ++r) {
      const double dv = x.value()[static_cast<std::size_t>(r) * t + c] - mean;
      var += dv * dv;
    }
    var /= d;
    const double is = 1.0 / std::sqrt(var + eps);
    (*inv_std)[static_cast<std::size_t>(c)] = is;
    for (int r = 0; r < d; ++r) {
      const std::size_t idx = static_cast<std::size_t>(r) * t + c;
      (*xhat)[idx] = (x.value()[idx] - mean) * is;
      out->value[idx] = gain.value()[static_cast<std::size_t>(r)] * (*xhat)[idx] +
                        bias.value()[static_cast<std::size_t>(r)];
    }
  }
  check_finite(*out, "layer_norm_cols");
  attach(out, {x.node(), gain.node(), bias.node()},
         [d, t, xhat, inv_std](detail::Node& o) {
           auto& px = *o.parents[0];
           auto& pg = *o.parents[1];
           auto& pb = *o.parents[2];
           if (px.requires_grad) {
             auto& g = grad_buffer(px);
             for (int c = 0; c < t; ++c) {
               double mean_dxhat = 0.0, mean_dxhat_xhat = 0.0;
               for (int r = 0; r < d; ++r) {
                 const std::size_t idx = static_cast<std::size_t>(r) * t + c;
                 const double dxh = o.grad[idx] * pg.value[static_cast<std::size_t>(r)];
                 mean_dxhat += dxh;
                 mean_dxhat_xhat += dxh * (*xhat)[idx];
               }
               mean_dxhat /= d;
               mean_dxhat_xhat /= d;
               const double is = (*inv_std)[static_cast<std::size_t>(c)];
               for (int r = 0; r < d; ++r) {
                 const std::size_t idx = static_cast<std::size_t>(r) * t + c;
                 const double dxh = o.grad[idx] * pg.value[static_cast<std::size_t>(r)];
                 g[idx] += is * (dxh - mean_dxhat - (*xhat)[idx] * mean_dxhat_xhat);
               }
             }
           }
           if (pg.requires_grad) {
             auto& g = grad_buffer(pg);
             for (int r = 0; r < d; ++r) {
               double s = 0.0;
               for (int c = 0; c < t; ++c) {
                 const std::size_t idx = static_cast<std::size_t>(r) * t + c;
                 s += o.grad[idx] * (*xhat)[idx];
               }
               g[static_cast<std::size_t>(r)] += s;
             }
           }
           if (pb.requires_grad) {
             auto& g = grad_buffer(pb);
             for (int r = 0; r < d; ++r) {
               double s = 0.0;
               for (int c = 0; c < t; ++c) s += o.grad[static_cast<std::size_t>(r) * t + c];
               g[static_cast<std::size_t>(r)] += s;
             }
           }
         });
  return Tensor(out);
}

Tensor embedding_lookup(const Tensor& table, const std::vector<int>& ids) {
  require_rank(table, 2, "embedding_lookup");
  const int vocab = table.dim(0), d = table.dim(1);
  const int t = static_cast<int>(ids.size());
  if (t == 0) throw ShapeError("embedding_lookup: empty id list");
  for (int id : ids) {
    if (id < 0 || id >= vocab) throw IndexError("embedding_lookup: id out of range");
  }
  auto out = make_node({d, t});
  for (int c = 0; c < t; ++c) {
    const double* row = table.value().data() +
                        static_cast<std::size_t>(ids[static_cast<std::size_t>(c)]) * d;
    for (int r = 0; r < d; ++r) {
      out->value[static_cast<std::size_t>(r) * t + c] = row[r];
    }
  }
  auto ids_copy = std::make_shared<std::vector<int>>(ids);
  attach(out, {table.node()}, [d, t, ids_copy](detail::Node& o) {
    auto& g = grad_buffer(*o.parents[0]);
    for (int c = 0; c < t; ++c) {
      double* row = g.data() +
                    static_cast<std::size_t>((*ids_copy)[static_cast<std::size_t>(c)]) * d;
      for (int r = 0; r < d; ++r) {
        row[r] += o.grad[static_cast<std::size_t>(r) * t + c];
      }
    }
  });
  return Tensor(out);
}

Tensor masked_mean_cols(const Tensor& x, const std::vector<bool>& keep) {
  require_rank(x, 2, "masked_mean_cols");
  const int d = x.dim(0), t = x.dim(1);
  if (static_cast<int>(keep.size()) != t) {
    throw ShapeError("masked_mean_cols: mask length != columns");
  }
  int m = 0;
  for (bool k : keep) m += k ? 1 : 0;
  if (m == 0) throw DegenerateInputError("masked_mean_cols: no columns selected");
  auto out = make_node({d});
  const double inv_m = 1.0 / m;
  for (int r = 0; r < d; ++r) {
    double s = 0.0;
    const double* xr = x.value().data() + static_cast<std::size_t>(r) * t;
    for (int c = 0; c < t; ++c) {
      if (keep[static_cast<std::size_t>(c)]) s += xr[c];
    }
    out->value[static_cast<std::size_t>(r)] = s * inv_m;
  }
  check_finite(*out, "masked_mean_cols");
  auto keep_copy = std::make_shared<std::vector<bool>>(keep);
  attach(out, {x.node()}, [d, t, inv_m, keep_copy](detail::Node& o) {
    auto& g = grad_buffer(*o.parents[0]);
    for (int r = 0; r < d; ++r) {
      const double gr = o.grad[static_cast<std::size_t>(r)] * inv_m;
      double* grow = g.data() + static_cast<std::size_t>(r) * t;
      for (int c = 0; c < t; ++c) {
        if ((*keep_copy)[static_cast<std::size_t>(c)]) grow[c] += gr;
      }
    }
  });
  return Tensor(out);
}

// ---------------------------------------------------------------------------
// Probability ops

namespace {

// Stable softmax of one logical row; returns probabilities into `p`.
void softmax_row(const double* x, int n, double inv_temp, double* p) {
  double mx = -std::numeric_limits<double>::infinity();
  for (int i = 0; i < n; ++i) mx = std::max(mx, x[i] * inv_temp);
  double z = 0.0;
  for (int i = 0; i < n; ++i) {
    p[i] = std::exp(x[i] * inv_temp - mx);
    z += p[i];
  }
  const double inv_z = 1.0 / z;
  for (int i = 0; i < n; ++i) p[i] *= inv_z;
}

double logsumexp_raw(const double* x, int n) {
  double mx = -std::numeric_limits<double>::infinity();
  for (int i = 0; i < n; ++i) mx = std::max(mx, x[i]);
  double z = 0.0;
  for (int i = 0; i < n; ++i) z += std::exp(x[i] - mx);
  return mx + std::log(z);
}

}  // namespace

Tensor softmax(const Tensor& logits, double temperature) {
  require_rank(logits, 1, "softmax");
  if (!(temperature > 0.0)) throw ValueError("softmax: temperature must be positive");
  require_finite_inputs(logits, "softmax");
  const int n = logits.dim(0);
  auto out = make_node({n});
  softmax_row(logits.value().data(), n, 1.0 / temperature, out->value.data());
  check_finite(*out, "softmax");
  const double inv_temp = 1.0 / temperature;
  attach(out, {logits.node()}, [n, inv_temp](detail::Node& o) {
    auto& g = grad_buffer(*o.parents[0]);
    double inner = 0.0;
    for (int i = 0; i < n; ++i) inner += o.grad[static_cast<std::size_t>(i)] * o.value[static_cast<std::size_t>(i)];
    for (int i = 0; i < n; ++i) {
      const std::size_t idx = static_cast<std::size_t>(i);
      g[idx] += inv_temp * o.value[idx] * (o.grad[idx] - inner);
    }
  });
  return Tensor(out);
}

Tensor softmax_rows(const Tensor& x, double temperature) {
  require_rank(x, 2, "softmax_rows");
  if (!(temperature > 0.0)) throw ValueError("softmax_rows: temperature must be positive");
  const int m = x.dim(0), n = x.dim(1);
  auto out = make_node({m, n});
  const double inv_temp = 1.0 / temperature;
  for (int i = 0; i < m; ++i) {
    softmax_row(x.value().data() + static_cast<std::size_t>(i) * n, n, inv_temp,
                out->value.data() + static_cast<std::size_t>(i) * n);
  }
  check_finite(*out, "softmax_rows");
  attach(out, {x.node()}, [m, n, inv_temp](detail::Node& o) {
    auto& g = grad_buffer(*o.parents[0]);
    for (int i = 0; i < m; ++i) {
      const double* prow = o.value.data() + static_cast<std::size_t>(i) * n;
      const double* grow = o.grad.data() + static_cast<std::size_t>(i) * n;
      double* xrow = g.data() + static_cast<std::size_t>(i) * n;
      double inner = 0.0;
      for (int j = 0; j < n; ++j) inner += grow[j] * prow[j];
      for (int j = 0; j < n; ++j) xrow[j] += inv_temp * prow[j] * (grow[j] - inner);
    }
  });
  return Tensor(out);
}

Tensor cross_entropy(const Tensor& logits, int target) {
  require_rank(logits, 1, "cross_entropy");
  const int n = logits.dim(0);
  if (target < 0 || target >= n) throw IndexError("cross_entropy: target out of range");
  require_finite_inputs(logits, "cross_entropy");
  auto out = make_node({1});
  const double lse = logsumexp_raw(logits.value().data(), n);
  out->value[0] = lse - logits.value()[static_cast<std::size_t>(target)];
  check_finite(*out, "cross_entropy");
  attach(out, {logits.node()}, [n, target](detail::Node& o) {
    auto& p = *o.parents[0];
    auto& g = grad_buffer(p);
    const double g0 = o.grad[0];
    std::vector<double> probs(static_cast<std::size_t>(n));
    softmax_row(p.value.data(), n, 1.0, probs.data());
    for (int i = 0; i < n; ++i) {
      g[static_cast<std::size_t>(i)] +=
          g0 * (probs[static_cast<std::size_t>(i)] - (i == target ? 1.0 : 0.0));
    }
  });
  return Tensor(out);
}

Tensor cross_entropy_cols(const Tensor& logits, const std::vector<int>& targets,
                          const std::vector<bool>& step_mask) {
  require_rank(logits, 2, "cross_entropy_cols");
  const int v = logits.dim(0), t = logits.dim(1);
  if (static_cast<int>(targets.size()) != t || static_cast<int>(step_mask.size()) != t) {
    throw ShapeError("cross_entropy_cols: targets/mask length != columns");
  }
  for (int c = 0; c < t; ++c) {
    if (step_mask[static_cast<std::size_t>(c)] &&
        (targets[static_cast<std::size_t>(c)] < 0 || targets[static_cast<std::size_t>(c)] >= v)) {
      throw IndexError("cross_entropy_cols: target out of range");
    }
  }
  auto out = make_node({1});
  std::vector<double> col(static_cast<std::size_t>(v));
  double total = 0.0;
  for (int c = 0; c < t; ++c) {
    if (!step_mask[static_cast<std::size_t>(c)]) continue;
    for (int r = 0; r < v; ++r) col[static_cast<std::size_t>(r)] = logits.at(r, c);
    const double lse = logsumexp_raw(col.data(), v);
    total += lse - col[static_cast<std::size_t>(targets[static_cast<std::size_t>(c)])];
  }
  out->value[0] = total;
  check_finite(*out, "cross_entropy_cols");
  auto targets_copy = std::make_shared<std::vector<int>>(targets);
  auto mask_copy = std::make_shared<std::vector<bool>>(step_mask);
  attach(out, {logits.node()}, [v, t, targets_copy, mask_copy](detail::Node& o) {
    auto& p = *o.parents[0];
    auto& g = grad_buffer(p);
    const double g0 = o.grad[0];
    std::vector<double> col(static_cast<std::size_t>(v));
    std::vector<double> probs(static_cast<std::size_t>(v));
    for (int c = 0; c < t; ++c) {
      if (!(*mask_copy)[static_cast<std::size_t>(c)]) continue;
      for (int r = 0; r < v; ++r) {
        col[static_cast<std::size_t>(r)] = p.value[static_cast<std::size_t>(r) * t + c];
      }
      softmax_row(col.data(), v, 1.0, probs.data());
      const int tgt = (*targets_copy)[static_cast<std::size_t>(c)];
      for (int r = 0; r < v; ++r) {
        g[static_cast<std::size_t>(r) * t + c] +=
            g0 * (probs[static_cast<std::size_t>(r)] - (r == tgt ? 1.0 : 0.0));
      }
    }
  });
  return Tensor(out);
}

namespace {

// Shared kernel for KL(softmax(p) || softmax(q)) over one column pair.
// Returns the KL value; fills p_probs/q_probs.
double kl_column(const double* p_logits, const double* q_logits, int n,
                 double* p_probs, double* q_probs) {
  softmax_row(p_logits, n, 1.0, p_probs);
  softmax_row(q_logits, n, 1.0, q_probs);
  const double p_lse = logsumexp_raw(p_logits, n);
  const double q_lse = logsumexp_raw(q_logits, n);
  double kl = 0.0;
  for (int i = 0; i < n; ++i) {
    const double lp = p_logits[i] - p_lse;
    const double lq = q_logits[i] - q_lse;
    kl += p_probs[i] * (lp - lq);
  }
  return kl;
}

}  // namespace

Tensor kl_divergence(const Tensor& p_logits, const Tensor& q_logits) {
  require_rank(p_logits, 1, "kl_divergence");
  require_same_shape(p_logits, q_logits, "kl_divergence");
  require_finite_inputs(p_logits, "kl_divergence");
  require_finite_inputs(q_logits, "kl_divergence");
  const int n = p_logits.dim(0);
  auto out = make_node({1});
  std::vector<double> pp(static_cast<std::size_t>(n)), qp(static_cast<std::size_t>(n));
  const double kl = kl_column(p_logits.value().data(), q_logits.value().data(), n,
                              pp.data(), qp.data());
  out->value[0] = kl;
  check_finite(*out, "kl_divergence");
  attach(out, {p_logits.node(), q_logits.node()}, [n](detail::Node& o) {
    auto& p = *o.parents[0];
    auto& q = *o.parents[1];
    const double g0 = o.grad[0];
    std::vector<double> pp(static_cast<std::size_t>(n)), qp(static_cast<std::size_t>(n));
    const double kl = kl_column(p.value.data(), q.value.data(), n, pp.data(), qp.data());
    const double p_lse = logsumexp_raw(p.value.data(), n);
    const double q_lse = logsumexp_raw(q.value.data(), n);
    if (q.requires_grad) {
      auto& g = grad_buffer(q);
      for (int i = 0; i < n; ++i) {
        const std::size_t idx = static_cast<std::size_t>(i);
        g[idx] += g0 * (qp[idx] - pp[idx]);
      }
    }
    if (p.requires_grad) {
      auto& g = grad_buffer(p);
      for (int i = 0; i < n; ++i) {
        const std::size_t idx = static_cast<std::size_t>(i);
        const double s = (p.value[idx] - p_lse) - (q.value[idx] - q_lse);
        g[idx] += g0 * pp[idx] * (s - kl);
      }
    }
  });
  return Tensor(out);
}

Tensor kl_cols(const Tensor& p_logits, const Tensor& q_logits,
               const std::vector<bool>& step_mask) {
  require_rank(p_logits, 2, "kl_cols");
  require_same_shape(p_logits, q_logits, "kl_cols");
  const int v = p_logits.dim(0), t = p_logits.dim(1);
  if (static_cast<int>(step_mask.size()) != t) {
    throw ShapeError("kl_cols: mask length != columns");
  }
  auto out = make_node({1});
  std::vector<double> pcol(static_cast<std::size_t>(v)), qcol(static_cast<std::size_t>(v));
  std::vector<double> pp(static_cast<std::size_t>(v)), qp(static_cast<std::size_t>(v));
  double total = 0.0;
  for (int c = 0; c < t; ++c) {
    if (!step_mask[static_cast<std::size_t>(c)]) continue;
    for (int r = 0; r < v; ++r) {
      pcol[static_cast<std::size_t>(r)] = p_logits.at(r, c);
      qcol[static_cast<std::size_t>(r)] = q_logits.at(r, c);
    }
    total += kl_column(pcol.data(), qcol.data(), v, pp.data(), qp.data());
  }
  out->value[0] = total;
  check_finite(*out, "kl_cols");
  auto mask_copy = std::make_shared<std::vector<bool>>(step_mask);
  attach(out, {p_logits.node(), q_logits.node()}, [v, t, mask_copy](detail::Node& o) {
    auto& p = *o.parents[0];
    auto& q = *o.parents[1];
    const double g0 = o.grad[0];
    std::vector<double> pcol(static_cast<std::size_t>(v)), qcol(static_cast<std::size_t>(v));
    std::vector<double> pp(static_cast<std::size_t>(v)), qp(static_cast<std::size_t>(v));
    for (int c = 0; c < t; ++c) {
      if (!(*mask_copy)[static_cast<std::size_t>(c)]) continue;
      for (int r = 0; r < v; ++r) {
        pcol[static_cast<std::size_t>(r)] = p.value[static_cast<std::size_t>(r) * t + c];
        qcol[static_cast<std::size_t>(r)] = q.value[static_cast<std::size_t>(r) * t + c];
      }
      const double kl = kl_column(pcol.data(), qcol.data(), v, pp.data(), qp.data());
      const double p_lse = logsumexp_raw(pcol.data(), v);
      const double q_lse = logsumexp_raw(qcol.data(), v);
      if (q.requires_grad) {
        auto& g = grad_buffer(q);
        for (int r = 0; r < v; ++r) {
          g[static_cast<std::size_t>(r) * t + c] +=
              g0 * (qp[static_cast<std::size_t>(r)] - pp[static_cast<std::size_t>(r)]);
        }
      }
      if (p.requires_grad) {
        auto& g = grad_buffer(p);
        for (int r = 0; r < v; ++r) {
          const std::size_t idx = static_cast<std::size_t>(r);
          const double s = (pcol[idx] - p_lse) - (qcol[idx] - q_lse);
          g[idx * t + c] += g0 * pp[idx] * (s - kl);
        }
      }
    }
  });
  return Tensor(out);
}

Tensor logsumexp(const Tensor& v) {
  require_rank(v, 1, "logsumexp");
  require_finite_inputs(v, "logsumexp");
  const int n = v.dim(0);
  auto out = make_node({1});
  out->value[0] = logsumexp_raw(v.value().data(), n);
  check_finite(*out, "logsumexp");
  attach(out, {v.node()}, [n](detail::Node& o) {
    auto& p = *o.parents[0];
    auto& g = grad_buffer(p);
    const double g0 = o.grad[0];
    std::vector<double> probs(static_cast<std::size_t>(n));
    softmax_row(p.value.data(), n, 1.0, probs.data());
    for (int i = 0; i < n; ++i) {
      g[static_cast<std::size_t>(i)] += g0 * probs[static_cast<std::size_t>(i)];
    }
  });
  return Tensor(out);
}

Tensor cosine_similarity(const Tensor& u, const Tensor& v) {
  require_rank(u, 1, "cosine_similarity");
  require_same_shape(u, v, "cosine_similarity");
  const std::size_t n = u.value().size();
  double uu = 0.0, vv = 0.0, uv = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    uu += u.value()[i] * u.value()[i];
    vv += v.value()[i] * v.value()[i];
    uv += u.value()[i] * v.value()[i];
  }
  const double nu = std::sqrt(uu), nv = std::sqrt(vv);
  if (nu < 1e-300 || nv < 1e-300) {
    throw DegenerateInputError("cosine_similarity: zero-norm input");
  }
  auto out = make_node({1});
  const double c = uv / (nu * nv);
  out->value[0] = c;
  check_finite(*out, "cosine_similarity");
  attach(out, {u.node(), v.node()}, [c, nu, nv](detail::Node& o) {
    auto& pu = *o.parents[0];
    auto& pv = *o.parents[1];
    const double g0 = o.grad[0];
    const std::size_t n2 = pu.value.size();
    if (pu.requires_grad) {
      auto& g = grad_buffer(pu);
      for (std::size_t i = 0; i < n2; ++i) {
        g[i] += g0 * (pv.value[i] / (nu * nv) - c * pu.value[i] / (nu * nu));
      }
    }
    if (pv.requires_grad) {
      auto& g = grad_buffer(pv);
      for (std::size_t i = 0; i < n2; ++i) {
        g[i] += g0 * (pu.value[i] / (nu * nv) - c * pv.value[i] / (nv * nv));
      }
    }
  });
  return Tensor(out);
}

Tensor stack_scalars(const std::vector<Tensor>& scalars) {
  if (scalars.empty()) throw ShapeError("stack_scalars: empty input");
  const int n = static_cast<int>(scalars.size());
  auto out = make_node({n});
  std::vector<std::shared_ptr<detail::Node>> parents;
  parents.reserve(scalars.size());
  for (int i = 0; i < n; ++i) {
    if (scalars[static_cast<std::size_t>(i)].numel() != 1) {
      throw ShapeError("stack_scalars: inputs must be scalars");
    }
    out->value[static_cast<std::size_t>(i)] =
        scalars[static_cast<std::size_t>(i)].value()[0];
    parents.push_back(scalars[static_cast<std::size_t>(i)].node());
  }
  attach(out, std::move(parents), [](detail::Node& o) {
    for (std::size_t i = 0; i < o.parents.size(); ++i) {
      auto& p = *o.parents[i];
      if (p.requires_grad) grad_buffer(p)[0] += o.grad[i];
    }
  });
  return Tensor(out);
}

}  // namespace claps
