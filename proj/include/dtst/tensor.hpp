#pragma once

// Dense row-major float64 tensors with a define-by-run reverse-mode tape.
//
// Operations record themselves on the thread's active Tape (see
// GradientScope) when at least one input requires gradients. Without an
// active tape every op is a plain value computation.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <memory>
#include <numeric>
#include <span>
#include <sstream>
#include <string>
#include <unordered_set>
#include <utility>
#include <vector>

#include "dtst/error.hpp"

namespace dtst {

using Shape = std::vector<std::size_t>;

inline std::size_t shape_numel(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1},
                         std::multiplies<>());
}

inline std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << 'x';
    os << shape[i];
  }
  os << ']';
  return os.str();
}

namespace detail {

struct Node {
  Shape shape;
  std::vector<double> data;
  std::vector<double> grad;  // empty until a backward pass touches the node
  bool requires_grad = false;
  bool is_leaf = true;
  std::vector<std::shared_ptr<Node>> parents;
  std::function<void(Node&)> propagate;  // pushes this->grad into parents

  void ensure_grad() {
    if (grad.size() != data.size()) grad.assign(data.size(), 0.0);
  }
};

}  // namespace detail

class Tape;

class Tensor {
 public:
  Tensor() = default;

  static Tensor zeros(Shape shape) { return full(std::move(shape), 0.0); }

  static Tensor full(Shape shape, double value) {
    for (auto e : shape)
      if (e == 0) throw DimensionError("tensor extents must be positive, got " + shape_str(shape));
    std::vector<double> data(shape_numel(shape), value);
    return from(std::move(shape), std::move(data));
  }

  static Tensor from(Shape shape, std::vector<double> data) {
    if (shape_numel(shape) != data.size())
      throw DimensionError("data length " + std::to_string(data.size()) +
                           " does not match shape " + shape_str(shape));
    auto node = std::make_shared<detail::Node>();
    node->shape = std::move(shape);
    node->data = std::move(data);
    return Tensor(std::move(node));
  }

  static Tensor scalar(double value) { return from({1}, {value}); }

  bool defined() const { return static_cast<bool>(node_); }
  const Shape& shape() const { return node_->shape; }
  std::size_t rank() const { return node_->shape.size(); }
  std::size_t dim(std::size_t axis) const { return node_->shape.at(axis); }
  std::size_t numel() const { return node_->data.size(); }

  std::span<const double> data() const { return node_->data; }
  std::span<double> mutable_data() { return node_->data; }
  const std::vector<double>& values() const { return node_->data; }
  double item() const {
    if (numel() != 1) throw ContractError("item() on non-scalar tensor " + shape_str(shape()));
    return node_->data[0];
  }
  double operator[](std::size_t i) const { return node_->data[i]; }

  bool requires_grad() const { return node_ && node_->requires_grad; }
  Tensor& set_requires_grad(bool on) {
    node_->requires_grad = on;
    return *this;
  }
  bool is_leaf() const { return node_->is_leaf; }

  bool has_grad() const { return node_->grad.size() == node_->data.size(); }
  std::span<const double> grad() const { return node_->grad; }
  void zero_grad() { node_->grad.clear(); }

  /// Value copy that is disconnected from any tape.
  Tensor detach() const { return from(shape(), node_->data); }

  detail::Node* node() const { return node_.get(); }
  const std::shared_ptr<detail::Node>& handle() const { return node_; }

  explicit Tensor(std::shared_ptr<detail::Node> node) : node_(std::move(node)) {}

 private:
  std::shared_ptr<detail::Node> node_;
};

/// Ordered record of differentiable operations. Creation order is a valid
/// topological order, so the backward pass simply replays it in reverse.
class Tape {
 public:
  void record(std::shared_ptr<detail::Node> node) {
    index_.insert(node.get());
    nodes_.push_back(std::move(node));
  }
  std::size_t size() const { return nodes_.size(); }
  bool contains(const Tensor& t) const { return index_.count(t.node()) > 0; }
  void clear() {
    nodes_.clear();
    index_.clear();
  }
  const std::vector<std::shared_ptr<detail::Node>>& nodes() const { return nodes_; }

 private:
  std::vector<std::shared_ptr<detail::Node>> nodes_;
  std::unordered_set<const detail::Node*> index_;
};

namespace detail {
inline Tape*& active_tape() {
  thread_local Tape* tape = nullptr;
  return tape;
}
}  // namespace detail

/// Makes `tape` the recording target on this thread for the scope lifetime.
class GradientScope {
 public:
  explicit GradientScope(Tape& tape) : previous_(detail::active_tape()) {
    detail::active_tape() = &tape;
  }
  ~GradientScope() { detail::active_tape() = previous_; }
  GradientScope(const GradientScope&) = delete;
  GradientScope& operator=(const GradientScope&) = delete;

 private:
  Tape* previous_;
};

/// Suspends recording for the scope lifetime.
class NoGradScope {
 public:
  NoGradScope() : previous_(detail::active_tape()) { detail::active_tape() = nullptr; }
  ~NoGradScope() { detail::active_tape() = previous_; }
  NoGradScope(const NoGradScope&) = delete;
  NoGradScope& operator=(const NoGradScope&) = delete;

 private:
  Tape* previous_;
};

/// Reverse pass from a scalar root. Leaf gradients accumulate; interior
/// gradients are reset on every call.
inline void backward(const Tensor& root, Tape& tape) {
  if (!root.defined() || root.numel() != 1)
    throw ContractError("backward() requires a scalar root, got " +
                        (root.defined() ? shape_str(root.shape()) : std::string("undefined")));
  if (!tape.contains(root)) throw ContractError("backward() root was not recorded on the tape");

  for (const auto& n : tape.nodes()) n->grad.assign(n->data.size(), 0.0);
  for (const auto& n : tape.nodes())
    for (const auto& p : n->parents)
      if (p->requires_grad) p->ensure_grad();

  root.node()->grad[0] = 1.0;
  const auto& nodes = tape.nodes();
  for (auto it = nodes.rbegin(); it != nodes.rend(); ++it) {
    if ((*it)->propagate) (*it)->propagate(**it);
  }
}

namespace detail {

inline bool any_requires_grad(std::initializer_list<const Tensor*> inputs) {
  for (const Tensor* t : inputs)
    if (t->requires_grad()) return true;
  return false;
}

/// Wraps freshly computed values; attaches the backward closure and records
/// the node when a tape is active and some input is differentiable.
inline Tensor finish(Shape shape, std::vector<double> data,
                     std::initializer_list<const Tensor*> inputs,
                     std::function<void(Node&)> propagate) {
  Tensor out = Tensor::from(std::move(shape), std::move(data));
  Tape* tape = active_tape();
  if (tape && any_requires_grad(inputs)) {
    Node* n = out.node();
    n->requires_grad = true;
    n->is_leaf = false;
    for (const Tensor* t : inputs) n->parents.push_back(t->handle());
    n->propagate = std::move(propagate);
    tape->record(out.handle());
  }
  return out;
}

inline std::vector<double>* grad_sink(const Tensor& t) {
  Node* n = t.node();
  if (!n->requires_grad) return nullptr;
  n->ensure_grad();
  return &n->grad;
}

inline void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  if (a.shape() != b.shape())
    throw DimensionError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " +
                         shape_str(b.shape()));
}

// out[m x n] += a[m x k] * b[k x n]
inline void gemm_nn(const double* a, const double* b, double* out, std::size_t m, std::size_t k,
                    std::size_t n) {
  for (std::size_t i = 0; i < m; ++i) {
    double* orow = out + i * n;
    const double* arow = a + i * k;
    for (std::size_t p = 0; p < k; ++p) {
      const double av = arow[p];
      const double* brow = b + p * n;
      for (std::size_t j = 0; j < n; ++j) orow[j] += av * brow[j];
    }
  }
}

// out[m x k] += g[m x n] * b[k x n]^T
inline void gemm_nt(const double* g, const double* b, double* out, std::size_t m, std::size_t n,
                    std::size_t k) {
  // Transposing b first keeps the inner loop a contiguous axpy.
  std::vector<double> bt(n * k);
  for (std::size_t p = 0; p < k; ++p)
    for (std::size_t j = 0; j < n; ++j) bt[j * k + p] = b[p * n + j];
  gemm_nn(g, bt.data(), out, m, n, k);
}

// out[k x n] += a[m x k]^T * g[m x n]
inline void gemm_tn(const double* a, const double* g, double* out, std::size_t m, std::size_t k,
                    std::size_t n) {
  for (std::size_t i = 0; i < m; ++i) {
    const double* arow = a + i * k;
    const double* grow = g + i * n;
    for (std::size_t p = 0; p < k; ++p) {
      const double av = arow[p];
      double* orow = out + p * n;
      for (std::size_t j = 0; j < n; ++j) orow[j] += av * grow[j];
    }
  }
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Linear algebra
// ---------------------------------------------------------------------------

inline Tensor matmul(const Tensor& a, const Tensor& b) {
  if (a.rank() != 2 || b.rank() != 2 || a.dim(1) != b.dim(0))
    throw DimensionError("matmul: incompatible shapes " + shape_str(a.shape()) + " and " +
                         shape_str(b.shape()));
  const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
  std::vector<double> out(m * n, 0.0);
  detail::gemm_nn(a.data().data(), b.data().data(), out.data(), m, k, n);
  return detail::finish({m, n}, std::move(out), {&a, &b}, [a, b, m, k, n](detail::Node& self) {
    if (auto* ga = detail::grad_sink(a)) detail::gemm_nt(self.grad.data(), b.data().data(), ga->data(), m, n, k);
    if (auto* gb = detail::grad_sink(b)) detail::gemm_tn(a.data().data(), self.grad.data(), gb->data(), m, k, n);
  });
}

/// x[..., k] * w[k, n] applied over every leading index.
inline Tensor linear(const Tensor& x, const Tensor& w) {
  if (w.rank() != 2 || x.shape().back() != w.dim(0))
    throw DimensionError("linear: input " + shape_str(x.shape()) + " incompatible with weight " +
                         shape_str(w.shape()));
  const std::size_t k = w.dim(0), n = w.dim(1), m = x.numel() / k;
  Shape shape = x.shape();
  shape.back() = n;
  std::vector<double> out(m * n, 0.0);
  detail::gemm_nn(x.data().data(), w.data().data(), out.data(), m, k, n);
  return detail::finish(std::move(shape), std::move(out), {&x, &w}, [x, w, m, k, n](detail::Node& self) {
    if (auto* gx = detail::grad_sink(x)) detail::gemm_nt(self.grad.data(), w.data().data(), gx->data(), m, n, k);
    if (auto* gw = detail::grad_sink(w)) detail::gemm_tn(x.data().data(), self.grad.data(), gw->data(), m, k, n);
  });
}

/// Batched product over the leading axis: a[G, m, k] * b[G, k, n], or
/// a[G, m, k] * b[G, n, k]^T when `transpose_b`.
inline Tensor bmm(const Tensor& a, const Tensor& b, bool transpose_b = false) {
  if (a.rank() != 3 || b.rank() != 3 || a.dim(0) != b.dim(0) ||
      a.dim(2) != (transpose_b ? b.dim(2) : b.dim(1)))
    throw DimensionError("bmm: incompatible shapes " + shape_str(a.shape()) + " and " +
                         shape_str(b.shape()));
  const std::size_t g = a.dim(0), m = a.dim(1), k = a.dim(2);
  const std::size_t n = transpose_b ? b.dim(1) : b.dim(2);
  std::vector<double> out(g * m * n, 0.0);
  const double* pa = a.data().data();
  const double* pb = b.data().data();
  for (std::size_t i = 0; i < g; ++i) {
    if (transpose_b)
      detail::gemm_nt(pa + i * m * k, pb + i * n * k, out.data() + i * m * n, m, k, n);
    else
      detail::gemm_nn(pa + i * m * k, pb + i * k * n, out.data() + i * m * n, m, k, n);
  }
  return detail::finish({g, m, n}, std::move(out), {&a, &b},
                        [a, b, g, m, k, n, transpose_b](detail::Node& self) {
    auto* ga = detail::grad_sink(a);
    auto* gb = detail::grad_sink(b);
    const double* pa = a.data().data();
    const double* pb = b.data().data();
    const double* go = self.grad.data();
    for (std::size_t i = 0; i < g; ++i) {
      const double* gi = go + i * m * n;
      if (transpose_b) {
        // out = a b^T: da = g b, db = g^T a
        if (ga) detail::gemm_nn(gi, pb + i * n * k, ga->data() + i * m * k, m, n, k);
        if (gb) detail::gemm_tn(gi, pa + i * m * k, gb->data() + i * n * k, m, n, k);
      } else {
        if (ga) detail::gemm_nt(gi, pb + i * k * n, ga->data() + i * m * k, m, n, k);
        if (gb) detail::gemm_tn(pa + i * m * k, gi, gb->data() + i * k * n, m, k, n);
      }
    }
  });
}

// ---------------------------------------------------------------------------
// Elementwise
// ---------------------------------------------------------------------------

inline Tensor add(const Tensor& a, const Tensor& b) {
  detail::require_same_shape(a, b, "add");
  std::vector<double> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] + b[i];
  return detail::finish(a.shape(), std::move(out), {&a, &b}, [a, b](detail::Node& self) {
    for (const Tensor* t : {&a, &b})
      if (auto* g = detail::grad_sink(*t))
        for (std::size_t i = 0; i < g->size(); ++i) (*g)[i] += self.grad[i];
  });
}

inline Tensor sub(const Tensor& a, const Tensor& b) {
  detail::require_same_shape(a, b, "sub");
  std::vector<double> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] - b[i];
  return detail::finish(a.shape(), std::move(out), {&a, &b}, [a, b](detail::Node& self) {
    if (auto* g = detail::grad_sink(a))
      for (std::size_t i = 0; i < g->size(); ++i) (*g)[i] += self.grad[i];
    if (auto* g = detail::grad_sink(b))
      for (std::size_t i = 0; i < g->size(); ++i) (*g)[i] -= self.grad[i];
  });
}

inline Tensor mul(const Tensor& a, const Tensor& b) {
  detail::require_same_shape(a, b, "mul");
  std::vector<double> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] * b[i];
  return detail::finish(a.shape(), std::move(out), {&a, &b}, [a, b](detail::Node& self) {
    if (auto* g = detail::grad_sink(a))
      for (std::size_t i = 0; i < g->size(); ++i) (*g)[i] += self.grad[i] * b[i];
    if (auto* g = detail::grad_sink(b))
      for (std::size_t i = 0; i < g->size(); ++i) (*g)[i] += self.grad[i] * a[i];
  });
}

inline Tensor scale(const Tensor& a, double c) {
  std::vector<double> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] * c;
  return detail::finish(a.shape(), std::move(out), {&a}, [a, c](detail::Node& self) {
    if (auto* g = detail::grad_sink(a))
      for (std::size_t i = 0; i < g->size(); ++i) (*g)[i] += self.grad[i] * c;
  });
}

/// x + y where y's shape is a suffix of x's shape (bias / positional add).
inline Tensor add_broadcast(const Tensor& x, const Tensor& y) {
  const auto& xs = x.shape();
  const auto& ys = y.shape();
  if (ys.size() > xs.size() || !std::equal(ys.rbegin(), ys.rend(), xs.rbegin()))
    throw DimensionError("add_broadcast: " + shape_str(ys) + " is not a suffix of " + shape_str(xs));
  const std::size_t inner = y.numel(), outer = x.numel() / inner;
  std::vector<double> out(x.numel());
  for (std::size_t o = 0; o < outer; ++o)
    for (std::size_t i = 0; i < inner; ++i) out[o * inner + i] = x[o * inner + i] + y[i];
  return detail::finish(xs, std::move(out), {&x, &y}, [x, y, inner, outer](detail::Node& self) {
    if (auto* g = detail::grad_sink(x))
      for (std::size_t i = 0; i < g->size(); ++i) (*g)[i] += self.grad[i];
    if (auto* g = detail::grad_sink(y))
      for (std::size_t o = 0; o < outer; ++o)
        for (std::size_t i = 0; i < inner; ++i) (*g)[i] += self.grad[o * inner + i];
  });
}

/// Exact (erf) GELU.
inline Tensor gelu(const Tensor& x) {
  std::vector<double> out(x.numel());
  for (std::size_t i = 0; i < out.size(); ++i)
    out[i] = 0.5 * x[i] * (1.0 + std::erf(x[i] / std::sqrt(2.0)));
  return detail::finish(x.shape(), std::move(out), {&x}, [x](detail::Node& self) {
    if (auto* g = detail::grad_sink(x)) {
      const double inv_sqrt2pi = 1.0 / std::sqrt(2.0 * M_PI);
      for (std::size_t i = 0; i < g->size(); ++i) {
        const double v = x[i];
        const double cdf = 0.5 * (1.0 + std::erf(v / std::sqrt(2.0)));
        const double pdf = inv_sqrt2pi * std::exp(-0.5 * v * v);
        (*g)[i] += self.grad[i] * (cdf + v * pdf);
      }
    }
  });
}

/// log(max(x, floor)); the clamp region has zero gradient.
inline Tensor log_clamped(const Tensor& x, double floor) {
  std::vector<double> out(x.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = std::log(std::max(x[i], floor));
  return detail::finish(x.shape(), std::move(out), {&x}, [x, floor](detail::Node& self) {
    if (auto* g = detail::grad_sink(x))
      for (std::size_t i = 0; i < g->size(); ++i)
        if (x[i] > floor) (*g)[i] += self.grad[i] / x[i];
  });
}

// ---------------------------------------------------------------------------
// Reductions and normalisation
// ---------------------------------------------------------------------------

inline Tensor sum(const Tensor& x) {
  double s = 0.0;
  for (double v : x.data()) s += v;
  return detail::finish({1}, {s}, {&x}, [x](detail::Node& self) {
    if (auto* g = detail::grad_sink(x))
      for (double& v : *g) v += self.grad[0];
  });
}

inline Tensor mean(const Tensor& x) { return scale(sum(x), 1.0 / static_cast<double>(x.numel())); }

/// Sums over the last axis; the axis is dropped (rank-1 input yields [1]).
inline Tensor sum_lastdim(const Tensor& x) {
  const std::size_t inner = x.shape().back(), outer = x.numel() / inner;
  Shape shape(x.shape().begin(), x.shape().end() - 1);
  if (shape.empty()) shape = {1};
  std::vector<double> out(outer, 0.0);
  for (std::size_t o = 0; o < outer; ++o)
    for (std::size_t i = 0; i < inner; ++i) out[o] += x[o * inner + i];
  return detail::finish(std::move(shape), std::move(out), {&x}, [x, inner, outer](detail::Node& self) {
    if (auto* g = detail::grad_sink(x))
      for (std::size_t o = 0; o < outer; ++o)
        for (std::size_t i = 0; i < inner; ++i) (*g)[o * inner + i] += self.grad[o];
  });
}

inline Tensor softmax_lastdim(const Tensor& x) {
  const std::size_t inner = x.shape().back();
  if (inner == 0) throw DimensionError("softmax_lastdim: empty last dimension");
  const std::size_t outer = x.numel() / inner;
  std::vector<double> out(x.numel());
  for (std::size_t o = 0; o < outer; ++o) {
    const double* row = x.data().data() + o * inner;
    double* orow = out.data() + o * inner;
    const double mx = *std::max_element(row, row + inner);
    double z = 0.0;
    for (std::size_t i = 0; i < inner; ++i) z += (orow[i] = std::exp(row[i] - mx));
    for (std::size_t i = 0; i < inner; ++i) orow[i] /= z;
  }
  Tensor result = detail::finish(x.shape(), std::move(out), {&x}, nullptr);
  if (result.requires_grad()) {
    detail::Node* self_ptr = result.node();
    self_ptr->propagate = [x, inner, outer](detail::Node& self) {
      auto* g = detail::grad_sink(x);
      if (!g) return;
      for (std::size_t o = 0; o < outer; ++o) {
        const double* y = self.data.data() + o * inner;
        const double* gy = self.grad.data() + o * inner;
        double dot = 0.0;
        for (std::size_t i = 0; i < inner; ++i) dot += y[i] * gy[i];
        for (std::size_t i = 0; i < inner; ++i) (*g)[o * inner + i] += y[i] * (gy[i] - dot);
      }
    };
  }
  return result;
}

/// Normalises each last-axis slice to zero mean / unit variance, then applies
/// the affine pair. Population variance; `eps` is added inside the root.
inline Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, double eps) {
  const std::size_t inner = x.shape().back();
  if (inner == 0) throw DimensionError("layer_norm: zero-length normalised dimension");
  if (gamma.numel() != inner || beta.numel() != inner)
    throw DimensionError("layer_norm: affine parameters " + shape_str(gamma.shape()) + "/" +
                         shape_str(beta.shape()) + " do not match last extent " + std::to_string(inner));
  if (!(eps > 0.0)) throw DomainError("layer_norm: eps must be positive");
  const std::size_t outer = x.numel() / inner;
  std::vector<double> normed(x.numel()), inv_std(outer), out(x.numel());
  for (std::size_t o = 0; o < outer; ++o) {
    const double* row = x.data().data() + o * inner;
    double mu = 0.0;
    for (std::size_t i = 0; i < inner; ++i) mu += row[i];
    mu /= static_cast<double>(inner);
    double var = 0.0;
    for (std::size_t i = 0; i < inner; ++i) var += (row[i] - mu) * (row[i] - mu);
    var /= static_cast<double>(inner);
    inv_std[o] = 1.0 / std::sqrt(var + eps);
    for (std::size_t i = 0; i < inner; ++i) {
      normed[o * inner + i] = (row[i] - mu) * inv_std[o];
      out[o * inner + i] = normed[o * inner + i] * gamma[i] + beta[i];
    }
  }
  return detail::finish(x.shape(), std::move(out), {&x, &gamma, &beta},
                        [x, gamma, beta, inner, outer, normed = std::move(normed),
                         inv_std = std::move(inv_std)](detail::Node& self) {
    auto* gx = detail::grad_sink(x);
    auto* gg = detail::grad_sink(gamma);
    auto* gb = detail::grad_sink(beta);
    const double n = static_cast<double>(inner);
    for (std::size_t o = 0; o < outer; ++o) {
      const double* gy = self.grad.data() + o * inner;
      const double* xh = normed.data() + o * inner;
      if (gg)
        for (std::size_t i = 0; i < inner; ++i) (*gg)[i] += gy[i] * xh[i];
      if (gb)
        for (std::size_t i = 0; i < inner; ++i) (*gb)[i] += gy[i];
      if (gx) {
        double s1 = 0.0, s2 = 0.0;
        for (std::size_t i = 0; i < inner; ++i) {
          const double d = gy[i] * gamma[i];
          s1 += d;
          s2 += d * xh[i];
        }
        for (std::size_t i = 0; i < inner; ++i) {
          const double d = gy[i] * gamma[i];
          (*gx)[o * inner + i] += inv_std[o] * (d - s1 / n - xh[i] * s2 / n);
        }
      }
    }
  });
}

// ---------------------------------------------------------------------------
// Layout
// ---------------------------------------------------------------------------

inline Tensor reshape(const Tensor& x, Shape shape) {
  if (shape_numel(shape) != x.numel())
    throw DimensionError("reshape: cannot view " + shape_str(x.shape()) + " as " + shape_str(shape));
  std::vector<double> out(x.data().begin(), x.data().end());
  return detail::finish(std::move(shape), std::move(out), {&x}, [x](detail::Node& self) {
    if (auto* g = detail::grad_sink(x))
      for (std::size_t i = 0; i < g->size(); ++i) (*g)[i] += self.grad[i];
  });
}

/// [B, L, H*dh] -> [B*H, L, dh]
inline Tensor split_heads(const Tensor& x, std::size_t heads) {
  if (x.rank() != 3 || heads == 0 || x.dim(2) % heads != 0)
    throw DimensionError("split_heads: width of " + shape_str(x.shape()) + " not divisible by " +
                         std::to_string(heads) + " heads");
  const std::size_t b = x.dim(0), l = x.dim(1), d = x.dim(2), dh = d / heads;
  std::vector<double> out(x.numel());
  auto index = [=](std::size_t bi, std::size_t li, std::size_t h, std::size_t c) {
    return std::pair{(bi * l + li) * d + h * dh + c, ((bi * heads + h) * l + li) * dh + c};
  };
  for (std::size_t bi = 0; bi < b; ++bi)
    for (std::size_t li = 0; li < l; ++li)
      for (std::size_t h = 0; h < heads; ++h)
        for (std::size_t c = 0; c < dh; ++c) {
          auto [src, dst] = index(bi, li, h, c);
          out[dst] = x[src];
        }
  return detail::finish({b * heads, l, dh}, std::move(out), {&x},
                        [x, b, l, heads, dh, index](detail::Node& self) {
    if (auto* g = detail::grad_sink(x))
      for (std::size_t bi = 0; bi < b; ++bi)
        for (std::size_t li = 0; li < l; ++li)
          for (std::size_t h = 0; h < heads; ++h)
            for (std::size_t c = 0; c < dh; ++c) {
              auto [src, dst] = index(bi, li, h, c);
              (*g)[src] += self.grad[dst];
            }
  });
}

/// [B*H, L, dh] -> [B, L, H*dh]
inline Tensor merge_heads(const Tensor& x, std::size_t heads) {
  if (x.rank() != 3 || heads == 0 || x.dim(0) % heads != 0)
    throw DimensionError("merge_heads: leading extent of " + shape_str(x.shape()) +
                         " not divisible by " + std::to_string(heads));
  const std::size_t b = x.dim(0) / heads, l = x.dim(1), dh = x.dim(2), d = dh * heads;
  std::vector<double> out(x.numel());
  auto index = [=](std::size_t bi, std::size_t li, std::size_t h, std::size_t c) {
    return std::pair{((bi * heads + h) * l + li) * dh + c, (bi * l + li) * d + h * dh + c};
  };
  for (std::size_t bi = 0; bi < b; ++bi)
    for (std::size_t h = 0; h < heads; ++h)
      for (std::size_t li = 0; li < l; ++li)
        for (std::size_t c = 0; c < dh; ++c) {
          auto [src, dst] = index(bi, li, h, c);
          out[dst] = x[src];
        }
  return detail::finish({b, l, d}, std::move(out), {&x}, [x, b, l, heads, dh, index](detail::Node& self) {
    if (auto* g = detail::grad_sink(x))
      for (std::size_t bi = 0; bi < b; ++bi)
        for (std::size_t h = 0; h < heads; ++h)
          for (std::size_t li = 0; li < l; ++li)
            for (std::size_t c = 0; c < dh; ++c) {
              auto [src, dst] = index(bi, li, h, c);
              (*g)[src] += self.grad[dst];
            }
  });
}

/// Concatenates [B, L_i, C] tensors along the token axis.
inline Tensor concat_tokens(const std::vector<Tensor>& parts) {
  if (parts.empty()) throw DimensionError("concat_tokens: no inputs");
  const std::size_t b = parts[0].dim(0), c = parts[0].dim(2);
  std::size_t total = 0;
  for (const auto& p : parts) {
    if (p.rank() != 3 || p.dim(0) != b || p.dim(2) != c)
      throw DimensionError("concat_tokens: incompatible part " + shape_str(p.shape()));
    total += p.dim(1);
  }
  std::vector<double> out(b * total * c);
  std::size_t offset = 0;
  for (const auto& p : parts) {
    const std::size_t l = p.dim(1);
    for (std::size_t bi = 0; bi < b; ++bi)
      std::copy_n(p.data().data() + bi * l * c, l * c, out.data() + (bi * total + offset) * c);
    offset += l;
  }
  Tensor result = Tensor::from({b, total, c}, std::move(out));
  Tape* tape = detail::active_tape();
  bool differentiable = false;
  for (const auto& p : parts) differentiable |= p.requires_grad();
  if (tape && differentiable) {
    detail::Node* n = result.node();
    n->requires_grad = true;
    n->is_leaf = false;
    for (const auto& p : parts) n->parents.push_back(p.handle());
    n->propagate = [parts, b, total, c](detail::Node& self) {
      std::size_t offset = 0;
      for (const auto& p : parts) {
        const std::size_t l = p.dim(1);
        if (auto* g = detail::grad_sink(p))
          for (std::size_t bi = 0; bi < b; ++bi)
            for (std::size_t i = 0; i < l * c; ++i)
              (*g)[bi * l * c + i] += self.grad[(bi * total + offset) * c + i];
        offset += l;
      }
    };
    tape->record(result.handle());
  }
  return result;
}

/// Picks, per batch item b, the token rows `index[b]` of x[B, L, C].
inline Tensor gather_tokens(const Tensor& x, const std::vector<std::vector<std::size_t>>& index) {
  if (x.rank() != 3 || index.size() != x.dim(0))
    throw DimensionError("gather_tokens: index batch " + std::to_string(index.size()) +
                         " does not match " + shape_str(x.shape()));
  const std::size_t b = x.dim(0), l = x.dim(1), c = x.dim(2), k = index.empty() ? 0 : index[0].size();
  if (k == 0) throw DimensionError("gather_tokens: empty selection");
  for (const auto& row : index) {
    if (row.size() != k) throw DimensionError("gather_tokens: ragged selection");
    for (auto i : row)
      if (i >= l) throw ContractError("gather_tokens: index " + std::to_string(i) + " out of range " + std::to_string(l));
  }
  std::vector<double> out(b * k * c);
  for (std::size_t bi = 0; bi < b; ++bi)
    for (std::size_t j = 0; j < k; ++j)
      std::copy_n(x.data().data() + (bi * l + index[bi][j]) * c, c, out.data() + (bi * k + j) * c);
  return detail::finish({b, k, c}, std::move(out), {&x}, [x, index, b, l, k, c](detail::Node& self) {
    if (auto* g = detail::grad_sink(x))
      for (std::size_t bi = 0; bi < b; ++bi)
        for (std::size_t j = 0; j < k; ++j)
          for (std::size_t ci = 0; ci < c; ++ci)
            (*g)[(bi * l + index[bi][j]) * c + ci] += self.grad[(bi * k + j) * c + ci];
  });
}

/// Row lookup: table[R, C] -> [rows.size(), C].
inline Tensor lookup_rows(const Tensor& table, const std::vector<std::size_t>& rows) {
  if (table.rank() != 2) throw DimensionError("lookup_rows: table must be 2-D, got " + shape_str(table.shape()));
  const std::size_t r = table.dim(0), c = table.dim(1);
  std::vector<double> out(rows.size() * c);
  for (std::size_t i = 0; i < rows.size(); ++i) {
    if (rows[i] >= r) throw ContractError("lookup_rows: row " + std::to_string(rows[i]) + " out of range");
    std::copy_n(table.data().data() + rows[i] * c, c, out.data() + i * c);
  }
  return detail::finish({rows.size(), c}, std::move(out), {&table}, [table, rows, c](detail::Node& self) {
    if (auto* g = detail::grad_sink(table))
      for (std::size_t i = 0; i < rows.size(); ++i)
        for (std::size_t ci = 0; ci < c; ++ci) (*g)[rows[i] * c + ci] += self.grad[i * c + ci];
  });
}

// ---------------------------------------------------------------------------
// Fused losses
// ---------------------------------------------------------------------------

/// Mean over rows of -log softmax(logits)[label].
inline Tensor cross_entropy(const Tensor& logits, const std::vector<std::size_t>& labels) {
  if (logits.rank() != 2 || logits.dim(0) != labels.size())
    throw DimensionError("cross_entropy: logits " + shape_str(logits.shape()) + " vs " +
                         std::to_string(labels.size()) + " labels");
  const std::size_t b = logits.dim(0), c = logits.dim(1);
  for (auto y : labels)
    if (y >= c) throw DomainError("cross_entropy: label " + std::to_string(y) + " outside [0, " + std::to_string(c) + ")");
  std::vector<double> probs(b * c);
  double loss = 0.0;
  for (std::size_t i = 0; i < b; ++i) {
    const double* row = logits.data().data() + i * c;
    const double mx = *std::max_element(row, row + c);
    double z = 0.0;
    for (std::size_t j = 0; j < c; ++j) z += std::exp(row[j] - mx);
    const double log_z = mx + std::log(z);
    for (std::size_t j = 0; j < c; ++j) probs[i * c + j] = std::exp(row[j] - log_z);
    loss += log_z - row[labels[i]];
  }
  loss /= static_cast<double>(b);
  return detail::finish({1}, {loss}, {&logits}, [logits, labels, b, c, probs = std::move(probs)](detail::Node& self) {
    if (auto* g = detail::grad_sink(logits)) {
      const double s = self.grad[0] / static_cast<double>(b);
      for (std::size_t i = 0; i < b; ++i)
        for (std::size_t j = 0; j < c; ++j)
          (*g)[i * c + j] += s * (probs[i * c + j] - (j == labels[i] ? 1.0 : 0.0));
    }
  });
}

/// Row-wise cosine similarity of a[B, d] and b[B, d]; norms are clamped
/// from below by `eps`.
inline Tensor cosine_rows(const Tensor& a, const Tensor& b, double eps) {
  detail::require_same_shape(a, b, "cosine_rows");
  if (a.rank() != 2) throw DimensionError("cosine_rows: expected 2-D inputs, got " + shape_str(a.shape()));
  const std::size_t rows = a.dim(0), d = a.dim(1);
  std::vector<double> out(rows), na(rows), nb(rows), dots(rows);
  for (std::size_t r = 0; r < rows; ++r) {
    double dot = 0.0, sa = 0.0, sb = 0.0;
    for (std::size_t i = 0; i < d; ++i) {
      const double x = a[r * d + i], y = b[r * d + i];
      dot += x * y;
      sa += x * x;
      sb += y * y;
    }
    na[r] = std::max(std::sqrt(sa), eps);
    nb[r] = std::max(std::sqrt(sb), eps);
    dots[r] = dot;
    out[r] = dot / (na[r] * nb[r]);
  }
  return detail::finish({rows}, std::move(out), {&a, &b},
                        [a, b, rows, d, eps, na = std::move(na), nb = std::move(nb),
                         dots = std::move(dots)](detail::Node& self) {
    auto* ga = detail::grad_sink(a);
    auto* gb = detail::grad_sink(b);
    for (std::size_t r = 0; r < rows; ++r) {
      const double g = self.grad[r];
      const double denom = na[r] * nb[r];
      // d cos / d a = b / (|a||b|) - dot a / (|a|^3 |b|), the second term
      // vanishes where the norm is clamped.
      const double ka = na[r] > eps ? dots[r] / (na[r] * na[r] * denom) : 0.0;
      const double kb = nb[r] > eps ? dots[r] / (nb[r] * nb[r] * denom) : 0.0;
      for (std::size_t i = 0; i < d; ++i) {
        const double x = a[r * d + i], y = b[r * d + i];
        if (ga) (*ga)[r * d + i] += g * (y / denom - ka * x);
        if (gb) (*gb)[r * d + i] += g * (x / denom - kb * y);
      }
    }
  });
}

}  // namespace dtst
