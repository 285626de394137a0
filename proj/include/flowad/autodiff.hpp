#pragma once

// Reverse-mode differentiation over dense tensors.
//
// Every op builds a Node holding its value and a closure that pushes the
// node's gradient into its parents. backward() traces the graph from a scalar
// root into a ComputationRecord (topological order) and walks it in reverse.
// Leaf gradients accumulate across backward calls until reset explicitly.

#include <algorithm>
#include <cmath>
#include <functional>
#include <memory>
#include <optional>
#include <string>
#include <unordered_set>
#include <utility>
#include <vector>

#include "flowad/errors.hpp"
#include "flowad/linalg.hpp"
#include "flowad/tensor.hpp"

namespace flowad::ad {

struct Node {
  Tensor value;
  Tensor grad;
  bool requires_grad = false;
  bool is_leaf = true;
  std::vector<std::shared_ptr<Node>> parents;
  std::function<void(Node&)> backward_fn;

  void ensure_grad() {
    if (grad.shape() != value.shape()) grad = Tensor(value.shape(), 0.0);
  }
};

/// Thread-local switch; while disabled, ops record no parents.
class GradMode {
 public:
  static bool enabled() noexcept { return flag(); }
  static void set_enabled(bool on) noexcept { flag() = on; }

 private:
  static bool& flag() noexcept {
    thread_local bool on = true;
    return on;
  }
};

class NoGradGuard {
 public:
  NoGradGuard() : prev_(GradMode::enabled()) { GradMode::set_enabled(false); }
  ~NoGradGuard() { GradMode::set_enabled(prev_); }
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool prev_;
};

class Var {
 public:
  Var() : node_(std::make_shared<Node>()) {}
  explicit Var(Tensor value, bool requires_grad = false) : node_(std::make_shared<Node>()) {
    node_->value = std::move(value);
    node_->requires_grad = requires_grad;
    if (requires_grad) node_->ensure_grad();
  }
  explicit Var(std::shared_ptr<Node> node) : node_(std::move(node)) {}

  static Var constant(double v) { return Var(Tensor::scalar(v)); }

  const Tensor& value() const noexcept { return node_->value; }
  const Shape& shape() const noexcept { return node_->value.shape(); }
  std::size_t size() const noexcept { return node_->value.size(); }
  double item() const { return node_->value.item(); }
  bool requires_grad() const noexcept { return node_->requires_grad; }

  /// Gradient accumulated by backward(); zeros if nothing flowed here.
  const Tensor& grad() const {
    node_->ensure_grad();
    return node_->grad;
  }
  void zero_grad() const {
    node_->ensure_grad();
    node_->grad.fill(0.0);
  }

  /// Detached copy of the value (no graph history).
  Var detach() const { return Var(node_->value); }

  const std::shared_ptr<Node>& node() const noexcept { return node_; }

 private:
  std::shared_ptr<Node> node_;
};

/// Trainable (or frozen) tensor owned by a layer.
class Parameter {
 public:
  Parameter() = default;
  Parameter(std::string name, Tensor value, bool trainable = true)
      : name_(std::move(name)), var_(std::move(value), trainable), trainable_(trainable) {
    var_.node()->ensure_grad();
  }

  const std::string& name() const noexcept { return name_; }
  const Var& var() const noexcept { return var_; }
  const Tensor& value() const noexcept { return var_.value(); }
  Tensor& mutable_value() noexcept { return var_.node()->value; }
  const Tensor& grad() const { return var_.grad(); }
  Tensor& mutable_grad() {
    var_.node()->ensure_grad();
    return var_.node()->grad;
  }
  bool trainable() const noexcept { return trainable_; }

  void set_value(Tensor v) {
    if (v.shape() != value().shape()) {
      throw ShapeError("parameter " + name_ + " expects shape " +
                       shape_string(value().shape()) + ", got " + shape_string(v.shape()));
    }
    var_.node()->value = std::move(v);
  }
  void zero_grad() { var_.zero_grad(); }

 private:
  std::string name_;
  Var var_;
  bool trainable_ = true;
};

/// Topologically ordered nodes reachable from a root (parents first).
class ComputationRecord {
 public:
  static ComputationRecord trace(const Var& root) {
    ComputationRecord rec;
    std::unordered_set<const Node*> seen;
    // Iterative post-order DFS; graphs can be thousands of nodes deep.
    std::vector<std::pair<Node*, std::size_t>> stack;
    Node* r = root.node().get();
    if (!r->requires_grad) return rec;
    stack.emplace_back(r, 0);
    seen.insert(r);
    while (!stack.empty()) {
      auto& [node, next] = stack.back();
      if (next < node->parents.size()) {
        Node* p = node->parents[next++].get();
        if (p->requires_grad && seen.insert(p).second) stack.emplace_back(p, 0);
      } else {
        rec.order_.push_back(node);
        stack.pop_back();
      }
    }
    return rec;
  }

  const std::vector<Node*>& nodes() const noexcept { return order_; }
  std::size_t size() const noexcept { return order_.size(); }

 private:
  std::vector<Node*> order_;
};

/// Accumulates d(root)/d(leaf) into every reachable leaf with requires_grad.
inline void backward(const ComputationRecord& record, const Var& root) {
  if (root.size() != 1) {
    throw ContractError("backward needs a scalar root, got shape " + shape_string(root.shape()));
  }
  const auto& order = record.nodes();
  if (order.empty()) return;
  for (Node* n : order) {
    if (!n->is_leaf) {
      n->ensure_grad();
      n->grad.fill(0.0);
    }
  }
  Node* r = root.node().get();
  r->ensure_grad();
  if (r->is_leaf) {
    r->grad[0] += 1.0;
    return;
  }
  r->grad[0] = 1.0;
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node* n = *it;
    if (!n->is_leaf && n->backward_fn) n->backward_fn(*n);
  }
}

inline void backward(const Var& root) { backward(ComputationRecord::trace(root), root); }

namespace detail {

inline void accumulate(Node& parent, const Tensor& g) {
  if (!parent.requires_grad) return;
  parent.ensure_grad();
  auto dst = parent.grad.data();
  auto src = g.data();
  for (std::size_t i = 0; i < dst.size(); ++i) dst[i] += src[i];
}

inline bool wants(const Node& self, std::size_t i) {
  return self.parents[i]->requires_grad;
}

inline Var make_result(Tensor value, std::vector<Var> inputs,
                       std::function<void(Node&)> backward_fn) {
  auto node = std::make_shared<Node>();
  node->value = std::move(value);
  node->is_leaf = false;
  bool any = false;
  if (GradMode::enabled()) {
    for (const auto& in : inputs) any = any || in.requires_grad();
  }
  if (any) {
    node->requires_grad = true;
    node->parents.reserve(inputs.size());
    for (auto& in : inputs) node->parents.push_back(in.node());
    node->backward_fn = std::move(backward_fn);
  }
  return Var(std::move(node));
}

inline Shape broadcast_shape(const Shape& a, const Shape& b) {
  const std::size_t r = std::max(a.size(), b.size());
  Shape out(r);
  for (std::size_t i = 0; i < r; ++i) {
    std::size_t da = i < r - a.size() ? 1 : a[i - (r - a.size())];
    std::size_t db = i < r - b.size() ? 1 : b[i - (r - b.size())];
    if (da != db && da != 1 && db != 1) {
      throw ShapeError("shapes " + shape_string(a) + " and " + shape_string(b) +
                       " are not broadcast-compatible");
    }
    out[i] = std::max(da, db);
  }
  return out;
}

// Strides of `in` laid against `out`, zero on broadcast dimensions.
inline std::vector<std::size_t> broadcast_strides(const Shape& in, const Shape& out) {
  std::vector<std::size_t> strides(out.size(), 0);
  std::size_t stride = 1;
  const std::size_t off = out.size() - in.size();
  for (std::size_t i = in.size(); i-- > 0;) {
    strides[i + off] = in[i] == 1 ? 0 : stride;
    stride *= in[i];
  }
  return strides;
}

// Calls f(out_index, a_index, b_index) over every element of `out`.
template <class F>
void for_each_broadcast(const Shape& out, const std::vector<std::size_t>& sa,
                        const std::vector<std::size_t>& sb, F&& f) {
  const std::size_t total = shape_numel(out);
  if (total == 0) return;
  const std::size_t r = out.size();
  if (r == 0) {
    f(0, 0, 0);
    return;
  }
  std::vector<std::size_t> idx(r, 0);
  std::size_t ia = 0, ib = 0;
  const std::size_t inner = out[r - 1];
  const std::size_t la = sa[r - 1], lb = sb[r - 1];
  for (std::size_t o = 0; o < total; o += inner) {
    for (std::size_t k = 0; k < inner; ++k) f(o + k, ia + k * la, ib + k * lb);
    for (std::size_t d = r - 1; d-- > 0;) {
      ++idx[d];
      ia += sa[d];
      ib += sb[d];
      if (idx[d] < out[d]) break;
      ia -= sa[d] * out[d];
      ib -= sb[d] * out[d];
      idx[d] = 0;
    }
  }
}

// Sums `g` (shaped like `out`) down to the broadcast operand shape `in`.
inline Tensor reduce_to(const Tensor& g, const Shape& in) {
  if (g.shape() == in) return g;
  Tensor r(in, 0.0);
  const auto si = broadcast_strides(in, g.shape());
  const std::vector<std::size_t> zero(g.rank(), 0);
  auto dst = r.data();
  auto src = g.data();
  for_each_broadcast(g.shape(), si, zero,
                     [&](std::size_t o, std::size_t i, std::size_t) { dst[i] += src[o]; });
  return r;
}

template <class Fwd>
Tensor broadcast_apply(const Tensor& a, const Tensor& b, Fwd&& fwd) {
  if (a.shape() == b.shape()) {
    Tensor out(a.shape());
    for (std::size_t i = 0; i < a.size(); ++i) out[i] = fwd(a[i], b[i]);
    return out;
  }
  Shape os = broadcast_shape(a.shape(), b.shape());
  Tensor out(os);
  auto sa = broadcast_strides(a.shape(), os);
  auto sb = broadcast_strides(b.shape(), os);
  auto od = out.data();
  auto ad = a.data();
  auto bd = b.data();
  for_each_broadcast(os, sa, sb, [&](std::size_t o, std::size_t i, std::size_t j) {
    od[o] = fwd(ad[i], bd[j]);
  });
  return out;
}

// Per-element partials of a binary op, expanded to the output shape.
template <class Da, class Db>
std::pair<Tensor, Tensor> broadcast_partials(const Tensor& a, const Tensor& b,
                                             const Tensor& g, Da&& da, Db&& db) {
  const Shape& os = g.shape();
  Tensor ga(os), gb(os);
  auto sa = broadcast_strides(a.shape(), os);
  auto sb = broadcast_strides(b.shape(), os);
  auto ad = a.data();
  auto bd = b.data();
  auto gd = g.data();
  for_each_broadcast(os, sa, sb, [&](std::size_t o, std::size_t i, std::size_t j) {
    ga[o] = gd[o] * da(ad[i], bd[j]);
    gb[o] = gd[o] * db(ad[i], bd[j]);
  });
  return {reduce_to(ga, a.shape()), reduce_to(gb, b.shape())};
}

template <class Fwd, class Deriv>
Var unary(const Var& a, Fwd&& fwd, Deriv&& deriv) {
  Tensor out(a.shape());
  const Tensor& av = a.value();
  for (std::size_t i = 0; i < av.size(); ++i) out[i] = fwd(av[i]);
  return make_result(std::move(out), {a}, [deriv](Node& self) {
    const Tensor& x = self.parents[0]->value;
    Tensor g(x.shape());
    for (std::size_t i = 0; i < x.size(); ++i) {
      g[i] = self.grad[i] * deriv(x[i], self.value[i]);
    }
    accumulate(*self.parents[0], g);
  });
}

inline double sigmoid_scalar(double x) {
  if (x >= 0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

inline double log_sigmoid_scalar(double x) {
  return x < 0 ? x - std::log1p(std::exp(x)) : -std::log1p(std::exp(-x));
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Elementwise

inline Var add(const Var& a, const Var& b) {
  auto out = detail::broadcast_apply(a.value(), b.value(), [](double x, double y) { return x + y; });
  return detail::make_result(std::move(out), {a, b}, [](Node& self) {
    if (detail::wants(self, 0)) detail::accumulate(*self.parents[0], detail::reduce_to(self.grad, self.parents[0]->value.shape()));
    if (detail::wants(self, 1)) detail::accumulate(*self.parents[1], detail::reduce_to(self.grad, self.parents[1]->value.shape()));
  });
}

inline Var sub(const Var& a, const Var& b) {
  auto out = detail::broadcast_apply(a.value(), b.value(), [](double x, double y) { return x - y; });
  return detail::make_result(std::move(out), {a, b}, [](Node& self) {
    if (detail::wants(self, 0)) detail::accumulate(*self.parents[0], detail::reduce_to(self.grad, self.parents[0]->value.shape()));
    if (detail::wants(self, 1)) {
      Tensor g = detail::reduce_to(self.grad, self.parents[1]->value.shape());
      for (double& v : g.data()) v = -v;
      detail::accumulate(*self.parents[1], g);
    }
  });
}

inline Var mul(const Var& a, const Var& b) {
  auto out = detail::broadcast_apply(a.value(), b.value(), [](double x, double y) { return x * y; });
  return detail::make_result(std::move(out), {a, b}, [](Node& self) {
    const Tensor& av = self.parents[0]->value;
    const Tensor& bv = self.parents[1]->value;
    auto [ga, gb] = detail::broadcast_partials(
        av, bv, self.grad, [](double, double y) { return y; }, [](double x, double) { return x; });
    detail::accumulate(*self.parents[0], ga);
    detail::accumulate(*self.parents[1], gb);
  });
}

inline Var div(const Var& a, const Var& b) {
  auto out = detail::broadcast_apply(a.value(), b.value(), [](double x, double y) { return x / y; });
  return detail::make_result(std::move(out), {a, b}, [](Node& self) {
    const Tensor& av = self.parents[0]->value;
    const Tensor& bv = self.parents[1]->value;
    auto [ga, gb] = detail::broadcast_partials(
        av, bv, self.grad, [](double, double y) { return 1.0 / y; },
        [](double x, double y) { return -x / (y * y); });
    detail::accumulate(*self.parents[0], ga);
    detail::accumulate(*self.parents[1], gb);
  });
}

inline Var neg(const Var& a) {
  return detail::unary(a, [](double x) { return -x; }, [](double, double) { return -1.0; });
}

inline Var scale(const Var& a, double c) {
  return detail::unary(a, [c](double x) { return c * x; }, [c](double, double) { return c; });
}

inline Var add_scalar(const Var& a, double c) {
  return detail::unary(a, [c](double x) { return x + c; }, [](double, double) { return 1.0; });
}

inline Var exp(const Var& a) {
  return detail::unary(a, [](double x) { return std::exp(x); }, [](double, double y) { return y; });
}

inline Var log(const Var& a) {
  for (double v : a.value().data()) {
    if (!(v > 0.0)) throw DomainError("log of non-positive value " + std::to_string(v));
  }
  return detail::unary(a, [](double x) { return std::log(x); },
                       [](double x, double) { return 1.0 / x; });
}

inline Var tanh(const Var& a) {
  return detail::unary(a, [](double x) { return std::tanh(x); },
                       [](double, double y) { return 1.0 - y * y; });
}

inline Var relu(const Var& a) {
  return detail::unary(a, [](double x) { return x > 0 ? x : 0.0; },
                       [](double x, double) { return x > 0 ? 1.0 : 0.0; });
}

inline Var sigmoid(const Var& a) {
  return detail::unary(a, detail::sigmoid_scalar, [](double, double y) { return y * (1.0 - y); });
}

/// ln sigmoid(x), evaluated without overflow for large |x|.
inline Var log_sigmoid(const Var& a) {
  return detail::unary(a, detail::log_sigmoid_scalar,
                       [](double x, double) { return detail::sigmoid_scalar(-x); });
}

inline Var square(const Var& a) {
  return detail::unary(a, [](double x) { return x * x; }, [](double x, double) { return 2.0 * x; });
}

enum class OpKind { Add, Sub, Mul, Div, Exp, Log, Tanh, Relu, Sigmoid, Neg, Scale };

/// Dispatches on `kind`; `b` is required for binary kinds, `constant` for Scale.
inline Var elementwise(OpKind kind, const Var& a, const std::optional<Var>& b = std::nullopt,
                       double constant = 1.0) {
  auto need_b = [&]() -> const Var& {
    if (!b) throw ContractError("binary elementwise op needs a second operand");
    return *b;
  };
  switch (kind) {
    case OpKind::Add: return add(a, need_b());
    case OpKind::Sub: return sub(a, need_b());
    case OpKind::Mul: return mul(a, need_b());
    case OpKind::Div: return div(a, need_b());
    case OpKind::Exp: return exp(a);
    case OpKind::Log: return log(a);
    case OpKind::Tanh: return tanh(a);
    case OpKind::Relu: return relu(a);
    case OpKind::Sigmoid: return sigmoid(a);
    case OpKind::Neg: return neg(a);
    case OpKind::Scale: return scale(a, constant);
  }
  throw ContractError("unknown op kind");
}

inline Var operator+(const Var& a, const Var& b) { return add(a, b); }
inline Var operator-(const Var& a, const Var& b) { return sub(a, b); }
inline Var operator*(const Var& a, const Var& b) { return mul(a, b); }
inline Var operator/(const Var& a, const Var& b) { return div(a, b); }
inline Var operator-(const Var& a) { return neg(a); }
inline Var operator*(double c, const Var& a) { return scale(a, c); }
inline Var operator*(const Var& a, double c) { return scale(a, c); }
inline Var operator+(const Var& a, double c) { return add_scalar(a, c); }

// ---------------------------------------------------------------------------
// Reductions

inline Var sum(const Var& a) {
  return detail::make_result(Tensor::scalar(a.value().sum()), {a}, [](Node& self) {
    Tensor g(self.parents[0]->value.shape(), self.grad[0]);
    detail::accumulate(*self.parents[0], g);
  });
}

inline Var mean(const Var& a) {
  if (a.size() == 0) throw ContractError("mean of empty tensor");
  return scale(sum(a), 1.0 / static_cast<double>(a.size()));
}

/// Sums all axes but the first: [N, ...] -> [N].
inline Var sum_per_example(const Var& a) {
  if (a.value().rank() < 1) throw ShapeError("sum_per_example needs a leading batch axis");
  const std::size_t n = a.shape()[0];
  const std::size_t inner = n ? a.size() / n : 0;
  Tensor out(Shape{n});
  for (std::size_t i = 0; i < n; ++i) {
    double s = 0.0;
    for (std::size_t j = 0; j < inner; ++j) s += a.value()[i * inner + j];
    out[i] = s;
  }
  return detail::make_result(std::move(out), {a}, [n, inner](Node& self) {
    Tensor g(self.parents[0]->value.shape());
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = 0; j < inner; ++j) g[i * inner + j] = self.grad[i];
    detail::accumulate(*self.parents[0], g);
  });
}

/// Row-wise log-sum-exp: [N, K] -> [N].
inline Var logsumexp_rows(const Var& a) {
  if (a.value().rank() != 2) throw ShapeError("logsumexp_rows expects [N, K]");
  const std::size_t n = a.shape()[0], k = a.shape()[1];
  Tensor out(Shape{n});
  for (std::size_t i = 0; i < n; ++i) {
    double m = -INFINITY;
    for (std::size_t j = 0; j < k; ++j) m = std::max(m, a.value()[i * k + j]);
    double s = 0.0;
    for (std::size_t j = 0; j < k; ++j) s += std::exp(a.value()[i * k + j] - m);
    out[i] = m + std::log(s);
  }
  return detail::make_result(std::move(out), {a}, [n, k](Node& self) {
    const Tensor& x = self.parents[0]->value;
    Tensor g(x.shape());
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = 0; j < k; ++j)
        g[i * k + j] = self.grad[i] * std::exp(x[i * k + j] - self.value[i]);
    detail::accumulate(*self.parents[0], g);
  });
}

// ---------------------------------------------------------------------------
// Shape manipulation

inline Var reshape(const Var& a, Shape shape) {
  Tensor out = a.value().reshaped(std::move(shape));
  return detail::make_result(std::move(out), {a}, [](Node& self) {
    detail::accumulate(*self.parents[0], self.grad.reshaped(self.parents[0]->value.shape()));
  });
}

/// out[i] = a[index[i]] with `index` a permutation or selection of a's flat indices.
inline Var gather_flat(const Var& a, Shape out_shape, std::shared_ptr<const std::vector<std::size_t>> index) {
  if (shape_numel(out_shape) != index->size()) throw ShapeError("gather_flat index/shape mismatch");
  Tensor out(std::move(out_shape));
  const auto& idx = *index;
  for (std::size_t i = 0; i < idx.size(); ++i) out[i] = a.value()[idx[i]];
  return detail::make_result(std::move(out), {a}, [index](Node& self) {
    Tensor g(self.parents[0]->value.shape(), 0.0);
    const auto& idx = *index;
    for (std::size_t i = 0; i < idx.size(); ++i) g[idx[i]] += self.grad[i];
    detail::accumulate(*self.parents[0], g);
  });
}

inline Var transpose(const Var& a) {
  if (a.value().rank() != 2) throw ShapeError("transpose expects a matrix");
  const std::size_t r = a.shape()[0], c = a.shape()[1];
  auto idx = std::make_shared<std::vector<std::size_t>>(r * c);
  for (std::size_t i = 0; i < r; ++i)
    for (std::size_t j = 0; j < c; ++j) (*idx)[j * r + i] = i * c + j;
  return gather_flat(a, Shape{c, r}, std::move(idx));
}

/// Rows `rows` of a along axis 0.
inline Var gather_rows(const Var& a, const std::vector<std::size_t>& rows) {
  if (a.value().rank() < 1) throw ShapeError("gather_rows needs rank >= 1");
  const std::size_t n = a.shape()[0];
  const std::size_t inner = n ? a.size() / n : 0;
  Shape os = a.shape();
  os[0] = rows.size();
  auto idx = std::make_shared<std::vector<std::size_t>>();
  idx->reserve(rows.size() * inner);
  for (std::size_t r : rows) {
    if (r >= n) throw ShapeError("gather_rows index out of range");
    for (std::size_t j = 0; j < inner; ++j) idx->push_back(r * inner + j);
  }
  return gather_flat(a, std::move(os), std::move(idx));
}

/// Channels [begin, end) along axis 1.
inline Var slice_channels(const Var& a, std::size_t begin, std::size_t end) {
  const Shape& s = a.shape();
  if (s.size() < 2 || begin > end || end > s[1]) {
    throw ShapeError("slice_channels [" + std::to_string(begin) + "," + std::to_string(end) +
                     ") invalid for " + shape_string(s));
  }
  const std::size_t n = s[0], c = s[1];
  const std::size_t inner = shape_numel(s) / (n * c == 0 ? 1 : n * c);
  Shape os = s;
  os[1] = end - begin;
  auto idx = std::make_shared<std::vector<std::size_t>>();
  idx->reserve(n * (end - begin) * inner);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t ch = begin; ch < end; ++ch)
      for (std::size_t j = 0; j < inner; ++j) idx->push_back((i * c + ch) * inner + j);
  return gather_flat(a, std::move(os), std::move(idx));
}

/// Concatenation along axis 1.
inline Var concat_channels(const Var& a, const Var& b) {
  const Shape& sa = a.shape();
  const Shape& sb = b.shape();
  if (sa.size() < 2 || sa.size() != sb.size() || sa[0] != sb[0] ||
      !std::equal(sa.begin() + 2, sa.end(), sb.begin() + 2)) {
    throw ShapeError("concat_channels shape mismatch " + shape_string(sa) + " vs " + shape_string(sb));
  }
  const std::size_t n = sa[0], ca = sa[1], cb = sb[1];
  const std::size_t inner = shape_numel(Shape(sa.begin() + 2, sa.end()));
  Shape os = sa;
  os[1] = ca + cb;
  Tensor out(os);
  for (std::size_t i = 0; i < n; ++i) {
    std::copy_n(a.value().data().begin() + i * ca * inner, ca * inner,
                out.data().begin() + i * (ca + cb) * inner);
    std::copy_n(b.value().data().begin() + i * cb * inner, cb * inner,
                out.data().begin() + (i * (ca + cb) + ca) * inner);
  }
  return detail::make_result(std::move(out), {a, b}, [n, ca, cb, inner](Node& self) {
    if (detail::wants(self, 0)) {
      Tensor g(self.parents[0]->value.shape());
      for (std::size_t i = 0; i < n; ++i)
        std::copy_n(self.grad.data().begin() + i * (ca + cb) * inner, ca * inner,
                    g.data().begin() + i * ca * inner);
      detail::accumulate(*self.parents[0], g);
    }
    if (detail::wants(self, 1)) {
      Tensor g(self.parents[1]->value.shape());
      for (std::size_t i = 0; i < n; ++i)
        std::copy_n(self.grad.data().begin() + (i * (ca + cb) + ca) * inner, cb * inner,
                    g.data().begin() + i * cb * inner);
      detail::accumulate(*self.parents[1], g);
    }
  });
}

/// Flat source index for each element of a space-to-depth (factor 2) output.
/// Output channel c*4 + dy*2 + dx takes input (c, 2h+dy, 2w+dx).
inline std::shared_ptr<std::vector<std::size_t>> squeeze_index(std::size_t n, std::size_t c,
                                                               std::size_t h, std::size_t w) {
  auto idx = std::make_shared<std::vector<std::size_t>>(n * c * h * w);
  const std::size_t h2 = h / 2, w2 = w / 2;
  std::size_t o = 0;
  for (std::size_t b = 0; b < n; ++b)
    for (std::size_t ch = 0; ch < c; ++ch)
      for (std::size_t dy = 0; dy < 2; ++dy)
        for (std::size_t dx = 0; dx < 2; ++dx)
          for (std::size_t y = 0; y < h2; ++y)
            for (std::size_t x = 0; x < w2; ++x)
              (*idx)[o++] = ((b * c + ch) * h + 2 * y + dy) * w + 2 * x + dx;
  return idx;
}

inline Var squeeze2d(const Var& a) {
  const Shape& s = a.shape();
  if (s.size() != 4 || s[2] % 2 || s[3] % 2) {
    throw ShapeError("squeeze2d needs [N,C,H,W] with even H, W; got " + shape_string(s));
  }
  return gather_flat(a, Shape{s[0], s[1] * 4, s[2] / 2, s[3] / 2},
                     squeeze_index(s[0], s[1], s[2], s[3]));
}

inline Var unsqueeze2d(const Var& a) {
  const Shape& s = a.shape();
  if (s.size() != 4 || s[1] % 4) {
    throw ShapeError("unsqueeze2d needs [N,4C,H,W]; got " + shape_string(s));
  }
  const std::size_t n = s[0], c = s[1] / 4, h = s[2] * 2, w = s[3] * 2;
  auto fwd = squeeze_index(n, c, h, w);
  auto inv = std::make_shared<std::vector<std::size_t>>(fwd->size());
  for (std::size_t i = 0; i < fwd->size(); ++i) (*inv)[(*fwd)[i]] = i;
  return gather_flat(a, Shape{n, c, h, w}, std::move(inv));
}

// ---------------------------------------------------------------------------
// Linear maps

inline Var matmul(const Var& a, const Var& b) {
  const Shape& sa = a.shape();
  const Shape& sb = b.shape();
  if (sa.size() != 2 || sb.size() != 2 || sa[1] != sb[0]) {
    throw ShapeError("matmul inner dimensions differ: " + shape_string(sa) + " x " + shape_string(sb));
  }
  const std::size_t m = sa[0], k = sa[1], n = sb[1];
  Tensor out(Shape{m, n}, 0.0);
  const auto& A = a.value();
  const auto& B = b.value();
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t p = 0; p < k; ++p) {
      const double av = A[i * k + p];
      if (av == 0.0) continue;
      for (std::size_t j = 0; j < n; ++j) out[i * n + j] += av * B[p * n + j];
    }
  return detail::make_result(std::move(out), {a, b}, [m, k, n](Node& self) {
    const Tensor& A = self.parents[0]->value;
    const Tensor& B = self.parents[1]->value;
    const Tensor& G = self.grad;
    if (detail::wants(self, 0)) {
      Tensor ga(A.shape(), 0.0);
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t p = 0; p < k; ++p) {
          double s = 0.0;
          for (std::size_t j = 0; j < n; ++j) s += G[i * n + j] * B[p * n + j];
          ga[i * k + p] = s;
        }
      detail::accumulate(*self.parents[0], ga);
    }
    if (detail::wants(self, 1)) {
      Tensor gb(B.shape(), 0.0);
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t p = 0; p < k; ++p) {
          const double av = A[i * k + p];
          if (av == 0.0) continue;
          for (std::size_t j = 0; j < n; ++j) gb[p * n + j] += av * G[i * n + j];
        }
      detail::accumulate(*self.parents[1], gb);
    }
  });
}

/// Same-padded cross-correlation. x is [N,C,H,W] or [C,H,W]; w is [O,C,kh,kw].
inline Var conv2d(const Var& x, const Var& w) {
  const Shape& sw = w.shape();
  if (x.value().rank() == 3) {
    const Shape& s = x.shape();
    Var y = conv2d(reshape(x, Shape{1, s[0], s[1], s[2]}), w);
    return reshape(y, Shape{sw.at(0), s[1], s[2]});
  }
  const Shape& sx = x.shape();
  if (sx.size() != 4 || sw.size() != 4) {
    throw ShapeError("conv2d expects x [N,C,H,W] and w [O,C,kh,kw]");
  }
  if (sx[1] != sw[1]) {
    throw ShapeError("conv2d channel mismatch: input has " + std::to_string(sx[1]) +
                     ", kernel expects " + std::to_string(sw[1]));
  }
  if (sw[2] % 2 == 0 || sw[3] % 2 == 0) throw ShapeError("conv2d kernel sides must be odd");
  const std::size_t N = sx[0], C = sx[1], H = sx[2], W = sx[3];
  const std::size_t O = sw[0], KH = sw[2], KW = sw[3];
  const long ph = static_cast<long>(KH / 2), pw = static_cast<long>(KW / 2);

  // Visits every (n, o, c, ky, kx) with the valid output row/column ranges.
  auto sweep = [=](auto&& body) {
    for (std::size_t ky = 0; ky < KH; ++ky) {
      const long dy = static_cast<long>(ky) - ph;
      const std::size_t y0 = dy < 0 ? static_cast<std::size_t>(-dy) : 0;
      const std::size_t y1 = dy > 0 ? H - static_cast<std::size_t>(dy) : H;
      for (std::size_t kx = 0; kx < KW; ++kx) {
        const long dx = static_cast<long>(kx) - pw;
        const std::size_t x0 = dx < 0 ? static_cast<std::size_t>(-dx) : 0;
        const std::size_t x1 = dx > 0 ? W - static_cast<std::size_t>(dx) : W;
        if (y0 >= y1 || x0 >= x1) continue;
        body(ky, kx, dy, dx, y0, y1, x0, x1);
      }
    }
  };

  Tensor out(Shape{N, O, H, W}, 0.0);
  {
    const double* X = x.value().data().data();
    const double* Wt = w.value().data().data();
    double* Y = out.data().data();
    sweep([&](std::size_t ky, std::size_t kx, long dy, long dx, std::size_t y0, std::size_t y1,
              std::size_t x0, std::size_t x1) {
      for (std::size_t n = 0; n < N; ++n)
        for (std::size_t o = 0; o < O; ++o)
          for (std::size_t c = 0; c < C; ++c) {
            const double wv = Wt[((o * C + c) * KH + ky) * KW + kx];
            if (wv == 0.0) continue;
            const double* xp = X + (n * C + c) * H * W;
            double* yp = Y + (n * O + o) * H * W;
            for (std::size_t yy = y0; yy < y1; ++yy) {
              const double* xr = xp + (yy + dy) * W + dx;
              double* yr = yp + yy * W;
              for (std::size_t xx = x0; xx < x1; ++xx) yr[xx] += wv * xr[xx];
            }
          }
    });
  }
  return detail::make_result(std::move(out), {x, w}, [=](Node& self) {
    const double* X = self.parents[0]->value.data().data();
    const double* Wt = self.parents[1]->value.data().data();
    const double* G = self.grad.data().data();
    const bool want_x = detail::wants(self, 0);
    const bool want_w = detail::wants(self, 1);
    Tensor gx(want_x ? self.parents[0]->value.shape() : Shape{0}, 0.0);
    Tensor gw(want_w ? self.parents[1]->value.shape() : Shape{0}, 0.0);
    sweep([&](std::size_t ky, std::size_t kx, long dy, long dx, std::size_t y0, std::size_t y1,
              std::size_t x0, std::size_t x1) {
      for (std::size_t n = 0; n < N; ++n)
        for (std::size_t o = 0; o < O; ++o)
          for (std::size_t c = 0; c < C; ++c) {
            const std::size_t wi = ((o * C + c) * KH + ky) * KW + kx;
            const double wv = Wt[wi];
            const double* xp = X + (n * C + c) * H * W;
            const double* gp = G + (n * O + o) * H * W;
            double acc = 0.0;
            for (std::size_t yy = y0; yy < y1; ++yy) {
              const double* xr = xp + (yy + dy) * W + dx;
              const double* gr = gp + yy * W;
              if (want_x && wv != 0.0) {
                double* gxr = gx.data().data() + (n * C + c) * H * W + (yy + dy) * W + dx;
                for (std::size_t xx = x0; xx < x1; ++xx) gxr[xx] += wv * gr[xx];
              }
              if (want_w) {
                for (std::size_t xx = x0; xx < x1; ++xx) acc += gr[xx] * xr[xx];
              }
            }
            if (want_w) gw[wi] += acc;
          }
    });
    if (want_x) detail::accumulate(*self.parents[0], gx);
    if (want_w) detail::accumulate(*self.parents[1], gw);
  });
}

/// ln|det W| as a scalar; gradient W^{-T}.
inline Var log_abs_det(const Var& w) {
  const double ld = linalg::log_abs_det_checked(w.value());
  return detail::make_result(Tensor::scalar(ld), {w}, [](Node& self) {
    Tensor inv_t = linalg::transpose(linalg::inverse(self.parents[0]->value));
    for (double& v : inv_t.data()) v *= self.grad[0];
    detail::accumulate(*self.parents[0], inv_t);
  });
}

/// Matrix inverse; gradient -W^{-T} G W^{-T}.
inline Var inverse(const Var& w) {
  Tensor inv = linalg::inverse(w.value());
  return detail::make_result(inv, {w}, [](Node& self) {
    const Tensor& inv = self.value;
    const std::size_t n = inv.dim(0);
    // tmp = G * inv^T ; out = -inv^T * tmp
    Tensor tmp(Shape{n, n}, 0.0);
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = 0; j < n; ++j) {
        double s = 0.0;
        for (std::size_t k = 0; k < n; ++k) s += self.grad[i * n + k] * inv[j * n + k];
        tmp[i * n + j] = s;
      }
    Tensor g(Shape{n, n}, 0.0);
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = 0; j < n; ++j) {
        double s = 0.0;
        for (std::size_t k = 0; k < n; ++k) s += inv[k * n + i] * tmp[k * n + j];
        g[i * n + j] = -s;
      }
    detail::accumulate(*self.parents[0], g);
  });
}

}  // namespace flowad::ad
