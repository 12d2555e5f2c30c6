#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <memory>
#include <string>
#include <unordered_map>
#include <vector>

#include "pivot/diffcore/matmul.hpp"
#include "pivot/diffcore/params.hpp"
#include "pivot/diffcore/tensor.hpp"

namespace pivot {

template <class T>
class Graph;

/// Handle to a value recorded on a Graph tape.
template <class T>
class Var {
 public:
  Var() = default;
  Var(Graph<T>* g, std::size_t id) : g_(g), id_(id) {}

  Graph<T>& graph() const { return *g_; }
  std::size_t id() const noexcept { return id_; }
  bool valid() const noexcept { return g_ != nullptr; }

  const Tensor<T>& value() const { return g_->value(id_); }
  const Shape& shape() const { return value().shape(); }
  std::size_t rows() const { return value().rows(); }
  std::size_t cols() const { return value().cols(); }
  T item() const { return value().item(); }

 private:
  Graph<T>* g_ = nullptr;
  std::size_t id_ = 0;
};

/// Reverse-mode tape. Nodes are appended in evaluation order, so reverse
/// iteration is a valid topological order for backward.
///
/// A Graph is single-writer. Independent batches may be evaluated on separate
/// Graphs concurrently as long as no backward touches a shared ParamStore.
template <class T>
class Graph {
 public:
  using BackwardFn = std::function<void(Graph&, std::size_t)>;

  explicit Graph(ParamStore<T>* store = nullptr, bool grad_enabled = true)
      : store_(store), grad_enabled_(grad_enabled) {}

  Graph(const Graph&) = delete;
  Graph& operator=(const Graph&) = delete;

  bool grad_enabled() const noexcept { return grad_enabled_; }

  /// Parameters for which `pred(name)` is true get no gradient.
  void freeze(std::function<bool(const std::string&)> pred) { frozen_ = std::move(pred); }

  Var<T> constant(Tensor<T> value) {
    Node n;
    n.value = std::move(value);
    nodes_.push_back(std::move(n));
    return Var<T>(this, nodes_.size() - 1);
  }

  Var<T> param(const std::string& name) {
    if (!store_) throw std::logic_error("Graph::param: graph has no parameter store");
    auto it = param_nodes_.find(name);
    if (it != param_nodes_.end()) return Var<T>(this, it->second);
    Node n;
    n.param = &store_->get(name);
    n.requires_grad = grad_enabled_ && !(frozen_ && frozen_(name));
    nodes_.push_back(std::move(n));
    param_nodes_.emplace(name, nodes_.size() - 1);
    return Var<T>(this, nodes_.size() - 1);
  }

  /// Append an op result. `inputs` decide whether the node needs a gradient.
  Var<T> push(Tensor<T> value, std::initializer_list<std::size_t> inputs, BackwardFn fn) {
    return push(std::move(value), std::vector<std::size_t>(inputs), std::move(fn));
  }

  Var<T> push(Tensor<T> value, const std::vector<std::size_t>& inputs, BackwardFn fn) {
    Node n;
    n.value = std::move(value);
    if (grad_enabled_) {
      for (auto id : inputs) n.requires_grad = n.requires_grad || nodes_[id].requires_grad;
    }
    if (n.requires_grad) n.backward = std::move(fn);
    nodes_.push_back(std::move(n));
    return Var<T>(this, nodes_.size() - 1);
  }

  const Tensor<T>& value(std::size_t id) const {
    const Node& n = nodes_[id];
    return n.param ? *n.param : n.value;
  }

  bool requires_grad(std::size_t id) const { return nodes_[id].requires_grad; }

  std::vector<T>& grad(std::size_t id) {
    Node& n = nodes_[id];
    if (n.grad.empty()) n.grad.assign(value(id).size(), T{0});
    return n.grad;
  }

  bool has_grad(std::size_t id) const { return !nodes_[id].grad.empty(); }

  std::size_t size() const noexcept { return nodes_.size(); }

  /// Fill gradients of every parameter reachable from `loss` (accumulating
  /// into existing buffers). Store parameters not reached get a zero buffer.
  void backward(Var<T> loss) {
    if (loss.value().size() != 1) {
      throw std::invalid_argument("backward: loss must be a scalar, got shape " + shape_str(loss.shape()));
    }
    if (store_) {
      for (std::size_t i = 0; i < store_->size(); ++i) store_->at(i).ensure_grad();
    }
    if (!nodes_[loss.id()].requires_grad) return;
    grad(loss.id())[0] += T{1};
    for (std::size_t i = loss.id() + 1; i-- > 0;) {
      Node& n = nodes_[i];
      if (!n.requires_grad || n.grad.empty()) continue;
      if (n.backward) n.backward(*this, i);
      if (n.param) {
        n.param->ensure_grad();
        auto& pg = n.param->grad();
        for (std::size_t j = 0; j < pg.size(); ++j) pg[j] += n.grad[j];
      }
    }
  }

  /// Gradient of a leaf (constant or parameter) after backward; zeros if none.
  std::vector<T> grad_of(Var<T> v) const {
    const Node& n = nodes_[v.id()];
    if (n.grad.empty()) return std::vector<T>(value(v.id()).size(), T{0});
    return n.grad;
  }

  /// Mark a constant node as differentiable (used to probe gradients w.r.t. inputs).
  Var<T> variable(Tensor<T> value) {
    Var<T> v = constant(std::move(value));
    nodes_[v.id()].requires_grad = grad_enabled_;
    return v;
  }

 private:
  struct Node {
    Tensor<T> value;
    Tensor<T>* param = nullptr;
    std::vector<T> grad;
    bool requires_grad = false;
    BackwardFn backward;
  };

  ParamStore<T>* store_;
  bool grad_enabled_;
  std::function<bool(const std::string&)> frozen_;
  std::vector<Node> nodes_;
  std::unordered_map<std::string, std::size_t> param_nodes_;
};

namespace detail {

template <class T>
void check_same_graph(const Var<T>& a, const Var<T>& b, const char* op) {
  if (&a.graph() != &b.graph()) throw std::invalid_argument(std::string(op) + ": operands live on different graphs");
}

template <class T>
[[noreturn]] void shape_error(const char* op, const Shape& a, const Shape& b) {
  throw std::invalid_argument(std::string(op) + ": shape mismatch " + shape_str(a) + " vs " + shape_str(b));
}

template <class T>
void require_matrix(const Var<T>& a, const char* op) {
  if (a.value().rank() != 2) {
    throw std::invalid_argument(std::string(op) + ": expected a rank-2 tensor, got " + shape_str(a.shape()));
  }
}

template <class T>
void accumulate(Graph<T>& g, std::size_t id, std::size_t offset, const T* src, std::size_t n) {
  if (!g.requires_grad(id)) return;
  auto& dst = g.grad(id);
  for (std::size_t i = 0; i < n; ++i) dst[offset + i] += src[i];
}

/// Elementwise unary op with derivative expressed in terms of input x and output y.
template <class T, class F, class DF>
Var<T> unary(const Var<T>& a, F f, DF df) {
  Graph<T>& g = a.graph();
  const Tensor<T>& x = a.value();
  Tensor<T> y(x.shape());
  for (std::size_t i = 0; i < x.size(); ++i) y[i] = f(x[i]);
  const std::size_t ia = a.id();
  return g.push(std::move(y), {ia}, [ia, df](Graph<T>& gr, std::size_t self) {
    if (!gr.requires_grad(ia)) return;
    const auto& xv = gr.value(ia);
    const auto& yv = gr.value(self);
    const auto& dy = gr.grad(self);
    auto& dx = gr.grad(ia);
    for (std::size_t i = 0; i < dx.size(); ++i) dx[i] += dy[i] * df(xv[i], yv[i]);
  });
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Linear algebra
// ---------------------------------------------------------------------------

/// op(A) * op(B) for rank-2 operands.
template <class T>
Var<T> matmul(const Var<T>& a, const Var<T>& b, bool trans_a = false, bool trans_b = false) {
  detail::check_same_graph(a, b, "matmul");
  detail::require_matrix(a, "matmul");
  detail::require_matrix(b, "matmul");
  const auto& A = a.value();
  const auto& B = b.value();
  const std::size_t m = trans_a ? A.cols() : A.rows();
  const std::size_t k = trans_a ? A.rows() : A.cols();
  const std::size_t kb = trans_b ? B.cols() : B.rows();
  const std::size_t n = trans_b ? B.rows() : B.cols();
  if (k != kb) detail::shape_error<T>("matmul", A.shape(), B.shape());
  Tensor<T> c = Tensor<T>::matrix(m, n);
  gemm(A.data().data(), B.data().data(), c.data().data(), m, k, n, trans_a, trans_b);
  const std::size_t ia = a.id(), ib = b.id();
  return a.graph().push(std::move(c), {ia, ib}, [=](Graph<T>& g, std::size_t self) {
    const T* dc = g.grad(self).data();
    const T* av = g.value(ia).data().data();
    const T* bv = g.value(ib).data().data();
    if (g.requires_grad(ia)) {
      T* da = g.grad(ia).data();
      if (!trans_a && !trans_b) gemm(dc, bv, da, m, n, k, false, true, true);
      if (!trans_a && trans_b) gemm(dc, bv, da, m, n, k, false, false, true);
      if (trans_a && !trans_b) gemm(bv, dc, da, k, n, m, false, true, true);
      if (trans_a && trans_b) gemm(bv, dc, da, k, n, m, true, true, true);
    }
    if (g.requires_grad(ib)) {
      T* db = g.grad(ib).data();
      if (!trans_a && !trans_b) gemm(av, dc, db, k, m, n, true, false, true);
      if (!trans_a && trans_b) gemm(dc, av, db, n, m, k, true, false, true);
      if (trans_a && !trans_b) gemm(av, dc, db, k, m, n, false, false, true);
      if (trans_a && trans_b) gemm(dc, av, db, n, m, k, true, true, true);
    }
  });
}

template <class T>
Var<T> transpose(const Var<T>& a) {
  detail::require_matrix(a, "transpose");
  const auto& x = a.value();
  const std::size_t r = x.rows(), c = x.cols();
  Tensor<T> y = Tensor<T>::matrix(c, r);
  for (std::size_t i = 0; i < r; ++i)
    for (std::size_t j = 0; j < c; ++j) y(j, i) = x(i, j);
  const std::size_t ia = a.id();
  return a.graph().push(std::move(y), {ia}, [=](Graph<T>& g, std::size_t self) {
    if (!g.requires_grad(ia)) return;
    const auto& dy = g.grad(self);
    auto& dx = g.grad(ia);
    for (std::size_t i = 0; i < r; ++i)
      for (std::size_t j = 0; j < c; ++j) dx[i * c + j] += dy[j * r + i];
  });
}

// ---------------------------------------------------------------------------
// Elementwise arithmetic
// ---------------------------------------------------------------------------

template <class T>
Var<T> add(const Var<T>& a, const Var<T>& b) {
  detail::check_same_graph(a, b, "add");
  if (a.shape() != b.shape()) detail::shape_error<T>("add", a.shape(), b.shape());
  Tensor<T> y = a.value();
  y.drop_grad();
  const auto& bv = b.value();
  for (std::size_t i = 0; i < y.size(); ++i) y[i] += bv[i];
  const std::size_t ia = a.id(), ib = b.id();
  return a.graph().push(std::move(y), {ia, ib}, [=](Graph<T>& g, std::size_t self) {
    const auto& dy = g.grad(self);
    detail::accumulate(g, ia, 0, dy.data(), dy.size());
    detail::accumulate(g, ib, 0, dy.data(), dy.size());
  });
}

template <class T>
Var<T> sub(const Var<T>& a, const Var<T>& b) {
  detail::check_same_graph(a, b, "sub");
  if (a.shape() != b.shape()) detail::shape_error<T>("sub", a.shape(), b.shape());
  Tensor<T> y(a.shape());
  const auto& av = a.value();
  const auto& bv = b.value();
  for (std::size_t i = 0; i < y.size(); ++i) y[i] = av[i] - bv[i];
  const std::size_t ia = a.id(), ib = b.id();
  return a.graph().push(std::move(y), {ia, ib}, [=](Graph<T>& g, std::size_t self) {
    const auto& dy = g.grad(self);
    detail::accumulate(g, ia, 0, dy.data(), dy.size());
    if (g.requires_grad(ib)) {
      auto& db = g.grad(ib);
      for (std::size_t i = 0; i < dy.size(); ++i) db[i] -= dy[i];
    }
  });
}

/// Elementwise product.
template <class T>
Var<T> mul(const Var<T>& a, const Var<T>& b) {
  detail::check_same_graph(a, b, "mul");
  if (a.shape() != b.shape()) detail::shape_error<T>("mul", a.shape(), b.shape());
  Tensor<T> y(a.shape());
  const auto& av = a.value();
  const auto& bv = b.value();
  for (std::size_t i = 0; i < y.size(); ++i) y[i] = av[i] * bv[i];
  const std::size_t ia = a.id(), ib = b.id();
  return a.graph().push(std::move(y), {ia, ib}, [=](Graph<T>& g, std::size_t self) {
    const auto& dy = g.grad(self);
    if (g.requires_grad(ia)) {
      const auto& bv2 = g.value(ib);
      auto& da = g.grad(ia);
      for (std::size_t i = 0; i < dy.size(); ++i) da[i] += dy[i] * bv2[i];
    }
    if (g.requires_grad(ib)) {
      const auto& av2 = g.value(ia);
      auto& db = g.grad(ib);
      for (std::size_t i = 0; i < dy.size(); ++i) db[i] += dy[i] * av2[i];
    }
  });
}

/// Add a bias row (shape [c] or [1,c]) to every row of a.
template <class T>
Var<T> add_row(const Var<T>& a, const Var<T>& bias) {
  detail::check_same_graph(a, bias, "add_row");
  const std::size_t c = a.cols();
  if (bias.value().size() != c) detail::shape_error<T>("add_row", a.shape(), bias.shape());
  Tensor<T> y = a.value();
  y.drop_grad();
  const auto& bv = bias.value();
  const std::size_t r = y.rows();
  for (std::size_t i = 0; i < r; ++i)
    for (std::size_t j = 0; j < c; ++j) y[i * c + j] += bv[j];
  const std::size_t ia = a.id(), ib = bias.id();
  return a.graph().push(std::move(y), {ia, ib}, [=](Graph<T>& g, std::size_t self) {
    const auto& dy = g.grad(self);
    detail::accumulate(g, ia, 0, dy.data(), dy.size());
    if (g.requires_grad(ib)) {
      auto& db = g.grad(ib);
      for (std::size_t i = 0; i < r; ++i)
        for (std::size_t j = 0; j < c; ++j) db[j] += dy[i * c + j];
    }
  });
}

template <class T>
Var<T> scale(const Var<T>& a, T s) {
  return detail::unary(a, [s](T x) { return x * s; }, [s](T, T) { return s; });
}

template <class T>
Var<T> add_scalar(const Var<T>& a, T s) {
  return detail::unary(a, [s](T x) { return x + s; }, [](T, T) { return T{1}; });
}

template <class T>
Var<T> relu(const Var<T>& a) {
  return detail::unary(a, [](T x) { return x > T{0} ? x : T{0}; }, [](T x, T) { return x > T{0} ? T{1} : T{0}; });
}

/// tanh-approximated GELU.
template <class T>
Var<T> gelu(const Var<T>& a) {
  constexpr T c = T(0.7978845608028654);  // sqrt(2/pi)
  constexpr T k = T(0.044715);
  return detail::unary(
      a,
      [](T x) { return T(0.5) * x * (T{1} + std::tanh(c * (x + k * x * x * x))); },
      [](T x, T) {
        const T u = c * (x + k * x * x * x);
        const T t = std::tanh(u);
        const T du = c * (T{1} + T{3} * k * x * x);
        return T(0.5) * (T{1} + t) + T(0.5) * x * (T{1} - t * t) * du;
      });
}

template <class T>
Var<T> tanh(const Var<T>& a) {
  return detail::unary(a, [](T x) { return std::tanh(x); }, [](T, T y) { return T{1} - y * y; });
}

template <class T>
Var<T> exp(const Var<T>& a) {
  return detail::unary(a, [](T x) { return std::exp(x); }, [](T, T y) { return y; });
}

template <class T>
Var<T> log(const Var<T>& a) {
  return detail::unary(a, [](T x) { return std::log(x); }, [](T x, T) { return T{1} / x; });
}

/// Real cube root. The derivative at exactly 0 is taken as 0.
template <class T>
Var<T> cbrt(const Var<T>& a) {
  return detail::unary(a, [](T x) { return std::cbrt(x); },
                       [](T, T y) { return y == T{0} ? T{0} : T{1} / (T{3} * y * y); });
}

// ---------------------------------------------------------------------------
// Reductions
// ---------------------------------------------------------------------------

template <class T>
Var<T> sum(const Var<T>& a) {
  T s{0};
  for (T v : a.value().data()) s += v;
  const std::size_t ia = a.id();
  return a.graph().push(Tensor<T>::scalar(s), {ia}, [=](Graph<T>& g, std::size_t self) {
    if (!g.requires_grad(ia)) return;
    const T d = g.grad(self)[0];
    for (T& x : g.grad(ia)) x += d;
  });
}

template <class T>
Var<T> mean(const Var<T>& a) {
  const T n = static_cast<T>(a.value().size());
  return scale(sum(a), T{1} / n);
}

/// sum_i w_i a_i with constant weights w (same element count as a).
template <class T>
Var<T> weighted_sum(const Var<T>& a, Tensor<T> w) {
  if (w.size() != a.value().size()) detail::shape_error<T>("weighted_sum", a.shape(), w.shape());
  T s{0};
  const auto& av = a.value();
  for (std::size_t i = 0; i < w.size(); ++i) {
    if (w[i] != T{0}) s += w[i] * av[i];
  }
  const std::size_t ia = a.id();
  auto wp = std::make_shared<Tensor<T>>(std::move(w));
  return a.graph().push(Tensor<T>::scalar(s), {ia}, [=](Graph<T>& g, std::size_t self) {
    if (!g.requires_grad(ia)) return;
    const T d = g.grad(self)[0];
    auto& dx = g.grad(ia);
    for (std::size_t i = 0; i < dx.size(); ++i) dx[i] += d * (*wp)[i];
  });
}

template <class T>
Var<T> dot(const Var<T>& a, const Var<T>& b) {
  return sum(mul(a, b));
}

/// Mean over the valid positions of each sequence. x is (batch*seq_len x d),
/// valid is batch*seq_len flags; result is (batch x d). Empty sequences give zeros.
template <class T>
Var<T> masked_mean(const Var<T>& x, const std::vector<std::uint8_t>& valid, std::size_t batch, std::size_t seq_len) {
  detail::require_matrix(x, "masked_mean");
  if (x.rows() != batch * seq_len || valid.size() != batch * seq_len) {
    throw std::invalid_argument("masked_mean: expected " + std::to_string(batch * seq_len) + " rows, got " +
                                shape_str(x.shape()));
  }
  const std::size_t d = x.cols();
  const auto& xv = x.value();
  Tensor<T> y = Tensor<T>::matrix(batch, d);
  std::vector<T> inv(batch, T{0});
  for (std::size_t b = 0; b < batch; ++b) {
    std::size_t cnt = 0;
    for (std::size_t t = 0; t < seq_len; ++t) cnt += valid[b * seq_len + t] ? 1 : 0;
    if (cnt == 0) continue;
    inv[b] = T{1} / static_cast<T>(cnt);
    for (std::size_t t = 0; t < seq_len; ++t) {
      if (!valid[b * seq_len + t]) continue;
      for (std::size_t j = 0; j < d; ++j) y(b, j) += xv((b * seq_len + t), j) * inv[b];
    }
  }
  const std::size_t ix = x.id();
  return x.graph().push(std::move(y), {ix}, [=](Graph<T>& g, std::size_t self) {
    if (!g.requires_grad(ix)) return;
    const auto& dy = g.grad(self);
    auto& dx = g.grad(ix);
    for (std::size_t b = 0; b < batch; ++b)
      for (std::size_t t = 0; t < seq_len; ++t) {
        if (!valid[b * seq_len + t]) continue;
        for (std::size_t j = 0; j < d; ++j) dx[(b * seq_len + t) * d + j] += dy[b * d + j] * inv[b];
      }
  });
}

// ---------------------------------------------------------------------------
// Row-wise normalisations
// ---------------------------------------------------------------------------

namespace detail {
/// Running maximum that keeps NaN instead of discarding it.
template <class T>
T nan_max(T acc, T v) {
  return (std::isnan(v) || v > acc) ? v : acc;
}
}  // namespace detail

template <class T>
Var<T> softmax_rows(const Var<T>& a) {
  const auto& x = a.value();
  const std::size_t r = x.rows(), c = x.cols();
  Tensor<T> y(x.shape());
  for (std::size_t i = 0; i < r; ++i) {
    T mx = -std::numeric_limits<T>::infinity();
    for (std::size_t j = 0; j < c; ++j) mx = detail::nan_max(mx, x[i * c + j]);
    T s{0};
    for (std::size_t j = 0; j < c; ++j) s += (y[i * c + j] = std::exp(x[i * c + j] - mx));
    for (std::size_t j = 0; j < c; ++j) y[i * c + j] /= s;
  }
  const std::size_t ia = a.id();
  return a.graph().push(std::move(y), {ia}, [=](Graph<T>& g, std::size_t self) {
    if (!g.requires_grad(ia)) return;
    const auto& yv = g.value(self);
    const auto& dy = g.grad(self);
    auto& dx = g.grad(ia);
    for (std::size_t i = 0; i < r; ++i) {
      T s{0};
      for (std::size_t j = 0; j < c; ++j) s += dy[i * c + j] * yv[i * c + j];
      for (std::size_t j = 0; j < c; ++j) dx[i * c + j] += yv[i * c + j] * (dy[i * c + j] - s);
    }
  });
}

/// Row-wise log-softmax. Entries flagged in `excluded` take no part in the
/// normaliser; their output is 0 and they receive no gradient. A row with
/// every entry excluded yields all zeros.
template <class T>
Var<T> log_softmax_rows(const Var<T>& a, std::vector<std::uint8_t> excluded = {}) {
  const auto& x = a.value();
  const std::size_t r = x.rows(), c = x.cols();
  if (!excluded.empty() && excluded.size() != x.size()) {
    throw std::invalid_argument("log_softmax_rows: mask size " + std::to_string(excluded.size()) +
                                " does not match " + shape_str(x.shape()));
  }
  auto skip = [&excluded](std::size_t idx) { return !excluded.empty() && excluded[idx]; };
  Tensor<T> y(x.shape());
  for (std::size_t i = 0; i < r; ++i) {
    T mx = -std::numeric_limits<T>::infinity();
    for (std::size_t j = 0; j < c; ++j)
      if (!skip(i * c + j)) mx = detail::nan_max(mx, x[i * c + j]);
    if (mx == -std::numeric_limits<T>::infinity()) continue;
    T s{0};
    for (std::size_t j = 0; j < c; ++j)
      if (!skip(i * c + j)) s += std::exp(x[i * c + j] - mx);
    const T lse = mx + std::log(s);
    for (std::size_t j = 0; j < c; ++j)
      if (!skip(i * c + j)) y[i * c + j] = x[i * c + j] - lse;
  }
  const std::size_t ia = a.id();
  auto mask = std::make_shared<std::vector<std::uint8_t>>(std::move(excluded));
  return a.graph().push(std::move(y), {ia}, [=](Graph<T>& g, std::size_t self) {
    if (!g.requires_grad(ia)) return;
    const auto& yv = g.value(self);
    const auto& dy = g.grad(self);
    auto& dx = g.grad(ia);
    auto sk = [&mask](std::size_t idx) { return !mask->empty() && (*mask)[idx]; };
    for (std::size_t i = 0; i < r; ++i) {
      T s{0};
      for (std::size_t j = 0; j < c; ++j)
        if (!sk(i * c + j)) s += dy[i * c + j];
      for (std::size_t j = 0; j < c; ++j)
        if (!sk(i * c + j)) dx[i * c + j] += dy[i * c + j] - std::exp(yv[i * c + j]) * s;
    }
  });
}

/// Layer normalisation over the last dimension with learned gain and bias.
template <class T>
Var<T> layer_norm_rows(const Var<T>& x, const Var<T>& gain, const Var<T>& bias, T eps = T(1e-5)) {
  detail::check_same_graph(x, gain, "layer_norm_rows");
  detail::check_same_graph(x, bias, "layer_norm_rows");
  const std::size_t c = x.cols();
  if (gain.value().size() != c) detail::shape_error<T>("layer_norm_rows", x.shape(), gain.shape());
  if (bias.value().size() != c) detail::shape_error<T>("layer_norm_rows", x.shape(), bias.shape());
  const auto& xv = x.value();
  const auto& gv = gain.value();
  const auto& bv = bias.value();
  const std::size_t r = xv.rows();
  auto xhat = std::make_shared<std::vector<T>>(xv.size());
  auto inv_std = std::make_shared<std::vector<T>>(r);
  Tensor<T> y(xv.shape());
  for (std::size_t i = 0; i < r; ++i) {
    T mu{0};
    for (std::size_t j = 0; j < c; ++j) mu += xv[i * c + j];
    mu /= static_cast<T>(c);
    T var{0};
    for (std::size_t j = 0; j < c; ++j) var += (xv[i * c + j] - mu) * (xv[i * c + j] - mu);
    var /= static_cast<T>(c);
    const T is = T{1} / std::sqrt(var + eps);
    (*inv_std)[i] = is;
    for (std::size_t j = 0; j < c; ++j) {
      const T h = (xv[i * c + j] - mu) * is;
      (*xhat)[i * c + j] = h;
      y[i * c + j] = h * gv[j] + bv[j];
    }
  }
  const std::size_t ix = x.id(), ig = gain.id(), ib = bias.id();
  return x.graph().push(std::move(y), {ix, ig, ib}, [=](Graph<T>& g, std::size_t self) {
    const auto& dy = g.grad(self);
    const auto& gv2 = g.value(ig);
    if (g.requires_grad(ig)) {
      auto& dg = g.grad(ig);
      for (std::size_t i = 0; i < r; ++i)
        for (std::size_t j = 0; j < c; ++j) dg[j] += dy[i * c + j] * (*xhat)[i * c + j];
    }
    if (g.requires_grad(ib)) {
      auto& db = g.grad(ib);
      for (std::size_t i = 0; i < r; ++i)
        for (std::size_t j = 0; j < c; ++j) db[j] += dy[i * c + j];
    }
    if (g.requires_grad(ix)) {
      auto& dx = g.grad(ix);
      const T n = static_cast<T>(c);
      for (std::size_t i = 0; i < r; ++i) {
        T s1{0}, s2{0};
        for (std::size_t j = 0; j < c; ++j) {
          const T dh = dy[i * c + j] * gv2[j];
          s1 += dh;
          s2 += dh * (*xhat)[i * c + j];
        }
        for (std::size_t j = 0; j < c; ++j) {
          const T dh = dy[i * c + j] * gv2[j];
          dx[i * c + j] += (*inv_std)[i] / n * (n * dh - s1 - (*xhat)[i * c + j] * s2);
        }
      }
    }
  });
}

/// Scale every row to unit Euclidean norm. Rows with norm below `eps` are divided by eps.
template <class T>
Var<T> l2_normalize_rows(const Var<T>& a, T eps = T(1e-12)) {
  const auto& x = a.value();
  const std::size_t r = x.rows(), c = x.cols();
  auto norms = std::make_shared<std::vector<T>>(r);
  Tensor<T> y(x.shape());
  for (std::size_t i = 0; i < r; ++i) {
    T s{0};
    for (std::size_t j = 0; j < c; ++j) s += x[i * c + j] * x[i * c + j];
    const T n = std::max(std::sqrt(s), eps);
    (*norms)[i] = n;
    for (std::size_t j = 0; j < c; ++j) y[i * c + j] = x[i * c + j] / n;
  }
  const std::size_t ia = a.id();
  return a.graph().push(std::move(y), {ia}, [=](Graph<T>& g, std::size_t self) {
    if (!g.requires_grad(ia)) return;
    const auto& yv = g.value(self);
    const auto& dy = g.grad(self);
    auto& dx = g.grad(ia);
    for (std::size_t i = 0; i < r; ++i) {
      T s{0};
      for (std::size_t j = 0; j < c; ++j) s += yv[i * c + j] * dy[i * c + j];
      for (std::size_t j = 0; j < c; ++j) dx[i * c + j] += (dy[i * c + j] - yv[i * c + j] * s) / (*norms)[i];
    }
  });
}

// ---------------------------------------------------------------------------
// Selection and layout
// ---------------------------------------------------------------------------

/// Rows of `table` at `ids` (embedding lookup / row selection).
template <class T>
Var<T> gather_rows(const Var<T>& table, std::vector<std::size_t> ids) {
  detail::require_matrix(table, "gather_rows");
  const auto& tv = table.value();
  const std::size_t c = tv.cols();
  Tensor<T> y = Tensor<T>::matrix(ids.size(), c);
  for (std::size_t i = 0; i < ids.size(); ++i) {
    if (ids[i] >= tv.rows()) {
      throw std::out_of_range("gather_rows: index " + std::to_string(ids[i]) + " out of range for " +
                              shape_str(tv.shape()));
    }
    std::copy_n(tv.data().begin() + static_cast<std::ptrdiff_t>(ids[i] * c), c,
                y.data().begin() + static_cast<std::ptrdiff_t>(i * c));
  }
  const std::size_t it = table.id();
  auto idx = std::make_shared<std::vector<std::size_t>>(std::move(ids));
  return table.graph().push(std::move(y), {it}, [=](Graph<T>& g, std::size_t self) {
    if (!g.requires_grad(it)) return;
    const auto& dy = g.grad(self);
    auto& dt = g.grad(it);
    for (std::size_t i = 0; i < idx->size(); ++i)
      for (std::size_t j = 0; j < c; ++j) dt[(*idx)[i] * c + j] += dy[i * c + j];
  });
}

template <class T>
Var<T> slice_rows(const Var<T>& a, std::size_t start, std::size_t count) {
  if (start + count > a.rows()) {
    throw std::out_of_range("slice_rows: [" + std::to_string(start) + "," + std::to_string(start + count) +
                            ") outside " + shape_str(a.shape()));
  }
  std::vector<std::size_t> ids(count);
  std::iota(ids.begin(), ids.end(), start);
  return gather_rows(a, std::move(ids));
}

template <class T>
Var<T> slice_cols(const Var<T>& a, std::size_t start, std::size_t count) {
  detail::require_matrix(a, "slice_cols");
  const auto& x = a.value();
  const std::size_t r = x.rows(), c = x.cols();
  if (start + count > c) {
    throw std::out_of_range("slice_cols: [" + std::to_string(start) + "," + std::to_string(start + count) +
                            ") outside " + shape_str(x.shape()));
  }
  Tensor<T> y = Tensor<T>::matrix(r, count);
  for (std::size_t i = 0; i < r; ++i)
    for (std::size_t j = 0; j < count; ++j) y(i, j) = x(i, start + j);
  const std::size_t ia = a.id();
  return a.graph().push(std::move(y), {ia}, [=](Graph<T>& g, std::size_t self) {
    if (!g.requires_grad(ia)) return;
    const auto& dy = g.grad(self);
    auto& dx = g.grad(ia);
    for (std::size_t i = 0; i < r; ++i)
      for (std::size_t j = 0; j < count; ++j) dx[i * c + start + j] += dy[i * count + j];
  });
}

template <class T>
Var<T> concat_rows(const std::vector<Var<T>>& parts) {
  if (parts.empty()) throw std::invalid_argument("concat_rows: no operands");
  const std::size_t c = parts[0].cols();
  std::size_t r = 0;
  for (const auto& p : parts) {
    detail::require_matrix(p, "concat_rows");
    detail::check_same_graph(parts[0], p, "concat_rows");
    if (p.cols() != c) detail::shape_error<T>("concat_rows", parts[0].shape(), p.shape());
    r += p.rows();
  }
  Tensor<T> y = Tensor<T>::matrix(r, c);
  std::vector<std::size_t> ids, offsets;
  std::size_t off = 0;
  for (const auto& p : parts) {
    std::copy(p.value().data().begin(), p.value().data().end(), y.data().begin() + static_cast<std::ptrdiff_t>(off));
    ids.push_back(p.id());
    offsets.push_back(off);
    off += p.value().size();
  }
  return parts[0].graph().push(std::move(y), ids, [=](Graph<T>& g, std::size_t self) {
    const auto& dy = g.grad(self);
    for (std::size_t k = 0; k < ids.size(); ++k) {
      detail::accumulate(g, ids[k], 0, dy.data() + offsets[k], g.value(ids[k]).size());
    }
  });
}

template <class T>
Var<T> concat_cols(const std::vector<Var<T>>& parts) {
  if (parts.empty()) throw std::invalid_argument("concat_cols: no operands");
  const std::size_t r = parts[0].rows();
  std::size_t c = 0;
  for (const auto& p : parts) {
    detail::require_matrix(p, "concat_cols");
    detail::check_same_graph(parts[0], p, "concat_cols");
    if (p.rows() != r) detail::shape_error<T>("concat_cols", parts[0].shape(), p.shape());
    c += p.cols();
  }
  Tensor<T> y = Tensor<T>::matrix(r, c);
  std::vector<std::size_t> ids, col_off, widths;
  std::size_t off = 0;
  for (const auto& p : parts) {
    const auto& v = p.value();
    for (std::size_t i = 0; i < r; ++i)
      for (std::size_t j = 0; j < v.cols(); ++j) y(i, off + j) = v(i, j);
    ids.push_back(p.id());
    col_off.push_back(off);
    widths.push_back(v.cols());
    off += v.cols();
  }
  return parts[0].graph().push(std::move(y), ids, [=](Graph<T>& g, std::size_t self) {
    const auto& dy = g.grad(self);
    for (std::size_t k = 0; k < ids.size(); ++k) {
      if (!g.requires_grad(ids[k])) continue;
      auto& dx = g.grad(ids[k]);
      for (std::size_t i = 0; i < r; ++i)
        for (std::size_t j = 0; j < widths[k]; ++j) dx[i * widths[k] + j] += dy[i * c + col_off[k] + j];
    }
  });
}

/// Main diagonal of a square matrix as an n x 1 column.
template <class T>
Var<T> diagonal(const Var<T>& a) {
  detail::require_matrix(a, "diagonal");
  const std::size_t n = a.rows();
  if (a.cols() != n) throw std::invalid_argument("diagonal: matrix must be square, got " + shape_str(a.shape()));
  Tensor<T> y = Tensor<T>::matrix(n, 1);
  for (std::size_t i = 0; i < n; ++i) y[i] = a.value()[i * n + i];
  const std::size_t ia = a.id();
  return a.graph().push(std::move(y), {ia}, [=](Graph<T>& g, std::size_t self) {
    const auto& dy = g.grad(self);
    auto& da = g.grad(ia);
    for (std::size_t i = 0; i < n; ++i) da[i * n + i] += dy[i];
  });
}

/// Copy of the value with no gradient path.
template <class T>
Var<T> detach(const Var<T>& a) {
  Tensor<T> v = a.value();
  v.drop_grad();
  return a.graph().constant(std::move(v));
}

// ---------------------------------------------------------------------------
// Attention
// ---------------------------------------------------------------------------

/// Multi-head scaled dot-product attention over padded sequences.
///
/// q, k, v are (batch*seq_len x d) with heads splitting the columns evenly.
/// key_valid flags which positions may be attended to. Each head computes
/// softmax(scale * Q_h K_h^T) V_h per sequence; results are concatenated.
template <class T>
Var<T> attention(const Var<T>& q, const Var<T>& k, const Var<T>& v, const std::vector<std::uint8_t>& key_valid,
                 std::size_t batch, std::size_t seq_len, std::size_t heads, T scale_factor) {
  detail::check_same_graph(q, k, "attention");
  detail::check_same_graph(q, v, "attention");
  if (q.shape() != k.shape()) detail::shape_error<T>("attention", q.shape(), k.shape());
  if (q.shape() != v.shape()) detail::shape_error<T>("attention", q.shape(), v.shape());
  const std::size_t d = q.cols();
  if (q.rows() != batch * seq_len || key_valid.size() != batch * seq_len) {
    throw std::invalid_argument("attention: expected " + std::to_string(batch * seq_len) + " rows, got " +
                                shape_str(q.shape()));
  }
  if (heads == 0 || d % heads != 0) {
    throw std::invalid_argument("attention: width " + std::to_string(d) + " not divisible by " +
                                std::to_string(heads) + " heads");
  }
  const std::size_t dh = d / heads;
  const auto& Q = q.value();
  const auto& K = k.value();
  const auto& V = v.value();
  auto probs = std::make_shared<std::vector<T>>(batch * heads * seq_len * seq_len, T{0});
  Tensor<T> out = Tensor<T>::matrix(batch * seq_len, d);
  std::vector<T> row(seq_len);
  for (std::size_t b = 0; b < batch; ++b) {
    for (std::size_t h = 0; h < heads; ++h) {
      T* P = probs->data() + (b * heads + h) * seq_len * seq_len;
      for (std::size_t i = 0; i < seq_len; ++i) {
        const T* qi = &Q[(b * seq_len + i) * d + h * dh];
        T mx = -std::numeric_limits<T>::infinity();
        for (std::size_t j = 0; j < seq_len; ++j) {
          if (!key_valid[b * seq_len + j]) continue;
          const T* kj = &K[(b * seq_len + j) * d + h * dh];
          T s{0};
          for (std::size_t p = 0; p < dh; ++p) s += qi[p] * kj[p];
          row[j] = s * scale_factor;
          mx = detail::nan_max(mx, row[j]);
        }
        if (mx == -std::numeric_limits<T>::infinity()) continue;
        T z{0};
        for (std::size_t j = 0; j < seq_len; ++j) {
          if (!key_valid[b * seq_len + j]) continue;
          P[i * seq_len + j] = std::exp(row[j] - mx);
          z += P[i * seq_len + j];
        }
        T* oi = &out[(b * seq_len + i) * d + h * dh];
        for (std::size_t j = 0; j < seq_len; ++j) {
          if (!key_valid[b * seq_len + j]) continue;
          P[i * seq_len + j] /= z;
          const T pij = P[i * seq_len + j];
          const T* vj = &V[(b * seq_len + j) * d + h * dh];
          for (std::size_t p = 0; p < dh; ++p) oi[p] += pij * vj[p];
        }
      }
    }
  }
  const std::size_t iq = q.id(), ik = k.id(), iv = v.id();
  return q.graph().push(std::move(out), {iq, ik, iv}, [=](Graph<T>& g, std::size_t self) {
    const auto& dO = g.grad(self);
    const auto& Qv = g.value(iq);
    const auto& Kv = g.value(ik);
    const auto& Vv = g.value(iv);
    const bool need_q = g.requires_grad(iq), need_k = g.requires_grad(ik), need_v = g.requires_grad(iv);
    T* dQ = need_q ? g.grad(iq).data() : nullptr;
    T* dK = need_k ? g.grad(ik).data() : nullptr;
    T* dV = need_v ? g.grad(iv).data() : nullptr;
    std::vector<T> dP(seq_len);
    for (std::size_t b = 0; b < batch; ++b) {
      for (std::size_t h = 0; h < heads; ++h) {
        const T* P = probs->data() + (b * heads + h) * seq_len * seq_len;
        for (std::size_t i = 0; i < seq_len; ++i) {
          const T* doi = &dO[(b * seq_len + i) * d + h * dh];
          T acc{0};
          for (std::size_t j = 0; j < seq_len; ++j) {
            const T pij = P[i * seq_len + j];
            if (pij == T{0}) {
              dP[j] = T{0};
              continue;
            }
            const T* vj = &Vv[(b * seq_len + j) * d + h * dh];
            T s{0};
            for (std::size_t p = 0; p < dh; ++p) s += doi[p] * vj[p];
            dP[j] = s;
            acc += pij * s;
            if (dV) {
              T* dvj = dV + (b * seq_len + j) * d + h * dh;
              for (std::size_t p = 0; p < dh; ++p) dvj[p] += pij * doi[p];
            }
          }
          if (!dQ && !dK) continue;
          const T* qi = &Qv[(b * seq_len + i) * d + h * dh];
          for (std::size_t j = 0; j < seq_len; ++j) {
            const T pij = P[i * seq_len + j];
            if (pij == T{0}) continue;
            const T ds = pij * (dP[j] - acc) * scale_factor;
            const T* kj = &Kv[(b * seq_len + j) * d + h * dh];
            if (dQ) {
              T* dqi = dQ + (b * seq_len + i) * d + h * dh;
              for (std::size_t p = 0; p < dh; ++p) dqi[p] += ds * kj[p];
            }
            if (dK) {
              T* dkj = dK + (b * seq_len + j) * d + h * dh;
              for (std::size_t p = 0; p < dh; ++p) dkj[p] += ds * qi[p];
            }
          }
        }
      }
    }
  });
}

}  // namespace pivot
