#pragma once

// Dense reverse-mode autodiff over row-major tensors.
//
// A Tensor is a shared handle to a graph node. Ops record their inputs and a
// backward closure when any input requires a gradient and grad mode is on;
// Tensor::backward() walks the graph once in reverse topological order, so
// accumulation order is fixed by graph construction order.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <memory>
#include <numeric>
#include <span>
#include <string>
#include <unordered_set>
#include <utility>
#include <vector>

#include <Eigen/Core>

#include "metavl/errors.hpp"

namespace metavl {

using Shape = std::vector<std::size_t>;

inline std::size_t shape_numel(const Shape& s) {
  return std::accumulate(s.begin(), s.end(), std::size_t{1},
                         std::multiplies<>());
}

inline std::string shape_str(const Shape& s) {
  std::string out = "[";
  for (std::size_t i = 0; i < s.size(); ++i) {
    if (i) out += ", ";
    out += std::to_string(s[i]);
  }
  return out + "]";
}

namespace detail {

inline bool& grad_mode_flag() {
  thread_local bool enabled = true;
  return enabled;
}

template <class T>
struct Node {
  Shape shape;
  std::vector<T> value;
  std::vector<T> grad;
  bool requires_grad = false;
  const char* op = "leaf";
  std::vector<std::shared_ptr<Node>> parents;
  std::function<void(Node&)> backward_fn;

  std::vector<T>& ensure_grad() {
    if (grad.empty()) grad.assign(value.size(), T{0});
    return grad;
  }
};

template <class T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <class T>
using MatMap = Eigen::Map<RowMat<T>>;
template <class T>
using ConstMatMap = Eigen::Map<const RowMat<T>>;

}  // namespace detail

inline bool grad_enabled() { return detail::grad_mode_flag(); }

// Disables graph recording on the current thread for its lifetime.
class NoGradGuard {
 public:
  NoGradGuard() : previous_(detail::grad_mode_flag()) {
    detail::grad_mode_flag() = false;
  }
  ~NoGradGuard() { detail::grad_mode_flag() = previous_; }
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

template <class T>
class Tensor {
 public:
  using value_type = T;
  using NodeT = detail::Node<T>;

  Tensor() : node_(std::make_shared<NodeT>()) { node_->value.assign(1, T{0}); }

  Tensor(Shape shape, std::vector<T> values, bool requires_grad = false)
      : node_(std::make_shared<NodeT>()) {
    if (shape_numel(shape) != values.size()) {
      throw ShapeError("tensor data length " + std::to_string(values.size()) +
                       " does not match shape " + shape_str(shape));
    }
    for (auto d : shape) {
      if (d == 0) throw ShapeError("tensor dims must be positive: " + shape_str(shape));
    }
    node_->shape = std::move(shape);
    node_->value = std::move(values);
    node_->requires_grad = requires_grad;
  }

  static Tensor zeros(Shape shape, bool requires_grad = false) {
    auto n = shape_numel(shape);
    return Tensor(std::move(shape), std::vector<T>(n, T{0}), requires_grad);
  }
  static Tensor full(Shape shape, T v, bool requires_grad = false) {
    auto n = shape_numel(shape);
    return Tensor(std::move(shape), std::vector<T>(n, v), requires_grad);
  }
  static Tensor scalar(T v, bool requires_grad = false) {
    return Tensor(Shape{}, std::vector<T>{v}, requires_grad);
  }
  static Tensor matrix(std::size_t rows, std::size_t cols, std::vector<T> values,
                       bool requires_grad = false) {
    return Tensor(Shape{rows, cols}, std::move(values), requires_grad);
  }

  const Shape& shape() const { return node_->shape; }
  std::size_t rank() const { return node_->shape.size(); }
  std::size_t numel() const { return node_->value.size(); }
  std::size_t rows() const {
    require_rank2("rows");
    return node_->shape[0];
  }
  std::size_t cols() const {
    require_rank2("cols");
    return node_->shape[1];
  }

  std::span<const T> data() const { return node_->value; }
  // Direct write access; only legal on leaves (parameters, inputs).
  std::span<T> mutable_data() {
    if (node_->backward_fn) throw Error("mutable_data() on a non-leaf tensor");
    return node_->value;
  }
  T item() const {
    if (numel() != 1) throw ShapeError("item() on tensor of shape " + shape_str(shape()));
    return node_->value[0];
  }
  T at(std::size_t r, std::size_t c) const { return node_->value[r * cols() + c]; }

  bool requires_grad() const { return node_->requires_grad; }
  Tensor& set_requires_grad(bool v) {
    if (node_->backward_fn) throw Error("set_requires_grad() on a non-leaf tensor");
    node_->requires_grad = v;
    return *this;
  }
  bool is_leaf() const { return !node_->backward_fn; }
  const char* op_name() const { return node_->op; }

  bool has_grad() const { return !node_->grad.empty(); }
  std::span<const T> grad() const { return node_->grad; }
  std::span<T> mutable_grad() { return node_->ensure_grad(); }
  void zero_grad() { node_->grad.clear(); }

  // Copy of the values with no history.
  Tensor detach() const { return Tensor(shape(), node_->value, false); }

  bool same_node(const Tensor& o) const { return node_ == o.node_; }

  void backward() const;

  const std::shared_ptr<NodeT>& node() const { return node_; }
  explicit Tensor(std::shared_ptr<NodeT> n) : node_(std::move(n)) {}

 private:
  void require_rank2(const char* what) const {
    if (node_->shape.size() != 2) {
      throw ShapeError(std::string(what) + "() needs a matrix, got shape " +
                       shape_str(node_->shape));
    }
  }

  std::shared_ptr<NodeT> node_;
};

template <class T>
void Tensor<T>::backward() const {
  if (numel() != 1) {
    throw ShapeError("backward() needs a scalar loss, got shape " + shape_str(shape()));
  }
  if (!node_->requires_grad) return;

  // Iterative post-order DFS gives a topological order of the recorded graph.
  std::vector<NodeT*> order;
  std::unordered_set<NodeT*> seen;
  std::vector<std::pair<NodeT*, std::size_t>> stack{{node_.get(), 0}};
  seen.insert(node_.get());
  while (!stack.empty()) {
    auto& [n, idx] = stack.back();
    if (idx < n->parents.size()) {
      NodeT* p = n->parents[idx++].get();
      if (p->requires_grad && !seen.count(p)) {
        seen.insert(p);
        stack.emplace_back(p, 0);
      }
    } else {
      order.push_back(n);
      stack.pop_back();
    }
  }
  node_->ensure_grad()[0] += T{1};
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    NodeT* n = *it;
    if (n->backward_fn && !n->grad.empty()) n->backward_fn(*n);
  }
}

namespace detail {

template <class T>
Tensor<T> make_op(Shape shape, std::vector<T> value, const char* op,
                  std::vector<Tensor<T>> inputs,
                  std::function<void(Node<T>&)> backward_fn) {
  auto n = std::make_shared<Node<T>>();
  n->shape = std::move(shape);
  n->value = std::move(value);
  n->op = op;
  bool needs = false;
  if (grad_enabled()) {
    for (const auto& in : inputs) needs = needs || in.requires_grad();
  }
  if (needs) {
    n->requires_grad = true;
    for (auto& in : inputs) n->parents.push_back(in.node());
    n->backward_fn = std::move(backward_fn);
  }
  return Tensor<T>(std::move(n));
}

template <class T>
void check_rank2(const Tensor<T>& t, const char* op) {
  if (t.rank() != 2) {
    throw ShapeError(std::string(op) + ": expected a matrix, got shape " + shape_str(t.shape()));
  }
}

template <class T>
void check_same_shape(const Tensor<T>& a, const Tensor<T>& b, const char* op) {
  if (a.shape() != b.shape()) {
    throw ShapeError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " +
                     shape_str(b.shape()));
  }
}

// Parent i's grad buffer if it participates in backward, else nullptr.
template <class T>
std::vector<T>* parent_grad(Node<T>& n, std::size_t i) {
  auto& p = *n.parents[i];
  return p.requires_grad ? &p.ensure_grad() : nullptr;
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Linear algebra

template <class T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b) {
  detail::check_rank2(a, "matmul");
  detail::check_rank2(b, "matmul");
  const auto m = a.rows(), k = a.cols(), n = b.cols();
  if (b.rows() != k) {
    throw ShapeError("matmul: inner dims differ " + shape_str(a.shape()) + " x " +
                     shape_str(b.shape()));
  }
  std::vector<T> out(m * n);
  detail::MatMap<T>(out.data(), m, n).noalias() =
      detail::ConstMatMap<T>(a.data().data(), m, k) * detail::ConstMatMap<T>(b.data().data(), k, n);
  return detail::make_op<T>({m, n}, std::move(out), "matmul", {a, b}, [m, k, n](detail::Node<T>& self) {
    detail::ConstMatMap<T> dc(self.grad.data(), m, n);
    auto& pa = *self.parents[0];
    auto& pb = *self.parents[1];
    if (auto* ga = detail::parent_grad(self, 0)) {
      detail::MatMap<T>(ga->data(), m, k).noalias() +=
          dc * detail::ConstMatMap<T>(pb.value.data(), k, n).transpose();
    }
    if (auto* gb = detail::parent_grad(self, 1)) {
      detail::MatMap<T>(gb->data(), k, n).noalias() +=
          detail::ConstMatMap<T>(pa.value.data(), m, k).transpose() * dc;
    }
  });
}

// a · bᵀ
template <class T>
Tensor<T> matmul_nt(const Tensor<T>& a, const Tensor<T>& b) {
  detail::check_rank2(a, "matmul_nt");
  detail::check_rank2(b, "matmul_nt");
  const auto m = a.rows(), k = a.cols(), n = b.rows();
  if (b.cols() != k) {
    throw ShapeError("matmul_nt: inner dims differ " + shape_str(a.shape()) + " x " +
                     shape_str(b.shape()) + "^T");
  }
  std::vector<T> out(m * n);
  detail::MatMap<T>(out.data(), m, n).noalias() =
      detail::ConstMatMap<T>(a.data().data(), m, k) *
      detail::ConstMatMap<T>(b.data().data(), n, k).transpose();
  return detail::make_op<T>({m, n}, std::move(out), "matmul_nt", {a, b}, [m, k, n](detail::Node<T>& self) {
    detail::ConstMatMap<T> dc(self.grad.data(), m, n);
    auto& pa = *self.parents[0];
    auto& pb = *self.parents[1];
    if (auto* ga = detail::parent_grad(self, 0)) {
      detail::MatMap<T>(ga->data(), m, k).noalias() += dc * detail::ConstMatMap<T>(pb.value.data(), n, k);
    }
    if (auto* gb = detail::parent_grad(self, 1)) {
      detail::MatMap<T>(gb->data(), n, k).noalias() +=
          dc.transpose() * detail::ConstMatMap<T>(pa.value.data(), m, k);
    }
  });
}

template <class T>
Tensor<T> transpose(const Tensor<T>& a) {
  detail::check_rank2(a, "transpose");
  const auto m = a.rows(), n = a.cols();
  std::vector<T> out(m * n);
  detail::MatMap<T>(out.data(), n, m) = detail::ConstMatMap<T>(a.data().data(), m, n).transpose();
  return detail::make_op<T>({n, m}, std::move(out), "transpose", {a}, [m, n](detail::Node<T>& self) {
    if (auto* ga = detail::parent_grad(self, 0)) {
      detail::MatMap<T>(ga->data(), m, n) += detail::ConstMatMap<T>(self.grad.data(), n, m).transpose();
    }
  });
}

// ---------------------------------------------------------------------------
// Elementwise

template <class T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
  detail::check_same_shape(a, b, "add");
  std::vector<T> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] + b.data()[i];
  return detail::make_op<T>(a.shape(), std::move(out), "add", {a, b}, [](detail::Node<T>& self) {
    for (std::size_t p = 0; p < 2; ++p) {
      if (auto* g = detail::parent_grad(self, p)) {
        for (std::size_t i = 0; i < g->size(); ++i) (*g)[i] += self.grad[i];
      }
    }
  });
}

template <class T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) {
  detail::check_same_shape(a, b, "sub");
  std::vector<T> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] - b.data()[i];
  return detail::make_op<T>(a.shape(), std::move(out), "sub", {a, b}, [](detail::Node<T>& self) {
    if (auto* g = detail::parent_grad(self, 0)) {
      for (std::size_t i = 0; i < g->size(); ++i) (*g)[i] += self.grad[i];
    }
    if (auto* g = detail::parent_grad(self, 1)) {
      for (std::size_t i = 0; i < g->size(); ++i) (*g)[i] -= self.grad[i];
    }
  });
}

template <class T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
  detail::check_same_shape(a, b, "mul");
  std::vector<T> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] * b.data()[i];
  return detail::make_op<T>(a.shape(), std::move(out), "mul", {a, b}, [](detail::Node<T>& self) {
    auto& va = self.parents[0]->value;
    auto& vb = self.parents[1]->value;
    if (auto* g = detail::parent_grad(self, 0)) {
      for (std::size_t i = 0; i < g->size(); ++i) (*g)[i] += self.grad[i] * vb[i];
    }
    if (auto* g = detail::parent_grad(self, 1)) {
      for (std::size_t i = 0; i < g->size(); ++i) (*g)[i] += self.grad[i] * va[i];
    }
  });
}

template <class T>
Tensor<T> scale(const Tensor<T>& a, T c) {
  std::vector<T> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] * c;
  return detail::make_op<T>(a.shape(), std::move(out), "scale", {a}, [c](detail::Node<T>& self) {
    if (auto* g = detail::parent_grad(self, 0)) {
      for (std::size_t i = 0; i < g->size(); ++i) (*g)[i] += self.grad[i] * c;
    }
  });
}

// x[m, n] + b[n] broadcast over rows.
template <class T>
Tensor<T> add_bias(const Tensor<T>& x, const Tensor<T>& b) {
  detail::check_rank2(x, "add_bias");
  const auto m = x.rows(), n = x.cols();
  if (b.numel() != n) {
    throw ShapeError("add_bias: bias " + shape_str(b.shape()) + " vs input " + shape_str(x.shape()));
  }
  std::vector<T> out(m * n);
  for (std::size_t r = 0; r < m; ++r)
    for (std::size_t c = 0; c < n; ++c) out[r * n + c] = x.data()[r * n + c] + b.data()[c];
  return detail::make_op<T>({m, n}, std::move(out), "add_bias", {x, b}, [m, n](detail::Node<T>& self) {
    if (auto* gx = detail::parent_grad(self, 0)) {
      for (std::size_t i = 0; i < m * n; ++i) (*gx)[i] += self.grad[i];
    }
    if (auto* gb = detail::parent_grad(self, 1)) {
      for (std::size_t r = 0; r < m; ++r)
        for (std::size_t c = 0; c < n; ++c) (*gb)[c] += self.grad[r * n + c];
    }
  });
}

template <class T>
Tensor<T> relu(const Tensor<T>& a) {
  std::vector<T> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] > T{0} ? a.data()[i] : T{0};
  return detail::make_op<T>(a.shape(), std::move(out), "relu", {a}, [](detail::Node<T>& self) {
    auto& v = self.parents[0]->value;
    if (auto* g = detail::parent_grad(self, 0)) {
      for (std::size_t i = 0; i < g->size(); ++i)
        if (v[i] > T{0}) (*g)[i] += self.grad[i];
    }
  });
}

// tanh approximation of GELU.
template <class T>
Tensor<T> gelu(const Tensor<T>& a) {
  constexpr T kC = T(0.7978845608028654);  // sqrt(2/pi)
  constexpr T kA = T(0.044715);
  std::vector<T> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) {
    const T x = a.data()[i];
    out[i] = T(0.5) * x * (T(1) + std::tanh(kC * (x + kA * x * x * x)));
  }
  return detail::make_op<T>(a.shape(), std::move(out), "gelu", {a}, [](detail::Node<T>& self) {
    auto& v = self.parents[0]->value;
    if (auto* g = detail::parent_grad(self, 0)) {
      for (std::size_t i = 0; i < g->size(); ++i) {
        const T x = v[i];
        const T t = std::tanh(kC * (x + kA * x * x * x));
        const T d = T(0.5) * (T(1) + t) + T(0.5) * x * (T(1) - t * t) * kC * (T(1) + T(3) * kA * x * x);
        (*g)[i] += self.grad[i] * d;
      }
    }
  });
}

// ---------------------------------------------------------------------------
// Normalization and softmax

template <class T>
Tensor<T> layernorm(const Tensor<T>& x, const Tensor<T>& gamma, const Tensor<T>& beta,
                    T eps = T(1e-5)) {
  detail::check_rank2(x, "layernorm");
  const auto m = x.rows(), n = x.cols();
  if (gamma.numel() != n || beta.numel() != n) throw ShapeError("layernorm: affine size mismatch");
  std::vector<T> out(m * n), xhat(m * n), rstd(m);
  for (std::size_t r = 0; r < m; ++r) {
    const T* row = x.data().data() + r * n;
    T mean = 0;
    for (std::size_t c = 0; c < n; ++c) mean += row[c];
    mean /= T(n);
    T var = 0;
    for (std::size_t c = 0; c < n; ++c) var += (row[c] - mean) * (row[c] - mean);
    var /= T(n);
    rstd[r] = T(1) / std::sqrt(var + eps);
    for (std::size_t c = 0; c < n; ++c) {
      xhat[r * n + c] = (row[c] - mean) * rstd[r];
      out[r * n + c] = xhat[r * n + c] * gamma.data()[c] + beta.data()[c];
    }
  }
  return detail::make_op<T>(
      {m, n}, std::move(out), "layernorm", {x, gamma, beta},
      [m, n, xhat = std::move(xhat), rstd = std::move(rstd)](detail::Node<T>& self) {
        auto& gam = self.parents[1]->value;
        auto* gx = detail::parent_grad(self, 0);
        auto* gg = detail::parent_grad(self, 1);
        auto* gb = detail::parent_grad(self, 2);
        std::vector<T> dxhat(n);
        for (std::size_t r = 0; r < m; ++r) {
          const T* dy = self.grad.data() + r * n;
          const T* xh = xhat.data() + r * n;
          if (gg)
            for (std::size_t c = 0; c < n; ++c) (*gg)[c] += dy[c] * xh[c];
          if (gb)
            for (std::size_t c = 0; c < n; ++c) (*gb)[c] += dy[c];
          if (gx) {
            T mean_d = 0, mean_dx = 0;
            for (std::size_t c = 0; c < n; ++c) {
              dxhat[c] = dy[c] * gam[c];
              mean_d += dxhat[c];
              mean_dx += dxhat[c] * xh[c];
            }
            mean_d /= T(n);
            mean_dx /= T(n);
            for (std::size_t c = 0; c < n; ++c)
              (*gx)[r * n + c] += rstd[r] * (dxhat[c] - mean_d - xh[c] * mean_dx);
          }
        }
      });
}

namespace detail {

template <class T>
Tensor<T> softmax_impl(const Tensor<T>& x, bool causal, std::size_t offset, const char* op) {
  check_rank2(x, op);
  const auto m = x.rows(), n = x.cols();
  std::vector<T> out(m * n, T{0});
  for (std::size_t r = 0; r < m; ++r) {
    const std::size_t valid = causal ? std::min(n, r + offset + 1) : n;
    const T* row = x.data().data() + r * n;
    T mx = row[0];
    for (std::size_t c = 1; c < valid; ++c) mx = std::max(mx, row[c]);
    T sum = 0;
    for (std::size_t c = 0; c < valid; ++c) {
      out[r * n + c] = std::exp(row[c] - mx);
      sum += out[r * n + c];
    }
    for (std::size_t c = 0; c < valid; ++c) out[r * n + c] /= sum;
  }
  return make_op<T>({m, n}, std::move(out), op, {x}, [m, n](Node<T>& self) {
    if (auto* g = parent_grad(self, 0)) {
      for (std::size_t r = 0; r < m; ++r) {
        const T* y = self.value.data() + r * n;
        const T* dy = self.grad.data() + r * n;
        T dot = 0;
        for (std::size_t c = 0; c < n; ++c) dot += y[c] * dy[c];
        for (std::size_t c = 0; c < n; ++c) (*g)[r * n + c] += y[c] * (dy[c] - dot);
      }
    }
  });
}

}  // namespace detail

// Row-wise softmax.
template <class T>
Tensor<T> softmax(const Tensor<T>& x) {
  return detail::softmax_impl(x, false, 0, "softmax");
}

// Row-wise softmax where row r may only see columns c <= r + offset. Masked
// entries are exactly zero.
template <class T>
Tensor<T> causal_softmax(const Tensor<T>& x, std::size_t offset = 0) {
  return detail::softmax_impl(x, true, offset, "causal_softmax");
}

// Mean negative log-likelihood over rows whose mask is true. targets[r] is
// the class index scored against logits row r.
template <class T>
Tensor<T> masked_cross_entropy(const Tensor<T>& logits, std::span<const std::int32_t> targets,
                               const std::vector<bool>& mask) {
  detail::check_rank2(logits, "masked_cross_entropy");
  const auto m = logits.rows(), v = logits.cols();
  if (targets.size() != m || mask.size() != m) {
    throw ShapeError("masked_cross_entropy: " + std::to_string(m) + " logit rows, " +
                     std::to_string(targets.size()) + " targets, " + std::to_string(mask.size()) +
                     " mask entries");
  }
  std::size_t count = 0;
  for (bool b : mask) count += b;
  if (count == 0) throw Error("masked_cross_entropy: mask has no true position");
  std::vector<T> probs(m * v, T{0});
  T total = 0;
  for (std::size_t r = 0; r < m; ++r) {
    if (!mask[r]) continue;
    if (targets[r] < 0 || static_cast<std::size_t>(targets[r]) >= v) {
      throw ShapeError("masked_cross_entropy: target " + std::to_string(targets[r]) +
                       " out of range at row " + std::to_string(r));
    }
    const T* row = logits.data().data() + r * v;
    T mx = *std::max_element(row, row + v);
    T sum = 0;
    for (std::size_t c = 0; c < v; ++c) {
      probs[r * v + c] = std::exp(row[c] - mx);
      sum += probs[r * v + c];
    }
    for (std::size_t c = 0; c < v; ++c) probs[r * v + c] /= sum;
    total += (mx + std::log(sum)) - row[targets[r]];
  }
  const T inv = T(1) / T(count);
  std::vector<std::int32_t> tgt(targets.begin(), targets.end());
  std::vector<bool> msk = mask;
  return detail::make_op<T>(
      Shape{}, std::vector<T>{total * inv}, "masked_cross_entropy", {logits},
      [m, v, inv, probs = std::move(probs), tgt = std::move(tgt), msk = std::move(msk)](detail::Node<T>& self) {
        if (auto* g = detail::parent_grad(self, 0)) {
          const T up = self.grad[0] * inv;
          for (std::size_t r = 0; r < m; ++r) {
            if (!msk[r]) continue;
            for (std::size_t c = 0; c < v; ++c) (*g)[r * v + c] += up * probs[r * v + c];
            (*g)[r * v + static_cast<std::size_t>(tgt[r])] -= up;
          }
        }
      });
}

// ---------------------------------------------------------------------------
// Indexing and structure

// table[V, d] rows selected by ids -> [ids.size(), d].
template <class T>
Tensor<T> gather_rows(const Tensor<T>& table, std::span<const std::int32_t> ids) {
  detail::check_rank2(table, "gather_rows");
  if (ids.empty()) throw ShapeError("gather_rows: empty id list");
  const auto rows = table.rows(), d = table.cols();
  std::vector<T> out(ids.size() * d);
  for (std::size_t i = 0; i < ids.size(); ++i) {
    if (ids[i] < 0 || static_cast<std::size_t>(ids[i]) >= rows) {
      throw ShapeError("gather_rows: id " + std::to_string(ids[i]) + " out of range");
    }
    std::copy_n(table.data().data() + static_cast<std::size_t>(ids[i]) * d, d, out.data() + i * d);
  }
  std::vector<std::int32_t> idv(ids.begin(), ids.end());
  return detail::make_op<T>({ids.size(), d}, std::move(out), "gather_rows", {table},
                            [d, idv = std::move(idv)](detail::Node<T>& self) {
                              if (auto* g = detail::parent_grad(self, 0)) {
                                for (std::size_t i = 0; i < idv.size(); ++i) {
                                  T* dst = g->data() + static_cast<std::size_t>(idv[i]) * d;
                                  const T* src = self.grad.data() + i * d;
                                  for (std::size_t c = 0; c < d; ++c) dst[c] += src[c];
                                }
                              }
                            });
}

template <class T>
Tensor<T> slice_rows(const Tensor<T>& x, std::size_t start, std::size_t len) {
  detail::check_rank2(x, "slice_rows");
  const auto n = x.cols();
  if (len == 0 || start + len > x.rows()) throw ShapeError("slice_rows: range out of bounds");
  std::vector<T> out(x.data().begin() + start * n, x.data().begin() + (start + len) * n);
  return detail::make_op<T>({len, n}, std::move(out), "slice_rows", {x}, [start, len, n](detail::Node<T>& self) {
    if (auto* g = detail::parent_grad(self, 0)) {
      for (std::size_t i = 0; i < len * n; ++i) (*g)[start * n + i] += self.grad[i];
    }
  });
}

template <class T>
Tensor<T> slice_cols(const Tensor<T>& x, std::size_t start, std::size_t len) {
  detail::check_rank2(x, "slice_cols");
  const auto m = x.rows(), n = x.cols();
  if (len == 0 || start + len > n) throw ShapeError("slice_cols: range out of bounds");
  std::vector<T> out(m * len);
  for (std::size_t r = 0; r < m; ++r)
    std::copy_n(x.data().data() + r * n + start, len, out.data() + r * len);
  return detail::make_op<T>({m, len}, std::move(out), "slice_cols", {x}, [m, n, start, len](detail::Node<T>& self) {
    if (auto* g = detail::parent_grad(self, 0)) {
      for (std::size_t r = 0; r < m; ++r)
        for (std::size_t c = 0; c < len; ++c) (*g)[r * n + start + c] += self.grad[r * len + c];
    }
  });
}

template <class T>
Tensor<T> concat_rows(const std::vector<Tensor<T>>& parts) {
  if (parts.empty()) throw ShapeError("concat_rows: no inputs");
  const auto n = parts[0].cols();
  std::size_t m = 0;
  for (const auto& p : parts) {
    detail::check_rank2(p, "concat_rows");
    if (p.cols() != n) throw ShapeError("concat_rows: column count mismatch");
    m += p.rows();
  }
  std::vector<T> out;
  out.reserve(m * n);
  for (const auto& p : parts) out.insert(out.end(), p.data().begin(), p.data().end());
  return detail::make_op<T>({m, n}, std::move(out), "concat_rows", parts, [](detail::Node<T>& self) {
    std::size_t off = 0;
    for (std::size_t p = 0; p < self.parents.size(); ++p) {
      const auto len = self.parents[p]->value.size();
      if (auto* g = detail::parent_grad(self, p)) {
        for (std::size_t i = 0; i < len; ++i) (*g)[i] += self.grad[off + i];
      }
      off += len;
    }
  });
}

template <class T>
Tensor<T> concat_cols(const std::vector<Tensor<T>>& parts) {
  if (parts.empty()) throw ShapeError("concat_cols: no inputs");
  const auto m = parts[0].rows();
  std::size_t n = 0;
  std::vector<std::size_t> widths;
  for (const auto& p : parts) {
    detail::check_rank2(p, "concat_cols");
    if (p.rows() != m) throw ShapeError("concat_cols: row count mismatch");
    widths.push_back(p.cols());
    n += p.cols();
  }
  std::vector<T> out(m * n);
  std::size_t off = 0;
  for (const auto& p : parts) {
    const auto w = p.cols();
    for (std::size_t r = 0; r < m; ++r) std::copy_n(p.data().data() + r * w, w, out.data() + r * n + off);
    off += w;
  }
  return detail::make_op<T>({m, n}, std::move(out), "concat_cols", parts,
                            [m, n, widths = std::move(widths)](detail::Node<T>& self) {
                              std::size_t off = 0;
                              for (std::size_t p = 0; p < self.parents.size(); ++p) {
                                const auto w = widths[p];
                                if (auto* g = detail::parent_grad(self, p)) {
                                  for (std::size_t r = 0; r < m; ++r)
                                    for (std::size_t c = 0; c < w; ++c)
                                      (*g)[r * w + c] += self.grad[r * n + off + c];
                                }
                                off += w;
                              }
                            });
}

template <class T>
Tensor<T> sum(const Tensor<T>& x) {
  T s = 0;
  for (T v : x.data()) s += v;
  return detail::make_op<T>(Shape{}, std::vector<T>{s}, "sum", {x}, [](detail::Node<T>& self) {
    if (auto* g = detail::parent_grad(self, 0)) {
      for (auto& gi : *g) gi += self.grad[0];
    }
  });
}

template <class T>
Tensor<T> mean(const Tensor<T>& x) {
  return scale(sum(x), T(1) / T(x.numel()));
}

// Index of the largest entry per row, ties to the lowest index. Not
// differentiable: refuses inputs that are part of a recorded graph.
template <class T>
std::vector<std::int32_t> argmax_rows(const Tensor<T>& x) {
  detail::check_rank2(x, "argmax_rows");
  if (grad_enabled() && x.requires_grad()) {
    throw Error("argmax_rows is not differentiable; detach the input or use NoGradGuard");
  }
  std::vector<std::int32_t> out(x.rows());
  for (std::size_t r = 0; r < x.rows(); ++r) {
    const T* row = x.data().data() + r * x.cols();
    out[r] = static_cast<std::int32_t>(std::max_element(row, row + x.cols()) - row);
  }
  return out;
}

}  // namespace metavl
