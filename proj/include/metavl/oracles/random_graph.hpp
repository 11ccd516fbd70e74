#pragma once

// Random differentiable graphs for the finite-difference property test. A
// graph is a chain of shape-compatible ops on a running matrix, with side
// inputs drawn as extra leaves, closed by a scalar reduction.

#include <algorithm>
#include <functional>
#include <memory>
#include <string>
#include <vector>

#include "metavl/rng.hpp"
#include "metavl/tensor.hpp"

namespace metavl::oracles {

inline const std::vector<std::string>& all_ops() {
  static const std::vector<std::string> ops{
      "matmul",      "matmul_nt",  "transpose",   "add",         "sub",        "mul",
      "scale",       "add_bias",   "relu",        "gelu",        "layernorm",  "softmax",
      "causal_softmax", "gather_rows", "slice_rows", "slice_cols", "concat_rows", "concat_cols",
      "masked_cross_entropy", "sum", "mean"};
  return ops;
}

struct RandomGraph {
  std::vector<Tensor<double>> leaves;
  std::function<Tensor<double>(std::vector<Tensor<double>>&)> build;
  std::vector<std::string> ops;

  std::string describe() const {
    std::string s;
    for (const auto& o : ops) s += (s.empty() ? "" : " -> ") + o;
    return s;
  }
};

namespace detail {

struct Step {
  std::string op;
  std::size_t leaf = 0, leaf2 = 0;
  std::size_t a = 0, b = 0;
  double c = 0.0;
  std::vector<std::int32_t> ids;
  std::vector<bool> mask;
};

inline Tensor<double> random_leaf(Shape s, Rng& rng, bool rg = true) {
  std::vector<double> v(shape_numel(s));
  for (auto& x : v) x = normal(rng);
  return Tensor<double>(std::move(s), std::move(v), rg);
}

inline bool is_terminal(const std::string& op) {
  return op == "masked_cross_entropy" || op == "sum" || op == "mean";
}

// Appends op to the plan if it is feasible for the current shape [m, n].
inline bool plan_step(const std::string& op, std::size_t& m, std::size_t& n, Rng& rng,
                      std::vector<Tensor<double>>& leaves, std::vector<Step>& steps) {
  constexpr std::size_t kMax = 6;
  auto dim = [&](std::size_t lo, std::size_t hi) { return std::size_t(uniform_int(rng, std::int64_t(lo), std::int64_t(hi))); };
  Step s;
  s.op = op;
  if (op == "matmul" || op == "matmul_nt") {
    const auto n2 = dim(1, 5);
    s.leaf = leaves.size();
    leaves.push_back(random_leaf(op == "matmul" ? Shape{n, n2} : Shape{n2, n}, rng));
    n = n2;
  } else if (op == "transpose") {
    std::swap(m, n);
  } else if (op == "add" || op == "sub" || op == "mul") {
    s.leaf = leaves.size();
    leaves.push_back(random_leaf({m, n}, rng));
  } else if (op == "scale") {
    s.c = 4.0 * uniform_real(rng) - 2.0;
  } else if (op == "add_bias") {
    s.leaf = leaves.size();
    leaves.push_back(random_leaf({n}, rng));
  } else if (op == "relu" || op == "gelu" || op == "softmax") {
  } else if (op == "layernorm") {
    if (n < 2) return false;
    s.leaf = leaves.size();
    leaves.push_back(random_leaf({n}, rng));
    s.leaf2 = leaves.size();
    leaves.push_back(random_leaf({n}, rng));
  } else if (op == "causal_softmax") {
    s.a = dim(0, n - 1);
  } else if (op == "gather_rows") {
    const auto len = dim(1, 4);
    for (std::size_t i = 0; i < len; ++i) s.ids.push_back(std::int32_t(dim(0, m - 1)));
    m = len;
  } else if (op == "slice_rows") {
    if (m < 2) return false;
    s.a = dim(0, m - 1);
    s.b = dim(1, m - s.a);
    m = s.b;
  } else if (op == "slice_cols") {
    if (n < 2) return false;
    s.a = dim(0, n - 1);
    s.b = dim(1, n - s.a);
    n = s.b;
  } else if (op == "concat_rows") {
    if (m >= kMax) return false;
    const auto r = dim(1, kMax - m);
    s.leaf = leaves.size();
    leaves.push_back(random_leaf({r, n}, rng));
    m += r;
  } else if (op == "concat_cols") {
    if (n >= kMax) return false;
    const auto c = dim(1, kMax - n);
    s.leaf = leaves.size();
    leaves.push_back(random_leaf({m, c}, rng));
    n += c;
  } else {
    return false;
  }
  steps.push_back(std::move(s));
  return true;
}

inline Tensor<double> apply(const Step& s, const Tensor<double>& x, std::vector<Tensor<double>>& l,
                            double& kink) {
  const auto& op = s.op;
  if (op == "matmul") return matmul(x, l[s.leaf]);
  if (op == "matmul_nt") return matmul_nt(x, l[s.leaf]);
  if (op == "transpose") return transpose(x);
  if (op == "add") return add(x, l[s.leaf]);
  if (op == "sub") return sub(l[s.leaf], x);
  if (op == "mul") return mul(x, l[s.leaf]);
  if (op == "scale") return scale(x, s.c);
  if (op == "add_bias") return add_bias(x, l[s.leaf]);
  if (op == "relu") {
    for (double v : x.data()) kink = std::min(kink, std::abs(v));
    return relu(x);
  }
  if (op == "gelu") return gelu(x);
  if (op == "layernorm") return layernorm(x, l[s.leaf], l[s.leaf2]);
  if (op == "softmax") return softmax(x);
  if (op == "causal_softmax") return causal_softmax(x, s.a);
  if (op == "gather_rows") return gather_rows(x, s.ids);
  if (op == "slice_rows") return slice_rows(x, s.a, s.b);
  if (op == "slice_cols") return slice_cols(x, s.a, s.b);
  if (op == "concat_rows") return concat_rows<double>({x, l[s.leaf]});
  if (op == "concat_cols") return concat_cols<double>({l[s.leaf], x});
  throw Error("random graph: unknown op " + op);
}

}  // namespace detail

// Graph number `index` always contains all_ops()[index % size] so a run of
// size() consecutive graphs covers every op.
inline RandomGraph random_graph(Rng& rng, std::size_t index) {
  const auto& ops = all_ops();
  const auto& forced = ops[index % ops.size()];
  std::vector<std::string> chain_ops;
  for (const auto& o : ops)
    if (!detail::is_terminal(o)) chain_ops.push_back(o);

  for (;;) {
    RandomGraph g;
    std::vector<detail::Step> steps;
    std::size_t m = std::size_t(uniform_int(rng, 2, 4)), n = std::size_t(uniform_int(rng, 2, 5));
    g.leaves.push_back(detail::random_leaf({m, n}, rng));
    if (!detail::is_terminal(forced)) detail::plan_step(forced, m, n, rng, g.leaves, steps);
    const auto extra = uniform_int(rng, 1, 4);
    for (std::int64_t i = 0; i < extra; ++i) {
      detail::plan_step(chain_ops[std::size_t(uniform_int(rng, 0, std::int64_t(chain_ops.size()) - 1))], m, n,
                        rng, g.leaves, steps);
    }
    std::string terminal = detail::is_terminal(forced)
                               ? forced
                               : std::vector<std::string>{"masked_cross_entropy", "sum", "mean"}[std::size_t(
                                     uniform_int(rng, 0, 2))];
    detail::Step last;
    last.op = terminal;
    if (terminal == "masked_cross_entropy") {
      for (std::size_t r = 0; r < m; ++r) {
        last.ids.push_back(std::int32_t(uniform_int(rng, 0, std::int64_t(n) - 1)));
        last.mask.push_back(uniform_int(rng, 0, 2) > 0);
      }
      last.mask[std::size_t(uniform_int(rng, 0, std::int64_t(m) - 1))] = true;
    } else {
      // Weighted reduction so the loss is not invariant to softmax/layernorm.
      last.leaf = g.leaves.size();
      g.leaves.push_back(detail::random_leaf({m, n}, rng, false));
    }
    for (const auto& s : steps) g.ops.push_back(s.op);
    g.ops.push_back(terminal);

    auto kink = std::make_shared<double>(1e9);
    g.build = [steps, last, kink](std::vector<Tensor<double>>& l) {
      Tensor<double> x = l[0];
      for (const auto& s : steps) x = detail::apply(s, x, l, *kink);
      if (last.op == "masked_cross_entropy") return masked_cross_entropy(x, last.ids, last.mask);
      auto w = mul(x, l[last.leaf]);
      return last.op == "sum" ? sum(w) : mean(w);
    };
    g.build(g.leaves);
    // Central differences are unreliable within eps of a relu kink.
    if (*kink > 1e-3) return g;
  }
}

}  // namespace metavl::oracles
