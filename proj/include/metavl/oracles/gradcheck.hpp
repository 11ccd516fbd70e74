#pragma once

// Central finite-difference oracle. Independent of the backward closures: it
// only evaluates the forward graph.

#include <algorithm>
#include <cmath>
#include <functional>
#include <vector>

#include "metavl/tensor.hpp"

namespace metavl::oracles {

struct GradCheckResult {
  double max_rel_error = 0.0;
  double max_abs_error = 0.0;
  std::size_t checked = 0;
};

// Relative error with a floor on the denominator so gradients that are
// numerically zero compare by absolute difference.
inline double rel_error(double analytic, double numeric, double floor = 1e-4) {
  return std::abs(analytic - numeric) / std::max({std::abs(analytic), std::abs(numeric), floor});
}

inline GradCheckResult grad_check(std::vector<Tensor<double>>& leaves,
                                  const std::function<Tensor<double>(std::vector<Tensor<double>>&)>& build,
                                  double eps = 1e-5, double floor = 1e-4) {
  for (auto& l : leaves) l.zero_grad();
  build(leaves).backward();
  std::vector<std::vector<double>> analytic;
  for (auto& l : leaves) {
    if (l.has_grad()) {
      analytic.emplace_back(l.grad().begin(), l.grad().end());
    } else {
      analytic.emplace_back(l.numel(), 0.0);
    }
  }
  GradCheckResult res;
  NoGradGuard ng;
  for (std::size_t li = 0; li < leaves.size(); ++li) {
    if (!leaves[li].requires_grad()) continue;
    auto data = leaves[li].mutable_data();
    for (std::size_t i = 0; i < data.size(); ++i) {
      const double orig = data[i];
      data[i] = orig + eps;
      const double up = build(leaves).item();
      data[i] = orig - eps;
      const double down = build(leaves).item();
      data[i] = orig;
      const double numeric = (up - down) / (2 * eps);
      res.max_rel_error = std::max(res.max_rel_error, rel_error(analytic[li][i], numeric, floor));
      res.max_abs_error = std::max(res.max_abs_error, std::abs(analytic[li][i] - numeric));
      ++res.checked;
    }
  }
  return res;
}

}  // namespace metavl::oracles
