#pragma once

#include <cmath>
#include <map>
#include <string>
#include <utility>
#include <vector>

#include "metavl/errors.hpp"
#include "metavl/tensor.hpp"

namespace metavl {

template <class T>
using NamedTensor = std::pair<std::string, Tensor<T>>;

template <class T>
struct ParameterGroup {
  std::string name;
  std::vector<NamedTensor<T>> parameters;
  double learning_rate = 1e-3;
  bool frozen = false;
};

struct AdamOptions {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  // Global L2 norm clip over all trainable grads; 0 disables.
  double clip_norm = 0.0;
};

// Bias-corrected Adam with named parameter groups. Frozen groups are skipped
// entirely: their values and moments never change.
template <class T>
class Adam {
 public:
  struct Moments {
    std::vector<T> m;
    std::vector<T> v;
  };

  explicit Adam(AdamOptions opts = {}) : opts_(opts) {}

  void add_group(ParameterGroup<T> group) {
    for (const auto& g : groups_) {
      if (g.name == group.name) throw ConfigError("duplicate parameter group '" + group.name + "'");
    }
    if (!(group.learning_rate > 0.0)) {
      throw ConfigError("parameter group '" + group.name + "' needs a positive learning rate");
    }
    for (auto& [name, t] : group.parameters) {
      if (moments_.count(name)) throw ConfigError("parameter '" + name + "' registered twice");
      moments_[name] = Moments{std::vector<T>(t.numel(), T{0}), std::vector<T>(t.numel(), T{0})};
    }
    groups_.push_back(std::move(group));
  }

  const std::vector<ParameterGroup<T>>& groups() const { return groups_; }
  const ParameterGroup<T>& group(const std::string& name) const {
    for (const auto& g : groups_)
      if (g.name == name) return g;
    throw ConfigError("no parameter group '" + name + "'");
  }
  bool has_group(const std::string& name) const {
    for (const auto& g : groups_)
      if (g.name == name) return true;
    return false;
  }

  std::size_t step_count() const { return step_; }
  void set_step_count(std::size_t s) { step_ = s; }
  std::map<std::string, Moments>& moments() { return moments_; }
  const std::map<std::string, Moments>& moments() const { return moments_; }
  const AdamOptions& options() const { return opts_; }

  void zero_grad() {
    for (auto& g : groups_)
      for (auto& [name, t] : g.parameters) t.zero_grad();
  }

  // Returns the pre-clip global gradient norm of the trainable parameters.
  double step() {
    double sq = 0.0;
    for (auto& g : groups_) {
      if (g.frozen) continue;
      for (auto& [name, t] : g.parameters) {
        if (!t.has_grad()) {
          throw Error("adam step: parameter '" + name + "' in group '" + g.name + "' has no gradient");
        }
        for (T x : t.grad()) sq += double(x) * double(x);
      }
    }
    const double norm = std::sqrt(sq);
    double factor = 1.0;
    if (opts_.clip_norm > 0.0 && norm > opts_.clip_norm) factor = opts_.clip_norm / norm;

    ++step_;
    const double bc1 = 1.0 - std::pow(opts_.beta1, double(step_));
    const double bc2 = 1.0 - std::pow(opts_.beta2, double(step_));
    const T b1 = T(opts_.beta1), b2 = T(opts_.beta2);
    for (auto& g : groups_) {
      if (g.frozen) continue;
      const T lr = T(g.learning_rate);
      for (auto& [name, t] : g.parameters) {
        auto& mom = moments_.at(name);
        auto p = t.mutable_data();
        auto gr = t.grad();
        for (std::size_t i = 0; i < p.size(); ++i) {
          const T gi = gr[i] * T(factor);
          mom.m[i] = b1 * mom.m[i] + (T(1) - b1) * gi;
          mom.v[i] = b2 * mom.v[i] + (T(1) - b2) * gi * gi;
          const T mhat = mom.m[i] / T(bc1);
          const T vhat = mom.v[i] / T(bc2);
          p[i] -= lr * mhat / (std::sqrt(vhat) + T(opts_.eps));
        }
      }
    }
    return norm;
  }

 private:
  AdamOptions opts_;
  std::vector<ParameterGroup<T>> groups_;
  std::map<std::string, Moments> moments_;
  std::size_t step_ = 0;
};

}  // namespace metavl
