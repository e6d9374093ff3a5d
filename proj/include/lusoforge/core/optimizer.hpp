#pragma once

#include <cmath>
#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "lusoforge/core/parameters.hpp"

namespace lusoforge {

struct AdamConfig {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-6;
  double weight_decay = 0.01;
};

/// First/second moments per parameter plus the step counter.
struct OptimizerState {
  AdamConfig config;
  std::uint64_t step = 0;
  std::map<std::string, std::vector<double>> first_moment;
  std::map<std::string, std::vector<double>> second_moment;
};

/// Adam with decoupled weight decay. Moments are kept in double precision.
/// Decay applies only to parameters flagged `decay` (weight matrices).
template <class T>
class Adam {
 public:
  explicit Adam(AdamConfig config = {}) { state_.config = config; }

  const OptimizerState& state() const noexcept { return state_; }
  OptimizerState& state() noexcept { return state_; }

  /// One update from the gradients currently held by `params`.
  /// Throws numerical_error naming the first parameter with a non-finite gradient;
  /// in that case no parameter is modified.
  void step(ParameterSet<T>& params, double lr) {
    if (!(lr >= 0.0)) throw contract_error("learning rate must be >= 0");
    for (const auto& p : params) {
      if (!p.requires_grad) continue;
      for (std::size_t i = 0; i < p.grad.size(); ++i) {
        if (!std::isfinite(static_cast<double>(p.grad[i]))) {
          throw numerical_error("non-finite gradient in parameter '" + p.name + "' at index " + std::to_string(i));
        }
      }
    }
    const auto& c = state_.config;
    ++state_.step;
    const double t = static_cast<double>(state_.step);
    const double bc1 = 1.0 - std::pow(c.beta1, t);
    const double bc2 = 1.0 - std::pow(c.beta2, t);
    for (auto& p : params) {
      if (!p.requires_grad) continue;
      auto& m = state_.first_moment[p.name];
      auto& v = state_.second_moment[p.name];
      if (m.size() != p.value.size()) {
        m.assign(p.value.size(), 0.0);
        v.assign(p.value.size(), 0.0);
      }
      auto w = p.value.data();
      auto gr = p.grad.data();
      const double wd = p.decay ? c.weight_decay : 0.0;
      for (std::size_t i = 0; i < w.size(); ++i) {
        const double gi = static_cast<double>(gr[i]);
        m[i] = c.beta1 * m[i] + (1.0 - c.beta1) * gi;
        v[i] = c.beta2 * v[i] + (1.0 - c.beta2) * gi * gi;
        const double mhat = m[i] / bc1;
        const double vhat = v[i] / bc2;
        const double wi = static_cast<double>(w[i]);
        w[i] = static_cast<T>(wi - lr * (mhat / (std::sqrt(vhat) + c.eps) + wd * wi));
      }
    }
  }

 private:
  OptimizerState state_;
};

}  // namespace lusoforge
