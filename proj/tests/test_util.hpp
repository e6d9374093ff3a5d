#pragma once

// Test-only oracles. Nothing here calls into the code paths it is used to check,
// except the finite-difference driver, which only evaluates the forward pass.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "lusoforge/core/graph.hpp"
#include "lusoforge/core/parameters.hpp"
#include "lusoforge/core/random.hpp"

namespace lusoforge::testing {

inline std::vector<double> naive_matmul(const std::vector<double>& a, const std::vector<double>& b, std::size_t m,
                                        std::size_t k, std::size_t n) {
  std::vector<double> c(m * n, 0.0);
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j)
      for (std::size_t p = 0; p < k; ++p) c[i * n + j] += a[i * k + p] * b[p * n + j];
  return c;
}

template <class T>
Tensor<T> random_tensor(Shape shape, Rng& rng, double stddev = 1.0) {
  Tensor<T> t(std::move(shape));
  for (auto& v : t.data()) v = static_cast<T>(rng.normal(0.0, stddev));
  return t;
}

struct GradCheckReport {
  std::size_t checked = 0;
  std::size_t failures = 0;
  std::size_t tensors = 0;
  double worst_excess = 0.0;  // max of |a-n| - (atol + rtol*max(|a|,|n|))
  std::string worst;
};

/// Central finite differences against the analytic gradient for every scalar of
/// every parameter. Pass criterion: |a - n| <= atol + rtol * max(|a|, |n|).
template <class T>
GradCheckReport finite_difference_check(ParameterSet<T>& params,
                                        const std::function<ad::Var<T>(ad::Graph<T>&)>& loss_fn, double h = 1e-3,
                                        double rtol = 1e-2, double atol = 1e-6) {
  params.zero_grad();
  {
    ad::Graph<T> g;
    auto loss = loss_fn(g);
    g.backward(loss);
  }
  auto eval = [&] {
    ad::Graph<T> g;
    g.set_grad_enabled(false);
    return static_cast<double>(loss_fn(g).value().item());
  };
  GradCheckReport report;
  for (auto& p : params) {
    for (std::size_t i = 0; i < p.value.size(); ++i) {
      const T orig = p.value[i];
      p.value[i] = orig + static_cast<T>(h);
      const double up = eval();
      p.value[i] = orig - static_cast<T>(h);
      const double down = eval();
      p.value[i] = orig;
      const double numeric = (up - down) / (2.0 * h);
      const double analytic = static_cast<double>(p.grad[i]);
      const double allowed = atol + rtol * std::max(std::abs(analytic), std::abs(numeric));
      const double excess = std::abs(analytic - numeric) - allowed;
      ++report.checked;
      if (excess > 0.0 || !std::isfinite(numeric) || !std::isfinite(analytic)) {
        ++report.failures;
        if (excess > report.worst_excess || report.worst.empty()) {
          report.worst_excess = excess;
          report.worst = p.name + "[" + std::to_string(i) + "] analytic=" + std::to_string(analytic) +
                         " numeric=" + std::to_string(numeric);
        }
      }
    }
  }
  return report;
}

/// Cheaper check for models too big for the exhaustive one. Per tensor: one
/// central difference along a random direction spanning every scalar, checked
/// against g.d, plus `per_tensor` single coordinates (half the largest-|g|
/// ones, half uniform). Tensors with at most `per_tensor` scalars are checked
/// exhaustively.
template <class T>
GradCheckReport sampled_gradient_check(ParameterSet<T>& params,
                                       const std::function<ad::Var<T>(ad::Graph<T>&)>& loss_fn,
                                       std::size_t per_tensor, std::uint64_t seed, double h = 1e-4,
                                       double rtol = 1e-2, double atol = 1e-6) {
  params.zero_grad();
  {
    ad::Graph<T> g;
    auto loss = loss_fn(g);
    g.backward(loss);
  }
  auto eval = [&] {
    ad::Graph<T> g;
    g.set_grad_enabled(false);
    return static_cast<double>(loss_fn(g).value().item());
  };
  GradCheckReport report;
  auto judge = [&](const std::string& what, double analytic, double numeric) {
    const double allowed = atol + rtol * std::max(std::abs(analytic), std::abs(numeric));
    const double excess = std::abs(analytic - numeric) - allowed;
    ++report.checked;
    if (excess > 0.0 || !std::isfinite(numeric) || !std::isfinite(analytic)) {
      ++report.failures;
      if (excess > report.worst_excess || report.worst.empty()) {
        report.worst_excess = excess;
        report.worst = what + " analytic=" + std::to_string(analytic) + " numeric=" + std::to_string(numeric);
      }
    }
  };
  Rng rng(seed);
  for (auto& p : params) {
    const std::size_t n = p.value.size();
    std::vector<std::size_t> picks;
    if (n <= per_tensor) {
      for (std::size_t i = 0; i < n; ++i) picks.push_back(i);
    } else {
      std::vector<std::size_t> order(n);
      for (std::size_t i = 0; i < n; ++i) order[i] = i;
      std::partial_sort(order.begin(), order.begin() + per_tensor / 2, order.end(), [&](std::size_t a, std::size_t b) {
        return std::abs(static_cast<double>(p.grad[a])) > std::abs(static_cast<double>(p.grad[b]));
      });
      std::vector<bool> taken(n, false);
      for (std::size_t i = 0; i < per_tensor / 2; ++i) {
        picks.push_back(order[i]);
        taken[order[i]] = true;
      }
      while (picks.size() < per_tensor) {
        const auto i = static_cast<std::size_t>(rng.below(n));
        if (!taken[i]) {
          taken[i] = true;
          picks.push_back(i);
        }
      }
    }
    for (std::size_t i : picks) {
      const T orig = p.value[i];
      p.value[i] = orig + static_cast<T>(h);
      const double up = eval();
      p.value[i] = orig - static_cast<T>(h);
      const double down = eval();
      p.value[i] = orig;
      judge(p.name + "[" + std::to_string(i) + "]", static_cast<double>(p.grad[i]), (up - down) / (2.0 * h));
    }

    std::vector<double> dir(n);
    double norm = 0.0;
    for (auto& d : dir) {
      d = rng.normal();
      norm += d * d;
    }
    norm = std::sqrt(norm);
    double analytic = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
      dir[i] /= norm;
      analytic += dir[i] * static_cast<double>(p.grad[i]);
    }
    const auto saved = p.value;
    for (std::size_t i = 0; i < n; ++i) p.value[i] = static_cast<T>(static_cast<double>(saved[i]) + h * dir[i]);
    const double up = eval();
    for (std::size_t i = 0; i < n; ++i) p.value[i] = static_cast<T>(static_cast<double>(saved[i]) - h * dir[i]);
    const double down = eval();
    p.value = saved;
    judge(p.name + " (direction)", analytic, (up - down) / (2.0 * h));
    ++report.tensors;
  }
  return report;
}

/// ||a - b|| / ||b|| over all parameter scalars together.
template <class T>
double relative_difference(const ParameterSet<T>& a, const ParameterSet<T>& b) {
  double num = 0.0, den = 0.0;
  for (const auto& p : b) {
    const auto& q = a.at(p.name);
    for (std::size_t i = 0; i < p.value.size(); ++i) {
      const double d = static_cast<double>(q.value[i]) - static_cast<double>(p.value[i]);
      num += d * d;
      den += static_cast<double>(p.value[i]) * static_cast<double>(p.value[i]);
    }
  }
  return std::sqrt(num) / std::sqrt(den);
}

/// `n` random sequences of regular ids wrapped in CLS/SEP, content lengths in
/// [min_len, max_len]. Ids 0..4 are the special tokens.
inline std::vector<std::vector<std::int32_t>> synthetic_sequences(std::size_t n, std::size_t vocab, std::size_t min_len,
                                                                   std::size_t max_len, std::uint64_t seed) {
  Rng rng(seed);
  std::vector<std::vector<std::int32_t>> out(n);
  for (auto& s : out) {
    const auto len = min_len + rng.below(max_len - min_len + 1);
    s.push_back(2);
    for (std::size_t i = 0; i < len; ++i) s.push_back(static_cast<std::int32_t>(5 + rng.below(vocab - 5)));
    s.push_back(3);
  }
  return out;
}

}  // namespace lusoforge::testing
