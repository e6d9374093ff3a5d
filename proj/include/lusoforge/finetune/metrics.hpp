#pragma once

#include <cmath>
#include <cstdint>
#include <span>
#include <string>

#include "lusoforge/core/error.hpp"

namespace lusoforge::finetune {

/// Product-moment correlation, two-pass in double.
inline double pearson(std::span<const double> pred, std::span<const double> gold) {
  if (pred.size() != gold.size()) throw contract_error("pearson: length mismatch");
  if (pred.size() < 2) throw contract_error("pearson needs at least two points");
  const double n = static_cast<double>(pred.size());
  double mp = 0.0, mg = 0.0;
  for (std::size_t i = 0; i < pred.size(); ++i) {
    mp += pred[i];
    mg += gold[i];
  }
  mp /= n;
  mg /= n;
  double sxy = 0.0, sxx = 0.0, syy = 0.0;
  for (std::size_t i = 0; i < pred.size(); ++i) {
    const double dx = pred[i] - mp, dy = gold[i] - mg;
    sxy += dx * dy;
    sxx += dx * dx;
    syy += dy * dy;
  }
  if (sxx == 0.0 || syy == 0.0) throw numerical_error("undefined correlation: constant input");
  return sxy / std::sqrt(sxx * syy);
}

inline double accuracy(std::span<const std::int64_t> pred, std::span<const std::int64_t> gold) {
  if (pred.size() != gold.size()) throw contract_error("accuracy: length mismatch");
  if (pred.empty()) throw contract_error("accuracy of an empty set");
  std::size_t hits = 0;
  for (std::size_t i = 0; i < pred.size(); ++i) hits += pred[i] == gold[i];
  return static_cast<double>(hits) / static_cast<double>(pred.size());
}

/// F1 of `positive`; 0 when precision + recall is 0.
inline double f1_binary(std::span<const std::int64_t> pred, std::span<const std::int64_t> gold,
                        std::int64_t positive = 1) {
  if (pred.size() != gold.size()) throw contract_error("f1: length mismatch");
  if (pred.empty()) throw contract_error("f1 of an empty set");
  double tp = 0, fp = 0, fn = 0;
  for (std::size_t i = 0; i < pred.size(); ++i) {
    const bool p = pred[i] == positive, g = gold[i] == positive;
    tp += p && g;
    fp += p && !g;
    fn += !p && g;
  }
  const double precision = tp + fp > 0 ? tp / (tp + fp) : 0.0;
  const double recall = tp + fn > 0 ? tp / (tp + fn) : 0.0;
  if (precision + recall == 0.0) return 0.0;
  return 2.0 * precision * recall / (precision + recall);
}

}  // namespace lusoforge::finetune
