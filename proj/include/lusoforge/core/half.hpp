#pragma once

#include <Eigen/Core>

#include "lusoforge/core/parameters.hpp"

namespace lusoforge {

/// Nearest IEEE binary16 value (round-to-nearest-even), returned widened.
template <class T>
T round_to_half(T x) {
  return static_cast<T>(static_cast<float>(Eigen::half(static_cast<float>(x))));
}

/// Emulates half-precision parameter storage: every value is snapped to binary16.
template <class T>
void round_parameters_to_half(ParameterSet<T>& params) {
  for (auto& p : params) {
    for (auto& v : p.value.data()) v = round_to_half(v);
  }
}

}  // namespace lusoforge
