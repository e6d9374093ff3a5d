#pragma once

#include <atomic>
#include <cstdint>
#include <iostream>

#include "lusoforge/core/error.hpp"

namespace lusoforge::pretrain {

namespace detail {
inline std::atomic<bool> lr_overrun_warned{false};
}

/// Linear warm-up from 0 to `peak` over [0, warmup], then linear decay to 0 at `total`.
/// Steps past `total` give 0 (one warning per process).
inline double lr_at(std::uint64_t step, std::uint64_t warmup, std::uint64_t total, double peak) {
  if (warmup > total) throw contract_error("warmup_steps must not exceed total_steps");
  if (step > total) {
    if (!detail::lr_overrun_warned.exchange(true)) {
      std::clog << "warning: step " << step << " is past total_steps " << total << "; learning rate is 0\n";
    }
    return 0.0;
  }
  if (step < warmup) return peak * (static_cast<double>(step) / static_cast<double>(warmup));
  if (step == total) return 0.0;
  // ratio first, so the midpoint comes out as exactly peak / 2
  return peak * (static_cast<double>(total - step) / static_cast<double>(total - warmup));
}

}  // namespace lusoforge::pretrain
