#pragma once

#include <algorithm>
#include <cstdio>
#include <string>

#include "lusoforge/core/error.hpp"
#include "lusoforge/pretrain/trainer.hpp"

namespace lusoforge::pretrain {

inline std::string loss_curve_csv(const LossLog& log) {
  if (log.empty()) throw data_error("empty loss log");
  std::string out = "step,loss,ema_loss\n";
  char buf[96];
  for (const auto& r : log.records()) {
    std::snprintf(buf, sizeof buf, "%zu,%.17g,%.17g\n", r.step, r.loss, r.ema);
    out += buf;
  }
  return out;
}

/// Monochrome line chart of the EMA series: one <path> with absolute M/L commands.
inline std::string loss_curve_svg(const LossLog& log, int width = 640, int height = 400) {
  if (log.empty()) throw data_error("empty loss log");
  const auto& rs = log.records();
  const double pad = 48.0;
  const double x0 = static_cast<double>(rs.front().step), x1 = static_cast<double>(rs.back().step);
  double lo = rs.front().ema, hi = rs.front().ema;
  for (const auto& r : rs) {
    lo = std::min(lo, r.ema);
    hi = std::max(hi, r.ema);
  }
  if (hi == lo) hi = lo + 1.0;
  const double w = width - 2 * pad, h = height - 2 * pad;
  auto px = [&](double step) { return pad + (x1 > x0 ? (step - x0) / (x1 - x0) : 0.0) * w; };
  auto py = [&](double v) { return pad + (hi - v) / (hi - lo) * h; };

  char buf[256];
  std::string out;
  std::snprintf(buf, sizeof buf,
                "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"%d\" height=\"%d\" viewBox=\"0 0 %d %d\">\n",
                width, height, width, height);
  out += buf;
  out += "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
  std::snprintf(buf, sizeof buf,
                "<path d=\"M %.2f %.2f L %.2f %.2f L %.2f %.2f\" fill=\"none\" stroke=\"black\" stroke-width=\"1\"/>\n",
                pad, pad, pad, pad + h, pad + w, pad + h);
  out += buf;
  std::snprintf(buf, sizeof buf,
                "<text x=\"%.2f\" y=\"%.2f\" font-size=\"11\" text-anchor=\"end\">%.4g</text>\n"
                "<text x=\"%.2f\" y=\"%.2f\" font-size=\"11\" text-anchor=\"end\">%.4g</text>\n",
                pad - 4, pad + 4, hi, pad - 4, pad + h, lo);
  out += buf;
  std::snprintf(buf, sizeof buf,
                "<text x=\"%.2f\" y=\"%.2f\" font-size=\"11\">step %zu</text>\n"
                "<text x=\"%.2f\" y=\"%.2f\" font-size=\"11\" text-anchor=\"end\">step %zu</text>\n",
                pad, pad + h + 16, rs.front().step, pad + w, pad + h + 16, rs.back().step);
  out += buf;
  out += "<path class=\"ema\" d=\"";
  for (std::size_t i = 0; i < rs.size(); ++i) {
    std::snprintf(buf, sizeof buf, "%s%.2f %.2f", i == 0 ? "M " : " L ", px(static_cast<double>(rs[i].step)),
                  py(rs[i].ema));
    out += buf;
  }
  out += "\" fill=\"none\" stroke=\"black\" stroke-width=\"1.5\"/>\n</svg>\n";
  return out;
}

}  // namespace lusoforge::pretrain
