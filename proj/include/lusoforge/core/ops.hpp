#pragma once

// Closed operator set of the autodiff engine. Everything else (linear layers,
// sums, squared error, gathers) is composed from these.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <numbers>
#include <optional>
#include <span>
#include <memory>
#include <vector>

#include "lusoforge/core/graph.hpp"
#include "lusoforge/core/kernels.hpp"
#include "lusoforge/core/random.hpp"

namespace lusoforge::ad {

namespace detail {

template <class T>
Graph<T>& same_graph(const Var<T>& a, const Var<T>& b) {
  if (&a.graph() != &b.graph()) throw contract_error("operands belong to different graphs");
  return a.graph();
}

inline std::size_t normalize_axis(int axis, std::size_t rank) {
  const auto r = static_cast<int>(rank);
  if (axis < 0) axis += r;
  if (axis < 0 || axis >= r) throw shape_error("axis " + std::to_string(axis) + " out of range for rank " + std::to_string(rank));
  return static_cast<std::size_t>(axis);
}

inline Shape broadcast_shape(const Shape& a, const Shape& b) {
  const std::size_t r = std::max(a.size(), b.size());
  Shape out(r);
  for (std::size_t i = 0; i < r; ++i) {
    const std::size_t da = i < r - a.size() ? 1 : a[i - (r - a.size())];
    const std::size_t db = i < r - b.size() ? 1 : b[i - (r - b.size())];
    if (da != db && da != 1 && db != 1) {
      throw shape_error("cannot broadcast shapes " + to_string(a) + " and " + to_string(b));
    }
    out[i] = std::max(da, db);
  }
  return out;
}

// Strides of `in` expressed over the output index space (0 on broadcast axes).
inline std::vector<std::size_t> broadcast_strides(const Shape& in, const Shape& out) {
  std::vector<std::size_t> strides(out.size(), 0);
  std::size_t s = 1;
  for (std::size_t i = in.size(); i-- > 0;) {
    const std::size_t o = i + (out.size() - in.size());
    strides[o] = in[i] == 1 ? 0 : s;
    s *= in[i];
  }
  return strides;
}

// Calls f(out_index, a_index, b_index) for every output element.
template <class F>
void for_each_broadcast(const Shape& out, const std::vector<std::size_t>& sa,
                        const std::vector<std::size_t>& sb, F&& f) {
  const std::size_t n = numel(out);
  const std::size_t r = out.size();
  if (n == 0) return;
  if (r == 0) {
    f(0, 0, 0);
    return;
  }
  // innermost axis runs as a flat loop
  const std::size_t inner = out[r - 1], da = sa[r - 1], db = sb[r - 1];
  std::vector<std::size_t> idx(r, 0);
  std::size_t ia = 0, ib = 0;
  for (std::size_t i = 0; i < n; i += inner) {
    for (std::size_t k = 0; k < inner; ++k) f(i + k, ia + k * da, ib + k * db);
    for (std::size_t d = r - 1; d-- > 0;) {
      if (++idx[d] < out[d]) {
        ia += sa[d];
        ib += sb[d];
        break;
      }
      ia -= sa[d] * (out[d] - 1);
      ib -= sb[d] * (out[d] - 1);
      idx[d] = 0;
    }
  }
}

}  // namespace detail

enum class Transpose : bool { no = false, yes = true };

/// Batched matrix product over the two trailing axes. The batch axes of b must
/// equal a trailing run of a's batch axes (b is broadcast over the rest).
template <class T>
Var<T> matmul(Var<T> a, Var<T> b, Transpose ta = Transpose::no, Transpose tb = Transpose::no) {
  auto& g = detail::same_graph(a, b);
  const Shape& sa = a.shape();
  const Shape& sb = b.shape();
  auto fail = [&] {
    throw shape_error("matmul dimension mismatch: " + to_string(sa) + (ta == Transpose::yes ? "^T" : "") +
                      " x " + to_string(sb) + (tb == Transpose::yes ? "^T" : ""));
  };
  if (sa.size() < 2 || sb.size() < 2 || sb.size() > sa.size()) fail();
  const bool tra = ta == Transpose::yes;
  const bool trb = tb == Transpose::yes;
  const std::size_t m = tra ? sa[sa.size() - 1] : sa[sa.size() - 2];
  const std::size_t k = tra ? sa[sa.size() - 2] : sa[sa.size() - 1];
  const std::size_t kb = trb ? sb[sb.size() - 1] : sb[sb.size() - 2];
  const std::size_t n = trb ? sb[sb.size() - 2] : sb[sb.size() - 1];
  if (k != kb) fail();
  for (std::size_t i = 0; i + 2 < sb.size(); ++i) {
    if (sb[i] != sa[sa.size() - sb.size() + i]) fail();
  }
  const std::size_t batch_a = numel(sa) / (m * k == 0 ? 1 : m * k);
  const std::size_t batch_b = numel(sb) / (kb * n == 0 ? 1 : kb * n);
  Shape out_shape(sa.begin(), sa.end() - 2);
  out_shape.push_back(m);
  out_shape.push_back(n);
  Tensor<T> out(out_shape);
  const T* pa = a.value().data().data();
  const T* pb = b.value().data().data();
  T* pc = out.data().data();
  for (std::size_t i = 0; i < batch_a; ++i) {
    kernels::gemm(tra, trb, m, n, k, pa + i * m * k, pb + (i % batch_b) * k * n, pc + i * m * n, false);
  }
  const auto ia = a.id(), ib = b.id();
  return g.record(std::move(out), {a, b}, [=](Graph<T>& gr, const std::vector<T>& dc) {
    const T* A = gr.value(ia).data().data();
    const T* B = gr.value(ib).data().data();
    const bool need_a = gr.requires_grad(ia), need_b = gr.requires_grad(ib);
    T* dA = need_a ? gr.grad(ia).data() : nullptr;
    T* dB = need_b ? gr.grad(ib).data() : nullptr;
    for (std::size_t i = 0; i < batch_a; ++i) {
      const T* dC = dc.data() + i * m * n;
      const T* Bi = B + (i % batch_b) * k * n;
      if (need_a) {
        if (!tra) {
          kernels::gemm(false, !trb, m, k, n, dC, Bi, dA + i * m * k, true);
        } else {
          kernels::gemm(trb, true, k, m, n, Bi, dC, dA + i * m * k, true);
        }
      }
      if (need_b) {
        T* dBi = dB + (i % batch_b) * k * n;
        if (!trb) {
          kernels::gemm(!tra, false, k, n, m, A + i * m * k, dC, dBi, true);
        } else {
          kernels::gemm(true, tra, n, k, m, dC, A + i * m * k, dBi, true);
        }
      }
    }
  });
}

/// Elementwise sum with NumPy broadcasting.
template <class T>
Var<T> add(Var<T> a, Var<T> b) {
  auto& g = detail::same_graph(a, b);
  const Shape out_shape = detail::broadcast_shape(a.shape(), b.shape());
  Tensor<T> out(out_shape);
  auto av = a.value().data();
  auto bv = b.value().data();
  auto ov = out.data();
  const bool same = a.shape() == b.shape();
  // b broadcast over leading axes of a (bias add).
  const bool suffix = !same && a.shape() == out_shape && bv.size() > 0 &&
                      std::equal(b.shape().begin(), b.shape().end(), a.shape().end() - static_cast<std::ptrdiff_t>(b.shape().size())) &&
                      b.shape().size() <= a.shape().size();
  std::vector<std::size_t> sa, sb;
  if (same) {
    for (std::size_t i = 0; i < ov.size(); ++i) ov[i] = av[i] + bv[i];
  } else if (suffix) {
    const std::size_t nb = bv.size();
    for (std::size_t r = 0; r < ov.size(); r += nb) {
      for (std::size_t k = 0; k < nb; ++k) ov[r + k] = av[r + k] + bv[k];
    }
  } else {
    sa = detail::broadcast_strides(a.shape(), out_shape);
    sb = detail::broadcast_strides(b.shape(), out_shape);
    detail::for_each_broadcast(out_shape, sa, sb, [&](std::size_t i, std::size_t x, std::size_t y) { ov[i] = av[x] + bv[y]; });
  }
  const auto ia = a.id(), ib = b.id();
  return g.record(std::move(out), {a, b}, [=](Graph<T>& gr, const std::vector<T>& dy) {
    const bool need_a = gr.requires_grad(ia), need_b = gr.requires_grad(ib);
    if (same || suffix) {
      if (need_a) {
        auto& ga = gr.grad(ia);
        for (std::size_t i = 0; i < dy.size(); ++i) ga[i] += dy[i];
      }
      if (need_b) {
        auto& gb = gr.grad(ib);
        const std::size_t nb = gb.size();
        for (std::size_t r = 0; r < dy.size(); r += nb) {
          for (std::size_t k = 0; k < nb; ++k) gb[k] += dy[r + k];
        }
      }
      return;
    }
    T* ga = need_a ? gr.grad(ia).data() : nullptr;
    T* gb = need_b ? gr.grad(ib).data() : nullptr;
    detail::for_each_broadcast(out_shape, sa, sb, [&](std::size_t i, std::size_t x, std::size_t y) {
      if (ga) ga[x] += dy[i];
      if (gb) gb[y] += dy[i];
    });
  });
}

/// Multiplies every element by a constant.
template <class T>
Var<T> scale(Var<T> a, T factor) {
  auto& g = a.graph();
  Tensor<T> out = a.value();
  for (auto& v : out.data()) v *= factor;
  const auto ia = a.id();
  return g.record(std::move(out), {a}, [=](Graph<T>& gr, const std::vector<T>& dy) {
    auto& ga = gr.grad(ia);
    for (std::size_t i = 0; i < dy.size(); ++i) ga[i] += factor * dy[i];
  });
}

/// Softmax along `axis`, with max subtraction. NaN inputs propagate NaN.
template <class T>
Var<T> softmax(Var<T> x, int axis = -1) {
  auto& g = x.graph();
  const Shape& s = x.shape();
  const std::size_t ax = detail::normalize_axis(axis, s.size());
  const std::size_t n = s[ax];
  if (n == 0) throw shape_error("softmax over empty axis of shape " + to_string(s));
  std::size_t outer = 1, inner = 1;
  for (std::size_t i = 0; i < ax; ++i) outer *= s[i];
  for (std::size_t i = ax + 1; i < s.size(); ++i) inner *= s[i];
  Tensor<T> out(s);
  auto xv = x.value().data();
  auto yv = out.data();
  for (std::size_t o = 0; o < outer; ++o) {
    for (std::size_t in = 0; in < inner; ++in) {
      const std::size_t base = o * n * inner + in;
      T mx = -std::numeric_limits<T>::infinity();
      for (std::size_t j = 0; j < n; ++j) mx = std::max(mx, xv[base + j * inner]);
      // A NaN element is skipped by max but still poisons exp/sum below.
      T sum = 0;
      for (std::size_t j = 0; j < n; ++j) {
        const T e = std::exp(xv[base + j * inner] - mx);
        yv[base + j * inner] = e;
        sum += e;
      }
      for (std::size_t j = 0; j < n; ++j) yv[base + j * inner] /= sum;
    }
  }
  const auto ix = x.id();
  Tensor<T> y_saved = out;
  return g.record(std::move(out), {x}, [=, y = std::move(y_saved)](Graph<T>& gr, const std::vector<T>& dy) {
    auto& gx = gr.grad(ix);
    auto yd = y.data();
    for (std::size_t o = 0; o < outer; ++o) {
      for (std::size_t in = 0; in < inner; ++in) {
        const std::size_t base = o * n * inner + in;
        T dot = 0;
        for (std::size_t j = 0; j < n; ++j) dot += dy[base + j * inner] * yd[base + j * inner];
        for (std::size_t j = 0; j < n; ++j) {
          const std::size_t p = base + j * inner;
          gx[p] += yd[p] * (dy[p] - dot);
        }
      }
    }
  });
}

/// Layer normalisation over the last axis.
template <class T>
Var<T> layer_norm(Var<T> x, Var<T> gain, Var<T> bias, T eps) {
  auto& g = detail::same_graph(x, gain);
  const Shape& s = x.shape();
  if (s.empty()) throw shape_error("layer_norm on a scalar");
  const std::size_t h = s.back();
  if (gain.shape() != Shape{h} || bias.shape() != Shape{h}) {
    throw shape_error("layer_norm gain/bias " + to_string(gain.shape()) + "/" + to_string(bias.shape()) +
                      " do not match input " + to_string(s));
  }
  const std::size_t rows = h ? x.size() / h : 0;
  Tensor<T> out(s);
  std::vector<T> xhat(x.size());
  std::vector<T> rstd(rows);
  auto xv = x.value().data();
  auto gv = gain.value().data();
  auto bv = bias.value().data();
  auto yv = out.data();
  for (std::size_t r = 0; r < rows; ++r) {
    const T* xr = xv.data() + r * h;
    T mean = 0;
    for (std::size_t j = 0; j < h; ++j) mean += xr[j];
    mean /= static_cast<T>(h);
    T var = 0;
    for (std::size_t j = 0; j < h; ++j) var += (xr[j] - mean) * (xr[j] - mean);
    var /= static_cast<T>(h);
    const T rs = T{1} / std::sqrt(var + eps);
    rstd[r] = rs;
    for (std::size_t j = 0; j < h; ++j) {
      const T xh = (xr[j] - mean) * rs;
      xhat[r * h + j] = xh;
      yv[r * h + j] = xh * gv[j] + bv[j];
    }
  }
  const auto ix = x.id(), ig = gain.id(), ib = bias.id();
  return g.record(std::move(out), {x, gain, bias},
                  [=, xhat = std::move(xhat), rstd = std::move(rstd)](Graph<T>& gr, const std::vector<T>& dy) {
                    const auto gvals = gr.value(ig).data();
                    if (gr.requires_grad(ig) || gr.requires_grad(ib)) {
                      T* dg = gr.requires_grad(ig) ? gr.grad(ig).data() : nullptr;
                      T* db = gr.requires_grad(ib) ? gr.grad(ib).data() : nullptr;
                      for (std::size_t r = 0; r < rows; ++r) {
                        for (std::size_t j = 0; j < h; ++j) {
                          if (dg) dg[j] += dy[r * h + j] * xhat[r * h + j];
                          if (db) db[j] += dy[r * h + j];
                        }
                      }
                    }
                    if (!gr.requires_grad(ix)) return;
                    auto& dx = gr.grad(ix);
                    std::vector<T> dxh(h);
                    for (std::size_t r = 0; r < rows; ++r) {
                      T m1 = 0, m2 = 0;
                      for (std::size_t j = 0; j < h; ++j) {
                        dxh[j] = dy[r * h + j] * gvals[j];
                        m1 += dxh[j];
                        m2 += dxh[j] * xhat[r * h + j];
                      }
                      m1 /= static_cast<T>(h);
                      m2 /= static_cast<T>(h);
                      for (std::size_t j = 0; j < h; ++j) {
                        dx[r * h + j] += rstd[r] * (dxh[j] - m1 - xhat[r * h + j] * m2);
                      }
                    }
                  });
}

/// Exact (erf-based) GELU.
template <class T>
Var<T> gelu(Var<T> x) {
  auto& g = x.graph();
  Tensor<T> out(x.shape());
  auto xv = x.value().data();
  auto yv = out.data();
  constexpr T inv_sqrt2 = static_cast<T>(0.70710678118654752440);
  auto cdf = std::make_shared<std::vector<T>>(xv.size());
  for (std::size_t i = 0; i < xv.size(); ++i) {
    (*cdf)[i] = T{0.5} * (T{1} + std::erf(xv[i] * inv_sqrt2));
    yv[i] = xv[i] * (*cdf)[i];
  }
  const auto ix = x.id();
  return g.record(std::move(out), {x}, [=](Graph<T>& gr, const std::vector<T>& dy) {
    constexpr T inv_sqrt_2pi = static_cast<T>(0.39894228040143267794);
    const auto xs = gr.value(ix).data();
    auto& gx = gr.grad(ix);
    const auto& c = *cdf;
    for (std::size_t i = 0; i < dy.size(); ++i) {
      const T v = xs[i];
      const T pdf = inv_sqrt_2pi * std::exp(T{-0.5} * v * v);
      gx[i] += dy[i] * (c[i] + v * pdf);
    }
  });
}

/// Row gather: output shape = ids_shape + [table.cols]. Also serves as the
/// generic gather primitive when `table` is a reshaped [n, 1] view.
template <class T>
Var<T> embedding(Var<T> table, std::span<const std::int64_t> ids, const Shape& ids_shape) {
  auto& g = table.graph();
  if (table.shape().size() != 2) throw shape_error("embedding table must be 2-D, got " + to_string(table.shape()));
  if (numel(ids_shape) != ids.size()) throw shape_error("embedding ids do not match shape " + to_string(ids_shape));
  const std::size_t rows = table.shape()[0];
  const std::size_t d = table.shape()[1];
  Shape out_shape = ids_shape;
  out_shape.push_back(d);
  Tensor<T> out(out_shape);
  auto tv = table.value().data();
  auto ov = out.data();
  for (std::size_t i = 0; i < ids.size(); ++i) {
    if (ids[i] < 0 || static_cast<std::size_t>(ids[i]) >= rows) {
      throw contract_error("embedding id " + std::to_string(ids[i]) + " outside table of " + std::to_string(rows) + " rows");
    }
    std::copy_n(tv.data() + static_cast<std::size_t>(ids[i]) * d, d, ov.data() + i * d);
  }
  const auto it = table.id();
  std::vector<std::int64_t> saved(ids.begin(), ids.end());
  return g.record(std::move(out), {table}, [=, saved = std::move(saved)](Graph<T>& gr, const std::vector<T>& dy) {
    T* gt = gr.grad(it).data();
    for (std::size_t i = 0; i < saved.size(); ++i) {
      T* row = gt + static_cast<std::size_t>(saved[i]) * d;
      const T* src = dy.data() + i * d;
      for (std::size_t j = 0; j < d; ++j) row[j] += src[j];
    }
  });
}

/// Same-padded 1-D convolution over the sequence axis.
/// x: [batch, seq, in], weight: [kernel, in, out], bias: [out].
/// Positions with valid == 0 read as zero padding.
template <class T>
Var<T> conv1d(Var<T> x, Var<T> weight, Var<T> bias, std::span<const std::uint8_t> valid = {}) {
  auto& g = detail::same_graph(x, weight);
  const Shape& xs = x.shape();
  const Shape& ws = weight.shape();
  if (xs.size() != 3 || ws.size() != 3 || ws[1] != xs[2] || bias.shape() != Shape{ws[2]} || ws[0] % 2 == 0) {
    throw shape_error("conv1d shapes: input " + to_string(xs) + ", weight " + to_string(ws) + ", bias " +
                      to_string(bias.shape()));
  }
  const std::size_t B = xs[0], S = xs[1], cin = xs[2], K = ws[0], cout = ws[2];
  const std::ptrdiff_t half = static_cast<std::ptrdiff_t>(K / 2);
  if (!valid.empty() && valid.size() != B * S) throw shape_error("conv1d mask does not match input " + to_string(xs));
  std::vector<T> xm(x.value().data().begin(), x.value().data().end());
  std::vector<std::uint8_t> mask(valid.begin(), valid.end());
  if (!mask.empty()) {
    for (std::size_t p = 0; p < B * S; ++p) {
      if (!mask[p]) std::fill_n(xm.data() + p * cin, cin, T{});
    }
  }
  Tensor<T> out(Shape{B, S, cout});
  auto ov = out.data();
  auto bv = bias.value().data();
  for (std::size_t p = 0; p < B * S; ++p) std::copy(bv.begin(), bv.end(), ov.begin() + static_cast<std::ptrdiff_t>(p * cout));
  const T* wv = weight.value().data().data();
  // For each tap, out rows [lo, hi) read input rows shifted by (t - half).
  auto tap_range = [S, half](std::size_t t, std::size_t& lo, std::size_t& hi) {
    const std::ptrdiff_t shift = static_cast<std::ptrdiff_t>(t) - half;
    lo = static_cast<std::size_t>(std::max<std::ptrdiff_t>(0, -shift));
    hi = static_cast<std::size_t>(std::min<std::ptrdiff_t>(static_cast<std::ptrdiff_t>(S), static_cast<std::ptrdiff_t>(S) - shift));
  };
  for (std::size_t b = 0; b < B; ++b) {
    for (std::size_t t = 0; t < K; ++t) {
      std::size_t lo, hi;
      tap_range(t, lo, hi);
      if (lo >= hi) continue;
      const std::size_t src = lo + t - static_cast<std::size_t>(half);
      kernels::gemm(false, false, hi - lo, cout, cin, xm.data() + (b * S + src) * cin, wv + t * cin * cout,
                    ov.data() + (b * S + lo) * cout, true);
    }
  }
  const auto ix = x.id(), iw = weight.id(), ib = bias.id();
  return g.record(std::move(out), {x, weight, bias},
                  [=, xm = std::move(xm), mask = std::move(mask)](Graph<T>& gr, const std::vector<T>& dy) {
                    if (gr.requires_grad(ib)) {
                      auto& gb = gr.grad(ib);
                      for (std::size_t p = 0; p < B * S; ++p) {
                        for (std::size_t c = 0; c < cout; ++c) gb[c] += dy[p * cout + c];
                      }
                    }
                    const T* W = gr.value(iw).data().data();
                    T* gw = gr.requires_grad(iw) ? gr.grad(iw).data() : nullptr;
                    std::vector<T> dxm;
                    if (gr.requires_grad(ix)) dxm.assign(B * S * cin, T{});
                    for (std::size_t b = 0; b < B; ++b) {
                      for (std::size_t t = 0; t < K; ++t) {
                        std::size_t lo, hi;
                        tap_range(t, lo, hi);
                        if (lo >= hi) continue;
                        const std::size_t src = lo + t - static_cast<std::size_t>(half);
                        const T* dyr = dy.data() + (b * S + lo) * cout;
                        if (gw) {
                          kernels::gemm(true, false, cin, cout, hi - lo, xm.data() + (b * S + src) * cin, dyr,
                                        gw + t * cin * cout, true);
                        }
                        if (!dxm.empty()) {
                          kernels::gemm(false, true, hi - lo, cin, cout, dyr, W + t * cin * cout,
                                        dxm.data() + (b * S + src) * cin, true);
                        }
                      }
                    }
                    if (dxm.empty()) return;
                    auto& gx = gr.grad(ix);
                    for (std::size_t p = 0; p < B * S; ++p) {
                      if (!mask.empty() && !mask[p]) continue;
                      for (std::size_t c = 0; c < cin; ++c) gx[p * cin + c] += dxm[p * cin + c];
                    }
                  });
}

/// Inverted dropout; identity when not training or rate == 0.
template <class T>
Var<T> dropout(Var<T> x, double rate, Rng& rng, bool training) {
  if (!training || rate <= 0.0) return x;
  if (rate >= 1.0) throw contract_error("dropout rate must be < 1");
  auto& g = x.graph();
  const T keep_scale = static_cast<T>(1.0 / (1.0 - rate));
  std::vector<T> mask(x.size());
  for (auto& m : mask) m = rng.uniform() < rate ? T{} : keep_scale;
  Tensor<T> out(x.shape());
  auto xv = x.value().data();
  auto ov = out.data();
  for (std::size_t i = 0; i < ov.size(); ++i) ov[i] = xv[i] * mask[i];
  const auto ix = x.id();
  return g.record(std::move(out), {x}, [=, mask = std::move(mask)](Graph<T>& gr, const std::vector<T>& dy) {
    auto& gx = gr.grad(ix);
    for (std::size_t i = 0; i < dy.size(); ++i) gx[i] += dy[i] * mask[i];
  });
}

inline constexpr std::int64_t ignore_label = -100;

/// Mean negative log-likelihood of `labels` under softmax(logits) over rows
/// whose label differs from ignore_index. logits: [n, vocab].
/// When `denominator` is given the summed loss is divided by it instead of the
/// local count, which lets micro-batches share one normaliser.
template <class T>
Var<T> cross_entropy(Var<T> logits, std::span<const std::int64_t> labels, std::int64_t ignore_index = ignore_label,
                     std::optional<double> denominator = std::nullopt) {
  auto& g = logits.graph();
  const Shape& s = logits.shape();
  if (s.size() != 2 || s[0] != labels.size()) {
    throw shape_error("cross_entropy logits " + to_string(s) + " vs " + std::to_string(labels.size()) + " labels");
  }
  const std::size_t n = s[0], v = s[1];
  std::size_t count = 0;
  for (auto l : labels) {
    if (l == ignore_index) continue;
    if (l < 0 || static_cast<std::size_t>(l) >= v) throw contract_error("label " + std::to_string(l) + " outside vocabulary");
    ++count;
  }
  if (count == 0) throw contract_error("empty loss: every label is ignore_index");
  const double denom = denominator.value_or(static_cast<double>(count));
  if (!(denom > 0)) throw contract_error("cross_entropy denominator must be positive");
  auto lv = logits.value().data();
  std::vector<T> probs(n * v, T{});
  double total = 0.0;
  for (std::size_t r = 0; r < n; ++r) {
    if (labels[r] == ignore_index) continue;
    const T* row = lv.data() + r * v;
    T mx = *std::max_element(row, row + v);
    T sum = 0;
    for (std::size_t j = 0; j < v; ++j) {
      probs[r * v + j] = std::exp(row[j] - mx);
      sum += probs[r * v + j];
    }
    for (std::size_t j = 0; j < v; ++j) probs[r * v + j] /= sum;
    total += static_cast<double>(std::log(sum) + mx - row[static_cast<std::size_t>(labels[r])]);
  }
  Tensor<T> out(Shape{}, std::vector<T>{static_cast<T>(total / denom)});
  const auto il = logits.id();
  std::vector<std::int64_t> saved(labels.begin(), labels.end());
  return g.record(std::move(out), {logits},
                  [=, probs = std::move(probs), saved = std::move(saved)](Graph<T>& gr, const std::vector<T>& dy) {
                    auto& gl = gr.grad(il);
                    const T scale_factor = dy[0] / static_cast<T>(denom);
                    for (std::size_t r = 0; r < n; ++r) {
                      if (saved[r] == ignore_index) continue;
                      for (std::size_t j = 0; j < v; ++j) gl[r * v + j] += scale_factor * probs[r * v + j];
                      gl[r * v + static_cast<std::size_t>(saved[r])] -= scale_factor;
                    }
                  });
}

/// Axis permutation: out.shape[i] = x.shape[axes[i]].
template <class T>
Var<T> permute(Var<T> x, const std::vector<std::size_t>& axes) {
  auto& g = x.graph();
  const Shape& s = x.shape();
  if (axes.size() != s.size()) throw shape_error("permute axes do not match rank of " + to_string(s));
  std::vector<bool> seen(s.size(), false);
  Shape out_shape(s.size());
  for (std::size_t i = 0; i < axes.size(); ++i) {
    if (axes[i] >= s.size() || seen[axes[i]]) throw shape_error("invalid permutation for shape " + to_string(s));
    seen[axes[i]] = true;
    out_shape[i] = s[axes[i]];
  }
  std::vector<std::size_t> in_strides(s.size());
  std::size_t st = 1;
  for (std::size_t i = s.size(); i-- > 0;) {
    in_strides[i] = st;
    st *= s[i];
  }
  // Source stride of each output axis.
  std::vector<std::size_t> src_strides(s.size());
  for (std::size_t i = 0; i < axes.size(); ++i) src_strides[i] = in_strides[axes[i]];
  std::vector<std::size_t> zero(s.size(), 0);
  Tensor<T> out(out_shape);
  auto xv = x.value().data();
  auto ov = out.data();
  detail::for_each_broadcast(out_shape, src_strides, zero, [&](std::size_t i, std::size_t src, std::size_t) { ov[i] = xv[src]; });
  const auto ix = x.id();
  return g.record(std::move(out), {x}, [=](Graph<T>& gr, const std::vector<T>& dy) {
    auto& gx = gr.grad(ix);
    detail::for_each_broadcast(out_shape, src_strides, zero, [&](std::size_t i, std::size_t src, std::size_t) { gx[src] += dy[i]; });
  });
}

template <class T>
Var<T> transpose(Var<T> x, std::size_t axis0, std::size_t axis1) {
  std::vector<std::size_t> axes(x.shape().size());
  for (std::size_t i = 0; i < axes.size(); ++i) axes[i] = i;
  std::swap(axes.at(axis0), axes.at(axis1));
  return permute(x, axes);
}

template <class T>
Var<T> reshape(Var<T> x, Shape shape) {
  auto& g = x.graph();
  if (numel(shape) != x.size()) {
    throw shape_error("cannot reshape " + to_string(x.shape()) + " to " + to_string(shape));
  }
  Tensor<T> out(std::move(shape), x.value().storage());
  const auto ix = x.id();
  return g.record(std::move(out), {x}, [=](Graph<T>& gr, const std::vector<T>& dy) {
    auto& gx = gr.grad(ix);
    for (std::size_t i = 0; i < dy.size(); ++i) gx[i] += dy[i];
  });
}

// ---------------------------------------------------------------------------
// Composites.

template <class T>
Var<T> sub(Var<T> a, Var<T> b) {
  return add(a, scale(b, T{-1}));
}

/// x [..., in] * weight [in, out] + bias [out].
template <class T>
Var<T> linear(Var<T> x, Var<T> weight, Var<T> bias) {
  return add(matmul(x, weight), bias);
}

/// Sum of all elements, as a ones-vector product. Returns shape [].
template <class T>
Var<T> sum_all(Var<T> x) {
  auto& g = x.graph();
  const std::size_t n = x.size();
  auto ones = g.constant(Tensor<T>(Shape{n, 1}, T{1}));
  return reshape(matmul(reshape(x, Shape{1, n}), ones), Shape{});
}

/// Mean squared error between same-shaped tensors, as d^T d / n. Returns shape [].
template <class T>
Var<T> mse(Var<T> prediction, Var<T> target) {
  const std::size_t n = prediction.size();
  if (prediction.shape() != target.shape()) {
    throw shape_error("mse shapes " + to_string(prediction.shape()) + " vs " + to_string(target.shape()));
  }
  auto d = reshape(sub(prediction, target), Shape{n, 1});
  return scale(reshape(matmul(d, d, Transpose::yes), Shape{}), T{1} / static_cast<T>(n));
}

}  // namespace lusoforge::ad
