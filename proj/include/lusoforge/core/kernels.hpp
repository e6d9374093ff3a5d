#pragma once

#include <cstddef>

#include <Eigen/Core>

namespace lusoforge::kernels {

/// C (m x n) = op(A) * op(B), or C += ... when accumulate is set.
/// A is stored row-major as (trans_a ? k x m : m x k); B as (trans_b ? n x k : k x n).
template <class T>
void gemm(bool trans_a, bool trans_b, std::size_t m, std::size_t n, std::size_t k, const T* a,
          const T* b, T* c, bool accumulate) {
  using Mat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
  using Idx = Eigen::Index;
  Eigen::Map<Mat> cm(c, static_cast<Idx>(m), static_cast<Idx>(n));
  if (k == 0) {
    if (!accumulate) cm.setZero();
    return;
  }
  Eigen::Map<const Mat> am(a, static_cast<Idx>(trans_a ? k : m), static_cast<Idx>(trans_a ? m : k));
  Eigen::Map<const Mat> bm(b, static_cast<Idx>(trans_b ? n : k), static_cast<Idx>(trans_b ? k : n));
  auto run = [&](const auto& lhs, const auto& rhs) {
    if (accumulate) {
      cm.noalias() += lhs * rhs;
    } else {
      cm.noalias() = lhs * rhs;
    }
  };
  if (trans_a && trans_b) {
    run(am.transpose(), bm.transpose());
  } else if (trans_a) {
    run(am.transpose(), bm);
  } else if (trans_b) {
    run(am, bm.transpose());
  } else {
    run(am, bm);
  }
}

}  // namespace lusoforge::kernels
