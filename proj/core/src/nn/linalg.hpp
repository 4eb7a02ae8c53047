#pragma once

#include <Eigen/Core>

namespace rawformer::nn::detail {

template <typename T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using ColMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::ColMajor>;

/// C (m x n) = alpha * op(A) * op(B) + beta * C, all dense row-major.
/// op(A) is m x k; A is stored k x m when trans_a.
template <typename T>
void gemm(bool trans_a, bool trans_b, int m, int n, int k, T alpha, const T* a, const T* b,
          T beta, T* c) {
  using Map = Eigen::Map<const RowMat<T>>;
  Eigen::Map<RowMat<T>> cm(c, m, n);
  const Map am(a, trans_a ? k : m, trans_a ? m : k);
  const Map bm(b, trans_b ? n : k, trans_b ? k : n);
  if (beta == T(0)) {
    if (!trans_a && !trans_b) cm.noalias() = alpha * am * bm;
    else if (trans_a && !trans_b) cm.noalias() = alpha * am.transpose() * bm;
    else if (!trans_a && trans_b) cm.noalias() = alpha * am * bm.transpose();
    else cm.noalias() = alpha * am.transpose() * bm.transpose();
  } else {
    if (beta != T(1)) cm *= beta;
    if (!trans_a && !trans_b) cm.noalias() += alpha * am * bm;
    else if (trans_a && !trans_b) cm.noalias() += alpha * am.transpose() * bm;
    else if (!trans_a && trans_b) cm.noalias() += alpha * am * bm.transpose();
    else cm.noalias() += alpha * am.transpose() * bm.transpose();
  }
}

}  // namespace rawformer::nn::detail
