#pragma once

#include <Eigen/Core>

namespace pyseg::detail {

// Row-major C = alpha * op(A) * op(B) + beta * C. Single-threaded, so the
// reduction order is fixed for a given shape.
template <typename T>
void gemm(bool trans_a, bool trans_b, int m, int n, int k, T alpha, const T* a, int lda, const T* b, int ldb,
          T beta, T* c, int ldc) {
  using Mat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
  using Stride = Eigen::OuterStride<>;
  using ConstMap = Eigen::Map<const Mat, 0, Stride>;
  Eigen::Map<Mat, 0, Stride> cm(c, m, n, Stride(ldc));
  // Stored extents of A and B before the optional transpose.
  ConstMap am(a, trans_a ? k : m, trans_a ? m : k, Stride(lda));
  ConstMap bm(b, trans_b ? n : k, trans_b ? k : n, Stride(ldb));
  if (beta == T(0)) {
    if (trans_a && trans_b) {
      cm.noalias() = alpha * am.transpose() * bm.transpose();
    } else if (trans_a) {
      cm.noalias() = alpha * am.transpose() * bm;
    } else if (trans_b) {
      cm.noalias() = alpha * am * bm.transpose();
    } else {
      cm.noalias() = alpha * am * bm;
    }
    return;
  }
  if (beta != T(1)) cm *= beta;
  if (trans_a && trans_b) {
    cm.noalias() += alpha * am.transpose() * bm.transpose();
  } else if (trans_a) {
    cm.noalias() += alpha * am.transpose() * bm;
  } else if (trans_b) {
    cm.noalias() += alpha * am * bm.transpose();
  } else {
    cm.noalias() += alpha * am * bm;
  }
}

}  // namespace pyseg::detail
