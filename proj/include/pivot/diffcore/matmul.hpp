#pragma once

#include <atomic>
#include <cstddef>

#include <Eigen/Core>

namespace pivot {

/// Which kernel backs the dense products. `reference` is the plain loop
/// implementation; `eigen` is the fast path used for training.
enum class MatmulBackend { reference, eigen };

inline std::atomic<MatmulBackend>& matmul_backend_slot() {
  static std::atomic<MatmulBackend> slot{MatmulBackend::eigen};
  return slot;
}

inline MatmulBackend matmul_backend() { return matmul_backend_slot().load(std::memory_order_relaxed); }
inline void set_matmul_backend(MatmulBackend b) { matmul_backend_slot().store(b, std::memory_order_relaxed); }

/// Scoped backend override (tests switch to the reference kernel locally).
class ScopedMatmulBackend {
 public:
  explicit ScopedMatmulBackend(MatmulBackend b) : prev_(matmul_backend()) { set_matmul_backend(b); }
  ~ScopedMatmulBackend() { set_matmul_backend(prev_); }
  ScopedMatmulBackend(const ScopedMatmulBackend&) = delete;
  ScopedMatmulBackend& operator=(const ScopedMatmulBackend&) = delete;

 private:
  MatmulBackend prev_;
};

namespace detail {

template <class T>
void gemm_reference(const T* a, const T* b, T* c, std::size_t m, std::size_t k, std::size_t n, bool trans_a,
                    bool trans_b, bool accumulate) {
  for (std::size_t i = 0; i < m; ++i) {
    for (std::size_t j = 0; j < n; ++j) {
      T acc = accumulate ? c[i * n + j] : T{0};
      for (std::size_t p = 0; p < k; ++p) {
        const T av = trans_a ? a[p * m + i] : a[i * k + p];
        const T bv = trans_b ? b[j * k + p] : b[p * n + j];
        acc += av * bv;
      }
      c[i * n + j] = acc;
    }
  }
}

template <class T>
void gemm_eigen(const T* a, const T* b, T* c, std::size_t m, std::size_t k, std::size_t n, bool trans_a,
                bool trans_b, bool accumulate) {
  using Mat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
  using CMap = Eigen::Map<const Mat>;
  Eigen::Map<Mat> C(c, static_cast<Eigen::Index>(m), static_cast<Eigen::Index>(n));
  const auto em = static_cast<Eigen::Index>(m);
  const auto ek = static_cast<Eigen::Index>(k);
  const auto en = static_cast<Eigen::Index>(n);
  auto run = [&](const auto& A, const auto& B) {
    if (accumulate) {
      C.noalias() += A * B;
    } else {
      C.noalias() = A * B;
    }
  };
  if (!trans_a && !trans_b) run(CMap(a, em, ek), CMap(b, ek, en));
  if (!trans_a && trans_b) run(CMap(a, em, ek), CMap(b, en, ek).transpose());
  if (trans_a && !trans_b) run(CMap(a, ek, em).transpose(), CMap(b, ek, en));
  if (trans_a && trans_b) run(CMap(a, ek, em).transpose(), CMap(b, en, ek).transpose());
}

}  // namespace detail

/// C (m x n) = op(A) * op(B), where op(A) is m x k and op(B) is k x n.
/// A stored k x m when trans_a, B stored n x k when trans_b. Row-major.
template <class T>
void gemm(const T* a, const T* b, T* c, std::size_t m, std::size_t k, std::size_t n, bool trans_a = false,
          bool trans_b = false, bool accumulate = false) {
  if (m == 0 || n == 0) return;
  if (k == 0) {
    if (!accumulate) std::fill(c, c + m * n, T{0});
    return;
  }
  if (matmul_backend() == MatmulBackend::reference) {
    detail::gemm_reference(a, b, c, m, k, n, trans_a, trans_b, accumulate);
  } else {
    detail::gemm_eigen(a, b, c, m, k, n, trans_a, trans_b, accumulate);
  }
}

}  // namespace pivot
