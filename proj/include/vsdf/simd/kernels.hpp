#pragma once
// Data-parallel inner loops used by the tensor ops.
//
// Every kernel has a portable scalar reference and, on x86-64, an AVX2+FMA
// variant. The variant is chosen once at startup from CPUID; setting the
// environment variable VSDF_SIMD=scalar forces the reference path. Double
// precision always runs the reference kernels (it is only used for gradient
// checks).

#include <cstddef>
#include <string_view>
#include <type_traits>

namespace vsdf::simd {

enum class Isa { kScalar, kAvx2 };

// C = op(A) * op(B) + beta * C, row-major, op(X) = X or X^T.
// op(A) is m x k, op(B) is k x n. beta == 0 never reads C.
using GemmF32 = void (*)(bool trans_a, bool trans_b, int m, int n, int k, const float* a, int lda,
                         const float* b, int ldb, float beta, float* c, int ldc);
using DotF32 = float (*)(const float* x, const float* y, std::size_t n);
using AxpyF32 = void (*)(std::size_t n, float alpha, const float* x, float* y);
using MapF32 = void (*)(std::size_t n, const float* x, float* y);
using SoftmaxF32 = void (*)(std::size_t rows, std::size_t cols, float* x);

struct KernelTable {
  Isa isa;
  std::string_view name;
  GemmF32 gemm;
  DotF32 dot;
  AxpyF32 axpy;
  MapF32 exp;
  MapF32 sigmoid;
  SoftmaxF32 softmax_rows;
};

const KernelTable& scalar_kernels();
// nullptr when the binary was built without AVX2 support or the CPU lacks it.
const KernelTable* avx2_kernels();
const KernelTable& active_kernels();

bool cpu_has_avx2_fma();

// Reference double-precision kernels.
void gemm_f64(bool trans_a, bool trans_b, int m, int n, int k, const double* a, int lda,
              const double* b, int ldb, double beta, double* c, int ldc);
void softmax_rows_f64(std::size_t rows, std::size_t cols, double* x);

template <typename T>
inline void gemm(bool trans_a, bool trans_b, int m, int n, int k, const T* a, int lda, const T* b,
                 int ldb, T beta, T* c, int ldc) {
  if constexpr (std::is_same_v<T, float>) {
    active_kernels().gemm(trans_a, trans_b, m, n, k, a, lda, b, ldb, beta, c, ldc);
  } else {
    gemm_f64(trans_a, trans_b, m, n, k, a, lda, b, ldb, beta, c, ldc);
  }
}

template <typename T>
inline void softmax_rows(std::size_t rows, std::size_t cols, T* x) {
  if constexpr (std::is_same_v<T, float>) {
    active_kernels().softmax_rows(rows, cols, x);
  } else {
    softmax_rows_f64(rows, cols, x);
  }
}

template <typename T>
void sigmoid(std::size_t n, const T* x, T* y);

template <typename T>
void axpy(std::size_t n, T alpha, const T* x, T* y);

template <typename T>
T dot(const T* x, const T* y, std::size_t n);

}  // namespace vsdf::simd
