#include <algorithm>
#include <cmath>
#include <cstdlib>
#include <cstring>
#include <string_view>

#include "vsdf/simd/kernels.hpp"
#include "kernels_internal.hpp"

namespace vsdf::simd {
namespace {

template <typename T>
void gemm_reference(bool trans_a, bool trans_b, int m, int n, int k, const T* a, int lda,
                    const T* b, int ldb, T beta, T* c, int ldc) {
  for (int i = 0; i < m; ++i) {
    T* crow = c + static_cast<std::ptrdiff_t>(i) * ldc;
    if (beta == T{0}) {
      std::fill(crow, crow + n, T{0});
    } else if (beta != T{1}) {
      for (int j = 0; j < n; ++j) crow[j] *= beta;
    }
    for (int p = 0; p < k; ++p) {
      const T aip = trans_a ? a[static_cast<std::ptrdiff_t>(p) * lda + i]
                            : a[static_cast<std::ptrdiff_t>(i) * lda + p];
      if (aip == T{0}) continue;
      if (trans_b) {
        for (int j = 0; j < n; ++j) crow[j] += aip * b[static_cast<std::ptrdiff_t>(j) * ldb + p];
      } else {
        const T* brow = b + static_cast<std::ptrdiff_t>(p) * ldb;
        for (int j = 0; j < n; ++j) crow[j] += aip * brow[j];
      }
    }
  }
}

template <typename T>
void softmax_reference(std::size_t rows, std::size_t cols, T* x) {
  for (std::size_t r = 0; r < rows; ++r) {
    T* row = x + r * cols;
    const T mx = *std::max_element(row, row + cols);
    T sum{0};
    for (std::size_t j = 0; j < cols; ++j) {
      row[j] = std::exp(row[j] - mx);
      sum += row[j];
    }
    const T inv = T{1} / sum;
    for (std::size_t j = 0; j < cols; ++j) row[j] *= inv;
  }
}

void gemm_f32_scalar(bool ta, bool tb, int m, int n, int k, const float* a, int lda,
                     const float* b, int ldb, float beta, float* c, int ldc) {
  gemm_reference<float>(ta, tb, m, n, k, a, lda, b, ldb, beta, c, ldc);
}

float dot_f32_scalar(const float* x, const float* y, std::size_t n) {
  float s = 0.0f;
  for (std::size_t i = 0; i < n; ++i) s += x[i] * y[i];
  return s;
}

void axpy_f32_scalar(std::size_t n, float alpha, const float* x, float* y) {
  for (std::size_t i = 0; i < n; ++i) y[i] += alpha * x[i];
}

void exp_f32_scalar(std::size_t n, const float* x, float* y) {
  for (std::size_t i = 0; i < n; ++i) y[i] = std::exp(x[i]);
}

void sigmoid_f32_scalar(std::size_t n, const float* x, float* y) {
  for (std::size_t i = 0; i < n; ++i) y[i] = 1.0f / (1.0f + std::exp(-x[i]));
}

void softmax_f32_scalar(std::size_t rows, std::size_t cols, float* x) {
  softmax_reference<float>(rows, cols, x);
}

constexpr KernelTable kScalarTable{
    Isa::kScalar,       "scalar",          gemm_f32_scalar,   dot_f32_scalar,
    axpy_f32_scalar,    exp_f32_scalar,    sigmoid_f32_scalar, softmax_f32_scalar,
};

const KernelTable& select_active() {
  if (const char* env = std::getenv("VSDF_SIMD"); env != nullptr && std::string_view(env) == "scalar") {
    return kScalarTable;
  }
  if (const KernelTable* t = avx2_kernels()) return *t;
  return kScalarTable;
}

}  // namespace

const KernelTable& scalar_kernels() { return kScalarTable; }

const KernelTable& active_kernels() {
  static const KernelTable& table = select_active();
  return table;
}

bool cpu_has_avx2_fma() {
#if defined(__x86_64__) || defined(__i386__)
  __builtin_cpu_init();
  return __builtin_cpu_supports("avx2") && __builtin_cpu_supports("fma");
#else
  return false;
#endif
}

const KernelTable* avx2_kernels() {
  static const KernelTable* table = cpu_has_avx2_fma() ? detail::avx2_table_or_null() : nullptr;
  return table;
}

void gemm_f64(bool ta, bool tb, int m, int n, int k, const double* a, int lda, const double* b,
              int ldb, double beta, double* c, int ldc) {
  gemm_reference<double>(ta, tb, m, n, k, a, lda, b, ldb, beta, c, ldc);
}

void softmax_rows_f64(std::size_t rows, std::size_t cols, double* x) {
  softmax_reference<double>(rows, cols, x);
}

template <>
void sigmoid<float>(std::size_t n, const float* x, float* y) {
  active_kernels().sigmoid(n, x, y);
}
template <>
void sigmoid<double>(std::size_t n, const double* x, double* y) {
  for (std::size_t i = 0; i < n; ++i) y[i] = 1.0 / (1.0 + std::exp(-x[i]));
}

template <>
void axpy<float>(std::size_t n, float alpha, const float* x, float* y) {
  active_kernels().axpy(n, alpha, x, y);
}
template <>
void axpy<double>(std::size_t n, double alpha, const double* x, double* y) {
  for (std::size_t i = 0; i < n; ++i) y[i] += alpha * x[i];
}

template <>
float dot<float>(const float* x, const float* y, std::size_t n) {
  return active_kernels().dot(x, y, n);
}
template <>
double dot<double>(const double* x, const double* y, std::size_t n) {
  double s = 0.0;
  for (std::size_t i = 0; i < n; ++i) s += x[i] * y[i];
  return s;
}

}  // namespace vsdf::simd
