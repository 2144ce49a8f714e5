// AVX2 + FMA variants. This translation unit is the only one compiled with
// -mavx2 -mfma; nothing here runs unless CPUID reports both features.

#include <algorithm>
#include <cmath>
#include <cstring>
#include <vector>

#include "kernels_internal.hpp"

#if defined(VSDF_HAVE_AVX2)
#include <immintrin.h>

namespace vsdf::simd {
namespace {

constexpr int kMr = 6;
constexpr int kNr = 16;
constexpr int kKc = 256;
constexpr int kMc = 96;
constexpr int kNc = 2048;

inline float elem_a(const float* a, int lda, bool trans, int i, int p) {
  return trans ? a[static_cast<std::ptrdiff_t>(p) * lda + i] : a[static_cast<std::ptrdiff_t>(i) * lda + p];
}

// Packs op(A)[ic:ic+mc, pc:pc+kc] into kMr-row slivers, zero padded.
void pack_a(const float* a, int lda, bool trans, int ic, int mc, int pc, int kc, float* dst) {
  for (int ir = 0; ir < mc; ir += kMr) {
    const int rows = std::min(kMr, mc - ir);
    for (int p = 0; p < kc; ++p) {
      int r = 0;
      for (; r < rows; ++r) dst[r] = elem_a(a, lda, trans, ic + ir + r, pc + p);
      for (; r < kMr; ++r) dst[r] = 0.0f;
      dst += kMr;
    }
  }
}

// Packs op(B)[pc:pc+kc, jc:jc+nc] into kNr-column slivers, zero padded.
void pack_b(const float* b, int ldb, bool trans, int pc, int kc, int jc, int nc, float* dst) {
  for (int jr = 0; jr < nc; jr += kNr) {
    const int cols = std::min(kNr, nc - jr);
    for (int p = 0; p < kc; ++p) {
      if (!trans && cols == kNr) {
        std::memcpy(dst, b + static_cast<std::ptrdiff_t>(pc + p) * ldb + jc + jr, sizeof(float) * kNr);
      } else {
        int c = 0;
        for (; c < cols; ++c) {
          const int j = jc + jr + c;
          dst[c] = trans ? b[static_cast<std::ptrdiff_t>(j) * ldb + pc + p]
                         : b[static_cast<std::ptrdiff_t>(pc + p) * ldb + j];
        }
        for (; c < kNr; ++c) dst[c] = 0.0f;
      }
      dst += kNr;
    }
  }
}

void micro_kernel(int kc, const float* ap, const float* bp, float* c, int ldc, int rows, int cols,
                  float beta) {
  __m256 acc[kMr][2];
  for (int r = 0; r < kMr; ++r) {
    acc[r][0] = _mm256_setzero_ps();
    acc[r][1] = _mm256_setzero_ps();
  }
  for (int p = 0; p < kc; ++p) {
    const __m256 b0 = _mm256_loadu_ps(bp);
    const __m256 b1 = _mm256_loadu_ps(bp + 8);
    for (int r = 0; r < kMr; ++r) {
      const __m256 av = _mm256_broadcast_ss(ap + r);
      acc[r][0] = _mm256_fmadd_ps(av, b0, acc[r][0]);
      acc[r][1] = _mm256_fmadd_ps(av, b1, acc[r][1]);
    }
    ap += kMr;
    bp += kNr;
  }
  if (rows == kMr && cols == kNr) {
    const __m256 vb = _mm256_set1_ps(beta);
    for (int r = 0; r < kMr; ++r) {
      float* crow = c + static_cast<std::ptrdiff_t>(r) * ldc;
      if (beta == 0.0f) {
        _mm256_storeu_ps(crow, acc[r][0]);
        _mm256_storeu_ps(crow + 8, acc[r][1]);
      } else {
        _mm256_storeu_ps(crow, _mm256_fmadd_ps(vb, _mm256_loadu_ps(crow), acc[r][0]));
        _mm256_storeu_ps(crow + 8, _mm256_fmadd_ps(vb, _mm256_loadu_ps(crow + 8), acc[r][1]));
      }
    }
    return;
  }
  alignas(32) float tile[kMr][kNr];
  for (int r = 0; r < kMr; ++r) {
    _mm256_store_ps(&tile[r][0], acc[r][0]);
    _mm256_store_ps(&tile[r][8], acc[r][1]);
  }
  for (int r = 0; r < rows; ++r) {
    float* crow = c + static_cast<std::ptrdiff_t>(r) * ldc;
    for (int j = 0; j < cols; ++j) {
      crow[j] = beta == 0.0f ? tile[r][j] : std::fma(beta, crow[j], tile[r][j]);
    }
  }
}

void gemm_f32_avx2(bool trans_a, bool trans_b, int m, int n, int k, const float* a, int lda,
                   const float* b, int ldb, float beta, float* c, int ldc) {
  if (m <= 0 || n <= 0) return;
  if (k <= 0) {
    for (int i = 0; i < m; ++i) {
      float* crow = c + static_cast<std::ptrdiff_t>(i) * ldc;
      for (int j = 0; j < n; ++j) crow[j] = beta == 0.0f ? 0.0f : beta * crow[j];
    }
    return;
  }
  thread_local std::vector<float> apack;
  thread_local std::vector<float> bpack;
  apack.resize(static_cast<std::size_t>(kMc + kMr) * kKc);
  bpack.resize(static_cast<std::size_t>(kNc + kNr) * kKc);

  for (int jc = 0; jc < n; jc += kNc) {
    const int nc = std::min(kNc, n - jc);
    for (int pc = 0; pc < k; pc += kKc) {
      const int kc = std::min(kKc, k - pc);
      const float beta_eff = pc == 0 ? beta : 1.0f;
      pack_b(b, ldb, trans_b, pc, kc, jc, nc, bpack.data());
      for (int ic = 0; ic < m; ic += kMc) {
        const int mc = std::min(kMc, m - ic);
        pack_a(a, lda, trans_a, ic, mc, pc, kc, apack.data());
        for (int jr = 0; jr < nc; jr += kNr) {
          const int cols = std::min(kNr, nc - jr);
          const float* bp = bpack.data() + static_cast<std::ptrdiff_t>(jr / kNr) * kc * kNr;
          for (int ir = 0; ir < mc; ir += kMr) {
            const int rows = std::min(kMr, mc - ir);
            const float* ap = apack.data() + static_cast<std::ptrdiff_t>(ir / kMr) * kc * kMr;
            float* cp = c + static_cast<std::ptrdiff_t>(ic + ir) * ldc + jc + jr;
            micro_kernel(kc, ap, bp, cp, ldc, rows, cols, beta_eff);
          }
        }
      }
    }
  }
}

inline float hsum(__m256 v) {
  const __m128 lo = _mm256_castps256_ps128(v);
  const __m128 hi = _mm256_extractf128_ps(v, 1);
  __m128 s = _mm_add_ps(lo, hi);
  s = _mm_hadd_ps(s, s);
  s = _mm_hadd_ps(s, s);
  return _mm_cvtss_f32(s);
}

float dot_f32_avx2(const float* x, const float* y, std::size_t n) {
  __m256 acc0 = _mm256_setzero_ps();
  __m256 acc1 = _mm256_setzero_ps();
  std::size_t i = 0;
  for (; i + 16 <= n; i += 16) {
    acc0 = _mm256_fmadd_ps(_mm256_loadu_ps(x + i), _mm256_loadu_ps(y + i), acc0);
    acc1 = _mm256_fmadd_ps(_mm256_loadu_ps(x + i + 8), _mm256_loadu_ps(y + i + 8), acc1);
  }
  for (; i + 8 <= n; i += 8) {
    acc0 = _mm256_fmadd_ps(_mm256_loadu_ps(x + i), _mm256_loadu_ps(y + i), acc0);
  }
  float s = hsum(_mm256_add_ps(acc0, acc1));
  for (; i < n; ++i) s += x[i] * y[i];
  return s;
}

void axpy_f32_avx2(std::size_t n, float alpha, const float* x, float* y) {
  const __m256 va = _mm256_set1_ps(alpha);
  std::size_t i = 0;
  for (; i + 8 <= n; i += 8) {
    _mm256_storeu_ps(y + i, _mm256_fmadd_ps(va, _mm256_loadu_ps(x + i), _mm256_loadu_ps(y + i)));
  }
  for (; i < n; ++i) y[i] += alpha * x[i];
}

// Cephes-style expf: range reduction by ln2 and a degree-5 polynomial.
inline __m256 exp_ps(__m256 x) {
  const __m256 hi = _mm256_set1_ps(88.3762626647949f);
  const __m256 lo = _mm256_set1_ps(-87.33654475f);
  const __m256 log2e = _mm256_set1_ps(1.44269504088896341f);
  const __m256 c1 = _mm256_set1_ps(0.693359375f);
  const __m256 c2 = _mm256_set1_ps(-2.12194440e-4f);
  const __m256 underflow = _mm256_cmp_ps(x, lo, _CMP_LT_OQ);
  x = _mm256_min_ps(_mm256_max_ps(x, lo), hi);
  __m256 fx = _mm256_fmadd_ps(x, log2e, _mm256_set1_ps(0.5f));
  fx = _mm256_floor_ps(fx);
  x = _mm256_fnmadd_ps(fx, c1, x);
  x = _mm256_fnmadd_ps(fx, c2, x);
  const __m256 z = _mm256_mul_ps(x, x);
  __m256 y = _mm256_set1_ps(1.9875691500e-4f);
  y = _mm256_fmadd_ps(y, x, _mm256_set1_ps(1.3981999507e-3f));
  y = _mm256_fmadd_ps(y, x, _mm256_set1_ps(8.3334519073e-3f));
  y = _mm256_fmadd_ps(y, x, _mm256_set1_ps(4.1665795894e-2f));
  y = _mm256_fmadd_ps(y, x, _mm256_set1_ps(1.6666665459e-1f));
  y = _mm256_fmadd_ps(y, x, _mm256_set1_ps(5.0000001201e-1f));
  y = _mm256_fmadd_ps(y, z, x);
  y = _mm256_add_ps(y, _mm256_set1_ps(1.0f));
  __m256i e = _mm256_cvttps_epi32(fx);
  e = _mm256_add_epi32(e, _mm256_set1_epi32(127));
  e = _mm256_slli_epi32(e, 23);
  y = _mm256_mul_ps(y, _mm256_castsi256_ps(e));
  return _mm256_andnot_ps(underflow, y);
}

void exp_f32_avx2(std::size_t n, const float* x, float* y) {
  std::size_t i = 0;
  for (; i + 8 <= n; i += 8) _mm256_storeu_ps(y + i, exp_ps(_mm256_loadu_ps(x + i)));
  if (i < n) {
    alignas(32) float buf[8] = {};
    std::memcpy(buf, x + i, sizeof(float) * (n - i));
    _mm256_store_ps(buf, exp_ps(_mm256_load_ps(buf)));
    std::memcpy(y + i, buf, sizeof(float) * (n - i));
  }
}

void sigmoid_f32_avx2(std::size_t n, const float* x, float* y) {
  const __m256 one = _mm256_set1_ps(1.0f);
  const __m256 sign = _mm256_set1_ps(-0.0f);
  std::size_t i = 0;
  for (; i + 8 <= n; i += 8) {
    const __m256 e = exp_ps(_mm256_xor_ps(_mm256_loadu_ps(x + i), sign));
    _mm256_storeu_ps(y + i, _mm256_div_ps(one, _mm256_add_ps(one, e)));
  }
  for (; i < n; ++i) y[i] = 1.0f / (1.0f + std::exp(-x[i]));
}

void softmax_f32_avx2(std::size_t rows, std::size_t cols, float* x) {
  for (std::size_t r = 0; r < rows; ++r) {
    float* row = x + r * cols;
    float mx = row[0];
    std::size_t j = 0;
    if (cols >= 8) {
      __m256 vmax = _mm256_loadu_ps(row);
      for (j = 8; j + 8 <= cols; j += 8) vmax = _mm256_max_ps(vmax, _mm256_loadu_ps(row + j));
      alignas(32) float buf[8];
      _mm256_store_ps(buf, vmax);
      mx = *std::max_element(buf, buf + 8);
    }
    for (; j < cols; ++j) mx = std::max(mx, row[j]);

    const __m256 vm = _mm256_set1_ps(mx);
    __m256 vsum = _mm256_setzero_ps();
    j = 0;
    for (; j + 8 <= cols; j += 8) {
      const __m256 e = exp_ps(_mm256_sub_ps(_mm256_loadu_ps(row + j), vm));
      _mm256_storeu_ps(row + j, e);
      vsum = _mm256_add_ps(vsum, e);
    }
    float sum = hsum(vsum);
    for (; j < cols; ++j) {
      row[j] = std::exp(row[j] - mx);
      sum += row[j];
    }
    const __m256 inv = _mm256_set1_ps(1.0f / sum);
    j = 0;
    for (; j + 8 <= cols; j += 8) _mm256_storeu_ps(row + j, _mm256_mul_ps(_mm256_loadu_ps(row + j), inv));
    for (; j < cols; ++j) row[j] *= 1.0f / sum;
  }
}

constexpr KernelTable kAvx2Table{
    Isa::kAvx2,      "avx2",           gemm_f32_avx2,    dot_f32_avx2,
    axpy_f32_avx2,   exp_f32_avx2,     sigmoid_f32_avx2, softmax_f32_avx2,
};

}  // namespace

namespace detail {
const KernelTable* avx2_table_or_null() { return &kAvx2Table; }
}  // namespace detail

}  // namespace vsdf::simd

#else

namespace vsdf::simd::detail {
const KernelTable* avx2_table_or_null() { return nullptr; }
}  // namespace vsdf::simd::detail

#endif
