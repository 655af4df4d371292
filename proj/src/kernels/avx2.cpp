// Compiled with -mavx2 -mfma. Only reached through avx2_table(), which checks
// CPU support first.

#include "asyncppo/kernels.hpp"

#include <immintrin.h>

#include <cmath>

namespace asyncppo::kernels {
namespace {

inline double hsum(__m256d v) {
  const __m128d lo = _mm256_castpd256_pd128(v);
  const __m128d hi = _mm256_extractf128_pd(v, 1);
  const __m128d s = _mm_add_pd(lo, hi);
  return _mm_cvtsd_f64(_mm_add_sd(s, _mm_unpackhi_pd(s, s)));
}

double dot_avx2(const double *a, const double *b, std::size_t n) {
  __m256d acc0 = _mm256_setzero_pd();
  __m256d acc1 = _mm256_setzero_pd();
  std::size_t i = 0;
  for (; i + 8 <= n; i += 8) {
    acc0 = _mm256_fmadd_pd(_mm256_loadu_pd(a + i), _mm256_loadu_pd(b + i), acc0);
    acc1 = _mm256_fmadd_pd(_mm256_loadu_pd(a + i + 4),
                           _mm256_loadu_pd(b + i + 4), acc1);
  }
  for (; i + 4 <= n; i += 4)
    acc0 = _mm256_fmadd_pd(_mm256_loadu_pd(a + i), _mm256_loadu_pd(b + i), acc0);
  double acc = hsum(_mm256_add_pd(acc0, acc1));
  for (; i < n; ++i)
    acc += a[i] * b[i];
  return acc;
}

void gemv_avx2(const double *a, std::size_t rows, std::size_t cols,
               const double *x, const double *bias, double *out) {
  for (std::size_t r = 0; r < rows; ++r)
    out[r] = dot_avx2(a + r * cols, x, cols) + bias[r];
}

void axpy_avx2(double alpha, const double *x, double *y, std::size_t n) {
  const __m256d va = _mm256_set1_pd(alpha);
  std::size_t i = 0;
  for (; i + 4 <= n; i += 4) {
    const __m256d vy = _mm256_loadu_pd(y + i);
    _mm256_storeu_pd(y + i, _mm256_fmadd_pd(va, _mm256_loadu_pd(x + i), vy));
  }
  for (; i < n; ++i)
    y[i] += alpha * x[i];
}

double sum_squares_avx2(const double *x, std::size_t n) {
  return dot_avx2(x, x, n);
}

void scale_avx2(double alpha, double *x, std::size_t n) {
  const __m256d va = _mm256_set1_pd(alpha);
  std::size_t i = 0;
  for (; i + 4 <= n; i += 4)
    _mm256_storeu_pd(x + i, _mm256_mul_pd(va, _mm256_loadu_pd(x + i)));
  for (; i < n; ++i)
    x[i] *= alpha;
}

void adamw_avx2(double *param, const double *grad, double *m, double *v,
                std::size_t n, const AdamwCoefficients &c) {
  const double inv_bc1 = 1.0 / c.bias_correction1;
  const double inv_bc2 = 1.0 / c.bias_correction2;
  const __m256d b1 = _mm256_set1_pd(c.beta1);
  const __m256d one_b1 = _mm256_set1_pd(1.0 - c.beta1);
  const __m256d b2 = _mm256_set1_pd(c.beta2);
  const __m256d one_b2 = _mm256_set1_pd(1.0 - c.beta2);
  const __m256d ibc1 = _mm256_set1_pd(inv_bc1);
  const __m256d ibc2 = _mm256_set1_pd(inv_bc2);
  const __m256d eps = _mm256_set1_pd(c.eps);
  const __m256d wd = _mm256_set1_pd(c.weight_decay);
  const __m256d lr = _mm256_set1_pd(c.lr);
  std::size_t i = 0;
  for (; i + 4 <= n; i += 4) {
    const __m256d g = _mm256_loadu_pd(grad + i);
    const __m256d p = _mm256_loadu_pd(param + i);
    const __m256d mi = _mm256_add_pd(_mm256_mul_pd(b1, _mm256_loadu_pd(m + i)),
                                     _mm256_mul_pd(one_b1, g));
    const __m256d vi = _mm256_add_pd(
        _mm256_mul_pd(b2, _mm256_loadu_pd(v + i)),
        _mm256_mul_pd(_mm256_mul_pd(one_b2, g), g));
    _mm256_storeu_pd(m + i, mi);
    _mm256_storeu_pd(v + i, vi);
    const __m256d m_hat = _mm256_mul_pd(mi, ibc1);
    const __m256d v_hat = _mm256_mul_pd(vi, ibc2);
    const __m256d step = _mm256_add_pd(
        _mm256_div_pd(m_hat, _mm256_add_pd(_mm256_sqrt_pd(v_hat), eps)),
        _mm256_mul_pd(wd, p));
    _mm256_storeu_pd(param + i, _mm256_sub_pd(p, _mm256_mul_pd(lr, step)));
  }
  for (; i < n; ++i) {
    m[i] = c.beta1 * m[i] + (1.0 - c.beta1) * grad[i];
    v[i] = c.beta2 * v[i] + (1.0 - c.beta2) * grad[i] * grad[i];
    const double m_hat = m[i] * inv_bc1;
    const double v_hat = v[i] * inv_bc2;
    param[i] -= c.lr * (m_hat / (std::sqrt(v_hat) + c.eps) +
                        c.weight_decay * param[i]);
  }
}

} // namespace

const KernelTable &avx2_table_unchecked() {
  static const KernelTable table{"avx2",     gemv_avx2,  axpy_avx2,
                                 dot_avx2,   sum_squares_avx2,
                                 scale_avx2, adamw_avx2};
  return table;
}

} // namespace asyncppo::kernels
