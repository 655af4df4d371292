#include "asyncppo/kernels.hpp"

#include <cmath>

namespace asyncppo::kernels {
namespace {

void gemv_scalar(const double *a, std::size_t rows, std::size_t cols,
                 const double *x, const double *bias, double *out) {
  for (std::size_t r = 0; r < rows; ++r) {
    const double *row = a + r * cols;
    double acc = 0.0;
    for (std::size_t c = 0; c < cols; ++c)
      acc += row[c] * x[c];
    out[r] = acc + bias[r];
  }
}

void axpy_scalar(double alpha, const double *x, double *y, std::size_t n) {
  for (std::size_t i = 0; i < n; ++i)
    y[i] += alpha * x[i];
}

double dot_scalar(const double *a, const double *b, std::size_t n) {
  double acc = 0.0;
  for (std::size_t i = 0; i < n; ++i)
    acc += a[i] * b[i];
  return acc;
}

double sum_squares_scalar(const double *x, std::size_t n) {
  double acc = 0.0;
  for (std::size_t i = 0; i < n; ++i)
    acc += x[i] * x[i];
  return acc;
}

void scale_scalar(double alpha, double *x, std::size_t n) {
  for (std::size_t i = 0; i < n; ++i)
    x[i] *= alpha;
}

void adamw_scalar(double *param, const double *grad, double *m, double *v,
                  std::size_t n, const AdamwCoefficients &c) {
  const double inv_bc1 = 1.0 / c.bias_correction1;
  const double inv_bc2 = 1.0 / c.bias_correction2;
  for (std::size_t i = 0; i < n; ++i) {
    m[i] = c.beta1 * m[i] + (1.0 - c.beta1) * grad[i];
    v[i] = c.beta2 * v[i] + (1.0 - c.beta2) * grad[i] * grad[i];
    const double m_hat = m[i] * inv_bc1;
    const double v_hat = v[i] * inv_bc2;
    param[i] -= c.lr * (m_hat / (std::sqrt(v_hat) + c.eps) +
                        c.weight_decay * param[i]);
  }
}

} // namespace

const KernelTable &scalar_table() {
  static const KernelTable table{"scalar",    gemv_scalar,  axpy_scalar,
                                 dot_scalar,  sum_squares_scalar,
                                 scale_scalar, adamw_scalar};
  return table;
}

} // namespace asyncppo::kernels
