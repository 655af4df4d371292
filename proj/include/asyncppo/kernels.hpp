#pragma once

// Dense double-precision kernels behind the policy and optimizer.
//
// Every kernel has a scalar reference implementation. When the build enables
// it and the CPU reports AVX2+FMA, an AVX2 variant is selected at first use.
// The two paths agree to within floating-point reassociation; tests in
// kernels_test.cpp pin that equivalence.

#include <cstddef>
#include <span>
#include <string_view>

namespace asyncppo::kernels {

enum class Backend { scalar, avx2 };

struct AdamwCoefficients {
  double lr = 0.0;
  double beta1 = 0.9;
  double beta2 = 0.95;
  double eps = 1e-5;
  double weight_decay = 0.0;
  double bias_correction1 = 1.0; // 1 - beta1^t
  double bias_correction2 = 1.0; // 1 - beta2^t
};

struct KernelTable {
  std::string_view name;
  // out[r] = sum_c a[r * cols + c] * x[c] + bias[r]
  void (*gemv)(const double *a, std::size_t rows, std::size_t cols,
               const double *x, const double *bias, double *out);
  // y += alpha * x
  void (*axpy)(double alpha, const double *x, double *y, std::size_t n);
  double (*dot)(const double *a, const double *b, std::size_t n);
  double (*sum_squares)(const double *x, std::size_t n);
  // x *= alpha
  void (*scale)(double alpha, double *x, std::size_t n);
  // One decoupled-weight-decay Adam step over n parameters.
  void (*adamw)(double *param, const double *grad, double *m, double *v,
                std::size_t n, const AdamwCoefficients &c);
};

const KernelTable &scalar_table();

// nullptr when the variant is not compiled in or the CPU lacks support.
const KernelTable *avx2_table();

// Best backend for this CPU, honouring ASYNCPPO_KERNELS=scalar|avx2.
Backend detect();

// Table currently used by the span wrappers below.
const KernelTable &active();

// Force a backend. Throws ConfigError when the backend is unavailable.
void select(Backend backend);

std::string_view backend_name(Backend backend);

// Span wrappers over active().
void gemv(std::span<const double> a, std::size_t rows, std::size_t cols,
          std::span<const double> x, std::span<const double> bias,
          std::span<double> out);
void axpy(double alpha, std::span<const double> x, std::span<double> y);
double dot(std::span<const double> a, std::span<const double> b);
double sum_squares(std::span<const double> x);
void scale(double alpha, std::span<double> x);
void adamw(std::span<double> param, std::span<const double> grad,
           std::span<double> m, std::span<double> v,
           const AdamwCoefficients &c);

} // namespace asyncppo::kernels
