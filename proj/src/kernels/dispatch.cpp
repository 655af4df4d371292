#include "asyncppo/errors.hpp"
#include "asyncppo/kernels.hpp"

#include <atomic>
#include <cstdlib>
#include <string>

namespace asyncppo::kernels {

#ifdef ASYNCPPO_HAVE_AVX2
const KernelTable &avx2_table_unchecked();
#endif

namespace {

bool cpu_has_avx2() {
#if defined(ASYNCPPO_HAVE_AVX2) && (defined(__GNUC__) || defined(__clang__))
  return __builtin_cpu_supports("avx2") && __builtin_cpu_supports("fma");
#else
  return false;
#endif
}

const KernelTable &table_for(Backend backend) {
  if (backend == Backend::avx2) {
    if (const KernelTable *t = avx2_table())
      return *t;
    throw ConfigError("avx2 kernels are not available on this build/CPU");
  }
  return scalar_table();
}

std::atomic<const KernelTable *> &active_slot() {
  static std::atomic<const KernelTable *> slot{&table_for(detect())};
  return slot;
}

} // namespace

const KernelTable *avx2_table() {
#ifdef ASYNCPPO_HAVE_AVX2
  if (cpu_has_avx2())
    return &avx2_table_unchecked();
#endif
  return nullptr;
}

Backend detect() {
  if (const char *env = std::getenv("ASYNCPPO_KERNELS")) {
    const std::string requested{env};
    if (requested == "scalar")
      return Backend::scalar;
    if (requested == "avx2" && avx2_table() != nullptr)
      return Backend::avx2;
  }
  return avx2_table() != nullptr ? Backend::avx2 : Backend::scalar;
}

const KernelTable &active() {
  return *active_slot().load(std::memory_order_acquire);
}

void select(Backend backend) {
  active_slot().store(&table_for(backend), std::memory_order_release);
}

std::string_view backend_name(Backend backend) {
  return backend == Backend::avx2 ? "avx2" : "scalar";
}

void gemv(std::span<const double> a, std::size_t rows, std::size_t cols,
          std::span<const double> x, std::span<const double> bias,
          std::span<double> out) {
  if (a.size() != rows * cols || x.size() != cols || bias.size() != rows ||
      out.size() != rows)
    throw InvariantViolation("gemv: dimension mismatch");
  active().gemv(a.data(), rows, cols, x.data(), bias.data(), out.data());
}

void axpy(double alpha, std::span<const double> x, std::span<double> y) {
  if (x.size() != y.size())
    throw InvariantViolation("axpy: dimension mismatch");
  active().axpy(alpha, x.data(), y.data(), x.size());
}

double dot(std::span<const double> a, std::span<const double> b) {
  if (a.size() != b.size())
    throw InvariantViolation("dot: dimension mismatch");
  return active().dot(a.data(), b.data(), a.size());
}

double sum_squares(std::span<const double> x) {
  return active().sum_squares(x.data(), x.size());
}

void scale(double alpha, std::span<double> x) {
  active().scale(alpha, x.data(), x.size());
}

void adamw(std::span<double> param, std::span<const double> grad,
           std::span<double> m, std::span<double> v,
           const AdamwCoefficients &c) {
  const auto n = param.size();
  if (grad.size() != n || m.size() != n || v.size() != n)
    throw InvariantViolation("adamw: dimension mismatch");
  active().adamw(param.data(), grad.data(), m.data(), v.data(), n, c);
}

} // namespace asyncppo::kernels
