#include "rangefuse/kernels.hpp"

#include <cmath>
#include <cstdlib>
#include <cstring>

namespace rangefuse::kern {

namespace {

void s_fma_row(double a, const double* x, double* y, std::size_t n) {
  for (std::size_t i = 0; i < n; ++i) y[i] = std::fma(a, x[i], y[i]);
}

void s_add(const double* a, const double* b, double* out, std::size_t n) {
  for (std::size_t i = 0; i < n; ++i) out[i] = a[i] + b[i];
}

void s_sub(const double* a, const double* b, double* out, std::size_t n) {
  for (std::size_t i = 0; i < n; ++i) out[i] = a[i] - b[i];
}

void s_mul(const double* a, const double* b, double* out, std::size_t n) {
  for (std::size_t i = 0; i < n; ++i) out[i] = a[i] * b[i];
}

void s_scale(double a, const double* x, double* y, std::size_t n) {
  for (std::size_t i = 0; i < n; ++i) y[i] = a * x[i];
}

void s_axpy(double a, const double* x, double* y, std::size_t n) {
  for (std::size_t i = 0; i < n; ++i) y[i] = std::fma(a, x[i], y[i]);
}

void s_leaky_fwd(const double* x, double* y, std::size_t n, double slope) {
  for (std::size_t i = 0; i < n; ++i) y[i] = x[i] > 0.0 ? x[i] : slope * x[i];
}

void s_leaky_bwd(const double* x, const double* gy, double* gx, std::size_t n, double slope) {
  for (std::size_t i = 0; i < n; ++i) gx[i] += x[i] > 0.0 ? gy[i] : slope * gy[i];
}

double s_dot(const double* a, const double* b, std::size_t n) {
  double acc = 0.0;
  for (std::size_t i = 0; i < n; ++i) acc = std::fma(a[i], b[i], acc);
  return acc;
}

double s_sum(const double* x, std::size_t n) {
  double acc = 0.0;
  for (std::size_t i = 0; i < n; ++i) acc += x[i];
  return acc;
}

constexpr Table kScalar = {
    s_fma_row, s_add, s_sub, s_mul, s_scale, s_axpy,
    s_leaky_fwd, s_leaky_bwd, s_dot, s_sum,
};

struct State {
  Table table = kScalar;
  Backend backend = Backend::scalar;
  bool sequential_reductions = false;
};

State& state() {
  static State s = [] {
    State init;
    const char* env = std::getenv("RANGEFUSE_KERNELS");
    bool force_scalar = env && std::strcmp(env, "scalar") == 0;
    if (!force_scalar && cpu_has_avx2() && simd_table()) {
      init.table = *simd_table();
      init.backend = Backend::avx2;
    }
    return init;
  }();
  return s;
}

void apply_reduction_policy(State& s) {
  if (s.backend == Backend::avx2 && !s.sequential_reductions) {
    s.table.dot = simd_table()->dot;
    s.table.sum = simd_table()->sum;
  } else {
    s.table.dot = kScalar.dot;
    s.table.sum = kScalar.sum;
  }
}

}  // namespace

const Table& scalar_table() { return kScalar; }

bool cpu_has_avx2() {
#if defined(__x86_64__) || defined(_M_X64)
  return __builtin_cpu_supports("avx2") && __builtin_cpu_supports("fma");
#else
  return false;
#endif
}

const Table& active() { return state().table; }

Backend backend() { return state().backend; }

void set_backend(Backend b) {
  State& s = state();
  if (b == Backend::avx2 && (!cpu_has_avx2() || !simd_table())) b = Backend::scalar;
  s.backend = b;
  s.table = b == Backend::avx2 ? *simd_table() : kScalar;
  apply_reduction_policy(s);
}

void set_sequential_reductions(bool on) {
  State& s = state();
  s.sequential_reductions = on;
  apply_reduction_policy(s);
}

bool sequential_reductions() { return state().sequential_reductions; }

void matmul(const double* A, const double* B, double* C,
            std::size_t M, std::size_t K, std::size_t N) {
  std::memset(C, 0, M * N * sizeof(double));
  matmul_acc(A, B, C, M, K, N);
}

void matmul_acc(const double* A, const double* B, double* C,
                std::size_t M, std::size_t K, std::size_t N) {
  const Table& t = active();
  for (std::size_t m = 0; m < M; ++m) {
    double* crow = C + m * N;
    const double* arow = A + m * K;
    for (std::size_t k = 0; k < K; ++k) {
      t.fma_row(arow[k], B + k * N, crow, N);
    }
  }
}

}  // namespace rangefuse::kern
