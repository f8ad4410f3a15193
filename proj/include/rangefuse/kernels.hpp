#pragma once

#include <cstddef>

// Low-level arithmetic kernels. Every entry point has a scalar reference
// implementation and (on x86-64 with AVX2+FMA) a vectorized variant; the
// active table is chosen at startup and can be overridden at runtime.
//
// Two kernel classes:
//  * order-preserving: the floating-point operation sequence per output
//    element is identical in every backend (scalar uses std::fma where the
//    vector variant uses vfmadd), so results are bit-identical.
//  * reductions (dot, sum): the AVX2 variant accumulates in four lanes and
//    combines them in a fixed order, which differs from the sequential
//    scalar order. Deterministic mode routes these to the scalar variant.

namespace rangefuse::kern {

enum class Backend { scalar, avx2 };

struct Table {
  // order-preserving
  void (*fma_row)(double a, const double* x, double* y, std::size_t n);  // y[i] = fma(a, x[i], y[i])
  void (*add)(const double* a, const double* b, double* out, std::size_t n);
  void (*sub)(const double* a, const double* b, double* out, std::size_t n);
  void (*mul)(const double* a, const double* b, double* out, std::size_t n);
  void (*scale)(double a, const double* x, double* y, std::size_t n);    // y[i] = a * x[i]
  void (*axpy)(double a, const double* x, double* y, std::size_t n);     // y[i] += a * x[i]
  void (*leaky_fwd)(const double* x, double* y, std::size_t n, double slope);
  void (*leaky_bwd)(const double* x, const double* gy, double* gx, std::size_t n, double slope);
  // reductions
  double (*dot)(const double* a, const double* b, std::size_t n);
  double (*sum)(const double* x, std::size_t n);
};

const Table& active();
Backend backend();
bool cpu_has_avx2();

// Force a backend (tests / CLI). Ignored with a fallback to scalar when the
// CPU lacks the requested feature set.
void set_backend(Backend b);

// Deterministic mode: reductions use the sequential scalar order.
void set_sequential_reductions(bool on);
bool sequential_reductions();

// Reference (scalar) table, always available; used by equivalence tests.
const Table& scalar_table();
// Vector table, or nullptr when unsupported on this CPU.
const Table* simd_table();

// C[M x N] = A[M x K] * B[K x N], row-major. Built on fma_row: the
// accumulation order over K is sequential in every backend.
void matmul(const double* A, const double* B, double* C,
            std::size_t M, std::size_t K, std::size_t N);
// C += A * B
void matmul_acc(const double* A, const double* B, double* C,
                std::size_t M, std::size_t K, std::size_t N);

}  // namespace rangefuse::kern
