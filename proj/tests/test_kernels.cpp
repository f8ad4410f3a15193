#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <vector>

#include "rangefuse/kernels.hpp"
#include "rangefuse/rng.hpp"

using namespace rangefuse;

namespace {

std::vector<double> random_vec(Rng& rng, std::size_t n, double lo = -2.0, double hi = 2.0) {
  std::vector<double> v(n);
  for (auto& x : v) x = rng.uniform(lo, hi);
  return v;
}

}  // namespace

TEST_CASE("order-preserving kernels are bit-identical across backends") {
  const kern::Table* simd = kern::simd_table();
  if (!simd) return;  // non-x86 build: nothing to compare
  const kern::Table& ref = kern::scalar_table();
  Rng rng(20240811);

  for (std::size_t n : {std::size_t(1), std::size_t(3), std::size_t(4), std::size_t(7),
                        std::size_t(8), std::size_t(64), std::size_t(129), std::size_t(1000)}) {
    auto a = random_vec(rng, n), b = random_vec(rng, n);
    double c = rng.uniform(-3.0, 3.0);

    std::vector<double> y1 = random_vec(rng, n);
    std::vector<double> y2 = y1;
    ref.fma_row(c, a.data(), y1.data(), n);
    simd->fma_row(c, a.data(), y2.data(), n);
    CHECK(y1 == y2);

    std::vector<double> o1(n), o2(n);
    ref.add(a.data(), b.data(), o1.data(), n);
    simd->add(a.data(), b.data(), o2.data(), n);
    CHECK(o1 == o2);
    ref.sub(a.data(), b.data(), o1.data(), n);
    simd->sub(a.data(), b.data(), o2.data(), n);
    CHECK(o1 == o2);
    ref.mul(a.data(), b.data(), o1.data(), n);
    simd->mul(a.data(), b.data(), o2.data(), n);
    CHECK(o1 == o2);
    ref.scale(c, a.data(), o1.data(), n);
    simd->scale(c, a.data(), o2.data(), n);
    CHECK(o1 == o2);

    y2 = y1;
    ref.axpy(c, b.data(), y1.data(), n);
    simd->axpy(c, b.data(), y2.data(), n);
    CHECK(y1 == y2);

    ref.leaky_fwd(a.data(), o1.data(), n, 0.01);
    simd->leaky_fwd(a.data(), o2.data(), n, 0.01);
    CHECK(o1 == o2);

    std::vector<double> g1(n, 0.0), g2(n, 0.0);
    ref.leaky_bwd(a.data(), b.data(), g1.data(), n, 0.01);
    simd->leaky_bwd(a.data(), b.data(), g2.data(), n, 0.01);
    CHECK(g1 == g2);
  }
}

TEST_CASE("reductions agree across backends within tolerance") {
  const kern::Table* simd = kern::simd_table();
  if (!simd) return;
  const kern::Table& ref = kern::scalar_table();
  Rng rng(7);
  for (std::size_t n : {std::size_t(1), std::size_t(5), std::size_t(8), std::size_t(1023)}) {
    auto a = random_vec(rng, n), b = random_vec(rng, n);
    double d1 = ref.dot(a.data(), b.data(), n);
    double d2 = simd->dot(a.data(), b.data(), n);
    CHECK(std::fabs(d1 - d2) <= 1e-12 * std::max(1.0, std::fabs(d1)));
    double s1 = ref.sum(a.data(), n);
    double s2 = simd->sum(a.data(), n);
    CHECK(std::fabs(s1 - s2) <= 1e-12 * std::max(1.0, std::fabs(s1)));
  }
}

TEST_CASE("sequential-reduction mode routes reductions to the scalar order") {
  if (!kern::simd_table()) return;
  kern::set_backend(kern::Backend::avx2);
  kern::set_sequential_reductions(true);
  Rng rng(99);
  auto a = random_vec(rng, 777), b = random_vec(rng, 777);
  double want_dot = kern::scalar_table().dot(a.data(), b.data(), a.size());
  double want_sum = kern::scalar_table().sum(a.data(), a.size());
  CHECK(kern::active().dot(a.data(), b.data(), a.size()) == want_dot);
  CHECK(kern::active().sum(a.data(), a.size()) == want_sum);
  kern::set_sequential_reductions(false);
  kern::set_backend(kern::Backend::scalar);
}

TEST_CASE("matmul matches a naive triple loop and is backend-stable") {
  Rng rng(123);
  const std::size_t M = 9, K = 13, N = 11;
  auto A = random_vec(rng, M * K), B = random_vec(rng, K * N);

  // naive oracle with the same accumulation order (k ascending, fma)
  std::vector<double> want(M * N, 0.0);
  for (std::size_t m = 0; m < M; ++m)
    for (std::size_t k = 0; k < K; ++k)
      for (std::size_t n = 0; n < N; ++n)
        want[m * N + n] = std::fma(A[m * K + k], B[k * N + n], want[m * N + n]);

  kern::set_backend(kern::Backend::scalar);
  std::vector<double> got_s(M * N, 0.0);
  kern::matmul(A.data(), B.data(), got_s.data(), M, K, N);
  CHECK(got_s == want);

  if (kern::simd_table()) {
    kern::set_backend(kern::Backend::avx2);
    std::vector<double> got_v(M * N, 0.0);
    kern::matmul(A.data(), B.data(), got_v.data(), M, K, N);
    CHECK(got_v == got_s);
    kern::set_backend(kern::Backend::scalar);
  }

  std::vector<double> acc(M * N, 1.0);
  std::vector<double> want_acc(M * N);
  for (std::size_t i = 0; i < M * N; ++i) want_acc[i] = 1.0 + want[i];
  kern::matmul_acc(A.data(), B.data(), acc.data(), M, K, N);
  for (std::size_t i = 0; i < M * N; ++i)
    CHECK(acc[i] == doctest::Approx(want_acc[i]).epsilon(1e-15));
}

TEST_CASE("backend selection falls back to scalar when SIMD is unavailable") {
  kern::set_backend(kern::Backend::avx2);
  if (kern::simd_table())
    CHECK(kern::backend() == kern::Backend::avx2);
  else
    CHECK(kern::backend() == kern::Backend::scalar);
  kern::set_backend(kern::Backend::scalar);
  CHECK(kern::backend() == kern::Backend::scalar);
}
