#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <vector>

#include "rangefuse/tensor.hpp"

using namespace rangefuse;

namespace {

constexpr double kGradTol = 1e-4;

Tensor rand_t(Rng& rng, std::vector<int> shape, double lo = -1.5, double hi = 1.5) {
  return Tensor::uniform(rng, std::move(shape), lo, hi);
}

}  // namespace

TEST_CASE("broadcast add/sub/mul values") {
  Tensor a = Tensor::from({1, 2, 3, 4, 5, 6}, {2, 3});
  Tensor b = Tensor::from({10, 20, 30}, {3});
  Tensor c = add(a, b);
  CHECK(c.shape() == std::vector<int>{2, 3});
  CHECK(c.data() == std::vector<double>{11, 22, 33, 14, 25, 36});

  Tensor col = Tensor::from({100, 200}, {2, 1});
  Tensor d = mul(a, col);
  CHECK(d.data() == std::vector<double>{100, 200, 300, 800, 1000, 1200});

  Tensor e = sub(a, a);
  for (double v : e.data()) CHECK(v == 0.0);

  CHECK_THROWS_AS(add(Tensor::zeros({2, 3}), Tensor::zeros({4})), DimensionError);
}

TEST_CASE("binary op gradients (same shape and broadcast)") {
  Rng rng(1);
  Tensor other = rand_t(rng, {2, 3});
  auto fa = [&](const Tensor& x) { return sum_all(mul(x, other)); };
  CHECK(check_gradients(fa, rand_t(rng, {2, 3})) < kGradTol);

  auto fb = [&](const Tensor& x) { return sum_all(square(add(other, x))); };
  CHECK(check_gradients(fb, rand_t(rng, {3})) < kGradTol);  // broadcast rhs

  auto fc = [&](const Tensor& x) { return sum_all(mul(other, x)); };
  CHECK(check_gradients(fc, rand_t(rng, {2, 1})) < kGradTol);  // broadcast column

  auto fd = [&](const Tensor& x) { return sum_all(sub(x, other)); };
  CHECK(check_gradients(fd, rand_t(rng, {1, 3})) < kGradTol);
}

TEST_CASE("unary op gradients") {
  Rng rng(2);
  auto check = [&](auto op, Tensor x) {
    auto f = [&](const Tensor& t) { return sum_all(op(t)); };
    CHECK(check_gradients(f, x) < kGradTol);
  };
  check([](const Tensor& t) { return neg(t); }, rand_t(rng, {4, 3}));
  check([](const Tensor& t) { return exp_(t); }, rand_t(rng, {5}));
  check([](const Tensor& t) { return log_(t); }, rand_t(rng, {5}, 0.2, 3.0));
  check([](const Tensor& t) { return sqrt_(t); }, rand_t(rng, {5}, 0.2, 3.0));
  check([](const Tensor& t) { return square(t); }, rand_t(rng, {5}));
  check([](const Tensor& t) { return sigmoid(t); }, rand_t(rng, {7}));
  check([](const Tensor& t) { return leaky_relu(t, 0.01); }, rand_t(rng, {16}));
  check([](const Tensor& t) { return xlogx(t); }, rand_t(rng, {6}, 0.05, 0.95));
  check([](const Tensor& t) { return abs_(t); }, rand_t(rng, {6}, 0.1, 2.0));
  check([](const Tensor& t) { return mul_scalar(t, -2.5); }, rand_t(rng, {6}));
  check([](const Tensor& t) { return add_scalar(t, 3.0); }, rand_t(rng, {6}));
}

TEST_CASE("xlogx is exactly zero at zero") {
  Tensor x = Tensor::from({0.0, 1.0, 0.5}, {3});
  Tensor y = xlogx(x);
  CHECK(y.data()[0] == 0.0);
  CHECK(y.data()[1] == 0.0);
  CHECK(y.data()[2] == doctest::Approx(0.5 * std::log(0.5)));
}

TEST_CASE("shape op values and gradients") {
  Rng rng(3);
  Tensor x = rand_t(rng, {2, 6});

  Tensor r = reshape(x, {3, 4});
  CHECK(r.data() == x.data());
  CHECK_THROWS_AS(reshape(x, {5}), DimensionError);

  Tensor t = transpose2d(x);
  CHECK(t.dim(0) == 6);
  CHECK(t.data()[1 * 2 + 0] == x.data()[0 * 6 + 1]);

  auto f_res = [](const Tensor& v) { return sum_all(square(reshape(v, {12}))); };
  CHECK(check_gradients(f_res, x) < kGradTol);
  auto f_tr = [](const Tensor& v) { return sum_all(square(transpose2d(v))); };
  CHECK(check_gradients(f_tr, x) < kGradTol);

  Tensor a = Tensor::from({1, 2, 3, 4}, {2, 2});
  Tensor b = Tensor::from({5, 6}, {2, 1});
  Tensor cat = concat({a, b}, 1);
  CHECK(cat.shape() == std::vector<int>{2, 3});
  CHECK(cat.data() == std::vector<double>{1, 2, 5, 3, 4, 6});
  Tensor cat0 = concat({a, a}, 0);
  CHECK(cat0.shape() == std::vector<int>{4, 2});

  Tensor other = rand_t(rng, {2, 2});
  auto f_cat = [&](const Tensor& v) { return sum_all(square(concat({v, other}, 0))); };
  CHECK(check_gradients(f_cat, rand_t(rng, {3, 2})) < kGradTol);

  Tensor s = slice(cat, 1, 1, 2);
  CHECK(s.data() == std::vector<double>{2, 5, 4, 6});
  auto f_sl = [](const Tensor& v) { return sum_all(square(slice(v, 0, 1, 2))); };
  CHECK(check_gradients(f_sl, rand_t(rng, {4, 3})) < kGradTol);
  CHECK_THROWS_AS(slice(cat, 1, 2, 5), DimensionError);
}

TEST_CASE("chw/rows layout round trip") {
  Rng rng(4);
  Tensor x = rand_t(rng, {3, 2, 4});
  Tensor rows = chw_to_rows(x);
  CHECK(rows.shape() == std::vector<int>{8, 3});
  CHECK(rows.data()[0 * 3 + 2] == x.data()[2 * 8 + 0]);
  Tensor back = rows_to_chw(rows, 2, 4);
  CHECK(back.data() == x.data());

  auto f = [](const Tensor& v) { return sum_all(square(chw_to_rows(v))); };
  CHECK(check_gradients(f, x) < kGradTol);
  auto g = [](const Tensor& v) { return sum_all(square(rows_to_chw(v, 2, 4))); };
  CHECK(check_gradients(g, rows) < kGradTol);
}

TEST_CASE("matmul values and gradients") {
  Tensor a = Tensor::from({1, 2, 3, 4, 5, 6}, {2, 3});
  Tensor b = Tensor::from({7, 8, 9, 10, 11, 12}, {3, 2});
  Tensor c = matmul(a, b);
  CHECK(c.data() == std::vector<double>{58, 64, 139, 154});

  Rng rng(5);
  Tensor B = rand_t(rng, {4, 3});
  auto fa = [&](const Tensor& A) { return sum_all(square(matmul(A, B))); };
  CHECK(check_gradients(fa, rand_t(rng, {2, 4})) < kGradTol);
  Tensor A = rand_t(rng, {2, 4});
  auto fb = [&](const Tensor& Bv) { return sum_all(square(matmul(A, Bv))); };
  CHECK(check_gradients(fb, rand_t(rng, {4, 3})) < kGradTol);
  CHECK_THROWS_AS(matmul(A, rand_t(rng, {3, 2})), DimensionError);
}

TEST_CASE("softmax rows: partition of unity, shift invariance, gradients") {
  Rng rng(6);
  Tensor x = rand_t(rng, {5, 7}, -4.0, 4.0);
  Tensor p = softmax_rows(x);
  for (int r = 0; r < 5; ++r) {
    double s = 0.0;
    for (int c = 0; c < 7; ++c) s += p.data()[r * 7 + c];
    CHECK(s == doctest::Approx(1.0).epsilon(1e-12));
  }
  Tensor shifted = add_scalar(x, 100.0);
  Tensor p2 = softmax_rows(shifted);
  for (std::size_t i = 0; i < p.data().size(); ++i)
    CHECK(p2.data()[i] == doctest::Approx(p.data()[i]).epsilon(1e-12));

  Tensor lp = log_softmax_rows(x);
  for (std::size_t i = 0; i < p.data().size(); ++i)
    CHECK(std::exp(lp.data()[i]) == doctest::Approx(p.data()[i]).epsilon(1e-12));

  Tensor w = rand_t(rng, {5, 7});
  auto f = [&](const Tensor& v) { return sum_all(mul(w, softmax_rows(v))); };
  CHECK(check_gradients(f, rand_t(rng, {5, 7})) < kGradTol);
  auto g = [&](const Tensor& v) { return sum_all(mul(w, log_softmax_rows(v))); };
  CHECK(check_gradients(g, rand_t(rng, {5, 7})) < kGradTol);
}

namespace {

// independent conv oracle: plain quadruple loop with zero padding
std::vector<double> conv_oracle(const std::vector<double>& x, int Ci, int H, int W,
                                const std::vector<double>& w, int Co, int k,
                                const std::vector<double>& b) {
  std::vector<double> out(static_cast<std::size_t>(Co) * H * W, 0.0);
  int pad = k / 2;
  for (int co = 0; co < Co; ++co)
    for (int y = 0; y < H; ++y)
      for (int xx = 0; xx < W; ++xx) {
        double acc = b[co];
        for (int ci = 0; ci < Ci; ++ci)
          for (int ky = 0; ky < k; ++ky)
            for (int kx = 0; kx < k; ++kx) {
              int iy = y + ky - pad, ix = xx + kx - pad;
              if (iy < 0 || iy >= H || ix < 0 || ix >= W) continue;
              acc += w[((co * Ci + ci) * k + ky) * k + kx] * x[(ci * H + iy) * W + ix];
            }
        out[(co * H + y) * W + xx] = acc;
      }
  return out;
}

}  // namespace

TEST_CASE("conv2d matches brute-force oracle (1x1 and 3x3)") {
  Rng rng(7);
  int Ci = 3, H = 5, W = 6;
  Tensor x = rand_t(rng, {Ci, H, W});
  for (int k : {1, 3}) {
    int Co = 4;
    Tensor w = rand_t(rng, {Co, Ci, k, k});
    Tensor b = rand_t(rng, {Co});
    Tensor y = conv2d(x, w, b);
    auto want = conv_oracle(x.data(), Ci, H, W, w.data(), Co, k, b.data());
    REQUIRE(y.data().size() == want.size());
    for (std::size_t i = 0; i < want.size(); ++i)
      CHECK(y.data()[i] == doctest::Approx(want[i]).epsilon(1e-12));
  }
  CHECK_THROWS_AS(conv2d(x, rand_t(rng, {2, Ci, 5, 5}), rand_t(rng, {2})), DimensionError);
  CHECK_THROWS_AS(conv2d(x, rand_t(rng, {2, Ci + 1, 3, 3}), rand_t(rng, {2})), DimensionError);
}

TEST_CASE("conv2d gradients wrt input, weight, bias") {
  Rng rng(8);
  int Ci = 2, H = 4, W = 5, Co = 3, k = 3;
  Tensor x = rand_t(rng, {Ci, H, W});
  Tensor w = rand_t(rng, {Co, Ci, k, k});
  Tensor b = rand_t(rng, {Co});

  auto fx = [&](const Tensor& v) { return sum_all(square(conv2d(v, w, b))); };
  CHECK(check_gradients(fx, x) < kGradTol);
  auto fw = [&](const Tensor& v) { return sum_all(square(conv2d(x, v, b))); };
  CHECK(check_gradients(fw, w) < kGradTol);
  auto fb = [&](const Tensor& v) { return sum_all(square(conv2d(x, w, v))); };
  CHECK(check_gradients(fb, b) < kGradTol);
}

TEST_CASE("batchnorm2d normalizes, tracks running stats, and differentiates") {
  Rng rng(9);
  int C = 3, H = 4, W = 6;
  Tensor x = rand_t(rng, {C, H, W}, -2.0, 5.0);
  Tensor gamma = Tensor::full({C}, 1.0);
  Tensor beta = Tensor::zeros({C});
  std::vector<double> rm(C, 0.0), rv(C, 1.0);

  Tensor y = batchnorm2d(x, gamma, beta, rm, rv, true, 1e-5, 0.1);
  int plane = H * W;
  for (int c = 0; c < C; ++c) {
    double mean = 0.0, var = 0.0;
    for (int i = 0; i < plane; ++i) mean += y.data()[c * plane + i];
    mean /= plane;
    for (int i = 0; i < plane; ++i) {
      double d = y.data()[c * plane + i] - mean;
      var += d * d;
    }
    var /= plane;
    CHECK(mean == doctest::Approx(0.0).epsilon(1e-9));
    CHECK(var == doctest::Approx(1.0).epsilon(1e-3));  // eps shrinks var slightly
    CHECK(rm[c] != 0.0);                               // running stats moved
  }

  // eval mode: y = gamma*(x-rm)/sqrt(rv+eps)+beta, per-element
  Tensor ye = batchnorm2d(x, gamma, beta, rm, rv, false, 1e-5, 0.1);
  for (int c = 0; c < C; ++c)
    for (int i = 0; i < plane; ++i) {
      double want = (x.data()[c * plane + i] - rm[c]) / std::sqrt(rv[c] + 1e-5);
      CHECK(ye.data()[c * plane + i] == doctest::Approx(want).epsilon(1e-12));
    }

  std::vector<double> rm2(C, 0.0), rv2(C, 1.0);
  auto fx = [&](const Tensor& v) {
    std::vector<double> m = rm2, s = rv2;
    return sum_all(square(batchnorm2d(v, gamma, beta, m, s, true, 1e-5, 0.1)));
  };
  CHECK(check_gradients(fx, rand_t(rng, {C, H, W})) < kGradTol);
  Tensor g2 = rand_t(rng, {C}, 0.5, 1.5);
  auto fg = [&](const Tensor& v) {
    std::vector<double> m = rm2, s = rv2;
    return sum_all(square(batchnorm2d(x, v, beta, m, s, true, 1e-5, 0.1)));
  };
  CHECK(check_gradients(fg, g2) < kGradTol);
  auto fbeta = [&](const Tensor& v) {
    std::vector<double> m = rm2, s = rv2;
    return sum_all(square(batchnorm2d(x, gamma, v, m, s, true, 1e-5, 0.1)));
  };
  CHECK(check_gradients(fbeta, rand_t(rng, {C})) < kGradTol);
}

TEST_CASE("avg_pool2x2 and bilinear upsample") {
  Tensor x = Tensor::from({1, 2, 3, 4, 5, 6, 7, 8}, {1, 2, 4});
  Tensor p = avg_pool2x2(x);
  CHECK(p.shape() == std::vector<int>{1, 1, 2});
  CHECK(p.data() == std::vector<double>{3.5, 5.5});
  CHECK_THROWS_AS(avg_pool2x2(Tensor::zeros({1, 3, 4})), DimensionError);

  Rng rng(10);
  auto fp = [](const Tensor& v) { return sum_all(square(avg_pool2x2(v))); };
  CHECK(check_gradients(fp, rand_t(rng, {2, 4, 6})) < kGradTol);

  // align-corners keeps the corner samples exact
  Tensor up = upsample_bilinear(x, 3, 7);
  CHECK(up.data()[0] == 1.0);
  CHECK(up.data()[6] == 4.0);
  CHECK(up.data()[2 * 7 + 0] == 5.0);
  CHECK(up.data()[2 * 7 + 6] == 8.0);
  // mid row between the two source rows
  CHECK(up.data()[1 * 7 + 0] == doctest::Approx(3.0));

  auto fu = [](const Tensor& v) { return sum_all(square(upsample_bilinear(v, 5, 9))); };
  CHECK(check_gradients(fu, rand_t(rng, {2, 3, 4})) < kGradTol);

  // degenerate 1-wide input still upsamples
  Tensor one = Tensor::from({2.0}, {1, 1, 1});
  Tensor up1 = upsample_bilinear(one, 2, 3);
  for (double v : up1.data()) CHECK(v == 2.0);
}

TEST_CASE("global pooling over space and channels") {
  Tensor x = Tensor::from({1, 2, 3, 4, 10, 20, 30, 40}, {2, 2, 2});
  Tensor ps = pool_global(x, PoolAxis::space, PoolMode::avg_and_max);
  CHECK(ps.shape() == std::vector<int>{4});
  CHECK(ps.data() == std::vector<double>{2.5, 25.0, 4.0, 40.0});

  Tensor pc = pool_global(x, PoolAxis::channel, PoolMode::avg_and_max);
  CHECK(pc.shape() == std::vector<int>{2, 2, 2});
  CHECK(pc.data() == std::vector<double>{5.5, 11, 16.5, 22, 10, 20, 30, 40});

  Rng rng(11);
  for (auto axis : {PoolAxis::space, PoolAxis::channel})
    for (auto mode : {PoolMode::avg, PoolMode::max, PoolMode::avg_and_max}) {
      auto f = [&](const Tensor& v) { return sum_all(square(pool_global(v, axis, mode))); };
      CHECK(check_gradients(f, rand_t(rng, {3, 2, 4})) < kGradTol);
    }
}

TEST_CASE("gather/scatter rows") {
  Tensor x = Tensor::from({1, 2, 3, 4, 5, 6}, {3, 2});
  Tensor g = gather_rows(x, {2, 0, 2});
  CHECK(g.data() == std::vector<double>{5, 6, 1, 2, 5, 6});
  CHECK_THROWS_AS(gather_rows(x, {3}), ContractError);

  Tensor s = scatter_rows(g, {1, 1, 0}, 2);
  CHECK(s.data() == std::vector<double>{5, 6, 6, 8});  // row1 = [5,6]+[1,2]

  Rng rng(12);
  std::vector<int> idx = {0, 3, 3, 1};
  auto fg = [&](const Tensor& v) { return sum_all(square(gather_rows(v, idx))); };
  CHECK(check_gradients(fg, rand_t(rng, {4, 3})) < kGradTol);
  auto fs = [&](const Tensor& v) { return sum_all(square(scatter_rows(v, idx, 5))); };
  CHECK(check_gradients(fs, rand_t(rng, {4, 3})) < kGradTol);
}

TEST_CASE("segment reductions match brute force") {
  Tensor x = Tensor::from({1, 2, 3, 4, 5, 6, 7, 8}, {4, 2});
  std::vector<int> seg = {1, 0, 1, 1};

  Tensor ssum = segment_sum(x, seg, 3);
  CHECK(ssum.data() == std::vector<double>{3, 4, 13, 16, 0, 0});
  Tensor smean = segment_mean(x, seg, 3);
  CHECK(smean.data() == std::vector<double>{3, 4, 13.0 / 3, 16.0 / 3, 0, 0});
  Tensor smax = segment_max(x, seg, 3);
  CHECK(smax.data() == std::vector<double>{3, 4, 7, 8, 0, 0});

  Rng rng(13);
  auto fsum = [&](const Tensor& v) { return sum_all(square(segment_sum(v, seg, 3))); };
  CHECK(check_gradients(fsum, rand_t(rng, {4, 2})) < kGradTol);
  auto fmean = [&](const Tensor& v) { return sum_all(square(segment_mean(v, seg, 3))); };
  CHECK(check_gradients(fmean, rand_t(rng, {4, 2})) < kGradTol);
  auto fmax = [&](const Tensor& v) { return sum_all(square(segment_max(v, seg, 3))); };
  CHECK(check_gradients(fmax, rand_t(rng, {4, 2})) < kGradTol);
}

TEST_CASE("segment softmax sums to one per segment") {
  Tensor logits = Tensor::from({0.5, -1.0, 2.0, 0.0, 1.0}, {5, 1});
  std::vector<int> seg = {0, 0, 1, 1, 1};
  Tensor p = segment_softmax(logits, seg, 2);
  CHECK(p.data()[0] + p.data()[1] == doctest::Approx(1.0).epsilon(1e-12));
  CHECK(p.data()[2] + p.data()[3] + p.data()[4] == doctest::Approx(1.0).epsilon(1e-12));
  CHECK(p.data()[2] > p.data()[4]);

  Rng rng(14);
  Tensor w = rand_t(rng, {5, 1});
  auto f = [&](const Tensor& v) { return sum_all(mul(w, segment_softmax(v, seg, 2))); };
  CHECK(check_gradients(f, rand_t(rng, {5, 1})) < kGradTol);
}

TEST_CASE("where_mask selects per pixel") {
  std::vector<std::uint8_t> mask = {1, 0, 0, 1};
  Tensor a = Tensor::from({1, 2, 3, 4, 5, 6, 7, 8}, {2, 2, 2});
  Tensor b = Tensor::from({-1, -2, -3, -4, -5, -6, -7, -8}, {2, 2, 2});
  Tensor y = where_mask(mask, a, b);
  CHECK(y.data() == std::vector<double>{1, -2, -3, 4, 5, -6, -7, 8});

  Rng rng(15);
  auto fa = [&](const Tensor& v) { return sum_all(square(where_mask(mask, v, b))); };
  CHECK(check_gradients(fa, rand_t(rng, {2, 2, 2})) < kGradTol);
  auto fb = [&](const Tensor& v) { return sum_all(square(where_mask(mask, a, v))); };
  CHECK(check_gradients(fb, rand_t(rng, {2, 2, 2})) < kGradTol);
}

TEST_CASE("nll over valid rows") {
  Tensor lp = log_softmax_rows(Tensor::from({2, 0, 0, 0, 3, 0}, {2, 3}));
  std::vector<int> labels = {0, 1};
  std::vector<std::uint8_t> valid = {1, 1};
  Tensor loss = nll_rows(lp, labels, valid);
  double want = -0.5 * (lp.data()[0] + lp.data()[4]);
  CHECK(loss.item() == doctest::Approx(want).epsilon(1e-12));

  std::vector<std::uint8_t> none = {0, 0};
  CHECK(nll_rows(lp, labels, none).item() == 0.0);
  CHECK_THROWS_AS(nll_rows(lp, {0, 9}, valid), ContractError);

  Rng rng(16);
  auto f = [&](const Tensor& v) {
    return nll_rows(log_softmax_rows(v), labels, valid);
  };
  CHECK(check_gradients(f, rand_t(rng, {2, 3})) < kGradTol);
}

TEST_CASE("tape mechanics") {
  Tensor x = Tensor::from({2.0}, {1}, true);
  {
    TapeScope scope;
    Tensor y = square(x);
    CHECK(tape_size() == 1);
    backward(y);
    CHECK(tape_size() == 0);
    CHECK(x.grad()[0] == doctest::Approx(4.0));
  }
  // gradients accumulate across backward passes until cleared
  x.zero_grad();
  {
    TapeScope scope;
    backward(square(x));
  }
  {
    TapeScope scope;
    backward(square(x));
  }
  CHECK(x.grad()[0] == doctest::Approx(8.0));

  // NoGradScope suppresses recording
  x.zero_grad();
  {
    TapeScope scope;
    NoGradScope ng;
    Tensor y = square(x);
    CHECK(tape_size() == 0);
  }

  // no recording at all outside a TapeScope
  Tensor z = square(x);
  CHECK_FALSE(z.requires_grad());

  CHECK_THROWS_AS(backward(Tensor::zeros({2})), ContractError);
  {
    TapeScope scope;
    Tensor bad = Tensor::from({std::numeric_limits<double>::quiet_NaN()}, {1}, true);
    CHECK_THROWS_AS(backward(mul_scalar(bad, 1.0)), ContractError);
  }
}

TEST_CASE("detach stops gradient flow") {
  Tensor x = Tensor::from({3.0}, {1}, true);
  {
    TapeScope scope;
    Tensor y = mul(detach(square(x)), x);  // d/dx = 9 only through the live factor
    backward(y);
  }
  CHECK(x.grad()[0] == doctest::Approx(9.0));
}

TEST_CASE("validate_finite flags bad values") {
  CHECK_NOTHROW(validate_finite(Tensor::from({1.0, -2.0}, {2}), "probe"));
  CHECK_THROWS_AS(
      validate_finite(Tensor::from({1.0, std::numeric_limits<double>::infinity()}, {2}), "probe"),
      InvalidInputError);
}

TEST_CASE("composite network slice differentiates end to end") {
  // conv -> bn -> leaky -> pool -> upsample -> softmax over rows: one gradcheck
  Rng rng(17);
  int C = 2, H = 4, W = 4;
  Tensor w = rand_t(rng, {3, C, 3, 3}, -0.5, 0.5);
  Tensor b = Tensor::zeros({3});
  Tensor gamma = Tensor::full({3}, 1.0);
  Tensor beta = Tensor::zeros({3});
  Tensor target = rand_t(rng, {8, 3});
  auto f = [&](const Tensor& v) {
    std::vector<double> rm(3, 0.0), rv(3, 1.0);
    Tensor h1 = leaky_relu(batchnorm2d(conv2d(v, w, b), gamma, beta, rm, rv, true, 1e-5, 0.1), 0.01);
    Tensor h2 = upsample_bilinear(avg_pool2x2(h1), 4, 4);
    Tensor rows = softmax_rows(chw_to_rows(h2));
    return sum_all(square(sub(slice(rows, 0, 0, 8), target)));
  };
  CHECK(check_gradients(f, rand_t(rng, {C, H, W})) < kGradTol);
}
