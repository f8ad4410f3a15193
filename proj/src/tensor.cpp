#include "rangefuse/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <limits>
#include <string>

#include "rangefuse/kernels.hpp"

namespace rangefuse {

namespace {

std::int64_t shape_numel(const std::vector<int>& shape) {
  std::int64_t n = 1;
  for (int d : shape) {
    if (d < 0) throw DimensionError("negative dimension");
    n *= d;
  }
  return n;
}

std::string shape_str(const std::vector<int>& s) {
  std::string r = "[";
  for (std::size_t i = 0; i < s.size(); ++i) {
    if (i) r += ",";
    r += std::to_string(s[i]);
  }
  return r + "]";
}

struct TapeState {
  std::vector<std::function<void()>> ops;
  int active_scopes = 0;
  int nograd_scopes = 0;
};

thread_local TapeState g_tape;

bool recording() { return g_tape.active_scopes > 0 && g_tape.nograd_scopes == 0; }

using NodePtr = std::shared_ptr<TensorNode>;

NodePtr make_node(std::vector<int> shape) {
  auto n = std::make_shared<TensorNode>();
  n->shape = std::move(shape);
  n->val.assign(static_cast<std::size_t>(shape_numel(n->shape)), 0.0);
  return n;
}

// Accumulate helper: allocate grad lazily then add.
void accum(TensorNode& n, std::size_t i, double v) {
  n.accum_grad_init();
  n.grad[i] += v;
}

bool want_grad(const Tensor& a) { return recording() && a.requires_grad(); }

}  // namespace

// ---- Tensor ------------------------------------------------------------------

Tensor Tensor::zeros(std::vector<int> shape, bool requires_grad) {
  auto n = make_node(std::move(shape));
  n->requires_grad = requires_grad;
  return Tensor(n);
}

Tensor Tensor::full(std::vector<int> shape, double v, bool requires_grad) {
  auto n = make_node(std::move(shape));
  std::fill(n->val.begin(), n->val.end(), v);
  n->requires_grad = requires_grad;
  return Tensor(n);
}

Tensor Tensor::from(std::vector<double> data, std::vector<int> shape, bool requires_grad) {
  if (static_cast<std::int64_t>(data.size()) != shape_numel(shape))
    throw DimensionError("data size " + std::to_string(data.size()) + " does not match shape " +
                         shape_str(shape));
  auto n = std::make_shared<TensorNode>();
  n->shape = std::move(shape);
  n->val = std::move(data);
  n->requires_grad = requires_grad;
  return Tensor(n);
}

Tensor Tensor::scalar(double v, bool requires_grad) {
  return Tensor::from({v}, {1}, requires_grad);
}

Tensor Tensor::uniform(Rng& rng, std::vector<int> shape, double lo, double hi,
                       bool requires_grad) {
  auto n = make_node(std::move(shape));
  for (double& v : n->val) v = rng.uniform(lo, hi);
  n->requires_grad = requires_grad;
  return Tensor(n);
}

double Tensor::item() const {
  if (numel() != 1) throw ContractError("item() on non-scalar tensor " + shape_str(shape()));
  return n_->val[0];
}

std::vector<double> Tensor::grad() const {
  if (n_->grad.empty()) return std::vector<double>(n_->val.size(), 0.0);
  return n_->grad;
}

// ---- tape ----------------------------------------------------------------------

TapeScope::TapeScope() { ++g_tape.active_scopes; }
TapeScope::~TapeScope() {
  if (--g_tape.active_scopes == 0) g_tape.ops.clear();
}

NoGradScope::NoGradScope() { ++g_tape.nograd_scopes; }
NoGradScope::~NoGradScope() { --g_tape.nograd_scopes; }

bool tape_active() { return recording(); }
void tape_push(std::function<void()> fn) { g_tape.ops.push_back(std::move(fn)); }
std::size_t tape_size() { return g_tape.ops.size(); }
void tape_clear() { g_tape.ops.clear(); }

void backward(const Tensor& loss) {
  if (loss.numel() != 1) throw ContractError("backward() requires a scalar loss");
  if (!std::isfinite(loss.item())) throw ContractError("backward() on non-finite loss");
  auto node = loss.node();
  node->accum_grad_init();
  node->grad[0] += 1.0;
  for (auto it = g_tape.ops.rbegin(); it != g_tape.ops.rend(); ++it) (*it)();
  g_tape.ops.clear();
}

// ---- broadcast binary ------------------------------------------------------------

namespace {

struct BcastPlan {
  std::vector<int> out_shape;
  std::vector<std::int64_t> sa, sb;  // strides into a and b per out axis (0 = broadcast)
  std::int64_t n = 1;
  bool same_shape = false;
};

BcastPlan plan_broadcast(const std::vector<int>& a, const std::vector<int>& b) {
  BcastPlan p;
  if (a == b) {
    p.out_shape = a;
    p.n = shape_numel(a);
    p.same_shape = true;
    return p;
  }
  std::size_t ra = a.size(), rb = b.size(), ro = std::max(ra, rb);
  p.out_shape.resize(ro);
  std::vector<int> ea(ro, 1), eb(ro, 1);
  for (std::size_t i = 0; i < ra; ++i) ea[ro - ra + i] = a[i];
  for (std::size_t i = 0; i < rb; ++i) eb[ro - rb + i] = b[i];
  for (std::size_t i = 0; i < ro; ++i) {
    if (ea[i] != eb[i] && ea[i] != 1 && eb[i] != 1)
      throw DimensionError("cannot broadcast " + shape_str(a) + " with " + shape_str(b));
    p.out_shape[i] = std::max(ea[i], eb[i]);
  }
  p.n = shape_numel(p.out_shape);
  // row-major strides within each operand's own layout, zeroed on broadcast axes
  p.sa.assign(ro, 0);
  p.sb.assign(ro, 0);
  std::int64_t st = 1;
  for (std::size_t i = ro; i-- > 0;) {
    p.sa[i] = (ea[i] == 1) ? 0 : st;
    st *= ea[i];
  }
  st = 1;
  for (std::size_t i = ro; i-- > 0;) {
    p.sb[i] = (eb[i] == 1) ? 0 : st;
    st *= eb[i];
  }
  return p;
}

enum class BinKind { add, sub, mul };

Tensor broadcast_binary(const Tensor& a, const Tensor& b, BinKind kind) {
  BcastPlan p = plan_broadcast(a.shape(), b.shape());
  auto out = make_node(p.out_shape);
  const auto& av = a.data();
  const auto& bv = b.data();
  auto& ov = out->val;
  const auto& K = kern::active();

  if (p.same_shape) {
    std::size_t n = av.size();
    switch (kind) {
      case BinKind::add: K.add(av.data(), bv.data(), ov.data(), n); break;
      case BinKind::sub: K.sub(av.data(), bv.data(), ov.data(), n); break;
      case BinKind::mul: K.mul(av.data(), bv.data(), ov.data(), n); break;
    }
  } else {
    std::size_t ro = p.out_shape.size();
    std::vector<int> idx(ro, 0);
    std::int64_t oa = 0, ob = 0;
    for (std::int64_t i = 0; i < p.n; ++i) {
      double va = av[static_cast<std::size_t>(oa)];
      double vb = bv[static_cast<std::size_t>(ob)];
      switch (kind) {
        case BinKind::add: ov[static_cast<std::size_t>(i)] = va + vb; break;
        case BinKind::sub: ov[static_cast<std::size_t>(i)] = va - vb; break;
        case BinKind::mul: ov[static_cast<std::size_t>(i)] = va * vb; break;
      }
      // odometer increment
      for (std::size_t d = ro; d-- > 0;) {
        ++idx[d];
        oa += p.sa[d];
        ob += p.sb[d];
        if (idx[d] < p.out_shape[d]) break;
        oa -= p.sa[d] * p.out_shape[d];
        ob -= p.sb[d] * p.out_shape[d];
        idx[d] = 0;
      }
    }
  }

  bool rg = recording() && (a.requires_grad() || b.requires_grad());
  out->requires_grad = rg;
  Tensor result(out);
  if (rg) {
    auto an = a.node(), bn = b.node(), on = out;
    bool ga = a.requires_grad(), gb = b.requires_grad();
    tape_push([an, bn, on, p, kind, ga, gb]() {
      if (on->grad.empty()) return;
      const auto& g = on->grad;
      if (p.same_shape) {
        std::size_t n = g.size();
        if (kind == BinKind::mul) {
          if (ga) {
            an->accum_grad_init();
            for (std::size_t i = 0; i < n; ++i) an->grad[i] += g[i] * bn->val[i];
          }
          if (gb) {
            bn->accum_grad_init();
            for (std::size_t i = 0; i < n; ++i) bn->grad[i] += g[i] * an->val[i];
          }
        } else {
          double sign_b = kind == BinKind::sub ? -1.0 : 1.0;
          if (ga) {
            an->accum_grad_init();
            kern::active().axpy(1.0, g.data(), an->grad.data(), n);
          }
          if (gb) {
            bn->accum_grad_init();
            kern::active().axpy(sign_b, g.data(), bn->grad.data(), n);
          }
        }
        return;
      }
      if (ga) an->accum_grad_init();
      if (gb) bn->accum_grad_init();
      std::size_t ro = p.out_shape.size();
      std::vector<int> idx(ro, 0);
      std::int64_t oa = 0, ob = 0;
      for (std::int64_t i = 0; i < p.n; ++i) {
        double gi = g[static_cast<std::size_t>(i)];
        switch (kind) {
          case BinKind::add:
            if (ga) an->grad[static_cast<std::size_t>(oa)] += gi;
            if (gb) bn->grad[static_cast<std::size_t>(ob)] += gi;
            break;
          case BinKind::sub:
            if (ga) an->grad[static_cast<std::size_t>(oa)] += gi;
            if (gb) bn->grad[static_cast<std::size_t>(ob)] -= gi;
            break;
          case BinKind::mul:
            if (ga) an->grad[static_cast<std::size_t>(oa)] += gi * bn->val[static_cast<std::size_t>(ob)];
            if (gb) bn->grad[static_cast<std::size_t>(ob)] += gi * an->val[static_cast<std::size_t>(oa)];
            break;
        }
        for (std::size_t d = ro; d-- > 0;) {
          ++idx[d];
          oa += p.sa[d];
          ob += p.sb[d];
          if (idx[d] < p.out_shape[d]) break;
          oa -= p.sa[d] * p.out_shape[d];
          ob -= p.sb[d] * p.out_shape[d];
          idx[d] = 0;
        }
      }
    });
  }
  return result;
}

}  // namespace

Tensor add(const Tensor& a, const Tensor& b) { return broadcast_binary(a, b, BinKind::add); }
Tensor sub(const Tensor& a, const Tensor& b) { return broadcast_binary(a, b, BinKind::sub); }
Tensor mul(const Tensor& a, const Tensor& b) { return broadcast_binary(a, b, BinKind::mul); }

// ---- unary elementwise -------------------------------------------------------------

namespace {

// fwd(x) -> y; dydx(x, y) -> local derivative
Tensor unary_op(const Tensor& x, double (*fwd)(double), double (*dydx)(double, double)) {
  auto out = make_node(x.shape());
  const auto& xv = x.data();
  for (std::size_t i = 0; i < xv.size(); ++i) out->val[i] = fwd(xv[i]);
  bool rg = want_grad(x);
  out->requires_grad = rg;
  if (rg) {
    auto xn = x.node(), on = out;
    tape_push([xn, on, dydx]() {
      if (on->grad.empty()) return;
      xn->accum_grad_init();
      for (std::size_t i = 0; i < xn->val.size(); ++i)
        xn->grad[i] += on->grad[i] * dydx(xn->val[i], on->val[i]);
    });
  }
  return Tensor(out);
}

}  // namespace

Tensor neg(const Tensor& x) {
  return unary_op(
      x, [](double v) { return -v; }, [](double, double) { return -1.0; });
}

Tensor abs_(const Tensor& x) {
  return unary_op(
      x, [](double v) { return std::fabs(v); },
      [](double v, double) { return v > 0.0 ? 1.0 : (v < 0.0 ? -1.0 : 0.0); });
}

Tensor exp_(const Tensor& x) {
  return unary_op(
      x, [](double v) { return std::exp(v); }, [](double, double y) { return y; });
}

Tensor log_(const Tensor& x) {
  return unary_op(
      x, [](double v) { return std::log(v); }, [](double v, double) { return 1.0 / v; });
}

Tensor sqrt_(const Tensor& x) {
  return unary_op(
      x, [](double v) { return std::sqrt(v); },
      [](double, double y) { return 0.5 / y; });
}

Tensor square(const Tensor& x) {
  return unary_op(
      x, [](double v) { return v * v; }, [](double v, double) { return 2.0 * v; });
}

Tensor sigmoid(const Tensor& x) {
  return unary_op(
      x, [](double v) { return 1.0 / (1.0 + std::exp(-v)); },
      [](double, double y) { return y * (1.0 - y); });
}

Tensor xlogx(const Tensor& x) {
  return unary_op(
      x, [](double v) { return v > 0.0 ? v * std::log(v) : 0.0; },
      [](double v, double) { return v > 0.0 ? std::log(v) + 1.0 : 0.0; });
}

Tensor mul_scalar(const Tensor& x, double s) {
  auto out = make_node(x.shape());
  kern::active().scale(s, x.data().data(), out->val.data(), out->val.size());
  bool rg = want_grad(x);
  out->requires_grad = rg;
  if (rg) {
    auto xn = x.node(), on = out;
    tape_push([xn, on, s]() {
      if (on->grad.empty()) return;
      xn->accum_grad_init();
      kern::active().axpy(s, on->grad.data(), xn->grad.data(), xn->grad.size());
    });
  }
  return Tensor(out);
}

Tensor add_scalar(const Tensor& x, double s) {
  auto out = make_node(x.shape());
  const auto& xv = x.data();
  for (std::size_t i = 0; i < xv.size(); ++i) out->val[i] = xv[i] + s;
  bool rg = want_grad(x);
  out->requires_grad = rg;
  if (rg) {
    auto xn = x.node(), on = out;
    tape_push([xn, on]() {
      if (on->grad.empty()) return;
      xn->accum_grad_init();
      kern::active().axpy(1.0, on->grad.data(), xn->grad.data(), xn->grad.size());
    });
  }
  return Tensor(out);
}

Tensor leaky_relu(const Tensor& x, double slope) {
  auto out = make_node(x.shape());
  kern::active().leaky_fwd(x.data().data(), out->val.data(), out->val.size(), slope);
  bool rg = want_grad(x);
  out->requires_grad = rg;
  if (rg) {
    auto xn = x.node(), on = out;
    tape_push([xn, on, slope]() {
      if (on->grad.empty()) return;
      xn->accum_grad_init();
      kern::active().leaky_bwd(xn->val.data(), on->grad.data(), xn->grad.data(),
                               xn->val.size(), slope);
    });
  }
  return Tensor(out);
}

// ---- shape ops -------------------------------------------------------------------

Tensor reshape(const Tensor& x, std::vector<int> shape) {
  if (shape_numel(shape) != x.numel())
    throw DimensionError("reshape " + shape_str(x.shape()) + " -> " + shape_str(shape));
  auto out = std::make_shared<TensorNode>();
  out->shape = std::move(shape);
  out->val = x.data();
  bool rg = want_grad(x);
  out->requires_grad = rg;
  if (rg) {
    auto xn = x.node(), on = out;
    tape_push([xn, on]() {
      if (on->grad.empty()) return;
      xn->accum_grad_init();
      kern::active().axpy(1.0, on->grad.data(), xn->grad.data(), xn->grad.size());
    });
  }
  return Tensor(out);
}

Tensor transpose2d(const Tensor& x) {
  if (x.rank() != 2) throw DimensionError("transpose2d expects rank 2");
  int R = x.dim(0), C = x.dim(1);
  auto out = make_node({C, R});
  const auto& xv = x.data();
  for (int r = 0; r < R; ++r)
    for (int c = 0; c < C; ++c)
      out->val[static_cast<std::size_t>(c) * R + r] = xv[static_cast<std::size_t>(r) * C + c];
  bool rg = want_grad(x);
  out->requires_grad = rg;
  if (rg) {
    auto xn = x.node(), on = out;
    tape_push([xn, on, R, C]() {
      if (on->grad.empty()) return;
      xn->accum_grad_init();
      for (int r = 0; r < R; ++r)
        for (int c = 0; c < C; ++c)
          xn->grad[static_cast<std::size_t>(r) * C + c] +=
              on->grad[static_cast<std::size_t>(c) * R + r];
    });
  }
  return Tensor(out);
}

namespace {

// split a shape at `axis`: outer = product of dims before, inner = product after
void split_axis(const std::vector<int>& shape, int axis, std::int64_t& outer,
                std::int64_t& inner) {
  outer = 1;
  inner = 1;
  for (int i = 0; i < axis; ++i) outer *= shape[static_cast<std::size_t>(i)];
  for (std::size_t i = static_cast<std::size_t>(axis) + 1; i < shape.size(); ++i)
    inner *= shape[i];
}

}  // namespace

Tensor concat(const std::vector<Tensor>& xs, int axis) {
  if (xs.empty()) throw InvalidInputError("concat of zero tensors");
  const auto& s0 = xs[0].shape();
  if (axis < 0 || axis >= static_cast<int>(s0.size()))
    throw DimensionError("concat axis out of range");
  int total = 0;
  for (const auto& t : xs) {
    if (t.rank() != static_cast<int>(s0.size()))
      throw DimensionError("concat rank mismatch");
    for (int d = 0; d < t.rank(); ++d)
      if (d != axis && t.dim(d) != s0[static_cast<std::size_t>(d)])
        throw DimensionError("concat non-axis dims differ");
    total += t.dim(axis);
  }
  std::vector<int> oshape = s0;
  oshape[static_cast<std::size_t>(axis)] = total;
  auto out = make_node(oshape);

  std::int64_t outer, inner;
  split_axis(oshape, axis, outer, inner);
  std::int64_t ostride = static_cast<std::int64_t>(total) * inner;

  std::int64_t off = 0;
  bool rg = false;
  for (const auto& t : xs) rg = rg || t.requires_grad();
  rg = rg && recording();

  std::vector<std::int64_t> offsets;
  for (const auto& t : xs) {
    std::int64_t len = static_cast<std::int64_t>(t.dim(axis)) * inner;
    const auto& tv = t.data();
    for (std::int64_t o = 0; o < outer; ++o)
      std::memcpy(out->val.data() + o * ostride + off, tv.data() + o * len,
                  static_cast<std::size_t>(len) * sizeof(double));
    offsets.push_back(off);
    off += len;
  }
  out->requires_grad = rg;
  if (rg) {
    std::vector<NodePtr> nodes;
    std::vector<std::int64_t> lens;
    std::vector<bool> wants;
    for (const auto& t : xs) {
      nodes.push_back(t.node());
      lens.push_back(static_cast<std::int64_t>(t.dim(axis)) * inner);
      wants.push_back(t.requires_grad());
    }
    auto on = out;
    tape_push([nodes, lens, wants, offsets, outer, ostride, on]() {
      if (on->grad.empty()) return;
      for (std::size_t i = 0; i < nodes.size(); ++i) {
        if (!wants[i]) continue;
        nodes[i]->accum_grad_init();
        for (std::int64_t o = 0; o < outer; ++o)
          kern::active().axpy(1.0, on->grad.data() + o * ostride + offsets[i],
                              nodes[i]->grad.data() + o * lens[i],
                              static_cast<std::size_t>(lens[i]));
      }
    });
  }
  return Tensor(out);
}

Tensor slice(const Tensor& x, int axis, int start, int len) {
  const auto& s = x.shape();
  if (axis < 0 || axis >= x.rank()) throw DimensionError("slice axis out of range");
  if (start < 0 || len < 0 || start + len > s[static_cast<std::size_t>(axis)])
    throw DimensionError("slice range out of bounds");
  std::vector<int> oshape = s;
  oshape[static_cast<std::size_t>(axis)] = len;
  auto out = make_node(oshape);
  std::int64_t outer, inner;
  split_axis(s, axis, outer, inner);
  std::int64_t xstride = static_cast<std::int64_t>(s[static_cast<std::size_t>(axis)]) * inner;
  std::int64_t olen = static_cast<std::int64_t>(len) * inner;
  const auto& xv = x.data();
  for (std::int64_t o = 0; o < outer; ++o)
    std::memcpy(out->val.data() + o * olen, xv.data() + o * xstride + start * inner,
                static_cast<std::size_t>(olen) * sizeof(double));
  bool rg = want_grad(x);
  out->requires_grad = rg;
  if (rg) {
    auto xn = x.node(), on = out;
    std::int64_t sio = start * inner;
    tape_push([xn, on, outer, inner, xstride, olen, sio]() {
      (void)inner;
      if (on->grad.empty()) return;
      xn->accum_grad_init();
      for (std::int64_t o = 0; o < outer; ++o)
        kern::active().axpy(1.0, on->grad.data() + o * olen, xn->grad.data() + o * xstride + sio,
                            static_cast<std::size_t>(olen));
    });
  }
  return Tensor(out);
}

Tensor detach(const Tensor& x) {
  auto out = std::make_shared<TensorNode>();
  out->shape = x.shape();
  out->val = x.data();
  out->requires_grad = false;
  return Tensor(out);
}

Tensor chw_to_rows(const Tensor& x) {
  if (x.rank() != 3) throw DimensionError("chw_to_rows expects [C,H,W]");
  int C = x.dim(0), H = x.dim(1), W = x.dim(2);
  std::int64_t P = static_cast<std::int64_t>(H) * W;
  auto out = make_node({static_cast<int>(P), C});
  const auto& xv = x.data();
  for (int c = 0; c < C; ++c)
    for (std::int64_t p = 0; p < P; ++p)
      out->val[static_cast<std::size_t>(p * C + c)] =
          xv[static_cast<std::size_t>(c * P + p)];
  bool rg = want_grad(x);
  out->requires_grad = rg;
  if (rg) {
    auto xn = x.node(), on = out;
    tape_push([xn, on, C, P]() {
      if (on->grad.empty()) return;
      xn->accum_grad_init();
      for (int c = 0; c < C; ++c)
        for (std::int64_t p = 0; p < P; ++p)
          xn->grad[static_cast<std::size_t>(c * P + p)] +=
              on->grad[static_cast<std::size_t>(p * C + c)];
    });
  }
  return Tensor(out);
}

Tensor rows_to_chw(const Tensor& x, int H, int W) {
  if (x.rank() != 2) throw DimensionError("rows_to_chw expects [P,C]");
  std::int64_t P = static_cast<std::int64_t>(H) * W;
  if (x.dim(0) != P) throw DimensionError("rows_to_chw row count mismatch");
  int C = x.dim(1);
  auto out = make_node({C, H, W});
  const auto& xv = x.data();
  for (int c = 0; c < C; ++c)
    for (std::int64_t p = 0; p < P; ++p)
      out->val[static_cast<std::size_t>(c * P + p)] =
          xv[static_cast<std::size_t>(p * C + c)];
  bool rg = want_grad(x);
  out->requires_grad = rg;
  if (rg) {
    auto xn = x.node(), on = out;
    tape_push([xn, on, C, P]() {
      if (on->grad.empty()) return;
      xn->accum_grad_init();
      for (int c = 0; c < C; ++c)
        for (std::int64_t p = 0; p < P; ++p)
          xn->grad[static_cast<std::size_t>(p * C + c)] +=
              on->grad[static_cast<std::size_t>(c * P + p)];
    });
  }
  return Tensor(out);
}

// ---- reductions --------------------------------------------------------------------

Tensor sum_all(const Tensor& x) {
  double s = kern::active().sum(x.data().data(), x.data().size());
  auto out = make_node({1});
  out->val[0] = s;
  bool rg = want_grad(x);
  out->requires_grad = rg;
  if (rg) {
    auto xn = x.node(), on = out;
    tape_push([xn, on]() {
      if (on->grad.empty()) return;
      xn->accum_grad_init();
      double g = on->grad[0];
      for (double& v : xn->grad) v += g;
    });
  }
  return Tensor(out);
}

Tensor mean_all(const Tensor& x) {
  if (x.numel() == 0) throw InvalidInputError("mean of empty tensor");
  return mul_scalar(sum_all(x), 1.0 / static_cast<double>(x.numel()));
}

// ---- matmul ------------------------------------------------------------------------

Tensor matmul(const Tensor& a, const Tensor& b) {
  if (a.rank() != 2 || b.rank() != 2) throw DimensionError("matmul expects rank-2 tensors");
  int M = a.dim(0), K = a.dim(1), K2 = b.dim(0), N = b.dim(1);
  if (K != K2)
    throw DimensionError("matmul inner dims " + std::to_string(K) + " vs " + std::to_string(K2));
  auto out = make_node({M, N});
  kern::matmul(a.data().data(), b.data().data(), out->val.data(),
               static_cast<std::size_t>(M), static_cast<std::size_t>(K),
               static_cast<std::size_t>(N));
  bool rg = recording() && (a.requires_grad() || b.requires_grad());
  out->requires_grad = rg;
  if (rg) {
    auto an = a.node(), bn = b.node(), on = out;
    bool ga = a.requires_grad(), gb = b.requires_grad();
    tape_push([an, bn, on, M, K, N, ga, gb]() {
      if (on->grad.empty()) return;
      const double* g = on->grad.data();
      const auto& Kt = kern::active();
      if (ga) {
        an->accum_grad_init();
        // dA[m,k] += dot(dC[m,:], B[k,:])
        for (int m = 0; m < M; ++m)
          for (int k = 0; k < K; ++k)
            an->grad[static_cast<std::size_t>(m) * K + k] +=
                Kt.dot(g + static_cast<std::size_t>(m) * N,
                       bn->val.data() + static_cast<std::size_t>(k) * N,
                       static_cast<std::size_t>(N));
      }
      if (gb) {
        bn->accum_grad_init();
        // dB[k,:] += A[m,k] * dC[m,:]
        for (int m = 0; m < M; ++m)
          for (int k = 0; k < K; ++k)
            Kt.fma_row(an->val[static_cast<std::size_t>(m) * K + k],
                       g + static_cast<std::size_t>(m) * N,
                       bn->grad.data() + static_cast<std::size_t>(k) * N,
                       static_cast<std::size_t>(N));
      }
    });
  }
  return Tensor(out);
}

// ---- softmax -------------------------------------------------------------------------

Tensor softmax_rows(const Tensor& x) {
  if (x.rank() != 2) throw DimensionError("softmax_rows expects [R,C]");
  int R = x.dim(0), C = x.dim(1);
  if (C < 1) throw DimensionError("softmax over empty axis");
  auto out = make_node({R, C});
  const auto& xv = x.data();
  for (int r = 0; r < R; ++r) {
    const double* row = xv.data() + static_cast<std::size_t>(r) * C;
    double* orow = out->val.data() + static_cast<std::size_t>(r) * C;
    double m = row[0];
    for (int c = 1; c < C; ++c) m = std::max(m, row[c]);
    double s = 0.0;
    for (int c = 0; c < C; ++c) {
      orow[c] = std::exp(row[c] - m);
      s += orow[c];
    }
    double inv = 1.0 / s;
    for (int c = 0; c < C; ++c) orow[c] *= inv;
  }
  bool rg = want_grad(x);
  out->requires_grad = rg;
  if (rg) {
    auto xn = x.node(), on = out;
    tape_push([xn, on, R, C]() {
      if (on->grad.empty()) return;
      xn->accum_grad_init();
      for (int r = 0; r < R; ++r) {
        const double* y = on->val.data() + static_cast<std::size_t>(r) * C;
        const double* gy = on->grad.data() + static_cast<std::size_t>(r) * C;
        double* gx = xn->grad.data() + static_cast<std::size_t>(r) * C;
        double dotv = 0.0;
        for (int c = 0; c < C; ++c) dotv += gy[c] * y[c];
        for (int c = 0; c < C; ++c) gx[c] += y[c] * (gy[c] - dotv);
      }
    });
  }
  return Tensor(out);
}

Tensor log_softmax_rows(const Tensor& x) {
  if (x.rank() != 2) throw DimensionError("log_softmax_rows expects [R,C]");
  int R = x.dim(0), C = x.dim(1);
  auto out = make_node({R, C});
  const auto& xv = x.data();
  for (int r = 0; r < R; ++r) {
    const double* row = xv.data() + static_cast<std::size_t>(r) * C;
    double* orow = out->val.data() + static_cast<std::size_t>(r) * C;
    double m = row[0];
    for (int c = 1; c < C; ++c) m = std::max(m, row[c]);
    double s = 0.0;
    for (int c = 0; c < C; ++c) s += std::exp(row[c] - m);
    double lse = m + std::log(s);
    for (int c = 0; c < C; ++c) orow[c] = row[c] - lse;
  }
  bool rg = want_grad(x);
  out->requires_grad = rg;
  if (rg) {
    auto xn = x.node(), on = out;
    tape_push([xn, on, R, C]() {
      if (on->grad.empty()) return;
      xn->accum_grad_init();
      for (int r = 0; r < R; ++r) {
        const double* y = on->val.data() + static_cast<std::size_t>(r) * C;
        const double* gy = on->grad.data() + static_cast<std::size_t>(r) * C;
        double* gx = xn->grad.data() + static_cast<std::size_t>(r) * C;
        double gsum = 0.0;
        for (int c = 0; c < C; ++c) gsum += gy[c];
        for (int c = 0; c < C; ++c) gx[c] += gy[c] - std::exp(y[c]) * gsum;
      }
    });
  }
  return Tensor(out);
}

// ---- conv2d --------------------------------------------------------------------------

Tensor conv2d(const Tensor& x, const Tensor& w, const Tensor& b) {
  if (x.rank() != 3) throw DimensionError("conv2d expects input [C,H,W]");
  if (w.rank() != 4) throw DimensionError("conv2d expects weights [Co,Ci,k,k]");
  int Ci = x.dim(0), H = x.dim(1), W = x.dim(2);
  int Co = w.dim(0), Cw = w.dim(1), kh = w.dim(2), kw = w.dim(3);
  if (kh != kw || (kh != 1 && kh != 3)) throw DimensionError("conv2d kernel must be 1x1 or 3x3");
  if (Cw != Ci)
    throw DimensionError("conv2d channel mismatch: input " + std::to_string(Ci) + " vs weight " +
                         std::to_string(Cw));
  if (b.numel() != Co) throw DimensionError("conv2d bias size mismatch");
  const int k = kh, pad = k / 2;

  auto out = make_node({Co, H, W});
  const auto& xv = x.data();
  const auto& wv = w.data();
  const auto& bv = b.data();
  const auto& K = kern::active();
  const std::int64_t plane = static_cast<std::int64_t>(H) * W;

  for (int co = 0; co < Co; ++co) {
    double* oplane = out->val.data() + co * plane;
    std::fill(oplane, oplane + plane, bv[static_cast<std::size_t>(co)]);
    for (int ci = 0; ci < Ci; ++ci) {
      const double* iplane = xv.data() + ci * plane;
      const double* wbase =
          wv.data() + ((static_cast<std::size_t>(co) * Ci + ci) * k) * k;
      for (int ky = 0; ky < k; ++ky) {
        int dy = ky - pad;
        int y0 = std::max(0, -dy), y1 = H - 1 - std::max(0, dy);
        for (int kx = 0; kx < k; ++kx) {
          int dx = kx - pad;
          int x0 = std::max(0, -dx), x1 = W - 1 - std::max(0, dx);
          if (x1 < x0) continue;
          double wc = wbase[static_cast<std::size_t>(ky) * k + kx];
          std::size_t len = static_cast<std::size_t>(x1 - x0 + 1);
          for (int y = y0; y <= y1; ++y)
            K.fma_row(wc, iplane + static_cast<std::int64_t>(y + dy) * W + (x0 + dx),
                      oplane + static_cast<std::int64_t>(y) * W + x0, len);
        }
      }
    }
  }

  bool rg = recording() && (x.requires_grad() || w.requires_grad() || b.requires_grad());
  out->requires_grad = rg;
  if (rg) {
    auto xn = x.node(), wn = w.node(), bn = b.node(), on = out;
    bool gx = x.requires_grad(), gw = w.requires_grad(), gb = b.requires_grad();
    tape_push([xn, wn, bn, on, Ci, Co, H, W, k, pad, gx, gw, gb]() {
      if (on->grad.empty()) return;
      const auto& K = kern::active();
      const std::int64_t plane = static_cast<std::int64_t>(H) * W;
      const double* g = on->grad.data();
      if (gb) {
        bn->accum_grad_init();
        for (int co = 0; co < Co; ++co)
          bn->grad[static_cast<std::size_t>(co)] +=
              K.sum(g + co * plane, static_cast<std::size_t>(plane));
      }
      if (gx) xn->accum_grad_init();
      if (gw) wn->accum_grad_init();
      for (int co = 0; co < Co; ++co) {
        const double* gplane = g + co * plane;
        for (int ci = 0; ci < Ci; ++ci) {
          const double* iplane = xn->val.data() + ci * plane;
          double* giplane = gx ? xn->grad.data() + ci * plane : nullptr;
          const double* wbase =
              wn->val.data() + ((static_cast<std::size_t>(co) * Ci + ci) * k) * k;
          double* gwbase =
              gw ? wn->grad.data() + ((static_cast<std::size_t>(co) * Ci + ci) * k) * k : nullptr;
          for (int ky = 0; ky < k; ++ky) {
            int dy = ky - pad;
            int y0 = std::max(0, -dy), y1 = H - 1 - std::max(0, dy);
            for (int kx = 0; kx < k; ++kx) {
              int dx = kx - pad;
              int x0 = std::max(0, -dx), x1 = W - 1 - std::max(0, dx);
              if (x1 < x0) continue;
              std::size_t len = static_cast<std::size_t>(x1 - x0 + 1);
              double wc = wbase[static_cast<std::size_t>(ky) * k + kx];
              double wacc = 0.0;
              for (int y = y0; y <= y1; ++y) {
                const double* grow = gplane + static_cast<std::int64_t>(y) * W + x0;
                std::int64_t ioff = static_cast<std::int64_t>(y + dy) * W + (x0 + dx);
                if (gx) K.fma_row(wc, grow, giplane + ioff, len);
                if (gw) wacc += K.dot(grow, iplane + ioff, len);
              }
              if (gw) gwbase[static_cast<std::size_t>(ky) * k + kx] += wacc;
            }
          }
        }
      }
    });
  }
  return Tensor(out);
}

// ---- batchnorm -------------------------------------------------------------------------

Tensor batchnorm2d(const Tensor& x, const Tensor& gamma, const Tensor& beta,
                   std::vector<double>& run_mean, std::vector<double>& run_var,
                   bool training, double eps, double momentum) {
  if (x.rank() != 3) throw DimensionError("batchnorm2d expects [C,H,W]");
  int C = x.dim(0), H = x.dim(1), W = x.dim(2);
  if (gamma.numel() != C || beta.numel() != C)
    throw DimensionError("batchnorm2d gamma/beta size mismatch");
  if (static_cast<int>(run_mean.size()) != C || static_cast<int>(run_var.size()) != C)
    throw DimensionError("batchnorm2d running stats length must equal channel count");
  const std::int64_t plane = static_cast<std::int64_t>(H) * W;
  const double n = static_cast<double>(plane);

  auto out = make_node({C, H, W});
  const auto& xv = x.data();
  const auto& gv = gamma.data();
  const auto& bv = beta.data();
  const auto& K = kern::active();

  // saved for backward
  auto xhat = std::make_shared<std::vector<double>>(xv.size());
  auto ivar = std::make_shared<std::vector<double>>(static_cast<std::size_t>(C));

  for (int c = 0; c < C; ++c) {
    const double* ip = xv.data() + c * plane;
    double* op = out->val.data() + c * plane;
    double* xh = xhat->data() + c * plane;
    double mu, var;
    if (training) {
      mu = K.sum(ip, static_cast<std::size_t>(plane)) / n;
      double acc = 0.0;
      for (std::int64_t i = 0; i < plane; ++i) {
        double d = ip[i] - mu;
        acc += d * d;
      }
      var = acc / n;
      run_mean[static_cast<std::size_t>(c)] =
          (1.0 - momentum) * run_mean[static_cast<std::size_t>(c)] + momentum * mu;
      run_var[static_cast<std::size_t>(c)] =
          (1.0 - momentum) * run_var[static_cast<std::size_t>(c)] + momentum * var;
    } else {
      mu = run_mean[static_cast<std::size_t>(c)];
      var = run_var[static_cast<std::size_t>(c)];
    }
    double iv = 1.0 / std::sqrt(var + eps);
    (*ivar)[static_cast<std::size_t>(c)] = iv;
    double gscale = gv[static_cast<std::size_t>(c)] * iv;
    double shift = bv[static_cast<std::size_t>(c)];
    for (std::int64_t i = 0; i < plane; ++i) {
      xh[i] = (ip[i] - mu) * iv;
      op[i] = gscale * (ip[i] - mu) + shift;
    }
  }

  bool rg = recording() && (x.requires_grad() || gamma.requires_grad() || beta.requires_grad());
  out->requires_grad = rg;
  if (rg) {
    auto xn = x.node(), gn = gamma.node(), bn = beta.node(), on = out;
    bool wx = x.requires_grad(), wg = gamma.requires_grad(), wb = beta.requires_grad();
    tape_push([xn, gn, bn, on, xhat, ivar, C, plane, n, training, wx, wg, wb]() {
      if (on->grad.empty()) return;
      if (wx) xn->accum_grad_init();
      if (wg) gn->accum_grad_init();
      if (wb) bn->accum_grad_init();
      for (int c = 0; c < C; ++c) {
        const double* gy = on->grad.data() + c * plane;
        const double* xh = xhat->data() + c * plane;
        double iv = (*ivar)[static_cast<std::size_t>(c)];
        double gsum = 0.0, gxsum = 0.0;
        for (std::int64_t i = 0; i < plane; ++i) {
          gsum += gy[i];
          gxsum += gy[i] * xh[i];
        }
        if (wb) bn->grad[static_cast<std::size_t>(c)] += gsum;
        if (wg) gn->grad[static_cast<std::size_t>(c)] += gxsum;
        if (wx) {
          double* gx = xn->grad.data() + c * plane;
          double gamma_c = gn->val[static_cast<std::size_t>(c)];
          if (training) {
            double k1 = gamma_c * iv;
            for (std::int64_t i = 0; i < plane; ++i)
              gx[i] += k1 * (gy[i] - gsum / n - xh[i] * gxsum / n);
          } else {
            double k1 = gamma_c * iv;
            for (std::int64_t i = 0; i < plane; ++i) gx[i] += k1 * gy[i];
          }
        }
      }
    });
  }
  return Tensor(out);
}

// ---- pooling / resampling ------------------------------------------------------------------

Tensor avg_pool2x2(const Tensor& x) {
  if (x.rank() != 3) throw DimensionError("avg_pool2x2 expects [C,H,W]");
  int C = x.dim(0), H = x.dim(1), W = x.dim(2);
  if (H % 2 != 0 || W % 2 != 0) throw DimensionError("avg_pool2x2 requires even H and W");
  int oh = H / 2, ow = W / 2;
  auto out = make_node({C, oh, ow});
  const auto& xv = x.data();
  for (int c = 0; c < C; ++c)
    for (int y = 0; y < oh; ++y)
      for (int xo = 0; xo < ow; ++xo) {
        std::int64_t base = (static_cast<std::int64_t>(c) * H + 2 * y) * W + 2 * xo;
        out->val[(static_cast<std::int64_t>(c) * oh + y) * ow + xo] =
            0.25 * (xv[base] + xv[base + 1] + xv[base + W] + xv[base + W + 1]);
      }
  bool rg = want_grad(x);
  out->requires_grad = rg;
  if (rg) {
    auto xn = x.node(), on = out;
    tape_push([xn, on, C, H, W, oh, ow]() {
      if (on->grad.empty()) return;
      xn->accum_grad_init();
      for (int c = 0; c < C; ++c)
        for (int y = 0; y < oh; ++y)
          for (int xo = 0; xo < ow; ++xo) {
            double g = 0.25 * on->grad[(static_cast<std::int64_t>(c) * oh + y) * ow + xo];
            std::int64_t base = (static_cast<std::int64_t>(c) * H + 2 * y) * W + 2 * xo;
            xn->grad[base] += g;
            xn->grad[base + 1] += g;
            xn->grad[base + W] += g;
            xn->grad[base + W + 1] += g;
          }
    });
  }
  return Tensor(out);
}

Tensor upsample_bilinear(const Tensor& x, int out_h, int out_w) {
  if (x.rank() != 3) throw DimensionError("upsample_bilinear expects [C,h,w]");
  if (out_h < 1 || out_w < 1) throw DimensionError("upsample target must be positive");
  int C = x.dim(0), h = x.dim(1), w = x.dim(2);
  auto out = make_node({C, out_h, out_w});
  const auto& xv = x.data();

  // align-corners sampling grid
  double sy = out_h > 1 ? static_cast<double>(h - 1) / (out_h - 1) : 0.0;
  double sx = out_w > 1 ? static_cast<double>(w - 1) / (out_w - 1) : 0.0;

  struct Lerp {
    int i0, i1;
    double f;
  };
  std::vector<Lerp> ly(static_cast<std::size_t>(out_h)), lx(static_cast<std::size_t>(out_w));
  for (int y = 0; y < out_h; ++y) {
    double s = y * sy;
    int i0 = static_cast<int>(std::floor(s));
    if (i0 > h - 2) i0 = std::max(0, h - 2);
    int i1 = std::min(h - 1, i0 + 1);
    ly[static_cast<std::size_t>(y)] = {i0, i1, s - i0};
  }
  for (int xo = 0; xo < out_w; ++xo) {
    double s = xo * sx;
    int i0 = static_cast<int>(std::floor(s));
    if (i0 > w - 2) i0 = std::max(0, w - 2);
    int i1 = std::min(w - 1, i0 + 1);
    lx[static_cast<std::size_t>(xo)] = {i0, i1, s - i0};
  }

  for (int c = 0; c < C; ++c) {
    const double* ip = xv.data() + static_cast<std::int64_t>(c) * h * w;
    double* op = out->val.data() + static_cast<std::int64_t>(c) * out_h * out_w;
    for (int y = 0; y < out_h; ++y) {
      const Lerp& Y = ly[static_cast<std::size_t>(y)];
      for (int xo = 0; xo < out_w; ++xo) {
        const Lerp& X = lx[static_cast<std::size_t>(xo)];
        double v00 = ip[Y.i0 * w + X.i0], v01 = ip[Y.i0 * w + X.i1];
        double v10 = ip[Y.i1 * w + X.i0], v11 = ip[Y.i1 * w + X.i1];
        double top = v00 + (v01 - v00) * X.f;
        double bot = v10 + (v11 - v10) * X.f;
        op[static_cast<std::int64_t>(y) * out_w + xo] = top + (bot - top) * Y.f;
      }
    }
  }
  bool rg = want_grad(x);
  out->requires_grad = rg;
  if (rg) {
    auto xn = x.node(), on = out;
    tape_push([xn, on, C, h, w, out_h, out_w, ly, lx]() {
      if (on->grad.empty()) return;
      xn->accum_grad_init();
      for (int c = 0; c < C; ++c) {
        double* gip = xn->grad.data() + static_cast<std::int64_t>(c) * h * w;
        const double* gop = on->grad.data() + static_cast<std::int64_t>(c) * out_h * out_w;
        for (int y = 0; y < out_h; ++y) {
          const auto& Y = ly[static_cast<std::size_t>(y)];
          for (int xo = 0; xo < out_w; ++xo) {
            const auto& X = lx[static_cast<std::size_t>(xo)];
            double g = gop[static_cast<std::int64_t>(y) * out_w + xo];
            gip[Y.i0 * w + X.i0] += g * (1 - Y.f) * (1 - X.f);
            gip[Y.i0 * w + X.i1] += g * (1 - Y.f) * X.f;
            gip[Y.i1 * w + X.i0] += g * Y.f * (1 - X.f);
            gip[Y.i1 * w + X.i1] += g * Y.f * X.f;
          }
        }
      }
    });
  }
  return Tensor(out);
}

Tensor pool_global(const Tensor& x, PoolAxis axis, PoolMode mode) {
  if (x.rank() != 3) throw DimensionError("pool_global expects [C,H,W]");
  int C = x.dim(0), H = x.dim(1), W = x.dim(2);
  if (C < 1 || H < 1 || W < 1) throw DimensionError("pool_global needs non-empty dims");
  const std::int64_t plane = static_cast<std::int64_t>(H) * W;
  const auto& xv = x.data();
  const auto& K = kern::active();

  bool want_avg = mode != PoolMode::max;
  bool want_max = mode != PoolMode::avg;

  NodePtr out;
  auto argmax = std::make_shared<std::vector<std::int64_t>>();

  if (axis == PoolAxis::space) {
    int span = (mode == PoolMode::avg_and_max) ? 2 * C : C;
    out = make_node({span});
    if (want_max) argmax->assign(static_cast<std::size_t>(C), 0);
    for (int c = 0; c < C; ++c) {
      const double* ip = xv.data() + c * plane;
      if (want_avg)
        out->val[static_cast<std::size_t>(c)] =
            K.sum(ip, static_cast<std::size_t>(plane)) / static_cast<double>(plane);
      if (want_max) {
        std::int64_t best = 0;
        double m = ip[0];
        for (std::int64_t i = 1; i < plane; ++i)
          if (ip[i] > m) {
            m = ip[i];
            best = i;
          }
        (*argmax)[static_cast<std::size_t>(c)] = best;
        std::size_t slot = mode == PoolMode::max ? static_cast<std::size_t>(c)
                                                 : static_cast<std::size_t>(C + c);
        out->val[slot] = m;
      }
    }
  } else {
    std::vector<int> oshape =
        mode == PoolMode::avg_and_max ? std::vector<int>{2, H, W} : std::vector<int>{H, W};
    out = make_node(oshape);
    if (want_max) argmax->assign(static_cast<std::size_t>(plane), 0);
    for (std::int64_t p = 0; p < plane; ++p) {
      double s = 0.0, m = xv[static_cast<std::size_t>(p)];
      std::int64_t best = 0;
      for (int c = 0; c < C; ++c) {
        double v = xv[static_cast<std::size_t>(c * plane + p)];
        s += v;
        if (v > m) {
          m = v;
          best = c;
        }
      }
      if (want_avg) out->val[static_cast<std::size_t>(p)] = s / C;
      if (want_max) {
        (*argmax)[static_cast<std::size_t>(p)] = best;
        std::size_t slot = mode == PoolMode::max ? static_cast<std::size_t>(p)
                                                 : static_cast<std::size_t>(plane + p);
        out->val[slot] = m;
      }
    }
  }

  bool rg = want_grad(x);
  out->requires_grad = rg;
  if (rg) {
    auto xn = x.node();
    auto on = out;
    tape_push([xn, on, argmax, axis, mode, C, plane]() {
      if (on->grad.empty()) return;
      xn->accum_grad_init();
      bool wa = mode != PoolMode::max;
      bool wm = mode != PoolMode::avg;
      if (axis == PoolAxis::space) {
        for (int c = 0; c < C; ++c) {
          if (wa) {
            double g = on->grad[static_cast<std::size_t>(c)] / static_cast<double>(plane);
            double* gx = xn->grad.data() + c * plane;
            for (std::int64_t i = 0; i < plane; ++i) gx[i] += g;
          }
          if (wm) {
            std::size_t slot = mode == PoolMode::max ? static_cast<std::size_t>(c)
                                                     : static_cast<std::size_t>(C + c);
            xn->grad[static_cast<std::size_t>(c * plane + (*argmax)[static_cast<std::size_t>(c)])] +=
                on->grad[slot];
          }
        }
      } else {
        for (std::int64_t p = 0; p < plane; ++p) {
          if (wa) {
            double g = on->grad[static_cast<std::size_t>(p)] / static_cast<double>(C);
            for (int c = 0; c < C; ++c) xn->grad[static_cast<std::size_t>(c * plane + p)] += g;
          }
          if (wm) {
            std::size_t slot = mode == PoolMode::max ? static_cast<std::size_t>(p)
                                                     : static_cast<std::size_t>(plane + p);
            xn->grad[static_cast<std::size_t>((*argmax)[static_cast<std::size_t>(p)] * plane + p)] +=
                on->grad[slot];
          }
        }
      }
    });
  }
  return Tensor(out);
}

// ---- gather / scatter / segments -------------------------------------------------------------

Tensor gather_rows(const Tensor& x, const std::vector<int>& idx) {
  if (x.rank() != 2) throw DimensionError("gather_rows expects [R,D]");
  int R = x.dim(0), D = x.dim(1);
  auto out = make_node({static_cast<int>(idx.size()), D});
  const auto& xv = x.data();
  for (std::size_t m = 0; m < idx.size(); ++m) {
    int r = idx[m];
    if (r < 0 || r >= R) throw ContractError("gather_rows index out of range");
    std::memcpy(out->val.data() + m * static_cast<std::size_t>(D),
                xv.data() + static_cast<std::size_t>(r) * D,
                static_cast<std::size_t>(D) * sizeof(double));
  }
  bool rg = want_grad(x);
  out->requires_grad = rg;
  if (rg) {
    auto xn = x.node(), on = out;
    auto ids = std::make_shared<std::vector<int>>(idx);
    tape_push([xn, on, ids, D]() {
      if (on->grad.empty()) return;
      xn->accum_grad_init();
      for (std::size_t m = 0; m < ids->size(); ++m)
        kern::active().axpy(1.0, on->grad.data() + m * static_cast<std::size_t>(D),
                            xn->grad.data() + static_cast<std::size_t>((*ids)[m]) * D,
                            static_cast<std::size_t>(D));
    });
  }
  return Tensor(out);
}

Tensor scatter_rows(const Tensor& rows, const std::vector<int>& ids, int num_rows) {
  if (rows.rank() != 2) throw DimensionError("scatter_rows expects [M,D]");
  if (static_cast<std::size_t>(rows.dim(0)) != ids.size())
    throw ContractError("scatter_rows id count mismatch");
  int D = rows.dim(1);
  auto out = make_node({num_rows, D});
  const auto& rv = rows.data();
  for (std::size_t m = 0; m < ids.size(); ++m) {
    int r = ids[m];
    if (r < 0 || r >= num_rows) throw ContractError("scatter_rows index out of range");
    kern::active().axpy(1.0, rv.data() + m * static_cast<std::size_t>(D),
                        out->val.data() + static_cast<std::size_t>(r) * D,
                        static_cast<std::size_t>(D));
  }
  bool rg = want_grad(rows);
  out->requires_grad = rg;
  if (rg) {
    auto xn = rows.node(), on = out;
    auto idcopy = std::make_shared<std::vector<int>>(ids);
    tape_push([xn, on, idcopy, D]() {
      if (on->grad.empty()) return;
      xn->accum_grad_init();
      for (std::size_t m = 0; m < idcopy->size(); ++m)
        kern::active().axpy(1.0, on->grad.data() + static_cast<std::size_t>((*idcopy)[m]) * D,
                            xn->grad.data() + m * static_cast<std::size_t>(D),
                            static_cast<std::size_t>(D));
    });
  }
  return Tensor(out);
}

namespace {

void check_segments(const Tensor& x, const std::vector<int>& seg, int S) {
  if (x.rank() != 2) throw DimensionError("segment op expects [R,D]");
  if (static_cast<std::size_t>(x.dim(0)) != seg.size())
    throw ContractError("segment id count mismatch");
  for (int s : seg)
    if (s < 0 || s >= S) throw ContractError("segment id out of range");
}

}  // namespace

Tensor segment_sum(const Tensor& x, const std::vector<int>& seg, int S) {
  check_segments(x, seg, S);
  int D = x.dim(1);
  auto out = make_node({S, D});
  const auto& xv = x.data();
  for (std::size_t r = 0; r < seg.size(); ++r)
    kern::active().axpy(1.0, xv.data() + r * static_cast<std::size_t>(D),
                        out->val.data() + static_cast<std::size_t>(seg[r]) * D,
                        static_cast<std::size_t>(D));
  bool rg = want_grad(x);
  out->requires_grad = rg;
  if (rg) {
    auto xn = x.node(), on = out;
    auto segc = std::make_shared<std::vector<int>>(seg);
    tape_push([xn, on, segc, D]() {
      if (on->grad.empty()) return;
      xn->accum_grad_init();
      for (std::size_t r = 0; r < segc->size(); ++r)
        kern::active().axpy(1.0, on->grad.data() + static_cast<std::size_t>((*segc)[r]) * D,
                            xn->grad.data() + r * static_cast<std::size_t>(D),
                            static_cast<std::size_t>(D));
    });
  }
  return Tensor(out);
}

Tensor segment_mean(const Tensor& x, const std::vector<int>& seg, int S) {
  check_segments(x, seg, S);
  int D = x.dim(1);
  auto counts = std::make_shared<std::vector<double>>(static_cast<std::size_t>(S), 0.0);
  for (int s : seg) (*counts)[static_cast<std::size_t>(s)] += 1.0;
  auto out = make_node({S, D});
  const auto& xv = x.data();
  for (std::size_t r = 0; r < seg.size(); ++r)
    kern::active().axpy(1.0, xv.data() + r * static_cast<std::size_t>(D),
                        out->val.data() + static_cast<std::size_t>(seg[r]) * D,
                        static_cast<std::size_t>(D));
  for (int s = 0; s < S; ++s) {
    double c = (*counts)[static_cast<std::size_t>(s)];
    if (c > 0.0) {
      double inv = 1.0 / c;
      double* row = out->val.data() + static_cast<std::size_t>(s) * D;
      for (int d = 0; d < D; ++d) row[d] *= inv;
    }
  }
  bool rg = want_grad(x);
  out->requires_grad = rg;
  if (rg) {
    auto xn = x.node(), on = out;
    auto segc = std::make_shared<std::vector<int>>(seg);
    tape_push([xn, on, segc, counts, D]() {
      if (on->grad.empty()) return;
      xn->accum_grad_init();
      for (std::size_t r = 0; r < segc->size(); ++r) {
        int s = (*segc)[r];
        double inv = 1.0 / (*counts)[static_cast<std::size_t>(s)];
        kern::active().axpy(inv, on->grad.data() + static_cast<std::size_t>(s) * D,
                            xn->grad.data() + r * static_cast<std::size_t>(D),
                            static_cast<std::size_t>(D));
      }
    });
  }
  return Tensor(out);
}

Tensor segment_max(const Tensor& x, const std::vector<int>& seg, int S) {
  check_segments(x, seg, S);
  int D = x.dim(1);
  auto out = make_node({S, D});
  auto argmax = std::make_shared<std::vector<std::int64_t>>(
      static_cast<std::size_t>(S) * static_cast<std::size_t>(D), -1);
  const auto& xv = x.data();
  for (std::size_t r = 0; r < seg.size(); ++r) {
    int s = seg[r];
    for (int d = 0; d < D; ++d) {
      double v = xv[r * static_cast<std::size_t>(D) + d];
      std::size_t slot = static_cast<std::size_t>(s) * D + d;
      if ((*argmax)[slot] < 0 || v > out->val[slot]) {
        out->val[slot] = v;
        (*argmax)[slot] = static_cast<std::int64_t>(r);
      }
    }
  }
  bool rg = want_grad(x);
  out->requires_grad = rg;
  if (rg) {
    auto xn = x.node(), on = out;
    tape_push([xn, on, argmax, D]() {
      if (on->grad.empty()) return;
      xn->accum_grad_init();
      for (std::size_t slot = 0; slot < argmax->size(); ++slot) {
        std::int64_t r = (*argmax)[slot];
        if (r >= 0)
          xn->grad[static_cast<std::size_t>(r) * D + slot % static_cast<std::size_t>(D)] +=
              on->grad[slot];
      }
    });
  }
  return Tensor(out);
}

Tensor segment_softmax(const Tensor& logits, const std::vector<int>& seg, int S) {
  check_segments(logits, seg, S);
  if (logits.dim(1) != 1) throw DimensionError("segment_softmax expects [R,1]");
  const auto& xv = logits.data();
  std::size_t R = xv.size();
  std::vector<double> mx(static_cast<std::size_t>(S), -std::numeric_limits<double>::infinity());
  for (std::size_t r = 0; r < R; ++r)
    mx[static_cast<std::size_t>(seg[r])] = std::max(mx[static_cast<std::size_t>(seg[r])], xv[r]);
  auto out = make_node({static_cast<int>(R), 1});
  std::vector<double> denom(static_cast<std::size_t>(S), 0.0);
  for (std::size_t r = 0; r < R; ++r) {
    out->val[r] = std::exp(xv[r] - mx[static_cast<std::size_t>(seg[r])]);
    denom[static_cast<std::size_t>(seg[r])] += out->val[r];
  }
  for (std::size_t r = 0; r < R; ++r) out->val[r] /= denom[static_cast<std::size_t>(seg[r])];
  bool rg = want_grad(logits);
  out->requires_grad = rg;
  if (rg) {
    auto xn = logits.node(), on = out;
    auto segc = std::make_shared<std::vector<int>>(seg);
    tape_push([xn, on, segc, S]() {
      if (on->grad.empty()) return;
      xn->accum_grad_init();
      std::vector<double> dots(static_cast<std::size_t>(S), 0.0);
      for (std::size_t r = 0; r < on->val.size(); ++r)
        dots[static_cast<std::size_t>((*segc)[r])] += on->grad[r] * on->val[r];
      for (std::size_t r = 0; r < on->val.size(); ++r)
        xn->grad[r] += on->val[r] * (on->grad[r] - dots[static_cast<std::size_t>((*segc)[r])]);
    });
  }
  return Tensor(out);
}

Tensor where_mask(const std::vector<std::uint8_t>& mask, const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape()) throw DimensionError("where_mask shape mismatch");
  if (a.rank() != 3) throw DimensionError("where_mask expects [C,H,W]");
  int C = a.dim(0), H = a.dim(1), W = a.dim(2);
  std::size_t plane = static_cast<std::size_t>(H) * W;
  if (mask.size() != plane) throw DimensionError("where_mask mask size mismatch");
  auto out = make_node(a.shape());
  const auto& av = a.data();
  const auto& bv = b.data();
  for (int c = 0; c < C; ++c)
    for (std::size_t p = 0; p < plane; ++p)
      out->val[c * plane + p] = mask[p] ? av[c * plane + p] : bv[c * plane + p];
  bool rg = recording() && (a.requires_grad() || b.requires_grad());
  out->requires_grad = rg;
  if (rg) {
    auto an = a.node(), bn = b.node(), on = out;
    auto mk = std::make_shared<std::vector<std::uint8_t>>(mask);
    bool ga = a.requires_grad(), gb = b.requires_grad();
    tape_push([an, bn, on, mk, C, plane, ga, gb]() {
      if (on->grad.empty()) return;
      if (ga) an->accum_grad_init();
      if (gb) bn->accum_grad_init();
      for (int c = 0; c < C; ++c)
        for (std::size_t p = 0; p < plane; ++p) {
          double g = on->grad[c * plane + p];
          if ((*mk)[p]) {
            if (ga) an->grad[c * plane + p] += g;
          } else {
            if (gb) bn->grad[c * plane + p] += g;
          }
        }
    });
  }
  return Tensor(out);
}

// ---- losses -------------------------------------------------------------------------------

Tensor nll_rows(const Tensor& logp, const std::vector<int>& labels,
                const std::vector<std::uint8_t>& valid) {
  if (logp.rank() != 2) throw DimensionError("nll_rows expects [R,C]");
  std::size_t R = static_cast<std::size_t>(logp.dim(0));
  int C = logp.dim(1);
  if (labels.size() != R || valid.size() != R) throw ContractError("nll_rows length mismatch");
  double nvalid = 0.0, acc = 0.0;
  const auto& xv = logp.data();
  for (std::size_t r = 0; r < R; ++r) {
    if (!valid[r]) continue;
    if (labels[r] < 0 || labels[r] >= C) throw ContractError("nll_rows label out of range");
    acc -= xv[r * static_cast<std::size_t>(C) + static_cast<std::size_t>(labels[r])];
    nvalid += 1.0;
  }
  auto out = make_node({1});
  out->val[0] = nvalid > 0.0 ? acc / nvalid : 0.0;
  bool rg = want_grad(logp);
  out->requires_grad = rg;
  if (rg && nvalid > 0.0) {
    auto xn = logp.node(), on = out;
    auto lb = std::make_shared<std::vector<int>>(labels);
    auto vd = std::make_shared<std::vector<std::uint8_t>>(valid);
    tape_push([xn, on, lb, vd, C, nvalid]() {
      if (on->grad.empty()) return;
      xn->accum_grad_init();
      double g = on->grad[0] / nvalid;
      for (std::size_t r = 0; r < lb->size(); ++r)
        if ((*vd)[r])
          xn->grad[r * static_cast<std::size_t>(C) + static_cast<std::size_t>((*lb)[r])] -= g;
    });
  }
  return Tensor(out);
}

// ---- verification ----------------------------------------------------------------------------

void validate_finite(const Tensor& x, const char* what) {
  for (double v : x.data())
    if (!std::isfinite(v))
      throw InvalidInputError(std::string(what) + " contains a non-finite value");
}

double check_gradients(const std::function<Tensor(const Tensor&)>& f, const Tensor& x,
                       double eps) {
  Tensor probe = Tensor::from(x.data(), x.shape(), true);
  std::vector<double> auto_grad;
  {
    TapeScope scope;
    Tensor y = f(probe);
    if (y.numel() != 1) throw ContractError("check_gradients requires a scalar function");
    backward(y);
    auto_grad = probe.grad();
  }
  double worst = 0.0;
  Tensor work = Tensor::from(x.data(), x.shape(), false);
  for (std::size_t i = 0; i < work.data().size(); ++i) {
    double orig = work.data()[i];
    work.data()[i] = orig + eps;
    double fp = f(work).item();
    work.data()[i] = orig - eps;
    double fm = f(work).item();
    work.data()[i] = orig;
    double fd = (fp - fm) / (2.0 * eps);
    double ad = auto_grad[i];
    double denom = std::max({1.0, std::fabs(fd), std::fabs(ad)});
    worst = std::max(worst, std::fabs(fd - ad) / denom);
  }
  return worst;
}

}  // namespace rangefuse
