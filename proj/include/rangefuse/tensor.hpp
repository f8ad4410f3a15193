#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <vector>

#include "rangefuse/errors.hpp"
#include "rangefuse/rng.hpp"

// Dense double-precision tensors with reverse-mode automatic differentiation.
// Operations record backward closures onto a thread-local tape while a
// TapeScope is alive and any input requires gradients. backward(loss) walks
// the tape in reverse and consumes it.

namespace rangefuse {

struct TensorNode {
  std::vector<int> shape;
  std::vector<double> val;
  std::vector<double> grad;  // empty until a gradient is accumulated
  bool requires_grad = false;

  std::int64_t numel() const { return static_cast<std::int64_t>(val.size()); }
  void accum_grad_init() {
    if (grad.size() != val.size()) grad.assign(val.size(), 0.0);
  }
};

class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(std::shared_ptr<TensorNode> n) : n_(std::move(n)) {}

  static Tensor zeros(std::vector<int> shape, bool requires_grad = false);
  static Tensor full(std::vector<int> shape, double v, bool requires_grad = false);
  static Tensor from(std::vector<double> data, std::vector<int> shape, bool requires_grad = false);
  static Tensor scalar(double v, bool requires_grad = false);
  static Tensor uniform(Rng& rng, std::vector<int> shape, double lo, double hi,
                        bool requires_grad = false);

  bool defined() const { return n_ != nullptr; }
  const std::vector<int>& shape() const { return n_->shape; }
  int rank() const { return static_cast<int>(n_->shape.size()); }
  int dim(int i) const { return n_->shape[static_cast<std::size_t>(i)]; }
  std::int64_t numel() const { return n_->numel(); }

  std::vector<double>& data() { return n_->val; }
  const std::vector<double>& data() const { return n_->val; }
  double item() const;

  bool requires_grad() const { return n_->requires_grad; }
  void set_requires_grad(bool rg) { n_->requires_grad = rg; }

  // Gradient accumulated by the last backward pass; zeros if untouched.
  std::vector<double> grad() const;
  bool grad_defined() const { return !n_->grad.empty(); }
  void zero_grad() { n_->grad.clear(); }

  std::shared_ptr<TensorNode> node() const { return n_; }

 private:
  std::shared_ptr<TensorNode> n_;
};

// ---- tape -----------------------------------------------------------------

class TapeScope {
 public:
  TapeScope();
  ~TapeScope();
  TapeScope(const TapeScope&) = delete;
  TapeScope& operator=(const TapeScope&) = delete;
};

class NoGradScope {
 public:
  NoGradScope();
  ~NoGradScope();
  NoGradScope(const NoGradScope&) = delete;
  NoGradScope& operator=(const NoGradScope&) = delete;
};

bool tape_active();
void tape_push(std::function<void()> fn);
std::size_t tape_size();
void tape_clear();

// Seeds grad(loss) = 1, runs the tape in reverse, then clears it.
void backward(const Tensor& loss);

// ---- elementwise / broadcast ops -------------------------------------------

// Binary ops broadcast right-aligned shapes (size-1 dims expand).
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);

Tensor neg(const Tensor& x);
Tensor mul_scalar(const Tensor& x, double s);
Tensor add_scalar(const Tensor& x, double s);

Tensor abs_(const Tensor& x);
Tensor exp_(const Tensor& x);
Tensor log_(const Tensor& x);
Tensor sqrt_(const Tensor& x);
Tensor square(const Tensor& x);
Tensor sigmoid(const Tensor& x);
Tensor leaky_relu(const Tensor& x, double slope);
Tensor xlogx(const Tensor& x);  // x * ln x with 0 ln 0 = 0

// ---- shape ops --------------------------------------------------------------

Tensor reshape(const Tensor& x, std::vector<int> shape);
Tensor transpose2d(const Tensor& x);
Tensor concat(const std::vector<Tensor>& xs, int axis);
Tensor slice(const Tensor& x, int axis, int start, int len);
Tensor detach(const Tensor& x);

// [C,H,W] <-> [H*W, C]
Tensor chw_to_rows(const Tensor& x);
Tensor rows_to_chw(const Tensor& x, int H, int W);

// ---- reductions -------------------------------------------------------------

Tensor sum_all(const Tensor& x);
Tensor mean_all(const Tensor& x);

// ---- linear algebra ---------------------------------------------------------

Tensor matmul(const Tensor& a, const Tensor& b);  // [M,K]x[K,N] -> [M,N]

// rows of x[R,C] -> softmax / log-softmax along C
Tensor softmax_rows(const Tensor& x);
Tensor log_softmax_rows(const Tensor& x);

// ---- spatial ops on [C,H,W] --------------------------------------------------

Tensor conv2d(const Tensor& x, const Tensor& w, const Tensor& b);  // k in {1,3}, pad k/2
Tensor batchnorm2d(const Tensor& x, const Tensor& gamma, const Tensor& beta,
                   std::vector<double>& run_mean, std::vector<double>& run_var,
                   bool training, double eps, double momentum);
Tensor avg_pool2x2(const Tensor& x);
// align-corners bilinear resample to any target size (up or down)
Tensor upsample_bilinear(const Tensor& x, int out_h, int out_w);

enum class PoolMode { avg, max, avg_and_max };
enum class PoolAxis { space, channel };
// space: [C] (avg_and_max -> [2C], avg first); channel: [H,W] (avg_and_max -> [2,H,W])
Tensor pool_global(const Tensor& x, PoolAxis axis, PoolMode mode);

// ---- gather / scatter / segments ---------------------------------------------

Tensor gather_rows(const Tensor& x, const std::vector<int>& idx);
// inverse of gather: out[ids[i], :] += rows[i, :], out has num_rows rows
Tensor scatter_rows(const Tensor& rows, const std::vector<int>& ids, int num_rows);

// segment ids in [0, S); rows with the same id pool together. Accumulation is
// in ascending row order.
Tensor segment_sum(const Tensor& x, const std::vector<int>& seg, int S);
Tensor segment_mean(const Tensor& x, const std::vector<int>& seg, int S);
Tensor segment_max(const Tensor& x, const std::vector<int>& seg, int S);  // empty segments -> 0
// softmax over each segment of a column vector [R,1]
Tensor segment_softmax(const Tensor& logits, const std::vector<int>& seg, int S);

// per-pixel select: out[:,p] = mask[p] ? a[:,p] : b[:,p]
Tensor where_mask(const std::vector<std::uint8_t>& mask, const Tensor& a, const Tensor& b);

// ---- losses -------------------------------------------------------------------

// -mean over valid rows of logp[r, label[r]]
Tensor nll_rows(const Tensor& logp, const std::vector<int>& labels,
                const std::vector<std::uint8_t>& valid);

// ---- verification ---------------------------------------------------------------

void validate_finite(const Tensor& x, const char* what);

// Max over coordinates of |autodiff - central difference| / max(1,|a|,|b|).
double check_gradients(const std::function<Tensor(const Tensor&)>& f, const Tensor& x,
                       double eps = 1e-5);

}  // namespace rangefuse
