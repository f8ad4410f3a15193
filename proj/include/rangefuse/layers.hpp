#pragma once

#include <string>
#include <vector>

#include "rangefuse/tensor.hpp"

// Learnable building blocks. A LayerParams holds the weights of one block
// (an MLP stack, a convolution, a batchnorm, or an attention projection)
// plus its hyper-parameters. Apply functions are pure given the parameters
// except batchnorm, which updates its running statistics in training mode.

namespace rangefuse {

enum class LayerKind { mlp, conv1x1, conv3x3, batchnorm, leaky_relu, sigmoid, softmax,
                       linear_attention_proj };

enum class Activation { none, leaky_relu, sigmoid, softmax };

struct LayerParams {
  LayerKind kind = LayerKind::mlp;
  std::vector<Tensor> weights;  // mlp/proj: [Cin,Cout] per layer; conv: [Co,Ci,k,k]; bn: {gamma}
  std::vector<Tensor> biases;   // matching [Cout] / [Co] / {beta}
  Activation hidden_act = Activation::leaky_relu;  // between mlp layers
  Activation final_act = Activation::none;         // after the last layer
  double slope = 0.01;     // leaky-relu
  double eps = 1e-5;       // batchnorm
  double momentum = 0.1;   // batchnorm running-stat update
  Tensor run_mean, run_var;  // batchnorm buffers (requires_grad = false)
};

// Weight init: uniform in +/- sqrt(1/fan_in); biases zero; bn gamma=1 beta=0.
LayerParams make_mlp(Rng& rng, const std::vector<int>& dims,
                     Activation hidden = Activation::leaky_relu,
                     Activation final = Activation::none);
LayerParams make_conv(Rng& rng, int cin, int cout, int k);
LayerParams make_batchnorm(int c);
LayerParams make_attention_proj(Rng& rng, int dv, int dv_out);

// Affine stack along the last dimension; x is [..., Cin].
Tensor apply_mlp(const LayerParams& p, const Tensor& x);
// Cross-correlation with zero padding k/2, stride 1; x is [C,H,W].
Tensor apply_conv2d(const LayerParams& p, const Tensor& x);
// Per-channel normalization; updates p.run_mean / p.run_var when training.
Tensor apply_batchnorm(LayerParams& p, const Tensor& x, bool training);
// softmax(q k^T / sqrt(D)) v followed by the stored linear projection.
Tensor attend_cross(const Tensor& q, const Tensor& k, const Tensor& v, const LayerParams& proj);

Tensor apply_activation(const Tensor& x, Activation act, double slope);

// conv3x3 -> batchnorm -> leaky-relu, the standard block.
struct ConvBlock {
  LayerParams conv;
  LayerParams bn;
  double slope = 0.01;

  ConvBlock() = default;
  ConvBlock(Rng& rng, int cin, int cout, int k);
  Tensor apply(const Tensor& x, bool training);
  void register_into(class ParamRegistry& reg, const std::string& prefix);
};

// conv3x3-bn-lrelu -> conv3x3-bn + skip (1x1-projected when channels change),
// then a final leaky-relu.
struct ResBlock {
  ConvBlock a;
  LayerParams conv_b, bn_b;
  bool has_proj = false;
  LayerParams proj_conv, proj_bn;
  double slope = 0.01;

  ResBlock() = default;
  ResBlock(Rng& rng, int cin, int cout);
  Tensor apply(const Tensor& x, bool training);
  void register_into(class ParamRegistry& reg, const std::string& prefix);
};

// ---- parameter registry / checkpoints ------------------------------------------

// Named handles onto the tensors of a network. Tensor is a shared handle, so
// a registry entry aliases the live parameter storage. Buffers (running
// stats) are registered alongside trainable weights and saved with them.
class ParamRegistry {
 public:
  void add(const std::string& name, const Tensor& t);
  void add_layer(const std::string& prefix, LayerParams& p);

  const std::vector<std::pair<std::string, Tensor>>& entries() const { return entries_; }
  const Tensor* find(const std::string& name) const;

  std::size_t total_scalars() const;
  void zero_grads();

 private:
  std::vector<std::pair<std::string, Tensor>> entries_;  // insertion order
};

// Flat binary weight container: magic "RFW1"; per tensor: name length u32 LE,
// UTF-8 name, rank u32 LE, dims u32[] LE, payload little-endian f64. Records
// are written sorted by name so identical weights give identical bytes.
void write_checkpoint(const std::string& path, const ParamRegistry& reg);
// Loads every record and copies into the matching registry entry; missing or
// extra names and shape mismatches are format errors.
void load_checkpoint(const std::string& path, ParamRegistry& reg);
// Raw record access for tools and partial loads.
std::vector<std::pair<std::string, Tensor>> read_checkpoint(const std::string& path);

// Momentum SGD over the registry's trainable entries.
class SgdOptimizer {
 public:
  SgdOptimizer(double lr, double momentum) : lr_(lr), momentum_(momentum) {}
  void step(ParamRegistry& reg);

 private:
  double lr_, momentum_;
  std::vector<std::vector<double>> velocity_;  // parallel to trainable entries
};

}  // namespace rangefuse
