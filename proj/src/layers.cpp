#include "rangefuse/layers.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <map>

namespace rangefuse {

static_assert(std::endian::native == std::endian::little,
              "checkpoint container assumes a little-endian host");

namespace {

Tensor init_weight(Rng& rng, std::vector<int> shape, int fan_in) {
  double bound = std::sqrt(1.0 / fan_in);
  return Tensor::uniform(rng, std::move(shape), -bound, bound, true);
}

}  // namespace

LayerParams make_mlp(Rng& rng, const std::vector<int>& dims, Activation hidden,
                     Activation final) {
  if (dims.size() < 2) throw ConfigError("mlp needs at least an input and an output width");
  LayerParams p;
  p.kind = LayerKind::mlp;
  p.hidden_act = hidden;
  p.final_act = final;
  for (std::size_t i = 0; i + 1 < dims.size(); ++i) {
    p.weights.push_back(init_weight(rng, {dims[i], dims[i + 1]}, dims[i]));
    p.biases.push_back(Tensor::zeros({dims[i + 1]}, true));
  }
  return p;
}

LayerParams make_conv(Rng& rng, int cin, int cout, int k) {
  if (k != 1 && k != 3) throw ConfigError("conv kernel must be 1 or 3");
  LayerParams p;
  p.kind = k == 1 ? LayerKind::conv1x1 : LayerKind::conv3x3;
  p.weights.push_back(init_weight(rng, {cout, cin, k, k}, cin * k * k));
  p.biases.push_back(Tensor::zeros({cout}, true));
  return p;
}

LayerParams make_batchnorm(int c) {
  LayerParams p;
  p.kind = LayerKind::batchnorm;
  p.weights.push_back(Tensor::full({c}, 1.0, true));  // gamma
  p.biases.push_back(Tensor::zeros({c}, true));       // beta
  p.run_mean = Tensor::zeros({c});
  p.run_var = Tensor::full({c}, 1.0);
  return p;
}

LayerParams make_attention_proj(Rng& rng, int dv, int dv_out) {
  LayerParams p;
  p.kind = LayerKind::linear_attention_proj;
  p.weights.push_back(init_weight(rng, {dv, dv_out}, dv));
  p.biases.push_back(Tensor::zeros({dv_out}, true));
  return p;
}

Tensor apply_activation(const Tensor& x, Activation act, double slope) {
  switch (act) {
    case Activation::none: return x;
    case Activation::leaky_relu: return leaky_relu(x, slope);
    case Activation::sigmoid: return sigmoid(x);
    case Activation::softmax: return softmax_rows(x);
  }
  throw ConfigError("unknown activation");
}

Tensor apply_mlp(const LayerParams& p, const Tensor& x) {
  if (p.kind != LayerKind::mlp && p.kind != LayerKind::linear_attention_proj)
    throw ConfigError("apply_mlp on non-mlp params");
  if (p.weights.empty()) throw ConfigError("empty mlp");
  int cin = p.weights.front().dim(0);
  if (x.rank() < 1 || x.dim(x.rank() - 1) != cin)
    throw DimensionError("mlp input last dim " + std::to_string(x.dim(x.rank() - 1)) +
                         " != " + std::to_string(cin));
  std::vector<int> lead(x.shape().begin(), x.shape().end() - 1);
  int rows = static_cast<int>(x.numel() / cin);
  Tensor h = x.rank() == 2 ? x : reshape(x, {rows, cin});
  for (std::size_t i = 0; i < p.weights.size(); ++i) {
    h = add(matmul(h, p.weights[i]), p.biases[i]);
    bool last = i + 1 == p.weights.size();
    h = apply_activation(h, last ? p.final_act : p.hidden_act, p.slope);
  }
  if (x.rank() != 2) {
    lead.push_back(h.dim(1));
    h = reshape(h, lead);
  }
  return h;
}

Tensor apply_conv2d(const LayerParams& p, const Tensor& x) {
  if (p.kind != LayerKind::conv1x1 && p.kind != LayerKind::conv3x3)
    throw ConfigError("apply_conv2d on non-conv params");
  Tensor y = conv2d(x, p.weights[0], p.biases[0]);
  return apply_activation(y, p.final_act, p.slope);
}

Tensor apply_batchnorm(LayerParams& p, const Tensor& x, bool training) {
  if (p.kind != LayerKind::batchnorm) throw ConfigError("apply_batchnorm on non-bn params");
  return batchnorm2d(x, p.weights[0], p.biases[0], p.run_mean.data(), p.run_var.data(),
                     training, p.eps, p.momentum);
}

Tensor attend_cross(const Tensor& q, const Tensor& k, const Tensor& v, const LayerParams& proj) {
  if (q.rank() != 2 || k.rank() != 2 || v.rank() != 2)
    throw DimensionError("attend_cross expects rank-2 q/k/v");
  if (k.dim(0) == 0) throw InvalidInputError("attend_cross with an empty key set");
  if (q.dim(1) != k.dim(1)) throw DimensionError("attend_cross q/k depth mismatch");
  if (k.dim(0) != v.dim(0)) throw DimensionError("attend_cross k/v length mismatch");
  double scale = 1.0 / std::sqrt(static_cast<double>(q.dim(1)));
  Tensor attn = softmax_rows(mul_scalar(matmul(q, transpose2d(k)), scale));
  return apply_mlp(proj, matmul(attn, v));
}

// ---- blocks -----------------------------------------------------------------

ConvBlock::ConvBlock(Rng& rng, int cin, int cout, int k)
    : conv(make_conv(rng, cin, cout, k)), bn(make_batchnorm(cout)) {}

Tensor ConvBlock::apply(const Tensor& x, bool training) {
  return leaky_relu(apply_batchnorm(bn, apply_conv2d(conv, x), training), slope);
}

void ConvBlock::register_into(ParamRegistry& reg, const std::string& prefix) {
  reg.add_layer(prefix + ".conv", conv);
  reg.add_layer(prefix + ".bn", bn);
}

ResBlock::ResBlock(Rng& rng, int cin, int cout)
    : a(rng, cin, cout, 3), conv_b(make_conv(rng, cout, cout, 3)), bn_b(make_batchnorm(cout)) {
  if (cin != cout) {
    has_proj = true;
    proj_conv = make_conv(rng, cin, cout, 1);
    proj_bn = make_batchnorm(cout);
  }
}

Tensor ResBlock::apply(const Tensor& x, bool training) {
  Tensor h = a.apply(x, training);
  Tensor h2 = apply_batchnorm(bn_b, apply_conv2d(conv_b, h), training);
  Tensor skip = has_proj ? apply_batchnorm(proj_bn, apply_conv2d(proj_conv, x), training) : x;
  return leaky_relu(add(h2, skip), slope);
}

void ResBlock::register_into(ParamRegistry& reg, const std::string& prefix) {
  a.register_into(reg, prefix + ".a");
  reg.add_layer(prefix + ".b.conv", conv_b);
  reg.add_layer(prefix + ".b.bn", bn_b);
  if (has_proj) {
    reg.add_layer(prefix + ".proj.conv", proj_conv);
    reg.add_layer(prefix + ".proj.bn", proj_bn);
  }
}

// ---- registry ----------------------------------------------------------------

void ParamRegistry::add(const std::string& name, const Tensor& t) {
  if (!t.defined()) throw ContractError("registering undefined tensor: " + name);
  if (find(name)) throw ContractError("duplicate parameter name: " + name);
  entries_.emplace_back(name, t);
}

void ParamRegistry::add_layer(const std::string& prefix, LayerParams& p) {
  if (p.kind == LayerKind::batchnorm) {
    add(prefix + ".gamma", p.weights[0]);
    add(prefix + ".beta", p.biases[0]);
    add(prefix + ".running_mean", p.run_mean);
    add(prefix + ".running_var", p.run_var);
    return;
  }
  for (std::size_t i = 0; i < p.weights.size(); ++i) {
    add(prefix + ".w" + std::to_string(i), p.weights[i]);
    add(prefix + ".b" + std::to_string(i), p.biases[i]);
  }
}

const Tensor* ParamRegistry::find(const std::string& name) const {
  for (const auto& [n, t] : entries_)
    if (n == name) return &t;
  return nullptr;
}

std::size_t ParamRegistry::total_scalars() const {
  std::size_t n = 0;
  for (const auto& [name, t] : entries_) n += t.data().size();
  return n;
}

void ParamRegistry::zero_grads() {
  for (auto& [name, t] : entries_) t.zero_grad();
}

// ---- checkpoint container ------------------------------------------------------

namespace {

void write_u32(std::ofstream& f, std::uint32_t v) {
  f.write(reinterpret_cast<const char*>(&v), 4);
}

bool read_u32(std::ifstream& f, std::uint32_t& v) {
  f.read(reinterpret_cast<char*>(&v), 4);
  return f.gcount() == 4;
}

}  // namespace

void write_checkpoint(const std::string& path, const ParamRegistry& reg) {
  auto sorted = reg.entries();
  std::sort(sorted.begin(), sorted.end(),
            [](const auto& a, const auto& b) { return a.first < b.first; });
  std::ofstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot open checkpoint for writing: " + path);
  f.write("RFW1", 4);
  for (const auto& [name, t] : sorted) {
    write_u32(f, static_cast<std::uint32_t>(name.size()));
    f.write(name.data(), static_cast<std::streamsize>(name.size()));
    write_u32(f, static_cast<std::uint32_t>(t.rank()));
    for (int d = 0; d < t.rank(); ++d) write_u32(f, static_cast<std::uint32_t>(t.dim(d)));
    f.write(reinterpret_cast<const char*>(t.data().data()),
            static_cast<std::streamsize>(t.data().size() * sizeof(double)));
  }
  if (!f) throw IoError("checkpoint write failed: " + path);
}

std::vector<std::pair<std::string, Tensor>> read_checkpoint(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot open checkpoint: " + path);
  char magic[4];
  f.read(magic, 4);
  if (f.gcount() != 4 || std::memcmp(magic, "RFW1", 4) != 0)
    throw FormatError("bad checkpoint magic in " + path);
  std::vector<std::pair<std::string, Tensor>> records;
  std::uint32_t name_len;
  while (read_u32(f, name_len)) {
    if (name_len > 4096) throw FormatError("unreasonable name length in " + path);
    std::string name(name_len, '\0');
    f.read(name.data(), name_len);
    std::uint32_t rank;
    if (f.gcount() != static_cast<std::streamsize>(name_len) || !read_u32(f, rank) || rank > 8)
      throw FormatError("truncated record for '" + name + "' in " + path);
    std::vector<int> shape(rank);
    std::size_t numel = 1;
    for (std::uint32_t i = 0; i < rank; ++i) {
      std::uint32_t d;
      if (!read_u32(f, d)) throw FormatError("truncated dims for '" + name + "' in " + path);
      shape[i] = static_cast<int>(d);
      numel *= d;
    }
    std::vector<double> payload(numel);
    f.read(reinterpret_cast<char*>(payload.data()),
           static_cast<std::streamsize>(numel * sizeof(double)));
    if (f.gcount() != static_cast<std::streamsize>(numel * sizeof(double)))
      throw FormatError("truncated payload for '" + name + "' in " + path);
    records.emplace_back(name, Tensor::from(std::move(payload), std::move(shape)));
  }
  return records;
}

void load_checkpoint(const std::string& path, ParamRegistry& reg) {
  auto records = read_checkpoint(path);
  std::map<std::string, Tensor> by_name;
  for (auto& [name, t] : records) {
    if (!by_name.emplace(name, t).second)
      throw FormatError("duplicate record '" + name + "' in " + path);
  }
  for (const auto& [name, t] : reg.entries()) {
    auto it = by_name.find(name);
    if (it == by_name.end()) throw FormatError("checkpoint missing tensor '" + name + "'");
    if (it->second.shape() != t.shape())
      throw FormatError("shape mismatch for '" + name + "'");
    Tensor handle = t;  // shared storage
    handle.data() = it->second.data();
    by_name.erase(it);
  }
  if (!by_name.empty())
    throw FormatError("checkpoint has unknown tensor '" + by_name.begin()->first + "'");
}

// ---- optimizer -------------------------------------------------------------------

void SgdOptimizer::step(ParamRegistry& reg) {
  std::size_t vi = 0;
  for (const auto& [name, t] : reg.entries()) {
    if (!t.requires_grad()) continue;
    if (vi >= velocity_.size()) velocity_.emplace_back(t.data().size(), 0.0);
    auto& vel = velocity_[vi++];
    if (vel.size() != t.data().size()) throw ContractError("optimizer state size drift");
    Tensor param = t;  // shared storage
    auto g = param.grad();
    auto& val = param.data();
    for (std::size_t i = 0; i < val.size(); ++i) {
      vel[i] = momentum_ * vel[i] + g[i];
      val[i] -= lr_ * vel[i];
    }
  }
}

}  // namespace rangefuse
