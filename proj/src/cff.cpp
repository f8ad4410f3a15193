#include "rangefuse/cff.hpp"

#include <algorithm>

#include "rangefuse/errors.hpp"

namespace rangefuse {

MLUStrategy parse_mlu(const std::string& token) {
  if (token == "cbam") return MLUStrategy::cbam;
  if (token == "xattn") return MLUStrategy::xattn;
  if (token == "combined") return MLUStrategy::combined;
  throw ConfigError("unknown mlu strategy '" + token + "' (expected cbam, xattn, or combined)");
}

const char* mlu_name(MLUStrategy s) {
  switch (s) {
    case MLUStrategy::cbam: return "cbam";
    case MLUStrategy::xattn: return "xattn";
    default: return "combined";
  }
}

CbamUnit::CbamUnit(Rng& rng, int channels) {
  const int hidden = std::max(channels / 2, 2);
  mlp = make_mlp(rng, {2 * channels, hidden, channels}, Activation::leaky_relu,
                 Activation::sigmoid);
  conv = make_conv(rng, 2, 1, 3);
}

MLUGates CbamUnit::gates(const Tensor& fused, const Tensor& modality) {
  if (fused.shape() != modality.shape()) throw DimensionError("gate inputs must share a shape");
  const int C = modality.dim(0);

  // channel branch: modality descriptor + fused descriptor -> shared MLP -> sigmoid
  Tensor desc = add(pool_global(modality, PoolAxis::space, PoolMode::avg_and_max),
                    pool_global(fused, PoolAxis::space, PoolMode::avg_and_max));
  Tensor chan = reshape(apply_mlp(mlp, reshape(desc, {1, 2 * C})), {C});

  // spatial branch: summed per-pixel (avg,max) planes -> 3x3 conv -> sigmoid
  Tensor planes = add(pool_global(modality, PoolAxis::channel, PoolMode::avg_and_max),
                      pool_global(fused, PoolAxis::channel, PoolMode::avg_and_max));
  Tensor spat = sigmoid(apply_conv2d(conv, planes));
  return {chan, spat};
}

XattnUnit::XattnUnit(Rng& rng, int channels, int gh, int gw) : grid_h(gh), grid_w(gw) {
  chan_proj = make_attention_proj(rng, 2, 2);
  chan_out = make_mlp(rng, {2, 1}, Activation::leaky_relu, Activation::sigmoid);
  spat_proj = make_attention_proj(rng, channels, channels);
  spat_conv = make_conv(rng, channels, 1, 3);
}

namespace {

// per-channel (avg, max) token matrix [C,2]
Tensor channel_tokens(const Tensor& x) {
  const int C = x.dim(0);
  Tensor desc = pool_global(x, PoolAxis::space, PoolMode::avg_and_max);  // [2C]
  return transpose2d(reshape(desc, {2, C}));
}

// fixed-size token grid, one row per grid cell [gh*gw, C]
Tensor grid_tokens(const Tensor& x, int gh, int gw) {
  Tensor g = (x.dim(1) == gh && x.dim(2) == gw) ? x : upsample_bilinear(x, gh, gw);
  return chw_to_rows(g);
}

}  // namespace

MLUGates XattnUnit::gates(const Tensor& fused, const Tensor& modality) {
  if (fused.shape() != modality.shape()) throw DimensionError("gate inputs must share a shape");
  const int C = modality.dim(0), H = modality.dim(1), W = modality.dim(2);

  // channel branch: fused channel tokens attend over the modality's channel tokens
  Tensor mt = channel_tokens(modality);
  Tensor ct = attend_cross(channel_tokens(fused), mt, mt, chan_proj);  // [C,2]
  Tensor chan = reshape(apply_mlp(chan_out, ct), {C});                 // sigmoid in the MLP

  // spatial branch: fused token grid cross-attends over the modality's token
  // grid; a 3x3 conv on the attended grid yields the per-token gate, which is
  // resampled back to the stage resolution
  Tensor q = grid_tokens(fused, grid_h, grid_w);
  Tensor kv = grid_tokens(modality, grid_h, grid_w);
  Tensor st = attend_cross(q, kv, kv, spat_proj);  // [G,C]
  Tensor g = sigmoid(apply_conv2d(spat_conv, rows_to_chw(st, grid_h, grid_w)));
  Tensor spat = (grid_h == H && grid_w == W) ? g : upsample_bilinear(g, H, W);
  return {chan, spat};
}

FusionStage::FusionStage(Rng& rng, int channels, MLUStrategy kind_, int grid_h, int grid_w)
    : kind(kind_) {
  if (kind == MLUStrategy::combined)
    throw ConfigError("a single fusion stage must be cbam or xattn");
  pre = ResBlock(rng, 2 * channels, channels);
  if (kind == MLUStrategy::cbam)
    cbam = CbamUnit(rng, channels);
  else
    xattn = XattnUnit(rng, channels, grid_h, grid_w);
  post_a = ConvBlock(rng, 2 * channels, channels, 3);
  post_b = ConvBlock(rng, channels, channels, 3);
}

MLUGates FusionStage::gates(const Tensor& fused, const Tensor& modality) {
  return kind == MLUStrategy::cbam ? cbam.gates(fused, modality) : xattn.gates(fused, modality);
}

Tensor FusionStage::apply(const Tensor& cam, const Tensor& lidar, bool training) {
  if (cam.shape() != lidar.shape())
    throw DimensionError("fusion stage expects matching camera/LiDAR shapes");
  const int C = cam.dim(0);
  Tensor fused = pre.apply(concat({cam, lidar}, 0), training);

  // each modality gets its own gate, built from its own context plus the fused
  // map's context; the gate is the broadcast sum of the two branches, in (0,2)
  MLUGates gc = gates(fused, cam);
  MLUGates gl = gates(fused, lidar);
  Tensor cam_comp = mul(cam, add(reshape(gc.channel, {C, 1, 1}), gc.spatial));
  Tensor lidar_comp = mul(lidar, add(reshape(gl.channel, {C, 1, 1}), gl.spatial));

  Tensor refined = post_b.apply(post_a.apply(concat({cam_comp, lidar_comp}, 0), training), training);
  return add(fused, refined);
}

void FusionStage::register_into(ParamRegistry& reg, const std::string& prefix) {
  pre.register_into(reg, prefix + ".pre");
  if (kind == MLUStrategy::cbam) {
    reg.add_layer(prefix + ".chan_mlp", cbam.mlp);
    reg.add_layer(prefix + ".spat_conv", cbam.conv);
  } else {
    reg.add_layer(prefix + ".chan_proj", xattn.chan_proj);
    reg.add_layer(prefix + ".chan_out", xattn.chan_out);
    reg.add_layer(prefix + ".spat_proj", xattn.spat_proj);
    reg.add_layer(prefix + ".spat_conv", xattn.spat_conv);
  }
  post_a.register_into(reg, prefix + ".post_a");
  post_b.register_into(reg, prefix + ".post_b");
}

FusionModule::FusionModule(Rng& rng, const std::vector<int>& stage_channels, MLUStrategy strategy,
                           int grid_h, int grid_w) {
  if (stage_channels.empty()) throw ConfigError("fusion module needs at least one stage");
  const std::size_t n = stage_channels.size();
  stages.reserve(n);
  for (std::size_t k = 0; k < n; ++k) {
    MLUStrategy kind = strategy;
    if (strategy == MLUStrategy::combined)
      kind = (k < (n + 1) / 2) ? MLUStrategy::cbam : MLUStrategy::xattn;
    stages.emplace_back(rng, stage_channels[k], kind, grid_h, grid_w);
  }
}

std::vector<Tensor> FusionModule::apply(const std::vector<Tensor>& cam,
                                        const std::vector<Tensor>& lidar, bool training) {
  if (cam.size() != stages.size() || lidar.size() != stages.size())
    throw ContractError("fusion module: feature pyramids must have one map per stage");
  std::vector<Tensor> out;
  out.reserve(stages.size());
  for (std::size_t k = 0; k < stages.size(); ++k)
    out.push_back(stages[k].apply(cam[k], lidar[k], training));
  return out;
}

void FusionModule::register_into(ParamRegistry& reg, const std::string& prefix) {
  for (std::size_t k = 0; k < stages.size(); ++k)
    stages[k].register_into(reg, prefix + ".stage" + std::to_string(k));
}

}  // namespace rangefuse
