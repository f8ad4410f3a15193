#pragma once

#include <string>
#include <vector>

#include "rangefuse/encoder.hpp"

// Per-stage fusion of the camera and LiDAR feature pyramids. Each stage first
// mixes the two maps with a residual block, then looks complementary
// information back up from each modality: a pair of gates (one per-channel,
// one per-pixel, each in (0,1)) scales the modality map, where the gates
// combine that modality's pooled context with the fused map's context via
//   - cbam: summed descriptors pushed through a shared MLP / a 3x3 conv;
//   - xattn: the fused map's tokens cross-attend over the modality's tokens;
//     the spatial branch works on a fixed token grid so the attention core
//     does not grow with input resolution.
// The two gated modality maps are concatenated, refined by two conv blocks,
// and added onto the fused map.

namespace rangefuse {

enum class MLUStrategy { cbam, xattn, combined };

MLUStrategy parse_mlu(const std::string& token);
const char* mlu_name(MLUStrategy s);

struct MLUGates {
  Tensor channel;  // [C]
  Tensor spatial;  // [1,H,W]
};

struct CbamUnit {
  LayerParams mlp;   // [2C -> hidden -> C], sigmoid output
  LayerParams conv;  // 3x3, 2 -> 1

  CbamUnit() = default;
  CbamUnit(Rng& rng, int channels);
  MLUGates gates(const Tensor& fused, const Tensor& modality);
};

struct XattnUnit {
  LayerParams chan_proj;  // attention value projection, 2 -> 2
  LayerParams chan_out;   // [2 -> 1], sigmoid output
  LayerParams spat_proj;  // attention value projection, C -> C
  LayerParams spat_conv;  // 3x3 on the token grid, C -> 1, sigmoid applied after
  int grid_h = 8, grid_w = 64;

  XattnUnit() = default;
  XattnUnit(Rng& rng, int channels, int grid_h = 8, int grid_w = 64);
  MLUGates gates(const Tensor& fused, const Tensor& modality);
};

struct FusionStage {
  MLUStrategy kind = MLUStrategy::cbam;
  ResBlock pre;             // concat(cam, lidar) -> fused map
  CbamUnit cbam;
  XattnUnit xattn;
  ConvBlock post_a, post_b;  // refine concat of the gated modality maps

  FusionStage() = default;
  FusionStage(Rng& rng, int channels, MLUStrategy kind, int grid_h, int grid_w);
  MLUGates gates(const Tensor& fused, const Tensor& modality);
  Tensor apply(const Tensor& cam, const Tensor& lidar, bool training);
  void register_into(ParamRegistry& reg, const std::string& prefix);
};

// One FusionStage per pyramid level. "combined" assigns the cheap gate to the
// fine (early) half of the stages and cross-attention to the coarse half.
struct FusionModule {
  std::vector<FusionStage> stages;

  FusionModule() = default;
  FusionModule(Rng& rng, const std::vector<int>& stage_channels, MLUStrategy strategy,
               int grid_h = 8, int grid_w = 64);

  std::vector<Tensor> apply(const std::vector<Tensor>& cam, const std::vector<Tensor>& lidar,
                            bool training);
  void register_into(ParamRegistry& reg, const std::string& prefix);
};

}  // namespace rangefuse
