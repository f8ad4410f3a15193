#pragma once

#include <string>
#include <vector>

#include "rangefuse/layers.hpp"

// Multi-stage convolutional encoder: each stage is one residual block
// followed by a 2x average-pool, so stage k lives at 1/2^(k+1) resolution.

namespace rangefuse {

struct Encoder {
  std::vector<ResBlock> stages;

  Encoder() = default;
  Encoder(Rng& rng, int in_channels, const std::vector<int>& stage_channels);

  // Post-pool feature of every stage, finest first. Input H and W must be
  // divisible by 2^stages.
  std::vector<Tensor> forward(const Tensor& x, bool training);
  void register_into(ParamRegistry& reg, const std::string& prefix);
};

}  // namespace rangefuse
