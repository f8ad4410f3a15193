#include "rangefuse/encoder.hpp"

#include "rangefuse/errors.hpp"

namespace rangefuse {

Encoder::Encoder(Rng& rng, int in_channels, const std::vector<int>& stage_channels) {
  if (stage_channels.empty()) throw ConfigError("encoder needs at least one stage");
  int cin = in_channels;
  stages.reserve(stage_channels.size());
  for (int cout : stage_channels) {
    if (cout < 1) throw ConfigError("encoder stage width must be positive");
    stages.emplace_back(rng, cin, cout);
    cin = cout;
  }
}

std::vector<Tensor> Encoder::forward(const Tensor& x, bool training) {
  if (x.rank() != 3) throw DimensionError("encoder expects a [C,H,W] input");
  const int div = 1 << static_cast<int>(stages.size());
  if (x.dim(1) % div != 0 || x.dim(2) % div != 0)
    throw DimensionError("encoder input " + std::to_string(x.dim(1)) + "x" +
                         std::to_string(x.dim(2)) + " is not divisible by " + std::to_string(div));
  std::vector<Tensor> out;
  out.reserve(stages.size());
  Tensor cur = x;
  for (auto& stage : stages) {
    cur = avg_pool2x2(stage.apply(cur, training));
    out.push_back(cur);
  }
  return out;
}

void Encoder::register_into(ParamRegistry& reg, const std::string& prefix) {
  for (std::size_t k = 0; k < stages.size(); ++k)
    stages[k].register_into(reg, prefix + ".stage" + std::to_string(k));
}

}  // namespace rangefuse
