#pragma once

#include <vector>

#include "rangefuse/layers.hpp"
#include "rangefuse/rv.hpp"

// Two refinement passes over range-view predictions.
//
// Grid pass: every masked pixel gathers two neighbor sets from its window --
// one ranked by class-probability agreement, one by range/remission
// proximity. Each set is distilled into a feature correction by a small
// point-feature stack, and the two corrections are blended by the local
// prediction confidence: uncertain regions lean on geometry, confident ones
// on semantics. The corrected map passes through one conv block; unmasked
// pixels are returned untouched.
//
// Point pass: every point collects nearby range-image pixels, encodes them
// against its own coordinates, spreads context through two cylindrical voxel
// grids (coarse then fine), averages its neighbor branches, and classifies.
// The classifier starts as an exact pass-through of the point's own pixel
// probabilities, which makes the pass safe to bolt onto any existing
// range-view model.

namespace rangefuse {

struct RefineConfig {
  int window = 7;        // grid-pass search window (odd)
  int k = 8;             // neighbors kept per pixel
  double lambda = 1.0;   // confidence blending sharpness
  int point_window = 7;  // point-pass search window (odd)
  int point_k = 7;       // neighbor pixels per point

  void validate() const;
};

// Variable-size neighbor sets in segment form. Row r of `*_rows` is a pixel
// linear index belonging to segment `*_seg[r]`; segment s refers to
// centers[s]. `psi` holds every masked window pixel (center included) and
// drives the confidence estimate.
struct NeighborLists {
  std::vector<int> centers;
  std::vector<int> sem_rows, sem_seg;
  std::vector<int> geo_rows, geo_seg;
  std::vector<int> psi_rows, psi_seg;
};

NeighborLists select_neighbors(const Tensor& probs, const RangeImage& ri,
                               const RefineConfig& cfg);

// Per-center mean over its psi set of 1 + (1/ln C) sum_c p ln p -- 1 for a
// one-hot prediction, 0 for uniform. Differentiable in the probabilities.
Tensor mean_confidence(const Tensor& probs, const NeighborLists& nb);  // [n_centers, 1]

// Softmax of one logit per row inside each segment, then the weighted sum of
// the value rows: each output row is a convex combination of its segment.
Tensor aggregate_rows(const Tensor& values, const Tensor& logits, const std::vector<int>& seg,
                      int num_segments);

// per-row MLP -> concat(row, segment max, segment mean) -> value and logit
// heads -> confidence-weighted convex pooling. The value head starts at zero
// so a fresh branch contributes nothing until trained.
struct BranchParams {
  LayerParams pfe;    // [in -> hidden]
  LayerParams value;  // [3*hidden -> out]
  LayerParams logit;  // [3*hidden -> 1]

  BranchParams() = default;
  BranchParams(Rng& rng, int in_dim, int hidden, int out_dim);
  Tensor delta(const Tensor& rows, const std::vector<int>& seg, int num_segments);
  void register_into(ParamRegistry& reg, const std::string& prefix);
};

struct GridRefiner {
  BranchParams sem, geo;
  ConvBlock post;
  int feat_channels = 0, class_channels = 0;

  GridRefiner() = default;
  GridRefiner(Rng& rng, int feat_channels, int class_channels, int hidden);
  // feats [Cf,H,W], probs [Cc,H,W] -> refined feats [Cf,H,W]
  Tensor apply(const Tensor& feats, const Tensor& probs, const RangeImage& ri,
               const RefineConfig& cfg, bool training);
  void register_into(ParamRegistry& reg, const std::string& prefix);
};

// ---- point pass ---------------------------------------------------------------

struct CylGrid {
  int n_rho = 30, n_phi = 3, n_z = 2;
  double rho_max = 80.0;
  double z_min = -4.0, z_max = 2.0;

  int cells() const { return n_rho * n_phi * n_z; }
  void validate() const;
};

// cell index per point; out-of-range coordinates clamp to the edge bins
std::vector<int> cylindrical_voxelize(const PointCloud& cloud, const CylGrid& grid);

// K neighbor pixel indices per point (point-major), ranked by |pixel range -
// point range| inside the window; the point's own pixel ranks first and pads
// when the window runs dry. Origin points get their slots filled with -1.
std::vector<int> range_knn(const RangeImage& ri, const PointCloud& cloud, int k, int window);

// mean per cell -> two MLPs -> broadcast back -> per-point update MLP on the
// sum, so isolated points double their feature under identity weights
struct VoxelMixParams {
  LayerParams mlp_a, mlp_b, update;

  VoxelMixParams() = default;
  VoxelMixParams(Rng& rng, int channels);
  Tensor apply(const Tensor& feats, const std::vector<int>& cell, int num_cells);
  void register_into(ParamRegistry& reg, const std::string& prefix);
};

struct PointRefiner {
  LayerParams pfe;  // [class_channels + 8 -> hidden]
  VoxelMixParams coarse, fine;
  LayerParams classifier;  // [hidden -> hidden -> class_channels], last layer zero-init
  CylGrid coarse_grid{30, 3, 2, 80.0, -4.0, 2.0};
  CylGrid fine_grid{60, 6, 4, 80.0, -4.0, 2.0};
  int class_channels = 0, hidden = 0;

  PointRefiner() = default;
  PointRefiner(Rng& rng, int class_channels, int hidden);
  // per-point class probabilities [N, C]; origin points keep their own-pixel
  // fallback of zeros -> uniform
  Tensor apply(const RangeImage& ri, const PointCloud& cloud, const Tensor& pixel_probs,
               const RefineConfig& cfg);
  void register_into(ParamRegistry& reg, const std::string& prefix);
};

}  // namespace rangefuse
