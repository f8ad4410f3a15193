#pragma once

#include <array>
#include <cstdint>
#include <string>
#include <vector>

#include "rangefuse/dataset.hpp"
#include "rangefuse/tensor.hpp"

// Spherical range-view projection, RGB painting, back-projection, and the
// kNN label post-processing baseline.

namespace rangefuse {

struct RVConfig {
  int height = 64;
  int width = 2048;
  double fov_up = 3.0 * M_PI / 180.0;     // radians
  double fov_down = -25.0 * M_PI / 180.0;

  void validate() const;
};

constexpr int kNoPoint = -1;

// Multi-channel H x W grid. Channel planes are row-major; per-point pixel
// coordinates stay valid for points that lost their collision (only points
// exactly at the origin carry the -1 sentinel).
struct RangeImage {
  int height = 0, width = 0;
  std::vector<double> x, y, z, remission, range;  // H*W each
  std::vector<double> r, g, b;                    // filled by build_rv_rgb
  std::vector<std::uint8_t> mask;      // pixel received a point
  std::vector<std::uint8_t> rgb_mask;  // surviving point carries a camera color
  std::vector<int> index_map;          // surviving point index or kNoPoint
  std::vector<int> pixel_u, pixel_v;   // per point (size N)
  std::size_t dropped_origin_points = 0;

  std::size_t px(int v, int u) const {
    return static_cast<std::size_t>(v) * static_cast<std::size_t>(width) + static_cast<std::size_t>(u);
  }
  bool has_rgb() const { return !r.empty(); }
};

// u = W*(0.5*(1 - atan2(y,x)/pi)), v = H*(1 - (asin(z/r) - fov_down)/fov_span),
// both clamped then floored; collisions keep the nearest range (ties keep the
// lowest point index).
RangeImage spherical_project(const PointCloud& cloud, const RVConfig& cfg);

// Samples nearest-pixel RGB for points inside the camera frustum; others get
// color_mask = false.
PointCloud paint_points(const PointCloud& cloud, const Image& image, const CameraModel& cam);

// Full projection plus RGB channels where the surviving point is colored;
// rgb_mask = projection mask AND survivor color_mask.
RangeImage build_rv_rgb(const PointCloud& painted, const RVConfig& cfg);

// Every point takes the label at its stored pixel; origin-dropped points get
// class 0.
std::vector<int> back_project(const std::vector<int>& pixel_labels, const RangeImage& ri,
                              const PointCloud& cloud);

struct KnnConfig {
  int k = 5;
  int window = 5;
  double cutoff_m = 1.0;
  double sigma = 1.0;
};

// Candidates: masked window pixels with |pixel range - point range| <= cutoff,
// ranked by that range gap inflated by exp((du^2+dv^2)/(2 sigma^2)); the k
// best vote with their argmax labels (ties -> smallest class id); no candidate
// falls back to the back-projected label.
std::vector<int> knn_post_process(const RangeImage& ri, const PointCloud& cloud,
                                  const Tensor& pixel_probs, const KnnConfig& cfg);

// [5,H,W] tensor of (x, y, z, remission, range); unmasked pixels zero.
Tensor rv_geometry_tensor(const RangeImage& ri);
// [3,H,W] tensor of RV-RGB in [0,1]; pixels outside rgb_mask zero.
Tensor rv_rgb_tensor(const RangeImage& ri);

// ---- inspection container ---------------------------------------------------

// Binary channel dump: magic "RVI1", u32 height/width/channel-count, per
// channel a (u32 length, name) record, then channel-count f32 planes and a
// row-major LSB-first mask bitset.
struct RviChannels {
  int height = 0, width = 0;
  std::vector<std::pair<std::string, std::vector<double>>> channels;
  std::vector<std::uint8_t> mask;  // H*W entries, 0/1
};

void write_rvi(const std::string& path, const RviChannels& rvi);
RviChannels read_rvi(const std::string& path);
RviChannels rvi_from_range_image(const RangeImage& ri);

// PPM renderings: labels through a palette, or one channel normalized to
// grayscale; unmasked pixels black.
void render_rv_labels(const std::string& path, const std::vector<int>& labels,
                      const std::vector<std::uint8_t>& mask, int height, int width,
                      const std::vector<std::array<std::uint8_t, 3>>& palette);
void render_rv_channel(const std::string& path, const std::vector<double>& plane,
                       const std::vector<std::uint8_t>& mask, int height, int width);

}  // namespace rangefuse
