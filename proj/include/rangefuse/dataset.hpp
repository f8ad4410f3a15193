#pragma once

#include <array>
#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "rangefuse/errors.hpp"
#include "rangefuse/rng.hpp"

// Scan / label / calibration ingestion plus a deterministic synthetic
// camera+LiDAR scene generator for desk-scale training and evaluation.

namespace rangefuse {

struct PointCloud {
  std::vector<double> xyz;        // N*3, row-major (x,y,z) meters
  std::vector<double> remission;  // N, in [0,1]
  std::vector<double> rgb;        // N*3 in [0,1], empty until painted
  std::vector<int> label;         // N class ids, empty when unlabeled
  std::vector<std::uint8_t> color_mask;  // N, point has a camera correspondence
  std::vector<int> cam_u, cam_v;  // N sampled camera pixels, -1 outside the frustum

  std::size_t size() const { return xyz.size() / 3; }
  bool has_rgb() const { return !rgb.empty(); }
  bool has_labels() const { return !label.empty(); }
};

struct CameraModel {
  std::array<double, 9> intrinsics{};    // 3x3 row-major, pixels
  std::array<double, 16> extrinsics{};   // 4x4 row-major, LiDAR -> camera
  int width = 0, height = 0;

  // camera-frame coordinates of a LiDAR-frame point
  std::array<double, 3> to_camera(double x, double y, double z) const;
  // pixel coordinates and depth; valid only when depth > 0
  void project(double x, double y, double z, double& u, double& v, double& depth) const;
};

struct Image {
  int width = 0, height = 0;
  std::vector<std::uint8_t> rgb;  // height*width*3, top row first

  std::uint8_t* px(int x, int y) { return rgb.data() + 3 * (static_cast<std::size_t>(y) * width + x); }
  const std::uint8_t* px(int x, int y) const {
    return rgb.data() + 3 * (static_cast<std::size_t>(y) * width + x);
  }
};

// Raw label id -> train id table with palette and names, loaded from a
// key=value data file (see data/*.labelmap for the schema).
struct LabelMap {
  std::string name;
  int num_classes = 0;
  int ignore_id = 0;
  std::map<int, int> raw_to_train;
  std::vector<std::array<std::uint8_t, 3>> palette;  // indexed by train id
  std::vector<std::string> class_names;              // indexed by train id
};

// ---- readers -----------------------------------------------------------------

// Binary scan: records of 4 little-endian f32 (x, y, z, remission).
PointCloud read_scan(const std::string& path);
// Writes the same format (round-trip tests, synthetic exports).
void write_scan(const std::string& path, const PointCloud& cloud);

// Binary labels: one little-endian u32 per point, low 16 bits semantic id,
// remapped through the label map. n must match the scan's point count.
std::vector<int> read_labels(const std::string& path, std::size_t n, const LabelMap& map);
void write_labels(const std::string& path, const std::vector<int>& labels);

// Calibration text with "Pi: <12 floats>" and "Tr: <12 floats>" lines; the
// projective part of P2 beyond the intrinsics is folded into the extrinsics.
CameraModel read_calib(const std::string& path, int image_width, int image_height);

LabelMap load_label_map(const std::string& path);

Image read_ppm(const std::string& path);
void write_ppm(const std::string& path, const Image& img);

// ---- synthetic scenes ------------------------------------------------------------

// Scene classes: 0 void (never emitted as a point), 1 ground, 2 wall,
// 3 box, 4 pole, 5 vegetation.
constexpr int kSynthClassCount = 6;

struct SceneSpec {
  std::uint64_t seed = 1;
  int ground = 1;
  int walls = 2;
  int boxes = 5;
  int poles = 3;
  int vegetation = 4;
  int beams = 32;
  int azimuth_steps = 1024;
  double fov_up_deg = 3.0;
  double fov_down_deg = -25.0;
  double noise_sigma = 0.01;  // range noise, meters
  int cam_width = 192;
  int cam_height = 96;
  double cam_focal = 110.0;  // pixels
  std::vector<std::array<std::uint8_t, 3>> palette;  // defaults to synth palette when empty
};

const std::vector<std::array<std::uint8_t, 3>>& synth_palette();

struct Scene {
  PointCloud cloud;  // labeled
  Image image;       // flat-shaded camera rendering of the same primitives
  CameraModel cam;
};

// Ray-cast ring LiDAR + pinhole rendering over analytic primitives; fully
// deterministic given spec.seed.
Scene gen_synthetic_scene(const SceneSpec& spec);

}  // namespace rangefuse
