#include "rangefuse/rv.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <limits>

#include "rangefuse/errors.hpp"

namespace rangefuse {

void RVConfig::validate() const {
  if (height < 1 || width < 1)
    throw ConfigError("range image dimensions must be positive, got " + std::to_string(height) +
                      "x" + std::to_string(width));
  if (!(fov_up > fov_down))
    throw ConfigError("fov_up must exceed fov_down");
}

RangeImage spherical_project(const PointCloud& cloud, const RVConfig& cfg) {
  cfg.validate();
  const std::size_t n = cloud.size();
  if (n == 0) throw InvalidInputError("spherical_project: empty point cloud");

  RangeImage ri;
  ri.height = cfg.height;
  ri.width = cfg.width;
  const std::size_t hw = static_cast<std::size_t>(cfg.height) * cfg.width;
  ri.x.assign(hw, 0.0);
  ri.y.assign(hw, 0.0);
  ri.z.assign(hw, 0.0);
  ri.remission.assign(hw, 0.0);
  ri.range.assign(hw, 0.0);
  ri.mask.assign(hw, 0);
  ri.index_map.assign(hw, kNoPoint);
  ri.pixel_u.assign(n, -1);
  ri.pixel_v.assign(n, -1);

  const double span = cfg.fov_up - cfg.fov_down;
  for (std::size_t i = 0; i < n; ++i) {
    const double px = cloud.xyz[i * 3 + 0];
    const double py = cloud.xyz[i * 3 + 1];
    const double pz = cloud.xyz[i * 3 + 2];
    const double rng = std::sqrt(px * px + py * py + pz * pz);
    if (rng == 0.0) {
      ++ri.dropped_origin_points;
      continue;
    }
    double uf = cfg.width * (0.5 * (1.0 - std::atan2(py, px) / M_PI));
    double vf = cfg.height * (1.0 - (std::asin(pz / rng) - cfg.fov_down) / span);
    uf = std::clamp(uf, 0.0, static_cast<double>(cfg.width - 1));
    vf = std::clamp(vf, 0.0, static_cast<double>(cfg.height - 1));
    const int u = static_cast<int>(std::floor(uf));
    const int v = static_cast<int>(std::floor(vf));
    ri.pixel_u[i] = u;
    ri.pixel_v[i] = v;

    const std::size_t at = ri.px(v, u);
    if (ri.mask[at] && ri.range[at] <= rng) continue;  // earlier point is nearer (or tied)
    ri.mask[at] = 1;
    ri.index_map[at] = static_cast<int>(i);
    ri.x[at] = px;
    ri.y[at] = py;
    ri.z[at] = pz;
    ri.remission[at] = cloud.remission.empty() ? 0.0 : cloud.remission[i];
    ri.range[at] = rng;
  }
  return ri;
}

PointCloud paint_points(const PointCloud& cloud, const Image& image, const CameraModel& cam) {
  if (cloud.size() == 0) throw InvalidInputError("paint_points: empty point cloud");
  if (image.width != cam.width || image.height != cam.height)
    throw ContractError("paint_points: image is " + std::to_string(image.width) + "x" +
                        std::to_string(image.height) + " but camera expects " +
                        std::to_string(cam.width) + "x" + std::to_string(cam.height));

  PointCloud out = cloud;
  const std::size_t n = cloud.size();
  out.rgb.assign(n * 3, 0.0);
  out.color_mask.assign(n, 0);
  out.cam_u.assign(n, -1);
  out.cam_v.assign(n, -1);
  for (std::size_t i = 0; i < n; ++i) {
    double u, v, depth;
    cam.project(cloud.xyz[i * 3 + 0], cloud.xyz[i * 3 + 1], cloud.xyz[i * 3 + 2], u, v, depth);
    if (depth <= 0.0) continue;
    const int ui = static_cast<int>(std::lround(u));
    const int vi = static_cast<int>(std::lround(v));
    if (ui < 0 || ui >= image.width || vi < 0 || vi >= image.height) continue;
    const std::uint8_t* p = image.px(ui, vi);
    out.rgb[i * 3 + 0] = p[0] / 255.0;
    out.rgb[i * 3 + 1] = p[1] / 255.0;
    out.rgb[i * 3 + 2] = p[2] / 255.0;
    out.color_mask[i] = 1;
    out.cam_u[i] = ui;
    out.cam_v[i] = vi;
  }
  return out;
}

RangeImage build_rv_rgb(const PointCloud& painted, const RVConfig& cfg) {
  if (!painted.has_rgb() || painted.color_mask.size() != painted.size())
    throw ContractError("build_rv_rgb: point cloud has not been painted");
  RangeImage ri = spherical_project(painted, cfg);
  const std::size_t hw = static_cast<std::size_t>(ri.height) * ri.width;
  ri.r.assign(hw, 0.0);
  ri.g.assign(hw, 0.0);
  ri.b.assign(hw, 0.0);
  ri.rgb_mask.assign(hw, 0);
  for (std::size_t at = 0; at < hw; ++at) {
    if (!ri.mask[at]) continue;
    const int idx = ri.index_map[at];
    if (!painted.color_mask[static_cast<std::size_t>(idx)]) continue;
    ri.rgb_mask[at] = 1;
    ri.r[at] = painted.rgb[idx * 3 + 0];
    ri.g[at] = painted.rgb[idx * 3 + 1];
    ri.b[at] = painted.rgb[idx * 3 + 2];
  }
  return ri;
}

std::vector<int> back_project(const std::vector<int>& pixel_labels, const RangeImage& ri,
                              const PointCloud& cloud) {
  const std::size_t hw = static_cast<std::size_t>(ri.height) * ri.width;
  if (pixel_labels.size() != hw)
    throw ContractError("back_project: label grid has " + std::to_string(pixel_labels.size()) +
                        " entries, expected " + std::to_string(hw));
  if (cloud.size() != ri.pixel_u.size())
    throw ContractError("back_project: cloud size does not match the projected cloud");

  std::vector<int> out(cloud.size(), 0);
  for (std::size_t i = 0; i < cloud.size(); ++i) {
    const int u = ri.pixel_u[i];
    const int v = ri.pixel_v[i];
    if (u < 0) continue;  // origin point, never projected
    out[i] = pixel_labels[ri.px(v, u)];
  }
  return out;
}

namespace {

int argmax_label(const double* probs, std::size_t stride, int classes) {
  int best = 0;
  double best_p = probs[0];
  for (int c = 1; c < classes; ++c) {
    const double p = probs[static_cast<std::size_t>(c) * stride];
    if (p > best_p) {
      best_p = p;
      best = c;
    }
  }
  return best;
}

}  // namespace

std::vector<int> knn_post_process(const RangeImage& ri, const PointCloud& cloud,
                                  const Tensor& pixel_probs, const KnnConfig& cfg) {
  if (cfg.window < 1 || cfg.window % 2 == 0)
    throw ConfigError("knn window must be odd and positive, got " + std::to_string(cfg.window));
  if (cfg.k < 1 || cfg.k > cfg.window * cfg.window)
    throw ConfigError("knn k must lie in [1, window^2], got " + std::to_string(cfg.k));
  if (cfg.sigma <= 0.0) throw ConfigError("knn sigma must be positive");
  const auto& shape = pixel_probs.shape();
  if (shape.size() != 3 || shape[1] != ri.height ||
      shape[2] != ri.width)
    throw DimensionError("knn_post_process: probabilities must be [C,H,W] matching the range image");
  if (cloud.size() != ri.pixel_u.size())
    throw ContractError("knn_post_process: cloud size does not match the projected cloud");

  const int classes = static_cast<int>(shape[0]);
  const std::size_t hw = static_cast<std::size_t>(ri.height) * ri.width;
  const double* probs = pixel_probs.data().data();

  // Argmax label for every pixel: voting uses masked ones, the fallback may
  // read an unmasked one.
  std::vector<int> pixel_label(hw, 0);
  for (std::size_t at = 0; at < hw; ++at) pixel_label[at] = argmax_label(probs + at, hw, classes);

  const int half = cfg.window / 2;
  const double inv_two_sigma2 = 1.0 / (2.0 * cfg.sigma * cfg.sigma);

  struct Cand {
    double score;
    int v, u;
  };
  std::vector<Cand> cands;
  cands.reserve(static_cast<std::size_t>(cfg.window) * cfg.window);
  std::vector<int> votes(static_cast<std::size_t>(classes), 0);

  std::vector<int> out(cloud.size(), 0);
  for (std::size_t i = 0; i < cloud.size(); ++i) {
    const int pu = ri.pixel_u[i];
    const int pv = ri.pixel_v[i];
    if (pu < 0) continue;  // origin point
    const double pr = std::sqrt(cloud.xyz[i * 3 + 0] * cloud.xyz[i * 3 + 0] +
                                cloud.xyz[i * 3 + 1] * cloud.xyz[i * 3 + 1] +
                                cloud.xyz[i * 3 + 2] * cloud.xyz[i * 3 + 2]);

    cands.clear();
    for (int dv = -half; dv <= half; ++dv) {
      const int v = pv + dv;
      if (v < 0 || v >= ri.height) continue;
      for (int du = -half; du <= half; ++du) {
        const int u = pu + du;
        if (u < 0 || u >= ri.width) continue;  // no azimuth wraparound
        const std::size_t at = ri.px(v, u);
        if (!ri.mask[at]) continue;
        const double gap = std::abs(ri.range[at] - pr);
        if (gap > cfg.cutoff_m) continue;
        const double score = gap * std::exp((du * du + dv * dv) * inv_two_sigma2);
        cands.push_back({score, v, u});
      }
    }

    if (cands.empty()) {
      out[i] = pixel_label[ri.px(pv, pu)];  // back-projection fallback
      continue;
    }
    const std::size_t keep = std::min<std::size_t>(static_cast<std::size_t>(cfg.k), cands.size());
    std::partial_sort(cands.begin(), cands.begin() + keep, cands.end(),
                      [](const Cand& a, const Cand& b) {
                        if (a.score != b.score) return a.score < b.score;
                        if (a.v != b.v) return a.v < b.v;
                        return a.u < b.u;
                      });
    std::fill(votes.begin(), votes.end(), 0);
    for (std::size_t j = 0; j < keep; ++j) ++votes[pixel_label[ri.px(cands[j].v, cands[j].u)]];
    int best = 0;
    for (int c = 1; c < classes; ++c)
      if (votes[c] > votes[best]) best = c;  // ties keep the smaller id
    out[i] = best;
  }
  return out;
}

Tensor rv_geometry_tensor(const RangeImage& ri) {
  const std::size_t hw = static_cast<std::size_t>(ri.height) * ri.width;
  Tensor t = Tensor::zeros({5, ri.height, ri.width});
  auto& d = t.data();
  std::copy(ri.x.begin(), ri.x.end(), d.begin());
  std::copy(ri.y.begin(), ri.y.end(), d.begin() + hw);
  std::copy(ri.z.begin(), ri.z.end(), d.begin() + 2 * hw);
  std::copy(ri.remission.begin(), ri.remission.end(), d.begin() + 3 * hw);
  std::copy(ri.range.begin(), ri.range.end(), d.begin() + 4 * hw);
  return t;
}

Tensor rv_rgb_tensor(const RangeImage& ri) {
  if (!ri.has_rgb()) throw ContractError("rv_rgb_tensor: range image carries no RGB channels");
  const std::size_t hw = static_cast<std::size_t>(ri.height) * ri.width;
  Tensor t = Tensor::zeros({3, ri.height, ri.width});
  auto& d = t.data();
  std::copy(ri.r.begin(), ri.r.end(), d.begin());
  std::copy(ri.g.begin(), ri.g.end(), d.begin() + hw);
  std::copy(ri.b.begin(), ri.b.end(), d.begin() + 2 * hw);
  return t;
}

// ---- RVI1 container ----------------------------------------------------------

namespace {

void put_u32(std::ofstream& f, std::uint32_t v) {
  f.write(reinterpret_cast<const char*>(&v), 4);
}

std::uint32_t get_u32(std::ifstream& f, const std::string& what) {
  std::uint32_t v = 0;
  if (!f.read(reinterpret_cast<char*>(&v), 4))
    throw FormatError("channel dump truncated while reading " + what);
  return v;
}

}  // namespace

void write_rvi(const std::string& path, const RviChannels& rvi) {
  const std::size_t hw = static_cast<std::size_t>(rvi.height) * rvi.width;
  if (rvi.mask.size() != hw) throw ContractError("write_rvi: mask size does not match dimensions");
  for (const auto& [name, plane] : rvi.channels)
    if (plane.size() != hw)
      throw ContractError("write_rvi: channel '" + name + "' size does not match dimensions");

  std::ofstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot open " + path + " for writing");
  f.write("RVI1", 4);
  put_u32(f, static_cast<std::uint32_t>(rvi.height));
  put_u32(f, static_cast<std::uint32_t>(rvi.width));
  put_u32(f, static_cast<std::uint32_t>(rvi.channels.size()));
  for (const auto& [name, plane] : rvi.channels) {
    put_u32(f, static_cast<std::uint32_t>(name.size()));
    f.write(name.data(), static_cast<std::streamsize>(name.size()));
    (void)plane;
  }
  for (const auto& [name, plane] : rvi.channels) {
    (void)name;
    for (double v : plane) {
      const float fv = static_cast<float>(v);
      f.write(reinterpret_cast<const char*>(&fv), 4);
    }
  }
  std::vector<std::uint8_t> bits((hw + 7) / 8, 0);
  for (std::size_t i = 0; i < hw; ++i)
    if (rvi.mask[i]) bits[i / 8] |= static_cast<std::uint8_t>(1u << (i % 8));
  f.write(reinterpret_cast<const char*>(bits.data()), static_cast<std::streamsize>(bits.size()));
  if (!f) throw IoError("failed while writing " + path);
}

RviChannels read_rvi(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot open " + path);
  char magic[4];
  if (!f.read(magic, 4) || std::memcmp(magic, "RVI1", 4) != 0)
    throw FormatError(path + ": bad channel dump magic");

  RviChannels rvi;
  rvi.height = static_cast<int>(get_u32(f, "height"));
  rvi.width = static_cast<int>(get_u32(f, "width"));
  if (rvi.height < 1 || rvi.width < 1) throw FormatError(path + ": non-positive dimensions");
  const std::uint32_t nch = get_u32(f, "channel count");
  const std::size_t hw = static_cast<std::size_t>(rvi.height) * rvi.width;

  std::vector<std::string> names(nch);
  for (auto& name : names) {
    const std::uint32_t len = get_u32(f, "channel name length");
    name.resize(len);
    if (!f.read(name.data(), len)) throw FormatError(path + ": truncated channel name");
  }
  rvi.channels.reserve(nch);
  std::vector<float> buf(hw);
  for (const auto& name : names) {
    if (!f.read(reinterpret_cast<char*>(buf.data()), static_cast<std::streamsize>(hw * 4)))
      throw FormatError(path + ": truncated payload for channel '" + name + "'");
    std::vector<double> plane(hw);
    for (std::size_t i = 0; i < hw; ++i) plane[i] = buf[i];
    rvi.channels.emplace_back(name, std::move(plane));
  }
  std::vector<std::uint8_t> bits((hw + 7) / 8);
  if (!f.read(reinterpret_cast<char*>(bits.data()), static_cast<std::streamsize>(bits.size())))
    throw FormatError(path + ": truncated mask bitset");
  rvi.mask.assign(hw, 0);
  for (std::size_t i = 0; i < hw; ++i)
    rvi.mask[i] = (bits[i / 8] >> (i % 8)) & 1u;
  return rvi;
}

RviChannels rvi_from_range_image(const RangeImage& ri) {
  RviChannels rvi;
  rvi.height = ri.height;
  rvi.width = ri.width;
  rvi.mask = ri.mask;
  rvi.channels.emplace_back("x", ri.x);
  rvi.channels.emplace_back("y", ri.y);
  rvi.channels.emplace_back("z", ri.z);
  rvi.channels.emplace_back("remission", ri.remission);
  rvi.channels.emplace_back("range", ri.range);
  if (ri.has_rgb()) {
    rvi.channels.emplace_back("r", ri.r);
    rvi.channels.emplace_back("g", ri.g);
    rvi.channels.emplace_back("b", ri.b);
  }
  return rvi;
}

void render_rv_labels(const std::string& path, const std::vector<int>& labels,
                      const std::vector<std::uint8_t>& mask, int height, int width,
                      const std::vector<std::array<std::uint8_t, 3>>& palette) {
  const std::size_t hw = static_cast<std::size_t>(height) * width;
  if (labels.size() != hw || mask.size() != hw)
    throw ContractError("render_rv_labels: label/mask size does not match dimensions");
  Image img;
  img.width = width;
  img.height = height;
  img.rgb.assign(hw * 3, 0);
  for (std::size_t i = 0; i < hw; ++i) {
    if (!mask[i]) continue;
    const int lbl = labels[i];
    if (lbl < 0 || static_cast<std::size_t>(lbl) >= palette.size())
      throw ConfigError("render_rv_labels: class id " + std::to_string(lbl) +
                        " has no palette entry");
    img.rgb[i * 3 + 0] = palette[lbl][0];
    img.rgb[i * 3 + 1] = palette[lbl][1];
    img.rgb[i * 3 + 2] = palette[lbl][2];
  }
  write_ppm(path, img);
}

void render_rv_channel(const std::string& path, const std::vector<double>& plane,
                       const std::vector<std::uint8_t>& mask, int height, int width) {
  const std::size_t hw = static_cast<std::size_t>(height) * width;
  if (plane.size() != hw || mask.size() != hw)
    throw ContractError("render_rv_channel: plane/mask size does not match dimensions");
  double lo = std::numeric_limits<double>::infinity();
  double hi = -std::numeric_limits<double>::infinity();
  for (std::size_t i = 0; i < hw; ++i) {
    if (!mask[i]) continue;
    lo = std::min(lo, plane[i]);
    hi = std::max(hi, plane[i]);
  }
  const double scale = (hi > lo) ? 255.0 / (hi - lo) : 0.0;
  Image img;
  img.width = width;
  img.height = height;
  img.rgb.assign(hw * 3, 0);
  for (std::size_t i = 0; i < hw; ++i) {
    if (!mask[i]) continue;
    const auto g = static_cast<std::uint8_t>(
        std::clamp(std::lround((plane[i] - lo) * scale), 0L, 255L));
    img.rgb[i * 3 + 0] = g;
    img.rgb[i * 3 + 1] = g;
    img.rgb[i * 3 + 2] = g;
  }
  write_ppm(path, img);
}

}  // namespace rangefuse
