#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <cstdio>
#include <fstream>
#include <set>

#include "rangefuse/dataset.hpp"

using namespace rangefuse;

namespace {

void write_bytes(const std::string& path, const void* data, std::size_t n) {
  std::ofstream f(path, std::ios::binary);
  f.write(static_cast<const char*>(data), static_cast<std::streamsize>(n));
}

LabelMap synth_map() { return load_label_map(std::string(RF_DATA_DIR) + "/synthetic8.labelmap"); }

}  // namespace

TEST_CASE("read_scan decodes records and validates size") {
  const char* path = "scan_test.bin";
  float rec[8] = {1.5f, -2.0f, 0.25f, 0.5f, 10.0f, 20.0f, -30.0f, 2.0f};
  write_bytes(path, rec, sizeof rec);
  PointCloud c = read_scan(path);
  REQUIRE(c.size() == 2);
  CHECK(c.xyz[0] == 1.5);
  CHECK(c.xyz[4] == 20.0);
  CHECK(c.remission[0] == 0.5);
  CHECK(c.remission[1] == 1.0);  // clamped to [0,1]

  write_bytes(path, rec, 0);
  CHECK(read_scan(path).size() == 0);

  write_bytes(path, rec, 17);
  CHECK_THROWS_AS(read_scan(path), FormatError);
  CHECK_THROWS_AS(read_scan("no_such_scan.bin"), IoError);
  std::remove(path);
}

TEST_CASE("scan write/read round trip at f32 precision") {
  Rng rng(41);
  PointCloud c;
  for (int i = 0; i < 137; ++i) {
    for (int d = 0; d < 3; ++d) c.xyz.push_back(rng.uniform(-50, 50));
    c.remission.push_back(rng.uniform());
  }
  const char* path = "scan_rt.bin";
  write_scan(path, c);
  PointCloud back = read_scan(path);
  REQUIRE(back.size() == c.size());
  for (std::size_t i = 0; i < c.xyz.size(); ++i)
    CHECK(back.xyz[i] == static_cast<double>(static_cast<float>(c.xyz[i])));
  std::remove(path);
}

TEST_CASE("read_labels extracts low 16 bits and remaps") {
  const char* path = "labels_test.label";
  LabelMap map = synth_map();

  std::uint32_t raw[3] = {0x00010005u, 0x00000000u, 0xABCD0003u};
  write_bytes(path, raw, sizeof raw);
  auto labels = read_labels(path, 3, map);
  CHECK(labels == std::vector<int>{5, 0, 3});

  CHECK_THROWS_AS(read_labels(path, 4, map), ContractError);  // count mismatch

  std::uint32_t bad[1] = {0x00000063u};  // id 99 not in the synthetic map
  write_bytes(path, bad, sizeof bad);
  try {
    read_labels(path, 1, map);
    FAIL("expected mapping error");
  } catch (const FormatError& e) {
    CHECK(std::string(e.what()).find("99") != std::string::npos);
  }
  std::remove(path);
}

TEST_CASE("label write/read round trip") {
  LabelMap map = synth_map();
  std::vector<int> labels = {1, 5, 2, 0, 7, 3};
  const char* path = "labels_rt.label";
  write_labels(path, labels);
  CHECK(read_labels(path, labels.size(), map) == labels);
  std::remove(path);
}

TEST_CASE("label map presets load and validate") {
  LabelMap synth = synth_map();
  CHECK(synth.num_classes == 8);
  CHECK(synth.ignore_id == 0);
  CHECK(synth.raw_to_train.at(5) == 5);
  CHECK(synth.class_names[5] == "vegetation");
  CHECK(synth.palette[1][0] == 110);

  LabelMap sk = load_label_map(std::string(RF_DATA_DIR) + "/semantickitti19.labelmap");
  CHECK(sk.num_classes == 20);
  CHECK(sk.raw_to_train.at(10) == 1);
  CHECK(sk.raw_to_train.at(252) == 1);  // moving car folds into car
  CHECK(sk.raw_to_train.at(60) == 9);   // lane marking folds into road

  const char* path = "bad.labelmap";
  std::ofstream(path) << "num_classes = 4\nmap.1 = 9\n";
  CHECK_THROWS_AS(load_label_map(path), FormatError);
  std::ofstream(path) << "nonsense line\n";
  CHECK_THROWS_AS(load_label_map(path), FormatError);
  std::remove(path);
}

TEST_CASE("calib parsing: canonical camera and hand-checked KITTI snippet") {
  const char* path = "calib_test.txt";
  std::ofstream(path) << "P2: 1 0 0 0 0 1 0 0 0 0 1 0\n"
                      << "Tr: 1 0 0 0 0 1 0 0 0 0 1 0\n";
  CameraModel cam = read_calib(path, 100, 50);
  CHECK(cam.intrinsics[0] == 1.0);
  CHECK(cam.intrinsics[2] == 0.0);
  double u, v, d;
  cam.project(0.5, 0.25, 2.0, u, v, d);
  CHECK(d == 2.0);
  CHECK(u == doctest::Approx(0.25));
  CHECK(v == doctest::Approx(0.125));

  // P with a baseline column: t' = K^-1 p4 must fold into the extrinsics
  std::ofstream(path) << "P2: 100 0 60 -38 0 100 30 0 0 0 1 0\n"
                      << "Tr: 0 -1 0 0 0 0 -1 0 1 0 0 -0.27\n";
  CameraModel k = read_calib(path, 120, 60);
  // hand computation: point (5, 0, 0) lidar -> cam (0, 0, 4.73), plus t'=(-0.38, 0, 0)
  k.project(5, 0, 0, u, v, d);
  double want_u = (100 * -0.38 + 60 * 4.73) / 4.73;
  CHECK(d == doctest::Approx(4.73));
  CHECK(u == doctest::Approx(want_u));
  CHECK(v == doctest::Approx(30.0));

  std::ofstream(path) << "P2: 1 0 0 0 0 1 0 oops 0 0 1 0\nTr: 1 0 0 0 0 1 0 0 0 0 1 0\n";
  try {
    read_calib(path, 10, 10);
    FAIL("expected format error");
  } catch (const FormatError& e) {
    CHECK(std::string(e.what()).find("P2") != std::string::npos);
  }

  std::ofstream(path) << "Tr: 1 0 0 0 0 1 0 0 0 0 1 0\n";
  CHECK_THROWS_AS(read_calib(path, 10, 10), FormatError);  // missing projection
  std::remove(path);
}

TEST_CASE("ppm round trip and header handling") {
  Image img;
  img.width = 3;
  img.height = 2;
  img.rgb = {10, 20, 30, 40, 50, 60, 70, 80, 90, 100, 110, 120, 130, 140, 150, 160, 170, 180};
  const char* path = "img_test.ppm";
  write_ppm(path, img);
  Image back = read_ppm(path);
  CHECK(back.width == 3);
  CHECK(back.height == 2);
  CHECK(back.rgb == img.rgb);

  // comments inside the header are legal
  std::ofstream f(path, std::ios::binary);
  f << "P6\n# a comment\n2 1\n# another\n255\n";
  unsigned char px[6] = {1, 2, 3, 4, 5, 6};
  f.write(reinterpret_cast<char*>(px), 6);
  f.close();
  Image c = read_ppm(path);
  CHECK(c.width == 2);
  CHECK(c.rgb[3] == 4);

  std::ofstream(path, std::ios::binary) << "P5\n1 1\n255\nx";
  CHECK_THROWS_AS(read_ppm(path), FormatError);
  std::remove(path);
}

TEST_CASE("synthetic scenes are deterministic and labeled") {
  SceneSpec spec;
  spec.seed = 77;
  spec.beams = 16;
  spec.azimuth_steps = 128;

  Scene a = gen_synthetic_scene(spec);
  Scene b = gen_synthetic_scene(spec);
  CHECK(a.cloud.xyz == b.cloud.xyz);
  CHECK(a.cloud.remission == b.cloud.remission);
  CHECK(a.cloud.label == b.cloud.label);
  CHECK(a.image.rgb == b.image.rgb);

  REQUIRE(a.cloud.size() > 0);
  CHECK(a.cloud.size() <= static_cast<std::size_t>(spec.beams * spec.azimuth_steps));
  CHECK(a.cloud.label.size() == a.cloud.size());

  std::set<int> classes(a.cloud.label.begin(), a.cloud.label.end());
  CHECK(classes.size() >= 3);  // default spec mixes several primitive kinds
  for (int c : classes) {
    CHECK(c >= 1);
    CHECK(c < kSynthClassCount);
  }
  for (double r : a.cloud.remission) {
    CHECK(r >= 0.0);
    CHECK(r <= 1.0);
  }

  Scene c = gen_synthetic_scene({.seed = 78, .beams = 16, .azimuth_steps = 128});
  CHECK(c.cloud.xyz != a.cloud.xyz);  // different seed, different scene
}

TEST_CASE("ground-only spec yields only ground labels") {
  SceneSpec spec;
  spec.seed = 5;
  spec.walls = spec.boxes = spec.poles = spec.vegetation = 0;
  spec.beams = 8;
  spec.azimuth_steps = 64;
  spec.noise_sigma = 0.0;
  Scene s = gen_synthetic_scene(spec);
  REQUIRE(s.cloud.size() > 0);
  for (int l : s.cloud.label) CHECK(l == 1);
  // downward beams hit the plane; upward beams miss -> fewer points than rays
  CHECK(s.cloud.size() < static_cast<std::size_t>(spec.beams * spec.azimuth_steps));
}

TEST_CASE("degenerate scene specs are rejected") {
  SceneSpec spec;
  spec.beams = 0;
  CHECK_THROWS_AS(gen_synthetic_scene(spec), ConfigError);
  spec.beams = 4;
  spec.fov_up_deg = -30;
  CHECK_THROWS_AS(gen_synthetic_scene(spec), ConfigError);
}

TEST_CASE("camera model projects scene points consistently with the render") {
  SceneSpec spec;
  spec.seed = 31;
  spec.beams = 16;
  spec.azimuth_steps = 256;
  spec.noise_sigma = 0.0;
  Scene s = gen_synthetic_scene(spec);

  // points in front of the camera that land in-bounds should mostly agree in
  // class color with the rendered pixel (modulo shading and silhouettes)
  int checked = 0, agree = 0;
  const auto& pal = synth_palette();
  for (std::size_t i = 0; i < s.cloud.size(); ++i) {
    double u, v, d;
    s.cam.project(s.cloud.xyz[i * 3], s.cloud.xyz[i * 3 + 1], s.cloud.xyz[i * 3 + 2], u, v, d);
    if (d <= 0) continue;
    int ui = static_cast<int>(std::lround(u)), vi = static_cast<int>(std::lround(v));
    if (ui < 0 || ui >= s.image.width || vi < 0 || vi >= s.image.height) continue;
    ++checked;
    const std::uint8_t* px = s.image.px(ui, vi);
    const auto& base = pal[static_cast<std::size_t>(s.cloud.label[i])];
    // same hue family: rendered pixel is the palette color under a 0.6..1.0 shade
    bool match = true;
    for (int c = 0; c < 3; ++c) {
      double lo = base[static_cast<std::size_t>(c)] * 0.55 - 2;
      double hi = base[static_cast<std::size_t>(c)] * 1.0 + 2;
      if (px[c] < lo || px[c] > hi) match = false;
    }
    if (match) ++agree;
  }
  REQUIRE(checked > 50);
  CHECK(agree > checked * 0.85);  // silhouette pixels may disagree
}
