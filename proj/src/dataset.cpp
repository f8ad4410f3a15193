#include "rangefuse/dataset.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <sstream>

namespace rangefuse {

static_assert(std::endian::native == std::endian::little,
              "binary readers assume a little-endian host");

// ---- CameraModel -------------------------------------------------------------

std::array<double, 3> CameraModel::to_camera(double x, double y, double z) const {
  const auto& T = extrinsics;
  return {T[0] * x + T[1] * y + T[2] * z + T[3],
          T[4] * x + T[5] * y + T[6] * z + T[7],
          T[8] * x + T[9] * y + T[10] * z + T[11]};
}

void CameraModel::project(double x, double y, double z, double& u, double& v,
                          double& depth) const {
  auto c = to_camera(x, y, z);
  depth = c[2];
  const auto& K = intrinsics;
  if (depth <= 0.0) {
    u = v = -1.0;
    return;
  }
  u = (K[0] * c[0] + K[1] * c[1] + K[2] * c[2]) / depth;
  v = (K[3] * c[0] + K[4] * c[1] + K[5] * c[2]) / depth;
}

// ---- scan / label files ----------------------------------------------------------

PointCloud read_scan(const std::string& path) {
  std::ifstream f(path, std::ios::binary | std::ios::ate);
  if (!f) throw IoError("cannot open scan: " + path);
  std::streamsize size = f.tellg();
  if (size % 16 != 0)
    throw FormatError("scan size " + std::to_string(size) + " not divisible by 16: " + path);
  f.seekg(0);
  std::size_t n = static_cast<std::size_t>(size) / 16;
  std::vector<float> raw(n * 4);
  f.read(reinterpret_cast<char*>(raw.data()), size);
  if (f.gcount() != size) throw IoError("short read on scan: " + path);

  PointCloud cloud;
  cloud.xyz.resize(n * 3);
  cloud.remission.resize(n);
  for (std::size_t i = 0; i < n; ++i) {
    for (int d = 0; d < 3; ++d) {
      double v = raw[i * 4 + static_cast<std::size_t>(d)];
      if (!std::isfinite(v)) throw FormatError("non-finite coordinate in scan: " + path);
      cloud.xyz[i * 3 + static_cast<std::size_t>(d)] = v;
    }
    cloud.remission[i] = std::clamp(static_cast<double>(raw[i * 4 + 3]), 0.0, 1.0);
  }
  return cloud;
}

void write_scan(const std::string& path, const PointCloud& cloud) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot open scan for writing: " + path);
  std::size_t n = cloud.size();
  std::vector<float> raw(n * 4);
  for (std::size_t i = 0; i < n; ++i) {
    for (int d = 0; d < 3; ++d)
      raw[i * 4 + static_cast<std::size_t>(d)] =
          static_cast<float>(cloud.xyz[i * 3 + static_cast<std::size_t>(d)]);
    raw[i * 4 + 3] = static_cast<float>(cloud.remission[i]);
  }
  f.write(reinterpret_cast<const char*>(raw.data()),
          static_cast<std::streamsize>(raw.size() * sizeof(float)));
  if (!f) throw IoError("scan write failed: " + path);
}

std::vector<int> read_labels(const std::string& path, std::size_t n, const LabelMap& map) {
  std::ifstream f(path, std::ios::binary | std::ios::ate);
  if (!f) throw IoError("cannot open labels: " + path);
  std::streamsize size = f.tellg();
  if (static_cast<std::size_t>(size) != 4 * n)
    throw ContractError("label file holds " + std::to_string(size / 4) + " entries but scan has " +
                        std::to_string(n) + " points: " + path);
  f.seekg(0);
  std::vector<std::uint32_t> raw(n);
  f.read(reinterpret_cast<char*>(raw.data()), size);
  if (f.gcount() != size) throw IoError("short read on labels: " + path);

  std::vector<int> out(n);
  for (std::size_t i = 0; i < n; ++i) {
    int semantic = static_cast<int>(raw[i] & 0xFFFFu);  // high 16 bits = instance, dropped
    auto it = map.raw_to_train.find(semantic);
    if (it == map.raw_to_train.end())
      throw FormatError("label id " + std::to_string(semantic) + " has no entry in label map '" +
                        map.name + "'");
    out[i] = it->second;
  }
  return out;
}

void write_labels(const std::string& path, const std::vector<int>& labels) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot open labels for writing: " + path);
  std::vector<std::uint32_t> raw(labels.size());
  for (std::size_t i = 0; i < labels.size(); ++i) raw[i] = static_cast<std::uint32_t>(labels[i]);
  f.write(reinterpret_cast<const char*>(raw.data()),
          static_cast<std::streamsize>(raw.size() * 4));
  if (!f) throw IoError("label write failed: " + path);
}

// ---- calibration -----------------------------------------------------------------

namespace {

std::vector<double> parse_floats(const std::string& line, const std::string& key, std::size_t want) {
  std::istringstream ss(line);
  std::vector<double> vals;
  std::string tok;
  while (ss >> tok) {
    try {
      std::size_t used = 0;
      double v = std::stod(tok, &used);
      if (used != tok.size()) throw std::invalid_argument(tok);
      vals.push_back(v);
    } catch (const std::exception&) {
      throw FormatError("malformed number '" + tok + "' in calib line " + key);
    }
  }
  if (vals.size() != want)
    throw FormatError("calib line " + key + " has " + std::to_string(vals.size()) +
                      " values, expected " + std::to_string(want));
  return vals;
}

}  // namespace

CameraModel read_calib(const std::string& path, int image_width, int image_height) {
  std::ifstream f(path);
  if (!f) throw IoError("cannot open calib: " + path);
  std::vector<double> P, Tr;
  std::string line;
  while (std::getline(f, line)) {
    auto colon = line.find(':');
    if (colon == std::string::npos) continue;
    std::string key = line.substr(0, colon);
    std::string rest = line.substr(colon + 1);
    if (key == "P2" || (key == "P0" && P.empty()))
      P = parse_floats(rest, key, 12);
    else if (key == "Tr")
      Tr = parse_floats(rest, key, 12);
  }
  if (P.empty()) throw FormatError("calib missing projection line (P2 or P0): " + path);
  if (Tr.empty()) throw FormatError("calib missing Tr line: " + path);

  CameraModel cam;
  cam.width = image_width;
  cam.height = image_height;
  // P = [K | K t']; fold the extra translation t' = K^-1 p4 into the extrinsics.
  double fx = P[0], s = P[1], cx = P[2];
  double fy = P[5], cy = P[6];
  if (fx == 0.0 || fy == 0.0) throw FormatError("calib intrinsics are singular: " + path);
  cam.intrinsics = {fx, s, cx, 0, fy, cy, 0, 0, 1};
  double p4[3] = {P[3], P[7], P[11]};
  // K is upper triangular: back-substitute K t' = p4
  double tz = p4[2];
  double ty = (p4[1] - cy * tz) / fy;
  double tx = (p4[0] - s * ty - cx * tz) / fx;

  // orthonormality check on the rotation part of Tr
  for (int i = 0; i < 3; ++i)
    for (int j = 0; j < 3; ++j) {
      double dot = 0;
      for (int k = 0; k < 3; ++k) dot += Tr[static_cast<std::size_t>(i * 4 + k)] *
                                         Tr[static_cast<std::size_t>(j * 4 + k)];
      double want = i == j ? 1.0 : 0.0;
      if (std::fabs(dot - want) > 1e-6)
        throw FormatError("Tr rotation is not orthonormal: " + path);
    }

  cam.extrinsics = {Tr[0], Tr[1], Tr[2],  Tr[3] + tx,
                    Tr[4], Tr[5], Tr[6],  Tr[7] + ty,
                    Tr[8], Tr[9], Tr[10], Tr[11] + tz,
                    0,     0,     0,      1};
  return cam;
}

// ---- label maps --------------------------------------------------------------------

namespace {

std::string trim(const std::string& s) {
  std::size_t a = s.find_first_not_of(" \t\r\n");
  if (a == std::string::npos) return "";
  std::size_t b = s.find_last_not_of(" \t\r\n");
  return s.substr(a, b - a + 1);
}

}  // namespace

LabelMap load_label_map(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw IoError("cannot open label map: " + path);
  LabelMap map;
  std::string line;
  int lineno = 0;
  while (std::getline(f, line)) {
    ++lineno;
    std::string t = trim(line);
    if (t.empty() || t[0] == '#') continue;
    auto eq = t.find('=');
    if (eq == std::string::npos)
      throw FormatError("label map line " + std::to_string(lineno) + " lacks '=': " + path);
    std::string key = trim(t.substr(0, eq));
    std::string val = trim(t.substr(eq + 1));
    try {
      if (key == "name") {
        map.name = val;
      } else if (key == "num_classes") {
        map.num_classes = std::stoi(val);
      } else if (key == "ignore") {
        map.ignore_id = std::stoi(val);
      } else if (key.rfind("map.", 0) == 0) {
        map.raw_to_train[std::stoi(key.substr(4))] = std::stoi(val);
      } else if (key.rfind("color.", 0) == 0) {
        int id = std::stoi(key.substr(6));
        std::istringstream ss(val);
        int r, g, b;
        if (!(ss >> r >> g >> b)) throw std::invalid_argument(val);
        if (static_cast<int>(map.palette.size()) <= id) map.palette.resize(id + 1, {0, 0, 0});
        map.palette[static_cast<std::size_t>(id)] = {static_cast<std::uint8_t>(r),
                                                     static_cast<std::uint8_t>(g),
                                                     static_cast<std::uint8_t>(b)};
      } else if (key.rfind("class.", 0) == 0) {
        int id = std::stoi(key.substr(6));
        if (static_cast<int>(map.class_names.size()) <= id) map.class_names.resize(id + 1);
        map.class_names[static_cast<std::size_t>(id)] = val;
      } else {
        throw FormatError("label map line " + std::to_string(lineno) + " has unknown key '" +
                          key + "': " + path);
      }
    } catch (const FormatError&) {
      throw;
    } catch (const std::exception&) {
      throw FormatError("label map line " + std::to_string(lineno) + " is malformed: " + path);
    }
  }
  if (map.num_classes < 2) throw FormatError("label map needs num_classes >= 2: " + path);
  for (const auto& [raw, train] : map.raw_to_train)
    if (train < 0 || train >= map.num_classes)
      throw FormatError("label map entry " + std::to_string(raw) + " -> " +
                        std::to_string(train) + " exceeds num_classes: " + path);
  if (static_cast<int>(map.palette.size()) < map.num_classes)
    map.palette.resize(static_cast<std::size_t>(map.num_classes), {0, 0, 0});
  return map;
}

// ---- PPM ------------------------------------------------------------------------------

namespace {

int ppm_token(std::istream& f) {
  // skip whitespace and '#' comments, then read one nonnegative integer
  int c = f.get();
  while (c != EOF && (std::isspace(c) || c == '#')) {
    if (c == '#')
      while (c != EOF && c != '\n') c = f.get();
    c = f.get();
  }
  if (c == EOF || !std::isdigit(c)) return -1;
  int v = 0;
  while (c != EOF && std::isdigit(c)) {
    v = v * 10 + (c - '0');
    c = f.get();
  }
  return v;
}

}  // namespace

Image read_ppm(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot open image: " + path);
  char m0 = static_cast<char>(f.get()), m1 = static_cast<char>(f.get());
  if (m0 != 'P' || m1 != '6') throw FormatError("not a P6 PPM: " + path);
  int w = ppm_token(f), h = ppm_token(f), maxval = ppm_token(f);
  if (w <= 0 || h <= 0) throw FormatError("bad PPM dimensions: " + path);
  if (maxval != 255) throw FormatError("PPM maxval must be 255: " + path);
  Image img;
  img.width = w;
  img.height = h;
  img.rgb.resize(static_cast<std::size_t>(w) * h * 3);
  f.read(reinterpret_cast<char*>(img.rgb.data()), static_cast<std::streamsize>(img.rgb.size()));
  if (f.gcount() != static_cast<std::streamsize>(img.rgb.size()))
    throw FormatError("truncated PPM payload: " + path);
  return img;
}

void write_ppm(const std::string& path, const Image& img) {
  if (img.rgb.size() != static_cast<std::size_t>(img.width) * img.height * 3)
    throw ContractError("image buffer does not match its dimensions");
  std::ofstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot open image for writing: " + path);
  f << "P6\n" << img.width << " " << img.height << "\n255\n";
  f.write(reinterpret_cast<const char*>(img.rgb.data()),
          static_cast<std::streamsize>(img.rgb.size()));
  if (!f) throw IoError("image write failed: " + path);
}

// ---- synthetic scenes ---------------------------------------------------------------

const std::vector<std::array<std::uint8_t, 3>>& synth_palette() {
  static const std::vector<std::array<std::uint8_t, 3>> p = {
      {0, 0, 0},        // 0 void
      {110, 85, 60},    // 1 ground
      {185, 180, 170},  // 2 wall
      {205, 65, 45},    // 3 box
      {85, 90, 205},    // 4 pole
      {60, 165, 60},    // 5 vegetation
  };
  return p;
}

namespace {

constexpr double kSensorHeight = 1.8;  // ground plane sits at z = -kSensorHeight
constexpr double kMinRange = 0.5;
constexpr double kMaxRange = 80.0;

struct Plane {
  double z;
  int cls;
  double albedo;
};
struct BoxPrim {
  double lo[3], hi[3];
  int cls;
  double albedo;
};
struct CylPrim {
  double cx, cy, r, z0, z1;
  int cls;
  double albedo;
};
struct SpherePrim {
  double cx, cy, cz, r;
  int cls;
  double albedo;
};

struct World {
  std::vector<Plane> planes;
  std::vector<BoxPrim> boxes;
  std::vector<CylPrim> cyls;
  std::vector<SpherePrim> spheres;
};

struct Hit {
  double t = -1.0;
  int cls = 0;
  double albedo = 0.0;
  bool valid() const { return t > 0.0; }
};

void hit_plane(const Plane& p, const double* o, const double* d, Hit& best) {
  if (std::fabs(d[2]) < 1e-12) return;
  double t = (p.z - o[2]) / d[2];
  if (t < kMinRange || t > kMaxRange) return;
  if (!best.valid() || t < best.t) best = {t, p.cls, p.albedo};
}

void hit_box(const BoxPrim& b, const double* o, const double* d, Hit& best) {
  double t0 = kMinRange, t1 = kMaxRange;
  for (int a = 0; a < 3; ++a) {
    if (std::fabs(d[a]) < 1e-12) {
      if (o[a] < b.lo[a] || o[a] > b.hi[a]) return;
      continue;
    }
    double inv = 1.0 / d[a];
    double ta = (b.lo[a] - o[a]) * inv;
    double tb = (b.hi[a] - o[a]) * inv;
    if (ta > tb) std::swap(ta, tb);
    t0 = std::max(t0, ta);
    t1 = std::min(t1, tb);
    if (t0 > t1) return;
  }
  if (!best.valid() || t0 < best.t) best = {t0, b.cls, b.albedo};
}

void hit_cyl(const CylPrim& c, const double* o, const double* d, Hit& best) {
  double ox = o[0] - c.cx, oy = o[1] - c.cy;
  double a = d[0] * d[0] + d[1] * d[1];
  if (a < 1e-14) return;
  double b = 2.0 * (ox * d[0] + oy * d[1]);
  double q = ox * ox + oy * oy - c.r * c.r;
  double disc = b * b - 4 * a * q;
  if (disc < 0) return;
  double sq = std::sqrt(disc);
  for (double t : {(-b - sq) / (2 * a), (-b + sq) / (2 * a)}) {
    if (t < kMinRange || t > kMaxRange) continue;
    double z = o[2] + t * d[2];
    if (z < c.z0 || z > c.z1) continue;
    if (!best.valid() || t < best.t) best = {t, c.cls, c.albedo};
    return;  // roots are ordered; first valid is nearest
  }
}

void hit_sphere(const SpherePrim& s, const double* o, const double* d, Hit& best) {
  double ox = o[0] - s.cx, oy = o[1] - s.cy, oz = o[2] - s.cz;
  double b = 2.0 * (ox * d[0] + oy * d[1] + oz * d[2]);
  double q = ox * ox + oy * oy + oz * oz - s.r * s.r;
  double disc = b * b - 4 * q;  // |d| == 1
  if (disc < 0) return;
  double sq = std::sqrt(disc);
  for (double t : {(-b - sq) / 2, (-b + sq) / 2}) {
    if (t < kMinRange || t > kMaxRange) continue;
    if (!best.valid() || t < best.t) best = {t, s.cls, s.albedo};
    return;
  }
}

Hit cast_ray(const World& w, const double* o, const double* d) {
  Hit best;
  for (const auto& p : w.planes) hit_plane(p, o, d, best);
  for (const auto& b : w.boxes) hit_box(b, o, d, best);
  for (const auto& c : w.cyls) hit_cyl(c, o, d, best);
  for (const auto& s : w.spheres) hit_sphere(s, o, d, best);
  return best;
}

World build_world(const SceneSpec& spec, Rng& rng) {
  World w;
  for (int i = 0; i < spec.ground; ++i)
    w.planes.push_back({-kSensorHeight, 1, 0.30});

  for (int i = 0; i < spec.walls; ++i) {
    double az = rng.uniform(-M_PI, M_PI);
    double dist = rng.uniform(10.0, 28.0);
    double cx = dist * std::cos(az), cy = dist * std::sin(az);
    double len = rng.uniform(8.0, 20.0), thick = 0.3;
    double h = rng.uniform(2.5, 4.0);
    bool along_x = rng.uniform() < 0.5;
    double ex = along_x ? len / 2 : thick / 2;
    double ey = along_x ? thick / 2 : len / 2;
    w.boxes.push_back({{cx - ex, cy - ey, -kSensorHeight},
                       {cx + ex, cy + ey, -kSensorHeight + h},
                       2,
                       0.60});
  }

  for (int i = 0; i < spec.boxes; ++i) {
    double az = rng.uniform(-M_PI, M_PI);
    double dist = rng.uniform(3.0, 20.0);
    double cx = dist * std::cos(az), cy = dist * std::sin(az);
    double sx = rng.uniform(0.6, 2.5), sy = rng.uniform(0.6, 2.5), sz = rng.uniform(0.6, 2.2);
    w.boxes.push_back({{cx - sx / 2, cy - sy / 2, -kSensorHeight},
                       {cx + sx / 2, cy + sy / 2, -kSensorHeight + sz},
                       3,
                       0.80});
  }

  for (int i = 0; i < spec.poles; ++i) {
    double az = rng.uniform(-M_PI, M_PI);
    double dist = rng.uniform(2.5, 18.0);
    double r = rng.uniform(0.06, 0.2);
    double h = rng.uniform(2.0, 6.0);
    w.cyls.push_back(
        {dist * std::cos(az), dist * std::sin(az), r, -kSensorHeight, -kSensorHeight + h, 4, 0.50});
  }

  for (int i = 0; i < spec.vegetation; ++i) {
    double az = rng.uniform(-M_PI, M_PI);
    double dist = rng.uniform(4.0, 22.0);
    double r = rng.uniform(0.6, 2.0);
    double cz = -kSensorHeight + r * rng.uniform(0.8, 1.4);
    w.spheres.push_back({dist * std::cos(az), dist * std::sin(az), cz, r, 5, 0.40});
  }
  return w;
}

double remission_of(const Hit& h) {
  double falloff = 1.0 / (1.0 + (h.t / 25.0) * (h.t / 25.0));
  return std::clamp(h.albedo * falloff, 0.0, 1.0);
}

CameraModel make_camera(const SceneSpec& spec) {
  CameraModel cam;
  cam.width = spec.cam_width;
  cam.height = spec.cam_height;
  double f = spec.cam_focal;
  cam.intrinsics = {f, 0, (spec.cam_width - 1) / 2.0, 0, f, (spec.cam_height - 1) / 2.0, 0, 0, 1};
  // camera at (0.2, 0, 0.1) in the LiDAR frame, looking along +x
  // camera axes: x right = -y_l, y down = -z_l, z forward = +x_l
  const double C[3] = {0.2, 0.0, 0.1};
  const double R[9] = {0, -1, 0, 0, 0, -1, 1, 0, 0};
  double t[3];
  for (int i = 0; i < 3; ++i)
    t[i] = -(R[i * 3 + 0] * C[0] + R[i * 3 + 1] * C[1] + R[i * 3 + 2] * C[2]);
  cam.extrinsics = {R[0], R[1], R[2], t[0], R[3], R[4], R[5], t[1],
                    R[6], R[7], R[8], t[2], 0,    0,    0,    1};
  return cam;
}

}  // namespace

Scene gen_synthetic_scene(const SceneSpec& spec) {
  if (spec.beams < 2) throw ConfigError("scene spec needs at least 2 beams");
  if (spec.azimuth_steps < 1) throw ConfigError("scene spec needs at least 1 azimuth step");
  if (spec.fov_up_deg <= spec.fov_down_deg) throw ConfigError("scene spec fov_up must exceed fov_down");
  const auto& palette = spec.palette.empty() ? synth_palette() : spec.palette;

  Rng rng(spec.seed);
  Rng place_rng = rng.fork(0x706c6163656d656eULL);
  Rng noise_rng = rng.fork(0x6e6f697365000000ULL);
  World world = build_world(spec, place_rng);

  Scene scene;
  scene.cam = make_camera(spec);

  // LiDAR sweep: beams at elevation bin centers, azimuth at column centers,
  // so a matching RV grid maps each return to its own pixel.
  double fu = spec.fov_up_deg * M_PI / 180.0;
  double fd = spec.fov_down_deg * M_PI / 180.0;
  const double origin[3] = {0, 0, 0};
  PointCloud& cloud = scene.cloud;
  for (int b = 0; b < spec.beams; ++b) {
    double elev = fd + (fu - fd) * (1.0 - (b + 0.5) / spec.beams);
    double ce = std::cos(elev), se = std::sin(elev);
    for (int a = 0; a < spec.azimuth_steps; ++a) {
      double az = M_PI * (1.0 - (2.0 * a + 1.0) / spec.azimuth_steps);
      double dir[3] = {ce * std::cos(az), ce * std::sin(az), se};
      Hit h = cast_ray(world, origin, dir);
      double noise = spec.noise_sigma > 0.0 ? noise_rng.normal(0.0, spec.noise_sigma) : 0.0;
      if (!h.valid()) continue;
      double r = std::max(h.t + noise, kMinRange);
      cloud.xyz.push_back(dir[0] * r);
      cloud.xyz.push_back(dir[1] * r);
      cloud.xyz.push_back(dir[2] * r);
      cloud.remission.push_back(remission_of(h));
      cloud.label.push_back(h.cls);
    }
  }

  // camera rendering of the same world, flat palette shading with a mild
  // distance dimming so the image is not piecewise constant
  Image& img = scene.image;
  img.width = spec.cam_width;
  img.height = spec.cam_height;
  img.rgb.assign(static_cast<std::size_t>(img.width) * img.height * 3, 0);
  const auto& K = scene.cam.intrinsics;
  const double cam_center[3] = {0.2, 0.0, 0.1};
  const double Rt[9] = {0, 0, 1, -1, 0, 0, 0, -1, 0};  // camera -> LiDAR rotation
  for (int v = 0; v < img.height; ++v) {
    for (int u = 0; u < img.width; ++u) {
      double dc[3] = {(u - K[2]) / K[0], (v - K[5]) / K[4], 1.0};
      double n = std::sqrt(dc[0] * dc[0] + dc[1] * dc[1] + dc[2] * dc[2]);
      for (double& c : dc) c /= n;
      double dl[3] = {Rt[0] * dc[0] + Rt[1] * dc[1] + Rt[2] * dc[2],
                      Rt[3] * dc[0] + Rt[4] * dc[1] + Rt[5] * dc[2],
                      Rt[6] * dc[0] + Rt[7] * dc[1] + Rt[8] * dc[2]};
      Hit h = cast_ray(world, cam_center, dl);
      std::uint8_t* px = img.px(u, v);
      if (!h.valid()) {
        px[0] = 135;  // sky
        px[1] = 200;
        px[2] = 235;
        continue;
      }
      const auto& base = palette[static_cast<std::size_t>(h.cls)];
      double shade = 0.6 + 0.4 * std::clamp(1.0 - h.t / 50.0, 0.0, 1.0);
      for (int c = 0; c < 3; ++c)
        px[c] = static_cast<std::uint8_t>(std::lround(base[static_cast<std::size_t>(c)] * shade));
    }
  }
  return scene;
}

}  // namespace rangefuse
