#include "rangefuse/pipeline.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <sstream>

#include <json.hpp>

#include "rangefuse/errors.hpp"

namespace rangefuse {

namespace {

int stage_count(const PipelineConfig& cfg) { return static_cast<int>(cfg.lidar_widths.size()); }

bool parse_bool(const std::string& v, const std::string& key) {
  if (v == "1" || v == "true") return true;
  if (v == "0" || v == "false") return false;
  throw ConfigError("expected a boolean for '" + key + "', got '" + v + "'");
}

long long parse_int(const std::string& v, const std::string& key) {
  try {
    std::size_t used = 0;
    long long r = std::stoll(v, &used);
    if (used != v.size()) throw std::invalid_argument(v);
    return r;
  } catch (const std::exception&) {
    throw ConfigError("expected an integer for '" + key + "', got '" + v + "'");
  }
}

double parse_real(const std::string& v, const std::string& key) {
  try {
    std::size_t used = 0;
    double r = std::stod(v, &used);
    if (used != v.size()) throw std::invalid_argument(v);
    return r;
  } catch (const std::exception&) {
    throw ConfigError("expected a number for '" + key + "', got '" + v + "'");
  }
}

std::vector<int> parse_int_list(const std::string& v, const std::string& key) {
  std::vector<int> out;
  std::stringstream ss(v);
  std::string item;
  while (std::getline(ss, item, ','))
    out.push_back(static_cast<int>(parse_int(item, key)));
  if (out.empty()) throw ConfigError("expected a comma list for '" + key + "'");
  return out;
}

std::string trim(const std::string& s) {
  std::size_t b = s.find_first_not_of(" \t\r\n");
  if (b == std::string::npos) return "";
  std::size_t e = s.find_last_not_of(" \t\r\n");
  return s.substr(b, e - b + 1);
}

std::vector<int> argmax_rows(const Tensor& rows) {
  const int n = rows.dim(0), c = rows.dim(1);
  std::vector<int> out(n, 0);
  for (int i = 0; i < n; ++i) {
    const double* p = rows.data().data() + static_cast<std::size_t>(i) * c;
    int best = 0;
    for (int k = 1; k < c; ++k)
      if (p[k] > p[best]) best = k;
    out[i] = best;
  }
  return out;
}

Tensor softmax_chw(const Tensor& logits) {
  return rows_to_chw(softmax_rows(chw_to_rows(logits)), logits.dim(1), logits.dim(2));
}

double median_of(std::vector<double> v) {
  if (v.empty()) return 0.0;
  std::nth_element(v.begin(), v.begin() + v.size() / 2, v.end());
  double hi = v[v.size() / 2];
  if (v.size() % 2 == 1) return hi;
  std::nth_element(v.begin(), v.begin() + v.size() / 2 - 1, v.end());
  return 0.5 * (hi + v[v.size() / 2 - 1]);
}

struct StageClock {
  std::chrono::steady_clock::time_point last = std::chrono::steady_clock::now();
  double lap() {
    auto now = std::chrono::steady_clock::now();
    double ms = std::chrono::duration<double, std::milli>(now - last).count();
    last = now;
    return ms;
  }
};

nlohmann::ordered_json config_json(const PipelineConfig& cfg) {
  nlohmann::ordered_json j;
  j["rv_height"] = cfg.rv_height;
  j["rv_width"] = cfg.rv_width;
  j["fov_up_deg"] = cfg.fov_up_deg;
  j["fov_down_deg"] = cfg.fov_down_deg;
  j["seed"] = cfg.seed;
  j["beams"] = cfg.beams;
  j["azimuth_steps"] = cfg.azimuth_steps;
  j["noise_sigma"] = cfg.noise_sigma;
  j["cam_width"] = cfg.cam_width;
  j["cam_height"] = cfg.cam_height;
  j["cam_focal"] = cfg.cam_focal;
  j["train_scenes"] = cfg.train_scenes;
  j["eval_scenes"] = cfg.eval_scenes;
  j["lidar_widths"] = cfg.lidar_widths;
  j["teacher_widths"] = cfg.teacher_channels();
  j["teacher_seed"] = cfg.teacher_seed;
  j["mlu"] = mlu_name(cfg.mlu);
  j["fusion_grid_h"] = cfg.fusion_grid_h;
  j["fusion_grid_w"] = cfg.fusion_grid_w;
  j["use_camera"] = cfg.use_camera;
  j["use_cff"] = cfg.use_cff;
  j["use_refine"] = cfg.use_refine;
  j["num_classes"] = cfg.num_classes;
  j["ignore_id"] = cfg.ignore_id;
  j["hidden"] = cfg.hidden;
  j["knn_k"] = cfg.knn.k;
  j["knn_window"] = cfg.knn.window;
  j["knn_cutoff"] = cfg.knn.cutoff_m;
  j["knn_sigma"] = cfg.knn.sigma;
  j["refine_window"] = cfg.refine.window;
  j["refine_k"] = cfg.refine.k;
  j["refine_lambda"] = cfg.refine.lambda;
  j["point_window"] = cfg.refine.point_window;
  j["point_k"] = cfg.refine.point_k;
  j["w_ce"] = cfg.w_ce;
  j["w_distill"] = cfg.w_distill;
  j["w_point"] = cfg.w_point;
  j["lr"] = cfg.lr;
  j["momentum"] = cfg.momentum;
  j["steps"] = cfg.steps;
  j["deterministic"] = cfg.deterministic;
  j["colored_only"] = cfg.colored_only;
  return j;
}

nlohmann::ordered_json iou_json(const IouReport& r) {
  nlohmann::ordered_json j;
  j["miou"] = r.mean;
  j["iou"] = r.iou;
  j["present"] = r.present;
  return j;
}

void write_json(const std::string& path, const nlohmann::ordered_json& j) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write summary '" + path + "'");
  out << j.dump(2) << "\n";
}

}  // namespace

// ---- config -----------------------------------------------------------------------

void PipelineConfig::validate() const {
  const int s = stage_count(*this);
  if (s < 1) throw ConfigError("lidar_widths must list at least one stage");
  for (int w : lidar_widths)
    if (w < 1) throw ConfigError("lidar_widths entries must be positive");
  const int div = 1 << s;
  if (rv_height < div || rv_height % div != 0 || rv_width < div || rv_width % div != 0)
    throw ConfigError("range view " + std::to_string(rv_height) + "x" + std::to_string(rv_width) +
                      " must be divisible by 2^" + std::to_string(s));
  rv_config().validate();
  if (use_cff && !use_camera) throw ConfigError("gated fusion requires the camera branch");
  if (use_cff && (fusion_grid_h < 1 || fusion_grid_w < 1))
    throw ConfigError("fusion token grid must be positive");
  const auto tw = teacher_channels();
  if (use_camera) {
    if (static_cast<int>(tw.size()) != s)
      throw ConfigError("teacher_widths must match the stage count");
    for (int w : tw)
      if (w < 1) throw ConfigError("teacher_widths entries must be positive");
    if (cam_width < div || cam_width % div != 0 || cam_height < div || cam_height % div != 0)
      throw ConfigError("camera size must be divisible by 2^" + std::to_string(s));
  }
  if (num_classes < 2) throw ConfigError("num_classes must be at least 2");
  if (ignore_id >= num_classes) throw ConfigError("ignore_id beyond num_classes");
  if (hidden < 1) throw ConfigError("hidden width must be positive");
  if (knn.k < 1 || knn.window < 1 || knn.window % 2 == 0 || knn.cutoff_m <= 0.0 || knn.sigma <= 0.0)
    throw ConfigError("label-transfer settings invalid: k and odd window positive, cutoff/sigma > 0");
  refine.validate();
  if (w_ce < 0.0 || w_distill < 0.0 || w_point < 0.0)
    throw ConfigError("loss weights must be non-negative");
  if (lr < 0.0) throw ConfigError("learning rate must be non-negative");
  if (momentum < 0.0 || momentum >= 1.0) throw ConfigError("momentum must lie in [0,1)");
  if (steps < 0) throw ConfigError("steps must be non-negative");
  if (train_scenes < 1 || eval_scenes < 1) throw ConfigError("scene counts must be positive");
  if (beams < 2 || azimuth_steps < 2) throw ConfigError("scene needs at least 2x2 rays");
  if (cam_width < 8 || cam_height < 8) throw ConfigError("camera too small");
}

RVConfig PipelineConfig::rv_config() const {
  RVConfig rv;
  rv.height = rv_height;
  rv.width = rv_width;
  rv.fov_up = fov_up_deg * M_PI / 180.0;
  rv.fov_down = fov_down_deg * M_PI / 180.0;
  return rv;
}

SceneSpec PipelineConfig::scene_spec(std::uint64_t scene_seed) const {
  SceneSpec spec;
  spec.seed = scene_seed;
  spec.beams = beams;
  spec.azimuth_steps = azimuth_steps;
  spec.fov_up_deg = fov_up_deg;
  spec.fov_down_deg = fov_down_deg;
  spec.noise_sigma = noise_sigma;
  spec.cam_width = cam_width;
  spec.cam_height = cam_height;
  spec.cam_focal = cam_focal;
  return spec;
}

std::vector<int> PipelineConfig::teacher_channels() const {
  if (!teacher_widths.empty()) return teacher_widths;
  std::vector<int> tw;
  tw.reserve(lidar_widths.size());
  for (int w : lidar_widths) tw.push_back(2 * w);  // student runs at half the teacher width
  return tw;
}

void set_config_value(PipelineConfig& cfg, const std::string& key, const std::string& value) {
  if (key == "rv_height") cfg.rv_height = static_cast<int>(parse_int(value, key));
  else if (key == "rv_width") cfg.rv_width = static_cast<int>(parse_int(value, key));
  else if (key == "fov_up_deg") cfg.fov_up_deg = parse_real(value, key);
  else if (key == "fov_down_deg") cfg.fov_down_deg = parse_real(value, key);
  else if (key == "seed") cfg.seed = static_cast<std::uint64_t>(parse_int(value, key));
  else if (key == "beams") cfg.beams = static_cast<int>(parse_int(value, key));
  else if (key == "azimuth_steps") cfg.azimuth_steps = static_cast<int>(parse_int(value, key));
  else if (key == "noise_sigma") cfg.noise_sigma = parse_real(value, key);
  else if (key == "cam_width") cfg.cam_width = static_cast<int>(parse_int(value, key));
  else if (key == "cam_height") cfg.cam_height = static_cast<int>(parse_int(value, key));
  else if (key == "cam_focal") cfg.cam_focal = parse_real(value, key);
  else if (key == "train_scenes") cfg.train_scenes = static_cast<int>(parse_int(value, key));
  else if (key == "eval_scenes") cfg.eval_scenes = static_cast<int>(parse_int(value, key));
  else if (key == "lidar_widths") cfg.lidar_widths = parse_int_list(value, key);
  else if (key == "teacher_widths") cfg.teacher_widths = parse_int_list(value, key);
  else if (key == "teacher_seed") cfg.teacher_seed = static_cast<std::uint64_t>(parse_int(value, key));
  else if (key == "mlu") cfg.mlu = parse_mlu(value);
  else if (key == "fusion_grid_h") cfg.fusion_grid_h = static_cast<int>(parse_int(value, key));
  else if (key == "fusion_grid_w") cfg.fusion_grid_w = static_cast<int>(parse_int(value, key));
  else if (key == "use_camera") cfg.use_camera = parse_bool(value, key);
  else if (key == "use_cff") cfg.use_cff = parse_bool(value, key);
  else if (key == "use_refine") cfg.use_refine = parse_bool(value, key);
  else if (key == "num_classes") cfg.num_classes = static_cast<int>(parse_int(value, key));
  else if (key == "ignore_id") cfg.ignore_id = static_cast<int>(parse_int(value, key));
  else if (key == "hidden") cfg.hidden = static_cast<int>(parse_int(value, key));
  else if (key == "knn_k") cfg.knn.k = static_cast<int>(parse_int(value, key));
  else if (key == "knn_window") cfg.knn.window = static_cast<int>(parse_int(value, key));
  else if (key == "knn_cutoff") cfg.knn.cutoff_m = parse_real(value, key);
  else if (key == "knn_sigma") cfg.knn.sigma = parse_real(value, key);
  else if (key == "refine_window") cfg.refine.window = static_cast<int>(parse_int(value, key));
  else if (key == "refine_k") cfg.refine.k = static_cast<int>(parse_int(value, key));
  else if (key == "refine_lambda") cfg.refine.lambda = parse_real(value, key);
  else if (key == "point_window") cfg.refine.point_window = static_cast<int>(parse_int(value, key));
  else if (key == "point_k") cfg.refine.point_k = static_cast<int>(parse_int(value, key));
  else if (key == "w_ce") cfg.w_ce = parse_real(value, key);
  else if (key == "w_distill") cfg.w_distill = parse_real(value, key);
  else if (key == "w_point") cfg.w_point = parse_real(value, key);
  else if (key == "lr") cfg.lr = parse_real(value, key);
  else if (key == "momentum") cfg.momentum = parse_real(value, key);
  else if (key == "steps") cfg.steps = static_cast<int>(parse_int(value, key));
  else if (key == "deterministic") cfg.deterministic = parse_bool(value, key);
  else if (key == "colored_only") cfg.colored_only = parse_bool(value, key);
  else throw ConfigError("unknown config key '" + key + "'");
}

PipelineConfig parse_pipeline_config(std::istream& in) {
  PipelineConfig cfg;
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    const std::size_t hash = line.find('#');
    if (hash != std::string::npos) line = line.substr(0, hash);
    line = trim(line);
    if (line.empty()) continue;
    const std::size_t eq = line.find('=');
    if (eq == std::string::npos)
      throw ConfigError("line " + std::to_string(lineno) + ": expected key=value, got '" + line + "'");
    set_config_value(cfg, trim(line.substr(0, eq)), trim(line.substr(eq + 1)));
  }
  cfg.validate();
  return cfg;
}

PipelineConfig load_pipeline_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open config '" + path + "'");
  return parse_pipeline_config(in);
}

std::uint64_t train_scene_seed(const PipelineConfig& cfg, int index) {
  return cfg.seed * 1000003ULL + 2ULL * static_cast<std::uint64_t>(index);
}

std::uint64_t eval_scene_seed(const PipelineConfig& cfg, int index) {
  return cfg.seed * 1000003ULL + 2ULL * static_cast<std::uint64_t>(index) + 1ULL;
}

// ---- metrics -----------------------------------------------------------------------

ConfusionMatrix::ConfusionMatrix(int num_classes_, int ignore_id_)
    : num_classes(num_classes_), ignore_id(ignore_id_) {
  if (num_classes < 1) throw ConfigError("confusion matrix needs at least one class");
  counts.assign(static_cast<std::size_t>(num_classes) * num_classes, 0);
}

long long& ConfusionMatrix::at(int gt, int pred) {
  return counts[static_cast<std::size_t>(gt) * num_classes + pred];
}

long long ConfusionMatrix::at(int gt, int pred) const {
  return counts[static_cast<std::size_t>(gt) * num_classes + pred];
}

long long ConfusionMatrix::total() const {
  long long t = 0;
  for (long long v : counts) t += v;
  return t;
}

void accumulate_confusion(ConfusionMatrix& cm, const std::vector<int>& preds,
                          const std::vector<int>& gt) {
  if (preds.size() != gt.size())
    throw DimensionError("confusion inputs differ in length");
  for (std::size_t i = 0; i < preds.size(); ++i) {
    if (gt[i] == cm.ignore_id) continue;
    if (gt[i] < 0 || gt[i] >= cm.num_classes || preds[i] < 0 || preds[i] >= cm.num_classes)
      throw InvalidInputError("class id out of range: gt=" + std::to_string(gt[i]) +
                              " pred=" + std::to_string(preds[i]));
    ++cm.at(gt[i], preds[i]);
  }
}

ConfusionMatrix compute_confusion(const std::vector<int>& preds, const std::vector<int>& gt,
                                  int num_classes, int ignore_id) {
  ConfusionMatrix cm(num_classes, ignore_id);
  accumulate_confusion(cm, preds, gt);
  return cm;
}

IouReport miou(const ConfusionMatrix& cm) {
  IouReport r;
  const int c = cm.num_classes;
  r.iou.assign(c, 0.0);
  r.present.assign(c, false);
  double sum = 0.0;
  int counted = 0;
  for (int k = 0; k < c; ++k) {
    if (k == cm.ignore_id) continue;
    long long tp = cm.at(k, k), fp = 0, fn = 0;
    for (int o = 0; o < c; ++o) {
      if (o == k) continue;
      fp += cm.at(o, k);
      fn += cm.at(k, o);
    }
    const long long uni = tp + fp + fn;
    if (uni == 0) continue;  // absent class, excluded from the mean
    r.present[k] = true;
    r.iou[k] = static_cast<double>(tp) / static_cast<double>(uni);
    sum += r.iou[k];
    ++counted;
  }
  if (counted == 0) throw MetricError("every class is absent; the mean is undefined");
  r.mean = sum / counted;
  return r;
}

// ---- assembly ------------------------------------------------------------------------

Pipeline build_pipeline(const PipelineConfig& cfg) {
  cfg.validate();
  Pipeline p;
  p.cfg = cfg;
  const int s = stage_count(cfg);
  const auto& w = cfg.lidar_widths;

  Rng rng(cfg.seed);
  p.lidar_enc = Encoder(rng, 5, w);
  if (cfg.use_camera) p.cam_enc = Encoder(rng, 3, w);
  if (cfg.use_cff) p.fusion = FusionModule(rng, w, cfg.mlu, cfg.fusion_grid_h, cfg.fusion_grid_w);
  for (int k = s - 2; k >= 0; --k)
    p.dec_blocks.emplace_back(rng, w[static_cast<std::size_t>(k) + 1] + w[k], w[k], 3);
  p.dec_final = ConvBlock(rng, w[0], w[0], 3);
  p.head = make_conv(rng, w[0], cfg.num_classes, 1);
  if (cfg.use_camera) {
    p.teacher = TeacherEncoder(cfg.teacher_seed, 3, cfg.teacher_channels());
    const auto tw = cfg.teacher_channels();
    for (int k = 0; k < s; ++k) p.adapters.emplace_back(rng, w[k], tw[k]);
  }
  if (cfg.use_refine) {
    p.grid_ref = GridRefiner(rng, w[0], cfg.num_classes, cfg.hidden);
    p.point_ref = PointRefiner(rng, cfg.num_classes, cfg.hidden);
  }

  p.lidar_enc.register_into(p.reg, "lidar");
  if (cfg.use_camera) p.cam_enc.register_into(p.reg, "cam");
  if (cfg.use_cff) p.fusion.register_into(p.reg, "fusion");
  for (std::size_t k = 0; k < p.dec_blocks.size(); ++k)
    p.dec_blocks[k].register_into(p.reg, "dec" + std::to_string(k));
  p.dec_final.register_into(p.reg, "dec_final");
  p.reg.add_layer("head", p.head);
  for (std::size_t k = 0; k < p.adapters.size(); ++k)
    p.adapters[k].register_into(p.reg, "adapt" + std::to_string(k));
  if (cfg.use_refine) {
    p.grid_ref.register_into(p.reg, "grid_refine");
    p.point_ref.register_into(p.reg, "point_refine");
  }
  return p;
}

SceneBatch prepare_scene(const PipelineConfig& cfg, std::uint64_t scene_seed) {
  SceneBatch b;
  b.scene = gen_synthetic_scene(cfg.scene_spec(scene_seed));
  b.scene.cloud = paint_points(b.scene.cloud, b.scene.image, b.scene.cam);
  b.ri = build_rv_rgb(b.scene.cloud, cfg.rv_config());
  b.geom = rv_geometry_tensor(b.ri);
  b.rgb = rv_rgb_tensor(b.ri);

  const Image& img = b.scene.image;
  b.cam_img = Tensor::zeros({3, img.height, img.width});
  const std::size_t chw = static_cast<std::size_t>(img.height) * img.width;
  for (std::size_t i = 0; i < chw; ++i)
    for (int c = 0; c < 3; ++c)
      b.cam_img.data()[static_cast<std::size_t>(c) * chw + i] = img.rgb[i * 3 + c] / 255.0;

  const std::size_t hw = static_cast<std::size_t>(b.ri.height) * b.ri.width;
  b.rv_target.assign(hw, 0);
  b.rv_valid.assign(hw, 0);
  for (std::size_t at = 0; at < hw; ++at) {
    if (!b.ri.mask[at]) continue;
    const int label = b.scene.cloud.label[static_cast<std::size_t>(b.ri.index_map[at])];
    if (label == cfg.ignore_id) continue;
    b.rv_target[at] = label;
    b.rv_valid[at] = 1;
  }
  return b;
}

ForwardOut forward_pipeline(Pipeline& p, const SceneBatch& batch, bool training) {
  const PipelineConfig& cfg = p.cfg;
  ForwardOut out;

  std::vector<Tensor> lidar_f = p.lidar_enc.forward(batch.geom, training);
  std::vector<Tensor> fused;
  if (cfg.use_camera) {
    out.student_stages = p.cam_enc.forward(batch.rgb, training);
    if (cfg.use_cff) {
      fused = p.fusion.apply(out.student_stages, lidar_f, training);
    } else {
      fused.reserve(lidar_f.size());
      for (std::size_t k = 0; k < lidar_f.size(); ++k)
        fused.push_back(add(lidar_f[k], out.student_stages[k]));
    }
  } else {
    fused = lidar_f;
  }

  Tensor x = fused.back();
  for (std::size_t i = 0; i < p.dec_blocks.size(); ++i) {
    const Tensor& skip = fused[fused.size() - 2 - i];
    Tensor up = upsample_bilinear(x, skip.dim(1), skip.dim(2));
    x = p.dec_blocks[i].apply(concat({up, skip}, 0), training);
  }
  x = p.dec_final.apply(upsample_bilinear(x, batch.ri.height, batch.ri.width), training);

  out.base_logits = apply_conv2d(p.head, x);
  if (cfg.use_refine) {
    // the refinement stack is a bolt-on: it trains against its own losses on
    // a detached trunk signal, so its gradients never disturb the trunk
    Tensor probs0 = softmax_chw(detach(out.base_logits));
    out.features = p.grid_ref.apply(detach(x), probs0, batch.ri, cfg.refine, training);
    out.rv_logits = apply_conv2d(p.head, out.features);
    Tensor probs1 = softmax_chw(detach(out.rv_logits));
    out.point_probs = p.point_ref.apply(batch.ri, batch.scene.cloud, probs1, cfg.refine);
  } else {
    out.features = x;
    out.rv_logits = out.base_logits;
  }
  return out;
}

StepLoss train_step(Pipeline& p, const SceneBatch& batch, SgdOptimizer& opt) {
  const PipelineConfig& cfg = p.cfg;
  TapeScope tape;
  ForwardOut out = forward_pipeline(p, batch, true);

  // the trunk always trains against its own head output; the refined logits
  // get their own term so the grid pass cannot hijack the trunk gradient
  Tensor ce = nll_rows(log_softmax_rows(chw_to_rows(out.base_logits)), batch.rv_target,
                       batch.rv_valid);
  if (cfg.use_refine)
    ce = add(ce, nll_rows(log_softmax_rows(chw_to_rows(out.rv_logits)), batch.rv_target,
                          batch.rv_valid));
  Tensor loss = mul_scalar(ce, cfg.w_ce);

  StepLoss sl;
  sl.ce = ce.item();

  if (cfg.use_camera && cfg.w_distill != 0.0) {
    Tensor ld = dckd_loss(p.teacher, batch.cam_img, out.student_stages, p.adapters, batch.ri,
                          batch.scene.cloud, true);
    sl.distill = ld.item();
    loss = add(loss, mul_scalar(ld, cfg.w_distill));
  }
  if (cfg.use_refine && cfg.w_point != 0.0) {
    std::vector<std::uint8_t> valid(batch.scene.cloud.size(), 0);
    for (std::size_t i = 0; i < valid.size(); ++i)
      valid[i] = batch.ri.pixel_u[i] >= 0 && batch.scene.cloud.label[i] != cfg.ignore_id;
    Tensor lp = nll_rows(log_(add_scalar(out.point_probs, 1e-12)), batch.scene.cloud.label, valid);
    sl.point = lp.item();
    loss = add(loss, mul_scalar(lp, cfg.w_point));
  }

  sl.total = loss.item();
  if (!std::isfinite(sl.total))
    throw InvalidInputError("training loss is not finite (ce=" + std::to_string(sl.ce) +
                            " distill=" + std::to_string(sl.distill) +
                            " point=" + std::to_string(sl.point) + ")");

  p.reg.zero_grads();
  backward(loss);
  opt.step(p.reg);
  return sl;
}

TrainResult train_pipeline(Pipeline& p, std::ostream* log) {
  const PipelineConfig& cfg = p.cfg;
  SgdOptimizer opt(cfg.lr, cfg.momentum);
  TrainResult result;
  result.losses.reserve(static_cast<std::size_t>(cfg.steps));
  for (int step = 0; step < cfg.steps; ++step) {
    SceneBatch batch = prepare_scene(cfg, train_scene_seed(cfg, step % cfg.train_scenes));
    StepLoss sl;
    try {
      sl = train_step(p, batch, opt);
    } catch (const InvalidInputError& e) {
      throw InvalidInputError(std::string(e.what()) + " at step " + std::to_string(step));
    }
    result.losses.push_back(sl);
    if (log) {
      (*log) << std::fixed << std::setprecision(6) << "step=" << step << " loss=" << sl.total
             << " ce=" << sl.ce << " distill=" << sl.distill << " point=" << sl.point << "\n";
    }
  }
  return result;
}

EvalResult evaluate_pipeline(Pipeline& p, std::ostream* log) {
  const PipelineConfig& cfg = p.cfg;
  EvalResult r;
  r.back = ConfusionMatrix(cfg.num_classes, cfg.ignore_id);
  r.knn = ConfusionMatrix(cfg.num_classes, cfg.ignore_id);
  r.refined = ConfusionMatrix(cfg.num_classes, cfg.ignore_id);
  r.has_refined = cfg.use_refine;

  for (int i = 0; i < cfg.eval_scenes; ++i) {
    SceneBatch batch = prepare_scene(cfg, eval_scene_seed(cfg, i));
    NoGradScope frozen;
    ForwardOut out = forward_pipeline(p, batch, false);

    const std::vector<int> grid = argmax_rows(chw_to_rows(out.rv_logits));
    std::vector<int> back = back_project(grid, batch.ri, batch.scene.cloud);
    Tensor probs = softmax_chw(out.rv_logits);
    std::vector<int> knn = knn_post_process(batch.ri, batch.scene.cloud, probs, cfg.knn);
    std::vector<int> refined;
    if (cfg.use_refine) refined = argmax_rows(out.point_probs);

    std::vector<int> gt = batch.scene.cloud.label;
    if (cfg.colored_only) {
      // restrict the metric to camera-covered points
      for (std::size_t j = 0; j < gt.size(); ++j)
        if (!batch.scene.cloud.color_mask[j]) gt[j] = cfg.ignore_id;
    }
    accumulate_confusion(r.back, back, gt);
    accumulate_confusion(r.knn, knn, gt);
    if (cfg.use_refine) accumulate_confusion(r.refined, refined, gt);
    if (log) (*log) << "scene=" << i << " points=" << gt.size() << "\n";
  }

  r.back_iou = miou(r.back);
  r.knn_iou = miou(r.knn);
  if (cfg.use_refine) r.refined_iou = miou(r.refined);
  r.scenes = cfg.eval_scenes;
  return r;
}

BenchReport benchmark_pipeline(Pipeline& p, int trials, int warmup) {
  if (trials < 1) throw ConfigError("benchmark needs at least one trial");
  const PipelineConfig& cfg = p.cfg;
  Scene scene = gen_synthetic_scene(cfg.scene_spec(train_scene_seed(cfg, 0)));
  scene.cloud = paint_points(scene.cloud, scene.image, scene.cam);

  std::vector<double> t_proj, t_enc, t_fus, t_dec, t_grid, t_point, t_total;
  NoGradScope frozen;
  for (int trial = 0; trial < warmup + trials; ++trial) {
    StageClock clock;
    const auto t0 = std::chrono::steady_clock::now();

    RangeImage ri = build_rv_rgb(scene.cloud, cfg.rv_config());
    Tensor geom = rv_geometry_tensor(ri);
    Tensor rgb = rv_rgb_tensor(ri);
    const double ms_proj = clock.lap();

    std::vector<Tensor> lidar_f = p.lidar_enc.forward(geom, false);
    std::vector<Tensor> cam_f;
    if (cfg.use_camera) cam_f = p.cam_enc.forward(rgb, false);
    const double ms_enc = clock.lap();

    std::vector<Tensor> fused;
    if (cfg.use_cff) {
      fused = p.fusion.apply(cam_f, lidar_f, false);
    } else if (cfg.use_camera) {
      for (std::size_t k = 0; k < lidar_f.size(); ++k) fused.push_back(add(lidar_f[k], cam_f[k]));
    } else {
      fused = lidar_f;
    }
    const double ms_fus = clock.lap();

    Tensor x = fused.back();
    for (std::size_t i = 0; i < p.dec_blocks.size(); ++i) {
      const Tensor& skip = fused[fused.size() - 2 - i];
      x = p.dec_blocks[i].apply(concat({upsample_bilinear(x, skip.dim(1), skip.dim(2)), skip}, 0),
                                false);
    }
    x = p.dec_final.apply(upsample_bilinear(x, ri.height, ri.width), false);
    Tensor logits = apply_conv2d(p.head, x);
    const double ms_dec = clock.lap();

    double ms_grid = 0.0, ms_point = 0.0;
    if (cfg.use_refine) {
      Tensor probs0 = softmax_chw(logits);
      Tensor fx = p.grid_ref.apply(x, probs0, ri, cfg.refine, false);
      logits = apply_conv2d(p.head, fx);
      ms_grid = clock.lap();
      Tensor probs1 = softmax_chw(logits);
      p.point_ref.apply(ri, scene.cloud, probs1, cfg.refine);
      ms_point = clock.lap();
    }
    const double ms_total =
        std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count();

    if (trial < warmup) continue;
    t_proj.push_back(ms_proj);
    t_enc.push_back(ms_enc);
    t_fus.push_back(ms_fus);
    t_dec.push_back(ms_dec);
    t_grid.push_back(ms_grid);
    t_point.push_back(ms_point);
    t_total.push_back(ms_total);
  }

  BenchReport r;
  r.projection = median_of(t_proj);
  r.encoders = median_of(t_enc);
  r.fusion = median_of(t_fus);
  r.decoder = median_of(t_dec);
  r.grid_refine = median_of(t_grid);
  r.point_refine = median_of(t_point);
  r.stage_sum = r.projection + r.encoders + r.fusion + r.decoder + r.grid_refine + r.point_refine;
  r.total = median_of(t_total);
  r.trials = trials;
  return r;
}

// ---- checkpoints and summaries --------------------------------------------------------

std::size_t load_matching_checkpoint(const std::string& path, ParamRegistry& reg) {
  auto records = read_checkpoint(path);
  std::size_t copied = 0;
  for (auto& entry : reg.entries()) {
    for (const auto& rec : records) {
      if (rec.first != entry.first) continue;
      if (rec.second.shape() != entry.second.shape())
        throw FormatError("checkpoint entry '" + rec.first + "' has a mismatched shape");
      Tensor& dst = const_cast<Tensor&>(entry.second);
      std::copy(rec.second.data().begin(), rec.second.data().end(), dst.data().begin());
      ++copied;
      break;
    }
  }
  return copied;
}

std::uint64_t file_digest(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open '" + path + "' for hashing");
  std::uint64_t h = 14695981039346656037ULL;
  char buf[4096];
  while (in.read(buf, sizeof buf) || in.gcount() > 0) {
    for (std::streamsize i = 0; i < in.gcount(); ++i) {
      h ^= static_cast<unsigned char>(buf[i]);
      h *= 1099511628211ULL;
    }
    if (!in) break;
  }
  return h;
}

void write_train_summary(const std::string& path, const PipelineConfig& cfg,
                         const TrainResult& result, const std::string& checkpoint_path) {
  nlohmann::ordered_json j;
  j["command"] = "train";
  j["config"] = config_json(cfg);
  j["steps"] = result.losses.size();
  if (!result.losses.empty()) {
    const StepLoss& first = result.losses.front();
    const StepLoss& last = result.losses.back();
    j["first_loss"] = first.total;
    j["final_loss"] = last.total;
    j["final_components"] = {{"ce", last.ce}, {"distill", last.distill}, {"point", last.point}};
  }
  std::ostringstream hex;
  hex << std::hex << std::setw(16) << std::setfill('0') << file_digest(checkpoint_path);
  j["checkpoint_digest"] = hex.str();
  write_json(path, j);
}

void write_eval_summary(const std::string& path, const PipelineConfig& cfg,
                        const EvalResult& result) {
  nlohmann::ordered_json j;
  j["command"] = "eval";
  j["config"] = config_json(cfg);
  j["scenes"] = result.scenes;
  j["backproject"] = iou_json(result.back_iou);
  j["knn"] = iou_json(result.knn_iou);
  if (result.has_refined)
    j["refined"] = iou_json(result.refined_iou);
  else
    j["refined"] = nullptr;
  write_json(path, j);
}

void write_bench_summary(const std::string& path, const PipelineConfig& cfg,
                         const BenchReport& report) {
  nlohmann::ordered_json j;
  j["command"] = "bench";
  j["config"] = config_json(cfg);
  j["trials"] = report.trials;
  j["stages_ms"] = {{"projection", report.projection}, {"encoders", report.encoders},
                    {"fusion", report.fusion},         {"decoder", report.decoder},
                    {"grid_refine", report.grid_refine}, {"point_refine", report.point_refine}};
  j["stage_sum_ms"] = report.stage_sum;
  j["total_ms"] = report.total;
  write_json(path, j);
}

}  // namespace rangefuse
