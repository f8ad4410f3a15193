#include <cstdio>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "rangefuse/errors.hpp"
#include "rangefuse/pipeline.hpp"

using namespace rangefuse;

namespace {

struct GlobalOpts {
  std::string config_path;
  std::int64_t seed = -1;          // -1: keep the config's seed
  bool deterministic = false;
  double distill_weight = -1.0;    // <0: keep the config's weight
};

void add_global_opts(CLI::App* cmd, GlobalOpts& g) {
  cmd->add_option("--config", g.config_path, "pipeline config file (key=value lines)");
  cmd->add_option("--seed", g.seed, "override the config seed");
  cmd->add_flag("--deterministic", g.deterministic, "single-threaded bit-exact mode");
  cmd->add_option("--distill-weight", g.distill_weight, "override the distillation loss weight");
}

PipelineConfig resolve_config(const GlobalOpts& g) {
  PipelineConfig cfg;
  if (!g.config_path.empty()) cfg = load_pipeline_config(g.config_path);
  if (g.seed >= 0) cfg.seed = static_cast<std::uint64_t>(g.seed);
  if (g.deterministic) cfg.deterministic = true;
  if (g.distill_weight >= 0.0) cfg.w_distill = g.distill_weight;
  cfg.validate();
  return cfg;
}

void write_calib(const std::string& path, const CameraModel& cam) {
  std::ofstream out(path);
  if (!out) throw IoError("cannot write calib '" + path + "'");
  out << std::setprecision(17);
  const auto& k = cam.intrinsics;
  out << "P2: " << k[0] << " " << k[1] << " " << k[2] << " 0 " << k[3] << " " << k[4] << " "
      << k[5] << " 0 " << k[6] << " " << k[7] << " " << k[8] << " 0\n";
  out << "Tr:";
  for (int r = 0; r < 3; ++r)
    for (int c = 0; c < 4; ++c) out << " " << cam.extrinsics[static_cast<std::size_t>(r) * 4 + c];
  out << "\n";
}

// per-pixel class scores stored as extra channels next to the geometry
RviChannels probs_rvi(const RangeImage& ri, const Tensor& probs) {
  RviChannels rvi = rvi_from_range_image(ri);
  const std::size_t hw = static_cast<std::size_t>(ri.height) * ri.width;
  for (int c = 0; c < probs.dim(0); ++c) {
    std::vector<double> plane(probs.data().begin() + static_cast<std::size_t>(c) * hw,
                              probs.data().begin() + static_cast<std::size_t>(c + 1) * hw);
    rvi.channels.emplace_back("prob_" + std::to_string(c), std::move(plane));
  }
  return rvi;
}

Tensor probs_from_rvi(const RviChannels& rvi, int num_classes) {
  Tensor t = Tensor::zeros({num_classes, rvi.height, rvi.width});
  const std::size_t hw = static_cast<std::size_t>(rvi.height) * rvi.width;
  int found = 0;
  for (const auto& [name, plane] : rvi.channels) {
    if (name.rfind("prob_", 0) != 0) continue;
    const int c = std::stoi(name.substr(5));
    if (c < 0 || c >= num_classes)
      throw FormatError("class-score channel '" + name + "' outside the configured class count");
    std::copy(plane.begin(), plane.end(), t.data().begin() + static_cast<std::size_t>(c) * hw);
    ++found;
  }
  if (found != num_classes)
    throw FormatError("expected " + std::to_string(num_classes) + " class-score channels, found " +
                      std::to_string(found));
  return t;
}

int run_gen_scenes(const GlobalOpts& g, const std::string& out_dir, int count) {
  PipelineConfig cfg = resolve_config(g);
  for (int i = 0; i < count; ++i) {
    Scene scene = gen_synthetic_scene(cfg.scene_spec(train_scene_seed(cfg, i)));
    const std::string stem = out_dir + "/" + std::to_string(i);
    write_scan(stem + ".bin", scene.cloud);
    write_labels(stem + ".label", scene.cloud.label);
    write_ppm(stem + ".ppm", scene.image);
    write_calib(stem + ".calib", scene.cam);
  }
  std::cout << "wrote " << count << " scenes to " << out_dir << "\n";
  return 0;
}

int run_project(const GlobalOpts& g, const std::string& scan_path, const std::string& out_path) {
  PipelineConfig cfg = resolve_config(g);
  PointCloud cloud = read_scan(scan_path);
  RangeImage ri = spherical_project(cloud, cfg.rv_config());
  write_rvi(out_path, rvi_from_range_image(ri));
  std::size_t masked = 0;
  for (auto m : ri.mask) masked += m;
  std::cout << "points=" << cloud.size() << " masked_pixels=" << masked
            << " dropped=" << ri.dropped_origin_points << "\n";
  return 0;
}

int run_paint(const GlobalOpts& g, const std::string& scan_path, const std::string& image_path,
              const std::string& calib_path, const std::string& out_path) {
  PipelineConfig cfg = resolve_config(g);
  PointCloud cloud = read_scan(scan_path);
  Image img = read_ppm(image_path);
  CameraModel cam = read_calib(calib_path, img.width, img.height);
  PointCloud painted = paint_points(cloud, img, cam);
  RangeImage ri = build_rv_rgb(painted, cfg.rv_config());
  write_rvi(out_path, rvi_from_range_image(ri));
  std::size_t colored = 0;
  for (auto m : painted.color_mask) colored += m;
  std::cout << "points=" << cloud.size() << " colored=" << colored << "\n";
  return 0;
}

int run_train(const GlobalOpts& g, const std::string& weights_out, const std::string& log_path,
              const std::string& summary_path) {
  PipelineConfig cfg = resolve_config(g);
  Pipeline p = build_pipeline(cfg);
  std::ofstream log_file;
  std::ostream* log = &std::cout;
  if (!log_path.empty()) {
    log_file.open(log_path);
    if (!log_file) throw IoError("cannot write log '" + log_path + "'");
    log = &log_file;
  }
  TrainResult r = train_pipeline(p, log);
  write_checkpoint(weights_out, p.reg);
  if (!summary_path.empty()) write_train_summary(summary_path, cfg, r, weights_out);
  if (!r.losses.empty())
    std::cout << "final_loss=" << std::fixed << std::setprecision(6) << r.losses.back().total
              << "\n";
  return 0;
}

int run_eval(const GlobalOpts& g, const std::string& weights, const std::string& summary_path,
             const std::string& dump_dir) {
  PipelineConfig cfg = resolve_config(g);
  Pipeline p = build_pipeline(cfg);
  load_checkpoint(weights, p.reg);
  EvalResult r = evaluate_pipeline(p, nullptr);
  std::cout << std::fixed << std::setprecision(4) << "miou_backproject=" << r.back_iou.mean
            << " miou_knn=" << r.knn_iou.mean;
  if (r.has_refined) std::cout << " miou_refined=" << r.refined_iou.mean;
  std::cout << "\n";
  if (!summary_path.empty()) write_eval_summary(summary_path, cfg, r);

  if (!dump_dir.empty()) {
    // per-scene class scores + scan + labels, for detached refinement runs
    for (int i = 0; i < cfg.eval_scenes; ++i) {
      SceneBatch batch = prepare_scene(cfg, eval_scene_seed(cfg, i));
      NoGradScope frozen;
      ForwardOut out = forward_pipeline(p, batch, false);
      Tensor probs = rows_to_chw(softmax_rows(chw_to_rows(out.rv_logits)), cfg.rv_height,
                                 cfg.rv_width);
      const std::string stem = dump_dir + "/scene_" + std::to_string(i);
      write_rvi(stem + ".rvi", probs_rvi(batch.ri, probs));
      write_scan(stem + ".bin", batch.scene.cloud);
      write_labels(stem + ".label", batch.scene.cloud.label);
    }
    std::cout << "dumped " << cfg.eval_scenes << " score grids to " << dump_dir << "\n";
  }
  return 0;
}

int run_refine(const GlobalOpts& g, const std::string& scan_path, const std::string& probs_path,
               const std::string& weights, const std::string& out_path,
               const std::string& gt_path) {
  PipelineConfig cfg = resolve_config(g);
  PointCloud cloud = read_scan(scan_path);
  RangeImage ri = spherical_project(cloud, cfg.rv_config());
  RviChannels rvi = read_rvi(probs_path);
  if (rvi.height != cfg.rv_height || rvi.width != cfg.rv_width)
    throw FormatError("score grid size does not match the configured range view");
  Tensor probs = probs_from_rvi(rvi, cfg.num_classes);

  if (!cfg.use_refine) throw ConfigError("refine command needs use_refine=1");
  Pipeline p = build_pipeline(cfg);
  const std::size_t copied = load_matching_checkpoint(weights, p.reg);
  if (copied == 0) throw FormatError("no matching entries in '" + weights + "'");

  NoGradScope frozen;
  Tensor refined = p.point_ref.apply(ri, cloud, probs, cfg.refine);
  std::vector<int> labels(cloud.size(), 0);
  for (std::size_t i = 0; i < cloud.size(); ++i) {
    const double* row = refined.data().data() + i * static_cast<std::size_t>(cfg.num_classes);
    int best = 0;
    for (int c = 1; c < cfg.num_classes; ++c)
      if (row[c] > row[best]) best = c;
    labels[i] = best;
  }
  write_labels(out_path, labels);
  std::cout << "refined " << cloud.size() << " points\n";

  if (!gt_path.empty()) {
    LabelMap identity;  // raw ids used as-is in synthetic dumps
    identity.num_classes = cfg.num_classes;
    for (int c = 0; c < cfg.num_classes; ++c) identity.raw_to_train[c] = c;
    std::vector<int> gt = read_labels(gt_path, cloud.size(), identity);
    IouReport r = miou(compute_confusion(labels, gt, cfg.num_classes, cfg.ignore_id));
    std::cout << std::fixed << std::setprecision(4) << "miou_refined=" << r.mean << "\n";
  }
  return 0;
}

int run_bench(const GlobalOpts& g, int trials, int warmup, const std::string& summary_path,
              const std::string& weights) {
  PipelineConfig cfg = resolve_config(g);
  Pipeline p = build_pipeline(cfg);
  if (!weights.empty()) load_checkpoint(weights, p.reg);
  BenchReport r = benchmark_pipeline(p, trials, warmup);
  std::cout << std::fixed << std::setprecision(3) << "projection_ms=" << r.projection
            << " encoders_ms=" << r.encoders << " fusion_ms=" << r.fusion
            << " decoder_ms=" << r.decoder << " grid_refine_ms=" << r.grid_refine
            << " point_refine_ms=" << r.point_refine << " total_ms=" << r.total << "\n";
  if (!summary_path.empty()) write_bench_summary(summary_path, cfg, r);
  return 0;
}

int run_render(const std::string& rvi_path, const std::string& out_path,
               const std::string& channel, const std::string& labelmap_path) {
  RviChannels rvi = read_rvi(rvi_path);
  if (!channel.empty()) {
    for (const auto& [name, plane] : rvi.channels) {
      if (name != channel) continue;
      render_rv_channel(out_path, plane, rvi.mask, rvi.height, rvi.width);
      std::cout << "rendered channel " << channel << "\n";
      return 0;
    }
    throw FormatError("channel '" + channel + "' not present in '" + rvi_path + "'");
  }
  if (labelmap_path.empty())
    throw ConfigError("render needs either --channel or --labelmap for class colors");
  LabelMap map = load_label_map(labelmap_path);
  // argmax over the stored class-score channels
  std::vector<const std::vector<double>*> planes;
  for (int c = 0;; ++c) {
    const std::string name = "prob_" + std::to_string(c);
    const std::vector<double>* found = nullptr;
    for (const auto& [n, plane] : rvi.channels)
      if (n == name) found = &plane;
    if (!found) break;
    planes.push_back(found);
  }
  if (planes.empty()) throw FormatError("no class-score channels in '" + rvi_path + "'");
  const std::size_t hw = static_cast<std::size_t>(rvi.height) * rvi.width;
  std::vector<int> labels(hw, 0);
  for (std::size_t i = 0; i < hw; ++i) {
    int best = 0;
    for (std::size_t c = 1; c < planes.size(); ++c)
      if ((*planes[c])[i] > (*planes[best])[i]) best = static_cast<int>(c);
    labels[i] = best;
  }
  render_rv_labels(out_path, labels, rvi.mask, rvi.height, rvi.width, map.palette);
  std::cout << "rendered " << planes.size() << "-class argmax\n";
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"camera+lidar range-view segmentation pipeline"};
  app.require_subcommand(1);

  GlobalOpts g;

  auto* gen = app.add_subcommand("gen-scenes", "write synthetic scans, labels, images, calib");
  std::string gen_out = ".";
  int gen_count = 10;
  add_global_opts(gen, g);
  gen->add_option("--out", gen_out, "output directory")->required();
  gen->add_option("--count", gen_count, "number of scenes");

  auto* project = app.add_subcommand("project", "spherical projection of a scan to a range image");
  std::string scan_path, out_path;
  add_global_opts(project, g);
  project->add_option("--scan", scan_path, "input scan (.bin)")->required();
  project->add_option("--out", out_path, "output range-image dump (.rvi)")->required();

  auto* paint = app.add_subcommand("paint", "color a scan by camera projection, then project");
  std::string image_path, calib_path;
  add_global_opts(paint, g);
  paint->add_option("--scan", scan_path, "input scan (.bin)")->required();
  paint->add_option("--image", image_path, "camera image (.ppm)")->required();
  paint->add_option("--calib", calib_path, "calibration file")->required();
  paint->add_option("--out", out_path, "output range-image dump (.rvi)")->required();

  auto* train = app.add_subcommand("train", "train on seeded synthetic scenes");
  std::string weights_path, log_path, summary_path;
  add_global_opts(train, g);
  train->add_option("--out", weights_path, "output weights (.rfw)")->required();
  train->add_option("--log", log_path, "step log file (key=value lines)");
  train->add_option("--summary", summary_path, "summary json path");

  auto* eval = app.add_subcommand("eval", "evaluate a checkpoint on the eval scenes");
  std::string dump_dir;
  add_global_opts(eval, g);
  eval->add_option("--weights", weights_path, "weights to load (.rfw)")->required();
  eval->add_option("--summary", summary_path, "summary json path");
  eval->add_option("--dump-probs", dump_dir, "directory for per-scene class-score grids");

  auto* refine = app.add_subcommand("refine", "point refinement on dumped class-score grids");
  std::string probs_path, gt_path;
  add_global_opts(refine, g);
  refine->add_option("--scan", scan_path, "input scan (.bin)")->required();
  refine->add_option("--probs", probs_path, "class-score grid (.rvi)")->required();
  refine->add_option("--weights", weights_path, "weights holding the refinement head")->required();
  refine->add_option("--out", out_path, "output labels (.label)")->required();
  refine->add_option("--labels", gt_path, "ground-truth labels for scoring");

  auto* bench = app.add_subcommand("bench", "per-stage latency medians");
  int trials = 20, warmup = 3;
  add_global_opts(bench, g);
  bench->add_option("--trials", trials, "timed trials");
  bench->add_option("--warmup", warmup, "untimed warmup trials");
  bench->add_option("--weights", weights_path, "optional weights to load");
  bench->add_option("--summary", summary_path, "summary json path");

  auto* render = app.add_subcommand("render", "render a range-image dump to ppm");
  std::string channel, labelmap_path;
  render->add_option("--rvi", probs_path, "range-image dump (.rvi)")->required();
  render->add_option("--out", out_path, "output image (.ppm)")->required();
  render->add_option("--channel", channel, "render one channel as grayscale");
  render->add_option("--labelmap", labelmap_path, "palette for class-score argmax rendering");

  CLI11_PARSE(app, argc, argv);

  try {
    if (gen->parsed()) return run_gen_scenes(g, gen_out, gen_count);
    if (project->parsed()) return run_project(g, scan_path, out_path);
    if (paint->parsed()) return run_paint(g, scan_path, image_path, calib_path, out_path);
    if (train->parsed()) return run_train(g, weights_path, log_path, summary_path);
    if (eval->parsed()) return run_eval(g, weights_path, summary_path, dump_dir);
    if (refine->parsed())
      return run_refine(g, scan_path, probs_path, weights_path, out_path, gt_path);
    if (bench->parsed()) return run_bench(g, trials, warmup, summary_path, weights_path);
    if (render->parsed()) return run_render(probs_path, out_path, channel, labelmap_path);
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
