#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <cstdio>
#include <fstream>
#include <map>
#include <sstream>

#include "rangefuse/errors.hpp"
#include "rangefuse/pipeline.hpp"

using namespace rangefuse;

namespace {

// small but full-featured setup used across the cases
PipelineConfig tiny_config() {
  PipelineConfig cfg;
  cfg.rv_height = 8;
  cfg.rv_width = 32;
  cfg.beams = 8;
  cfg.azimuth_steps = 32;
  cfg.cam_width = 32;
  cfg.cam_height = 16;
  cfg.cam_focal = 20.0;
  cfg.lidar_widths = {4, 8};
  cfg.hidden = 4;
  cfg.train_scenes = 4;
  cfg.eval_scenes = 2;
  cfg.steps = 2;
  cfg.knn.window = 3;
  cfg.knn.k = 3;
  cfg.refine.window = 3;
  cfg.refine.k = 3;
  cfg.refine.point_window = 3;
  cfg.refine.point_k = 3;
  return cfg;
}

std::string temp_path(const std::string& name) {
  return std::string("/tmp/rangefuse_test_") + name;
}

std::string slurp(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  REQUIRE(in.good());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

}  // namespace

TEST_CASE("config file parsing round-trips values and rejects junk") {
  std::istringstream in(
      "# a comment\n"
      "rv_height = 8\n"
      "rv_width=32  # trailing note\n"
      "beams=8\n"
      "azimuth_steps=32\n"
      "cam_width=32\n"
      "cam_height=16\n"
      "lidar_widths = 4,8\n"
      "mlu = xattn\n"
      "use_refine = false\n"
      "lr = 0.25\n"
      "w_distill = 0.5\n"
      "steps=7\n");
  PipelineConfig cfg = parse_pipeline_config(in);
  CHECK(cfg.rv_height == 8);
  CHECK(cfg.rv_width == 32);
  CHECK(cfg.lidar_widths == std::vector<int>{4, 8});
  CHECK(cfg.mlu == MLUStrategy::xattn);
  CHECK(cfg.use_refine == false);
  CHECK(cfg.lr == 0.25);
  CHECK(cfg.w_distill == 0.5);
  CHECK(cfg.steps == 7);
  // teacher widths default to twice the stage widths
  CHECK(cfg.teacher_channels() == std::vector<int>{8, 16});

  std::istringstream bad_key("no_such_key=1\n");
  CHECK_THROWS_AS(parse_pipeline_config(bad_key), ConfigError);
  std::istringstream bad_line("rv_height\n");
  CHECK_THROWS_AS(parse_pipeline_config(bad_line), ConfigError);
  std::istringstream bad_val("rv_height=abc\n");
  CHECK_THROWS_AS(parse_pipeline_config(bad_val), ConfigError);

  PipelineConfig invalid = tiny_config();
  invalid.rv_height = 6;  // not divisible by 2^stages
  CHECK_THROWS_AS(invalid.validate(), ConfigError);
  invalid = tiny_config();
  invalid.use_camera = false;  // fusion without a camera branch
  invalid.use_cff = true;
  CHECK_THROWS_AS(invalid.validate(), ConfigError);
  invalid = tiny_config();
  invalid.momentum = 1.0;
  CHECK_THROWS_AS(invalid.validate(), ConfigError);
}

TEST_CASE("confusion counting matches a hash-map oracle") {
  Rng rng(601);
  for (int trial = 0; trial < 30; ++trial) {
    const int c = 3 + static_cast<int>(rng.uniform() * 4.0);
    const int n = 50 + static_cast<int>(rng.uniform() * 100.0);
    const int ignore = trial % 3 == 0 ? 0 : -1;
    std::vector<int> preds(n), gt(n);
    for (int i = 0; i < n; ++i) {
      preds[i] = static_cast<int>(rng.uniform() * c);
      gt[i] = static_cast<int>(rng.uniform() * c);
    }
    ConfusionMatrix cm = compute_confusion(preds, gt, c, ignore);

    std::map<std::pair<int, int>, long long> oracle;
    long long total = 0;
    for (int i = 0; i < n; ++i) {
      if (gt[i] == ignore) continue;
      ++oracle[{gt[i], preds[i]}];
      ++total;
    }
    CHECK(cm.total() == total);
    for (int a = 0; a < c; ++a)
      for (int b = 0; b < c; ++b) {
        auto it = oracle.find({a, b});
        CHECK(cm.at(a, b) == (it == oracle.end() ? 0 : it->second));
      }
  }

  // perfect prediction -> diagonal
  std::vector<int> same = {1, 2, 0, 1};
  ConfusionMatrix diag = compute_confusion(same, same, 3, -1);
  for (int a = 0; a < 3; ++a)
    for (int b = 0; b < 3; ++b)
      if (a != b) CHECK(diag.at(a, b) == 0);

  // all ignored -> empty
  std::vector<int> ig = {0, 0};
  CHECK(compute_confusion(ig, ig, 3, 0).total() == 0);

  std::vector<int> out_of_range = {5};
  std::vector<int> ok = {1};
  CHECK_THROWS_AS(compute_confusion(out_of_range, ok, 3, -1), InvalidInputError);
  CHECK_THROWS_AS(compute_confusion(ok, out_of_range, 3, -1), InvalidInputError);
}

TEST_CASE("miou matches the direct formula and handles absent classes") {
  // two balanced classes, everything predicted as class 0
  ConfusionMatrix cm(2, -1);
  cm.at(0, 0) = 50;
  cm.at(1, 0) = 50;
  IouReport r = miou(cm);
  CHECK(r.iou[0] == doctest::Approx(0.5).epsilon(1e-12));
  CHECK(r.iou[1] == 0.0);
  CHECK(r.mean == doctest::Approx(0.25).epsilon(1e-12));

  // perfect prediction
  ConfusionMatrix perfect(3, -1);
  perfect.at(0, 0) = 5;
  perfect.at(1, 1) = 7;
  perfect.at(2, 2) = 1;
  CHECK(miou(perfect).mean == 1.0);

  // absent class excluded from the mean
  ConfusionMatrix absent(3, -1);
  absent.at(0, 0) = 10;
  absent.at(1, 1) = 10;
  IouReport ra = miou(absent);
  CHECK(ra.present[2] == false);
  CHECK(ra.mean == 1.0);

  // every class absent -> undefined
  ConfusionMatrix empty(3, -1);
  CHECK_THROWS_AS(miou(empty), MetricError);

  // random matrices vs the scalar formula
  Rng rng(602);
  for (int trial = 0; trial < 40; ++trial) {
    const int c = 2 + static_cast<int>(rng.uniform() * 5.0);
    ConfusionMatrix m(c, -1);
    for (int a = 0; a < c; ++a)
      for (int b = 0; b < c; ++b) m.at(a, b) = static_cast<long long>(rng.uniform() * 20.0);
    m.at(0, 0) += 1;  // keep at least one class present
    IouReport got = miou(m);
    double sum = 0.0;
    int counted = 0;
    for (int k = 0; k < c; ++k) {
      long long tp = m.at(k, k), fp = 0, fn = 0;
      for (int o = 0; o < c; ++o)
        if (o != k) {
          fp += m.at(o, k);
          fn += m.at(k, o);
        }
      if (tp + fp + fn == 0) continue;
      sum += static_cast<double>(tp) / static_cast<double>(tp + fp + fn);
      ++counted;
    }
    CHECK(std::abs(got.mean - sum / counted) < 1e-12);
  }
}

TEST_CASE("forward produces a label for every point and never touches the teacher") {
  PipelineConfig cfg = tiny_config();
  Pipeline p = build_pipeline(cfg);
  SceneBatch batch = prepare_scene(cfg, train_scene_seed(cfg, 0));

  ForwardOut out = forward_pipeline(p, batch, false);
  REQUIRE(out.rv_logits.shape() == std::vector<int>{cfg.num_classes, cfg.rv_height, cfg.rv_width});
  REQUIRE(out.point_probs.shape() ==
          std::vector<int>{static_cast<int>(batch.scene.cloud.size()), cfg.num_classes});
  CHECK(p.teacher.feature_calls == 0);  // inference never evaluates the teacher

  // rows are probability distributions
  for (int i = 0; i < out.point_probs.dim(0); ++i) {
    double s = 0.0;
    for (int c = 0; c < cfg.num_classes; ++c)
      s += out.point_probs.data()[static_cast<std::size_t>(i) * cfg.num_classes + c];
    CHECK(std::abs(s - 1.0) < 1e-9);
  }

  // same seed, fresh build -> bit-identical outputs
  Pipeline q = build_pipeline(cfg);
  ForwardOut out2 = forward_pipeline(q, batch, false);
  for (std::size_t i = 0; i < out.rv_logits.data().size(); ++i)
    CHECK(out.rv_logits.data()[i] == out2.rv_logits.data()[i]);
  for (std::size_t i = 0; i < out.point_probs.data().size(); ++i)
    CHECK(out.point_probs.data()[i] == out2.point_probs.data()[i]);
}

TEST_CASE("training: lr zero is a bit-exact no-op and distill weight zero skips the teacher") {
  PipelineConfig cfg = tiny_config();
  cfg.lr = 0.0;
  cfg.steps = 2;
  Pipeline p = build_pipeline(cfg);
  std::vector<std::vector<double>> before;
  for (const auto& e : p.reg.entries()) before.push_back(e.second.data());

  train_pipeline(p, nullptr);
  std::size_t idx = 0;
  for (const auto& e : p.reg.entries()) {
    // batchnorm running stats are buffers, not weights; they may move
    if (e.first.find("running_") != std::string::npos) {
      ++idx;
      continue;
    }
    CHECK(e.second.data() == before[idx]);
    ++idx;
  }
  CHECK(p.teacher.feature_calls == 2);  // distillation was active

  // weight zero: the teacher is never consulted
  PipelineConfig cfg2 = tiny_config();
  cfg2.w_distill = 0.0;
  cfg2.steps = 2;
  cfg2.lr = 0.01;
  Pipeline p2 = build_pipeline(cfg2);
  train_pipeline(p2, nullptr);
  CHECK(p2.teacher.feature_calls == 0);
}

TEST_CASE("training aborts with diagnostics when the loss turns non-finite") {
  PipelineConfig cfg = tiny_config();
  cfg.steps = 1;
  Pipeline p = build_pipeline(cfg);
  // poison one trunk weight
  for (auto& e : p.reg.entries()) {
    if (e.first.rfind("lidar", 0) == 0) {
      const_cast<Tensor&>(e.second).data()[0] = std::nan("");
      break;
    }
  }
  bool threw = false;
  try {
    train_pipeline(p, nullptr);
  } catch (const InvalidInputError& e) {
    threw = true;
    const std::string msg = e.what();
    CHECK(msg.find("step 0") != std::string::npos);
    CHECK(msg.find("ce=") != std::string::npos);
  }
  CHECK(threw);
}

TEST_CASE("training decreases the loss and logs parse as key=value") {
  PipelineConfig cfg = tiny_config();
  cfg.steps = 30;
  cfg.lr = 0.05;
  Pipeline p = build_pipeline(cfg);
  std::ostringstream log;
  TrainResult r = train_pipeline(p, &log);
  REQUIRE(r.losses.size() == 30);
  CHECK(r.losses.back().total < r.losses.front().total);

  // every line is step=N loss=... ce=... distill=... point=...
  std::istringstream lines(log.str());
  std::string line;
  int count = 0;
  while (std::getline(lines, line)) {
    CHECK(line.rfind("step=", 0) == 0);
    CHECK(line.find(" loss=") != std::string::npos);
    CHECK(line.find(" ce=") != std::string::npos);
    CHECK(line.find(" distill=") != std::string::npos);
    CHECK(line.find(" point=") != std::string::npos);
    ++count;
  }
  CHECK(count == 30);
}

TEST_CASE("evaluation reports three metrics and respects the colored-only switch") {
  PipelineConfig cfg = tiny_config();
  cfg.steps = 10;
  Pipeline p = build_pipeline(cfg);
  train_pipeline(p, nullptr);
  EvalResult r = evaluate_pipeline(p, nullptr);
  CHECK(r.scenes == cfg.eval_scenes);
  CHECK(r.has_refined);
  CHECK(r.back_iou.mean >= 0.0);
  CHECK(r.back_iou.mean <= 1.0);
  CHECK(r.knn_iou.mean >= 0.0);
  CHECK(r.refined_iou.mean >= 0.0);
  CHECK(r.back.total() == r.knn.total());
  CHECK(r.back.total() == r.refined.total());

  // colored-only counts at most as many points
  Pipeline p2 = build_pipeline(cfg);
  p2.cfg.colored_only = true;
  EvalResult rc = evaluate_pipeline(p2, nullptr);
  CHECK(rc.back.total() <= r.back.total());
  CHECK(rc.back.total() > 0);
}

TEST_CASE("checkpoints round-trip and partial loads copy only matching entries") {
  PipelineConfig cfg = tiny_config();
  Pipeline p = build_pipeline(cfg);
  const std::string path = temp_path("ckpt.rfw");
  write_checkpoint(path, p.reg);

  // full reload into a differently seeded clone: outputs match bitwise
  PipelineConfig cfg2 = cfg;
  cfg2.seed = 999;
  Pipeline q = build_pipeline(cfg2);
  load_checkpoint(path, q.reg);
  SceneBatch batch = prepare_scene(cfg, train_scene_seed(cfg, 1));
  ForwardOut a = forward_pipeline(p, batch, false);
  ForwardOut b = forward_pipeline(q, batch, false);
  for (std::size_t i = 0; i < a.rv_logits.data().size(); ++i)
    CHECK(a.rv_logits.data()[i] == b.rv_logits.data()[i]);

  // partial: a refinement-free trunk finds its entries inside the full file
  PipelineConfig trunk_cfg = cfg;
  trunk_cfg.use_refine = false;
  trunk_cfg.seed = 4242;
  Pipeline trunk = build_pipeline(trunk_cfg);
  const std::size_t copied = load_matching_checkpoint(path, trunk.reg);
  CHECK(copied == trunk.reg.entries().size());
  const Tensor* head_src = p.reg.find("head.w0");
  const Tensor* head_dst = trunk.reg.find("head.w0");
  REQUIRE(head_src != nullptr);
  REQUIRE(head_dst != nullptr);
  CHECK(head_src->data() == head_dst->data());

  std::remove(path.c_str());
}

TEST_CASE("benchmark stage medians account for the measured total") {
  PipelineConfig cfg = tiny_config();
  Pipeline p = build_pipeline(cfg);
  BenchReport r = benchmark_pipeline(p, 5, 1);
  CHECK(r.trials == 5);
  CHECK(r.projection > 0.0);
  CHECK(r.encoders > 0.0);
  CHECK(r.decoder > 0.0);
  CHECK(r.grid_refine > 0.0);
  CHECK(r.point_refine > 0.0);
  CHECK(r.total > 0.0);
  // the stage breakdown explains the total within 10%
  CHECK(r.stage_sum >= 0.9 * r.total);
  CHECK(r.stage_sum <= 1.1 * r.total);
  CHECK_THROWS_AS(benchmark_pipeline(p, 0, 1), ConfigError);
}

TEST_CASE("train and eval summaries are deterministic for a fixed seed") {
  PipelineConfig cfg = tiny_config();
  cfg.steps = 4;
  cfg.deterministic = true;

  auto run = [&](const std::string& tag) {
    Pipeline p = build_pipeline(cfg);
    TrainResult tr = train_pipeline(p, nullptr);
    const std::string ckpt = temp_path("det_" + tag + ".rfw");
    write_checkpoint(ckpt, p.reg);
    write_train_summary(temp_path("det_train_" + tag + ".json"), cfg, tr, ckpt);
    EvalResult ev = evaluate_pipeline(p, nullptr);
    write_eval_summary(temp_path("det_eval_" + tag + ".json"), cfg, ev);
  };
  run("a");
  run("b");

  CHECK(slurp(temp_path("det_train_a.json")) == slurp(temp_path("det_train_b.json")));
  CHECK(slurp(temp_path("det_eval_a.json")) == slurp(temp_path("det_eval_b.json")));
  CHECK(slurp(temp_path("det_a.rfw")) == slurp(temp_path("det_b.rfw")));
  for (const char* f : {"det_train_a.json", "det_train_b.json", "det_eval_a.json",
                        "det_eval_b.json", "det_a.rfw", "det_b.rfw"})
    std::remove(temp_path(f).c_str());
}

TEST_CASE("ablation rungs build distinct networks that all run") {
  PipelineConfig cfg = tiny_config();
  cfg.steps = 1;

  PipelineConfig base = cfg;
  base.use_camera = false;
  base.use_cff = false;
  base.use_refine = false;
  PipelineConfig dist = cfg;
  dist.use_cff = false;
  dist.use_refine = false;
  PipelineConfig fused = cfg;
  fused.use_refine = false;

  Pipeline pb = build_pipeline(base);
  Pipeline pd = build_pipeline(dist);
  Pipeline pf = build_pipeline(fused);
  Pipeline pr = build_pipeline(cfg);
  CHECK(pb.reg.entries().size() < pd.reg.entries().size());
  CHECK(pd.reg.entries().size() < pf.reg.entries().size());
  CHECK(pf.reg.entries().size() < pr.reg.entries().size());

  for (Pipeline* p : {&pb, &pd, &pf, &pr}) {
    train_pipeline(*p, nullptr);
    EvalResult r = evaluate_pipeline(*p, nullptr);
    CHECK(r.back.total() > 0);
  }
}
