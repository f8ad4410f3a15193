#pragma once

#include <cstdint>
#include <iosfwd>
#include <string>
#include <vector>

#include "rangefuse/cff.hpp"
#include "rangefuse/dckd.hpp"
#include "rangefuse/point_refine.hpp"
#include "rangefuse/rv.hpp"

namespace rangefuse {

// Everything a run needs, loadable from a key=value config file. The three
// use_* switches form the ablation ladder: geometry-only network, + camera
// branch with feature distillation, + gated fusion, + the two refinement
// passes.
struct PipelineConfig {
  // range view grid
  int rv_height = 64, rv_width = 2048;
  double fov_up_deg = 3.0, fov_down_deg = -25.0;

  // synthetic scenes
  std::uint64_t seed = 1;
  int beams = 32, azimuth_steps = 1024;
  double noise_sigma = 0.01;
  int cam_width = 192, cam_height = 96;
  double cam_focal = 110.0;
  int train_scenes = 200, eval_scenes = 50;

  // network
  std::vector<int> lidar_widths{32, 64, 128, 256};
  std::vector<int> teacher_widths;  // empty -> twice the lidar widths
  std::uint64_t teacher_seed = 9001;
  MLUStrategy mlu = MLUStrategy::combined;
  int fusion_grid_h = 8, fusion_grid_w = 64;  // pooled token grid inside the gates
  bool use_camera = true;  // student branch + distillation
  bool use_cff = true;     // gated fusion instead of plain addition
  bool use_refine = true;  // grid + point refinement passes
  int num_classes = kSynthClassCount;
  int ignore_id = 0;  // void: never emitted as a point
  int hidden = 16;    // refinement MLP width

  // label transfer
  KnnConfig knn;
  RefineConfig refine;

  // losses and optimizer
  double w_ce = 1.0, w_distill = 1.0, w_point = 1.0;
  double lr = 0.05, momentum = 0.9;
  int steps = 200;

  bool deterministic = false;
  bool colored_only = false;  // metrics restricted to camera-covered points

  void validate() const;
  RVConfig rv_config() const;
  SceneSpec scene_spec(std::uint64_t scene_seed) const;
  std::vector<int> teacher_channels() const;  // resolved teacher widths
};

// key=value lines, '#' comments; unknown keys are errors.
PipelineConfig parse_pipeline_config(std::istream& in);
PipelineConfig load_pipeline_config(const std::string& path);
void set_config_value(PipelineConfig& cfg, const std::string& key, const std::string& value);

// deterministic per-scene seeds; eval scenes never overlap train scenes
std::uint64_t train_scene_seed(const PipelineConfig& cfg, int index);
std::uint64_t eval_scene_seed(const PipelineConfig& cfg, int index);

// ---- metrics -------------------------------------------------------------------

struct ConfusionMatrix {
  int num_classes = 0;
  int ignore_id = -1;
  std::vector<long long> counts;  // C*C, rows = ground truth

  ConfusionMatrix() = default;
  ConfusionMatrix(int num_classes, int ignore_id);
  long long& at(int gt, int pred);
  long long at(int gt, int pred) const;
  long long total() const;
};

// counts accumulated excluding ignore-class ground truth; out-of-range ids error
ConfusionMatrix compute_confusion(const std::vector<int>& preds, const std::vector<int>& gt,
                                  int num_classes, int ignore_id);
void accumulate_confusion(ConfusionMatrix& cm, const std::vector<int>& preds,
                          const std::vector<int>& gt);

struct IouReport {
  std::vector<double> iou;        // per class; 0 for absent classes
  std::vector<bool> present;      // class has a non-empty union
  double mean = 0.0;              // over present classes only
};

// classes with an empty union are excluded from the mean; all absent -> error
IouReport miou(const ConfusionMatrix& cm);

// ---- the assembled network -------------------------------------------------------

struct Pipeline {
  PipelineConfig cfg;
  Encoder lidar_enc;                     // on [5,H,W] geometry
  Encoder cam_enc;                       // on [3,H,W] range-view colors
  FusionModule fusion;
  std::vector<ConvBlock> dec_blocks;     // coarse-to-fine merge blocks
  ConvBlock dec_final;
  LayerParams head;                      // 1x1 conv to class logits
  TeacherEncoder teacher;                // frozen, training only, not checkpointed
  std::vector<StudentAdapter> adapters;  // distillation alignment, per stage
  GridRefiner grid_ref;
  PointRefiner point_ref;
  ParamRegistry reg;                     // every checkpointed tensor
};

Pipeline build_pipeline(const PipelineConfig& cfg);

// one scene turned into network inputs and targets
struct SceneBatch {
  Scene scene;        // cloud painted in place
  RangeImage ri;
  Tensor geom;        // [5,H,W]
  Tensor rgb;         // [3,H,W]
  Tensor cam_img;     // [3,cam_h,cam_w]
  std::vector<int> rv_target;         // H*W survivor labels, 0 where unmasked
  std::vector<std::uint8_t> rv_valid; // supervised pixels
};

SceneBatch prepare_scene(const PipelineConfig& cfg, std::uint64_t scene_seed);

struct ForwardOut {
  Tensor features;     // decoder output [D,H,W] (refined when enabled)
  Tensor rv_logits;    // final head output [C,H,W]
  Tensor base_logits;  // head output before grid refinement
  Tensor point_probs;  // [N,C] when refinement is on, empty otherwise
  std::vector<Tensor> student_stages;  // camera-branch features, distillation input
};

// training=false never touches the teacher
ForwardOut forward_pipeline(Pipeline& p, const SceneBatch& batch, bool training);

struct StepLoss {
  double total = 0.0, ce = 0.0, distill = 0.0, point = 0.0;
};

// one optimizer step on one scene; throws NumericError on non-finite loss
StepLoss train_step(Pipeline& p, const SceneBatch& batch, SgdOptimizer& opt);

struct TrainResult {
  std::vector<StepLoss> losses;
};

// cfg.steps scenes in seeded order, logging "step=... loss=..." lines
TrainResult train_pipeline(Pipeline& p, std::ostream* log);

struct EvalResult {
  ConfusionMatrix back, knn, refined;
  IouReport back_iou, knn_iou, refined_iou;
  int scenes = 0;
  bool has_refined = false;
};

EvalResult evaluate_pipeline(Pipeline& p, std::ostream* log);

// per-stage wall-clock medians over `trials` timed forwards, in milliseconds
struct BenchReport {
  double projection = 0.0, encoders = 0.0, fusion = 0.0, decoder = 0.0;
  double grid_refine = 0.0, point_refine = 0.0;
  double stage_sum = 0.0;  // sum of the stage medians
  double total = 0.0;      // median of whole-forward times
  int trials = 0;
};

BenchReport benchmark_pipeline(Pipeline& p, int trials, int warmup);

// ---- summaries and checkpoints ------------------------------------------------------

// copies every registry entry found in the file; entries missing from the
// file are left untouched (plug-and-play partial loads); shape mismatch errors
std::size_t load_matching_checkpoint(const std::string& path, ParamRegistry& reg);

// FNV-1a over the file bytes, for determinism evidence in summaries
std::uint64_t file_digest(const std::string& path);

void write_train_summary(const std::string& path, const PipelineConfig& cfg,
                         const TrainResult& result, const std::string& checkpoint_path);
void write_eval_summary(const std::string& path, const PipelineConfig& cfg,
                        const EvalResult& result);
void write_bench_summary(const std::string& path, const PipelineConfig& cfg,
                         const BenchReport& report);

}  // namespace rangefuse
