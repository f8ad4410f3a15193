#pragma once

#include <cstdint>
#include <vector>

#include "rangefuse/encoder.hpp"
#include "rangefuse/rv.hpp"

// Cross-modal feature distillation: a frozen camera-image encoder provides
// per-stage targets that are geometrically rearranged onto the range view
// through each surviving point's camera pixel, so the comparison with the
// student happens on the LiDAR grid rather than the distorted image grid.

namespace rangefuse {

// Frozen encoder over the camera image. Weights come from the seed alone and
// never receive gradients; feature_calls counts forward passes so inference
// paths can prove they skipped it.
struct TeacherEncoder {
  Encoder enc;
  int in_channels = 3;
  mutable int feature_calls = 0;

  TeacherEncoder() = default;
  TeacherEncoder(std::uint64_t seed, int in_channels, const std::vector<int>& stage_channels);

  // Eval-mode per-stage features, never taped.
  std::vector<Tensor> features(const Tensor& image_chw);
};

// Upsamples a camera-grid stage feature to full camera resolution, then pulls
// the column at each surviving point's camera pixel into that point's range
// image cell. Pixels without a colored survivor stay zero.
Tensor teacher_to_rv(const Tensor& stage_feat, const RangeImage& ri, const PointCloud& painted,
                     int cam_width, int cam_height);

// conv1x1 -> leaky-relu -> batchnorm -> bilinear upsample: maps one student
// stage onto the teacher's channel width at full range-view resolution.
struct StudentAdapter {
  LayerParams conv;
  LayerParams bn;
  double slope = 0.01;

  StudentAdapter() = default;
  StudentAdapter(Rng& rng, int student_channels, int teacher_channels);

  Tensor apply(const Tensor& stage_feat, int out_h, int out_w, bool training);
  void register_into(ParamRegistry& reg, const std::string& prefix);
};

// Mean over stages of the mean over RGB-masked pixels and channels of the
// squared distance between teacher and adapted student features, so the scale
// stays comparable across stage widths. Returns an exact zero when no pixel
// is masked.
Tensor distill_loss(const std::vector<Tensor>& teacher_rv, const std::vector<Tensor>& student_rv,
                    const std::vector<std::uint8_t>& rgb_mask);

// Full path for one scene: teacher features -> range-view targets, student
// stages -> adapters, then the masked alignment loss.
Tensor dckd_loss(TeacherEncoder& teacher, const Tensor& camera_image,
                 const std::vector<Tensor>& student_stages, std::vector<StudentAdapter>& adapters,
                 const RangeImage& ri, const PointCloud& painted, bool training);

}  // namespace rangefuse
