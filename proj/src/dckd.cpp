#include "rangefuse/dckd.hpp"

#include <algorithm>

#include "rangefuse/errors.hpp"

namespace rangefuse {

TeacherEncoder::TeacherEncoder(std::uint64_t seed, int in_channels_,
                               const std::vector<int>& stage_channels)
    : in_channels(in_channels_) {
  Rng rng(seed);
  enc = Encoder(rng, in_channels_, stage_channels);
  ParamRegistry reg;
  enc.register_into(reg, "teacher");
  for (const auto& [name, t] : reg.entries()) {
    (void)name;
    Tensor handle = t;
    handle.set_requires_grad(false);
  }
}

std::vector<Tensor> TeacherEncoder::features(const Tensor& image_chw) {
  if (image_chw.rank() != 3 || image_chw.dim(0) != in_channels)
    throw DimensionError("teacher expects a [" + std::to_string(in_channels) + ",H,W] image");
  ++feature_calls;
  NoGradScope frozen;
  return enc.forward(image_chw, /*training=*/false);
}

Tensor teacher_to_rv(const Tensor& stage_feat, const RangeImage& ri, const PointCloud& painted,
                     int cam_width, int cam_height) {
  if (stage_feat.rank() != 3) throw DimensionError("teacher_to_rv expects a [C,h,w] stage feature");
  if (ri.rgb_mask.empty()) throw ContractError("teacher_to_rv: range image has no RGB mask");
  if (painted.cam_u.size() != painted.size())
    throw ContractError("teacher_to_rv: point cloud has no camera pixel coordinates");

  NoGradScope frozen;
  Tensor full = (stage_feat.dim(1) == cam_height && stage_feat.dim(2) == cam_width)
                    ? stage_feat
                    : upsample_bilinear(stage_feat, cam_height, cam_width);
  const int C = full.dim(0);
  const std::size_t cam_hw = static_cast<std::size_t>(cam_height) * cam_width;
  const std::size_t rv_hw = static_cast<std::size_t>(ri.height) * ri.width;

  Tensor out = Tensor::zeros({C, ri.height, ri.width});
  const auto& src = full.data();
  auto& dst = out.data();
  for (std::size_t at = 0; at < rv_hw; ++at) {
    if (!ri.rgb_mask[at]) continue;
    const auto idx = static_cast<std::size_t>(ri.index_map[at]);
    const int cu = painted.cam_u[idx];
    const int cv = painted.cam_v[idx];
    if (cu < 0 || cu >= cam_width || cv < 0 || cv >= cam_height)
      throw ContractError("teacher_to_rv: colored point has an out-of-frame camera pixel");
    const std::size_t src_at = static_cast<std::size_t>(cv) * cam_width + cu;
    for (int c = 0; c < C; ++c)
      dst[static_cast<std::size_t>(c) * rv_hw + at] = src[static_cast<std::size_t>(c) * cam_hw + src_at];
  }
  return out;
}

StudentAdapter::StudentAdapter(Rng& rng, int student_channels, int teacher_channels) {
  conv = make_conv(rng, student_channels, teacher_channels, 1);
  bn = make_batchnorm(teacher_channels);
}

Tensor StudentAdapter::apply(const Tensor& stage_feat, int out_h, int out_w, bool training) {
  Tensor y = apply_conv2d(conv, stage_feat);
  y = leaky_relu(y, slope);
  y = apply_batchnorm(bn, y, training);
  if (y.dim(1) == out_h && y.dim(2) == out_w) return y;
  return upsample_bilinear(y, out_h, out_w);
}

void StudentAdapter::register_into(ParamRegistry& reg, const std::string& prefix) {
  reg.add_layer(prefix + ".conv", conv);
  reg.add_layer(prefix + ".bn", bn);
}

Tensor distill_loss(const std::vector<Tensor>& teacher_rv, const std::vector<Tensor>& student_rv,
                    const std::vector<std::uint8_t>& rgb_mask) {
  if (teacher_rv.empty() || teacher_rv.size() != student_rv.size())
    throw ContractError("distill_loss: teacher and student stage lists must match and be non-empty");
  const int H = teacher_rv[0].dim(1), W = teacher_rv[0].dim(2);
  const std::size_t hw = static_cast<std::size_t>(H) * W;
  if (rgb_mask.size() != hw) throw DimensionError("distill_loss: mask size does not match features");

  std::size_t n_masked = 0;
  for (auto m : rgb_mask) n_masked += m;
  if (n_masked == 0) return Tensor::scalar(0.0);

  Tensor mask_t = Tensor::zeros({1, H, W});
  for (std::size_t i = 0; i < hw; ++i) mask_t.data()[i] = rgb_mask[i] ? 1.0 : 0.0;

  Tensor total = Tensor::scalar(0.0);
  for (std::size_t k = 0; k < teacher_rv.size(); ++k) {
    const Tensor& t = teacher_rv[k];
    const Tensor& s = student_rv[k];
    if (t.shape() != s.shape() || t.dim(1) != H || t.dim(2) != W)
      throw DimensionError("distill_loss: stage " + std::to_string(k) +
                           " teacher/student shapes disagree");
    Tensor sq = square(sub(t, s));
    Tensor masked = mul(sq, mask_t);
    const double denom = static_cast<double>(n_masked) * t.dim(0);
    total = add(total, mul_scalar(sum_all(masked), 1.0 / denom));
  }
  return mul_scalar(total, 1.0 / static_cast<double>(teacher_rv.size()));
}

Tensor dckd_loss(TeacherEncoder& teacher, const Tensor& camera_image,
                 const std::vector<Tensor>& student_stages, std::vector<StudentAdapter>& adapters,
                 const RangeImage& ri, const PointCloud& painted, bool training) {
  if (student_stages.size() != teacher.enc.stages.size() ||
      adapters.size() != student_stages.size())
    throw ContractError("dckd_loss: stage counts of teacher, student, and adapters must agree");
  const int cam_h = camera_image.dim(1), cam_w = camera_image.dim(2);

  std::vector<Tensor> teacher_feats = teacher.features(camera_image);
  std::vector<Tensor> teacher_rv(teacher_feats.size());
  std::vector<Tensor> student_rv(student_stages.size());
  for (std::size_t k = 0; k < teacher_feats.size(); ++k) {
    teacher_rv[k] = teacher_to_rv(teacher_feats[k], ri, painted, cam_w, cam_h);
    student_rv[k] = adapters[k].apply(student_stages[k], ri.height, ri.width, training);
  }
  return distill_loss(teacher_rv, student_rv, ri.rgb_mask);
}

}  // namespace rangefuse
