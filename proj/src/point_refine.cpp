#include "rangefuse/point_refine.hpp"

#include <algorithm>
#include <cmath>

#include "rangefuse/errors.hpp"

namespace rangefuse {

void RefineConfig::validate() const {
  if (window < 1 || window % 2 == 0)
    throw ConfigError("refine window must be odd and positive, got " + std::to_string(window));
  if (point_window < 1 || point_window % 2 == 0)
    throw ConfigError("refine point_window must be odd and positive, got " +
                      std::to_string(point_window));
  if (k < 1 || k > window * window)
    throw ConfigError("refine k must lie in [1, window^2], got " + std::to_string(k));
  if (point_k < 1 || point_k > point_window * point_window)
    throw ConfigError("refine point_k must lie in [1, point_window^2]");
  if (lambda < 0.0) throw ConfigError("refine lambda must be non-negative");
}

namespace {

struct Ranked {
  double d;
  int v, u;
};

bool ranked_less(const Ranked& a, const Ranked& b) {
  if (a.d != b.d) return a.d < b.d;
  if (a.v != b.v) return a.v < b.v;
  return a.u < b.u;
}

}  // namespace

NeighborLists select_neighbors(const Tensor& probs, const RangeImage& ri,
                               const RefineConfig& cfg) {
  cfg.validate();
  const auto& shape = probs.shape();
  if (shape.size() != 3 || shape[1] != ri.height || shape[2] != ri.width)
    throw DimensionError("select_neighbors: probabilities must be [C,H,W] matching the range image");
  const int C = shape[0];
  if (C < 2) throw ConfigError("select_neighbors needs at least two classes");

  const int H = ri.height, W = ri.width;
  const std::size_t hw = static_cast<std::size_t>(H) * W;
  const double* p = probs.data().data();
  const int half = cfg.window / 2;

  NeighborLists nb;
  std::vector<Ranked> sem, geo;
  sem.reserve(static_cast<std::size_t>(cfg.window) * cfg.window);
  geo.reserve(sem.capacity());

  for (int cv = 0; cv < H; ++cv) {
    for (int cu = 0; cu < W; ++cu) {
      const std::size_t cat = static_cast<std::size_t>(cv) * W + cu;
      if (!ri.mask[cat]) continue;
      const int seg = static_cast<int>(nb.centers.size());
      nb.centers.push_back(static_cast<int>(cat));

      sem.clear();
      geo.clear();
      for (int v = std::max(0, cv - half); v <= std::min(H - 1, cv + half); ++v) {
        for (int u = std::max(0, cu - half); u <= std::min(W - 1, cu + half); ++u) {
          const std::size_t at = static_cast<std::size_t>(v) * W + u;
          if (!ri.mask[at]) continue;
          nb.psi_rows.push_back(static_cast<int>(at));
          nb.psi_seg.push_back(seg);
          double ds = 0.0;
          for (int c = 0; c < C; ++c)
            ds += std::abs(p[static_cast<std::size_t>(c) * hw + at] -
                           p[static_cast<std::size_t>(c) * hw + cat]);
          sem.push_back({ds, v, u});
          geo.push_back({std::abs(ri.range[at] - ri.range[cat]) +
                             std::abs(ri.remission[at] - ri.remission[cat]),
                         v, u});
        }
      }
      const std::size_t keep = std::min<std::size_t>(static_cast<std::size_t>(cfg.k), sem.size());
      std::partial_sort(sem.begin(), sem.begin() + keep, sem.end(), ranked_less);
      std::partial_sort(geo.begin(), geo.begin() + keep, geo.end(), ranked_less);
      for (std::size_t j = 0; j < keep; ++j) {
        nb.sem_rows.push_back(sem[j].v * W + sem[j].u);
        nb.sem_seg.push_back(seg);
        nb.geo_rows.push_back(geo[j].v * W + geo[j].u);
        nb.geo_seg.push_back(seg);
      }
    }
  }
  return nb;
}

Tensor mean_confidence(const Tensor& probs, const NeighborLists& nb) {
  const int C = probs.dim(0);
  if (C < 2) throw ConfigError("mean_confidence needs at least two classes");
  if (nb.centers.empty()) throw InvalidInputError("mean_confidence: no centers");

  Tensor rows = chw_to_rows(xlogx(probs));                     // [HW, C]
  Tensor ones = Tensor::full({C, 1}, 1.0);
  Tensor neg_ent = matmul(rows, ones);                         // [HW, 1], sum_c p ln p
  Tensor conf = add_scalar(mul_scalar(neg_ent, 1.0 / std::log(static_cast<double>(C))), 1.0);
  Tensor gathered = gather_rows(conf, nb.psi_rows);
  return segment_mean(gathered, nb.psi_seg, static_cast<int>(nb.centers.size()));
}

Tensor aggregate_rows(const Tensor& values, const Tensor& logits, const std::vector<int>& seg,
                      int num_segments) {
  if (values.rank() != 2 || logits.rank() != 2 || logits.dim(1) != 1 ||
      values.dim(0) != logits.dim(0))
    throw DimensionError("aggregate_rows expects values [R,C] and logits [R,1]");
  Tensor w = segment_softmax(logits, seg, num_segments);  // [R,1]
  return segment_sum(mul(values, w), seg, num_segments);
}

BranchParams::BranchParams(Rng& rng, int in_dim, int hidden, int out_dim) {
  pfe = make_mlp(rng, {in_dim, hidden}, Activation::leaky_relu, Activation::leaky_relu);
  value = make_mlp(rng, {3 * hidden, out_dim});
  logit = make_mlp(rng, {3 * hidden, 1});
  // zero value head: the correction starts silent and grows with training
  std::fill(value.weights.back().data().begin(), value.weights.back().data().end(), 0.0);
}

Tensor BranchParams::delta(const Tensor& rows, const std::vector<int>& seg, int num_segments) {
  Tensor h = apply_mlp(pfe, rows);  // [R, hidden]
  Tensor smax = gather_rows(segment_max(h, seg, num_segments), seg);
  Tensor smean = gather_rows(segment_mean(h, seg, num_segments), seg);
  Tensor g = concat({h, smax, smean}, 1);  // [R, 3*hidden]
  return aggregate_rows(apply_mlp(value, g), apply_mlp(logit, g), seg, num_segments);
}

void BranchParams::register_into(ParamRegistry& reg, const std::string& prefix) {
  reg.add_layer(prefix + ".pfe", pfe);
  reg.add_layer(prefix + ".value", value);
  reg.add_layer(prefix + ".logit", logit);
}

GridRefiner::GridRefiner(Rng& rng, int feat_c, int class_c, int hidden)
    : feat_channels(feat_c), class_channels(class_c) {
  sem = BranchParams(rng, feat_c + class_c, hidden, feat_c);
  geo = BranchParams(rng, feat_c + 2, hidden, feat_c);
  post = ConvBlock(rng, feat_c, feat_c, 3);
}

Tensor GridRefiner::apply(const Tensor& feats, const Tensor& probs, const RangeImage& ri,
                          const RefineConfig& cfg, bool training) {
  if (feats.rank() != 3 || feats.dim(0) != feat_channels)
    throw DimensionError("grid refiner expects [" + std::to_string(feat_channels) + ",H,W] features");
  if (probs.dim(0) != class_channels)
    throw DimensionError("grid refiner expects [" + std::to_string(class_channels) +
                         ",H,W] probabilities");
  const int H = feats.dim(1), W = feats.dim(2);
  const std::size_t hw = static_cast<std::size_t>(H) * W;

  NeighborLists nb = select_neighbors(probs, ri, cfg);
  if (nb.centers.empty()) return feats;
  const int S = static_cast<int>(nb.centers.size());

  Tensor frows = chw_to_rows(feats);
  Tensor prows = chw_to_rows(probs);

  Tensor sem_in = concat({gather_rows(frows, nb.sem_rows), gather_rows(prows, nb.sem_rows)}, 1);

  // geometric descriptors are plain data: range/remission offsets to the center
  Tensor geo_desc = Tensor::zeros({static_cast<int>(nb.geo_rows.size()), 2});
  for (std::size_t r = 0; r < nb.geo_rows.size(); ++r) {
    const auto at = static_cast<std::size_t>(nb.geo_rows[r]);
    const auto cat = static_cast<std::size_t>(nb.centers[static_cast<std::size_t>(nb.geo_seg[r])]);
    geo_desc.data()[r * 2 + 0] = ri.range[at] - ri.range[cat];
    geo_desc.data()[r * 2 + 1] = ri.remission[at] - ri.remission[cat];
  }
  Tensor geo_in = concat({gather_rows(frows, nb.geo_rows), geo_desc}, 1);

  Tensor delta_sem = sem.delta(sem_in, nb.sem_seg, S);  // [S, Cf]
  Tensor delta_geo = geo.delta(geo_in, nb.geo_seg, S);

  // confident neighborhoods trust the semantic correction
  Tensor phi = mean_confidence(probs, nb);                                  // [S,1]
  Tensor w = exp_(mul_scalar(add_scalar(neg(phi), 1.0), -cfg.lambda));      // e^{-l(1-phi)}
  Tensor delta = add(mul(delta_geo, add_scalar(neg(w), 1.0)), mul(delta_sem, w));

  Tensor delta_map = rows_to_chw(scatter_rows(delta, nb.centers, static_cast<int>(hw)), H, W);
  Tensor refined = post.apply(add(feats, delta_map), training);
  return where_mask(ri.mask, refined, feats);
}

void GridRefiner::register_into(ParamRegistry& reg, const std::string& prefix) {
  sem.register_into(reg, prefix + ".sem");
  geo.register_into(reg, prefix + ".geo");
  post.register_into(reg, prefix + ".post");
}

// ---- point pass ---------------------------------------------------------------

void CylGrid::validate() const {
  if (n_rho < 1 || n_phi < 1 || n_z < 1) throw ConfigError("voxel grid needs positive bin counts");
  if (rho_max <= 0.0) throw ConfigError("voxel grid needs rho_max > 0");
  if (!(z_max > z_min)) throw ConfigError("voxel grid needs z_max > z_min");
}

std::vector<int> cylindrical_voxelize(const PointCloud& cloud, const CylGrid& grid) {
  grid.validate();
  const std::size_t n = cloud.size();
  std::vector<int> cell(n, 0);
  for (std::size_t i = 0; i < n; ++i) {
    const double x = cloud.xyz[i * 3 + 0], y = cloud.xyz[i * 3 + 1], z = cloud.xyz[i * 3 + 2];
    const double rho = std::sqrt(x * x + y * y);
    const double phi = std::atan2(y, x);  // (-pi, pi]
    int br = static_cast<int>(std::floor(rho / grid.rho_max * grid.n_rho));
    int bp = static_cast<int>(std::floor((phi + M_PI) / (2.0 * M_PI) * grid.n_phi));
    int bz = static_cast<int>(std::floor((z - grid.z_min) / (grid.z_max - grid.z_min) * grid.n_z));
    br = std::clamp(br, 0, grid.n_rho - 1);
    bp = std::clamp(bp, 0, grid.n_phi - 1);
    bz = std::clamp(bz, 0, grid.n_z - 1);
    cell[i] = (br * grid.n_phi + bp) * grid.n_z + bz;
  }
  return cell;
}

std::vector<int> range_knn(const RangeImage& ri, const PointCloud& cloud, int k, int window) {
  if (window < 1 || window % 2 == 0)
    throw ConfigError("range_knn window must be odd and positive");
  if (k < 1 || k > window * window) throw ConfigError("range_knn k must lie in [1, window^2]");
  if (cloud.size() != ri.pixel_u.size())
    throw ContractError("range_knn: cloud size does not match the projected cloud");

  const int half = window / 2;
  std::vector<int> out(cloud.size() * static_cast<std::size_t>(k), -1);
  std::vector<Ranked> cands;
  for (std::size_t i = 0; i < cloud.size(); ++i) {
    const int pu = ri.pixel_u[i], pv = ri.pixel_v[i];
    if (pu < 0) continue;  // origin point: slots stay -1
    const int own = pv * ri.width + pu;
    const double pr = std::sqrt(cloud.xyz[i * 3 + 0] * cloud.xyz[i * 3 + 0] +
                                cloud.xyz[i * 3 + 1] * cloud.xyz[i * 3 + 1] +
                                cloud.xyz[i * 3 + 2] * cloud.xyz[i * 3 + 2]);
    cands.clear();
    for (int v = std::max(0, pv - half); v <= std::min(ri.height - 1, pv + half); ++v) {
      for (int u = std::max(0, pu - half); u <= std::min(ri.width - 1, pu + half); ++u) {
        const std::size_t at = static_cast<std::size_t>(v) * ri.width + u;
        if (!ri.mask[at]) continue;
        if (static_cast<int>(at) == own) continue;  // the own pixel is forced to rank first
        cands.push_back({std::abs(ri.range[at] - pr), v, u});
      }
    }
    const std::size_t rest = std::min<std::size_t>(static_cast<std::size_t>(k - 1), cands.size());
    std::partial_sort(cands.begin(), cands.begin() + rest, cands.end(), ranked_less);
    int* slot = out.data() + i * static_cast<std::size_t>(k);
    slot[0] = own;
    for (std::size_t j = 0; j < static_cast<std::size_t>(k - 1); ++j)
      slot[j + 1] = j < rest ? cands[j].v * ri.width + cands[j].u : own;  // pad with the own pixel
  }
  return out;
}

VoxelMixParams::VoxelMixParams(Rng& rng, int channels) {
  mlp_a = make_mlp(rng, {channels, channels}, Activation::leaky_relu, Activation::leaky_relu);
  mlp_b = make_mlp(rng, {channels, channels});
  update = make_mlp(rng, {channels, channels});
}

Tensor VoxelMixParams::apply(const Tensor& feats, const std::vector<int>& cell, int num_cells) {
  Tensor m = segment_mean(feats, cell, num_cells);
  m = apply_mlp(mlp_b, apply_mlp(mlp_a, m));
  return apply_mlp(update, add(feats, gather_rows(m, cell)));
}

void VoxelMixParams::register_into(ParamRegistry& reg, const std::string& prefix) {
  reg.add_layer(prefix + ".mlp_a", mlp_a);
  reg.add_layer(prefix + ".mlp_b", mlp_b);
  reg.add_layer(prefix + ".update", update);
}

PointRefiner::PointRefiner(Rng& rng, int class_c, int hidden_)
    : class_channels(class_c), hidden(hidden_) {
  pfe = make_mlp(rng, {class_c + 8, hidden_}, Activation::leaky_relu, Activation::leaky_relu);
  coarse = VoxelMixParams(rng, hidden_);
  fine = VoxelMixParams(rng, hidden_);
  classifier = make_mlp(rng, {hidden_, hidden_, class_c});
  // zero the head so the pass starts as an exact re-statement of the
  // back-projected probabilities
  std::fill(classifier.weights[1].data().begin(), classifier.weights[1].data().end(), 0.0);
  std::fill(classifier.biases[1].data().begin(), classifier.biases[1].data().end(), 0.0);
}

Tensor PointRefiner::apply(const RangeImage& ri, const PointCloud& cloud,
                           const Tensor& pixel_probs, const RefineConfig& cfg) {
  cfg.validate();
  if (pixel_probs.rank() != 3 || pixel_probs.dim(0) != class_channels ||
      pixel_probs.dim(1) != ri.height || pixel_probs.dim(2) != ri.width)
    throw DimensionError("point refiner expects [" + std::to_string(class_channels) +
                         ",H,W] probabilities matching the range image");
  const std::size_t n = cloud.size();
  if (n != ri.pixel_u.size())
    throw ContractError("point refiner: cloud size does not match the projected cloud");
  const int K = cfg.point_k;

  std::vector<int> knn = range_knn(ri, cloud, K, cfg.point_window);
  std::vector<std::size_t> proj;  // points with a pixel
  proj.reserve(n);
  for (std::size_t i = 0; i < n; ++i)
    if (ri.pixel_u[i] >= 0) proj.push_back(i);
  const std::size_t m = proj.size();
  if (m == 0) {
    // nothing projected: every point gets the uniform distribution
    return Tensor::full({static_cast<int>(n), class_channels}, 1.0 / class_channels);
  }

  std::vector<int> row_px(m * static_cast<std::size_t>(K));
  std::vector<int> own_px(m);
  for (std::size_t r = 0; r < m; ++r) {
    const std::size_t i = proj[r];
    own_px[r] = ri.pixel_v[i] * ri.width + ri.pixel_u[i];
    for (int j = 0; j < K; ++j) row_px[r * K + j] = knn[i * static_cast<std::size_t>(K) + j];
  }

  // neighbor descriptors: pixel geometry channels plus the point offset
  Tensor geom = Tensor::zeros({static_cast<int>(m * K), 8});
  for (std::size_t r = 0; r < m; ++r) {
    const std::size_t i = proj[r];
    for (int j = 0; j < K; ++j) {
      const auto at = static_cast<std::size_t>(row_px[r * K + j]);
      double* g = geom.data().data() + (r * K + j) * 8;
      g[0] = ri.x[at];
      g[1] = ri.y[at];
      g[2] = ri.z[at];
      g[3] = ri.remission[at];
      g[4] = ri.range[at];
      g[5] = cloud.xyz[i * 3 + 0] - ri.x[at];
      g[6] = cloud.xyz[i * 3 + 1] - ri.y[at];
      g[7] = cloud.xyz[i * 3 + 2] - ri.z[at];
    }
  }

  Tensor prows = chw_to_rows(pixel_probs);
  Tensor input = concat({gather_rows(prows, row_px), geom}, 1);
  Tensor h = apply_mlp(pfe, input);  // [m*K, hidden]

  std::vector<int> vox_coarse_all = cylindrical_voxelize(cloud, coarse_grid);
  std::vector<int> vox_fine_all = cylindrical_voxelize(cloud, fine_grid);
  std::vector<int> vox_coarse(m), vox_fine(m);
  for (std::size_t r = 0; r < m; ++r) {
    vox_coarse[r] = vox_coarse_all[proj[r]];
    vox_fine[r] = vox_fine_all[proj[r]];
  }

  Tensor branch_sum;
  std::vector<int> branch_idx(m);
  for (int j = 0; j < K; ++j) {
    for (std::size_t r = 0; r < m; ++r) branch_idx[r] = static_cast<int>(r) * K + j;
    Tensor hb = gather_rows(h, branch_idx);  // [m, hidden]
    hb = coarse.apply(hb, vox_coarse, coarse_grid.cells());
    hb = fine.apply(hb, vox_fine, fine_grid.cells());
    branch_sum = j == 0 ? hb : add(branch_sum, hb);
  }
  Tensor avg = mul_scalar(branch_sum, 1.0 / K);

  // residual head over the back-projected class scores
  Tensor base = gather_rows(prows, own_px);
  Tensor logits = add(apply_mlp(classifier, avg), log_(add_scalar(base, 1e-12)));
  Tensor refined = softmax_rows(logits);  // [m, C]

  if (m == n) return refined;
  // scatter the refined rows into an [n, C] table; origin points get uniform
  std::vector<int> dest(m);
  for (std::size_t r = 0; r < m; ++r) dest[r] = static_cast<int>(proj[r]);
  Tensor table = scatter_rows(refined, dest, static_cast<int>(n));
  Tensor fill = Tensor::zeros({static_cast<int>(n), class_channels});
  for (std::size_t i = 0; i < n; ++i)
    if (ri.pixel_u[i] < 0)
      for (int c = 0; c < class_channels; ++c)
        fill.data()[i * static_cast<std::size_t>(class_channels) + c] = 1.0 / class_channels;
  return add(table, fill);
}

void PointRefiner::register_into(ParamRegistry& reg, const std::string& prefix) {
  reg.add_layer(prefix + ".pfe", pfe);
  coarse.register_into(reg, prefix + ".coarse");
  fine.register_into(reg, prefix + ".fine");
  reg.add_layer(prefix + ".classifier", classifier);
}

}  // namespace rangefuse
