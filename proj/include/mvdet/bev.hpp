#pragma once

#include <algorithm>
#include <cmath>
#include <stdexcept>
#include <vector>

#include "mvdet/autodiff.hpp"
#include "mvdet/geometry.hpp"
#include "mvdet/types.hpp"

namespace mvdet {

/// Perception-range-aligned volumetric grid. W cells span x, H cells span y,
/// D cells span z; the BEV heatmap is the [H, W] slice.
struct BevGridSpec {
  double x_min = -16.0, x_max = 16.0;
  double y_min = -16.0, y_max = 16.0;
  double z_min = -2.0, z_max = 2.0;
  int depth = 4, height = 16, width = 16;  // (D, H, W)

  double cell_x(int ix) const {
    return x_min + (ix + 0.5) * (x_max - x_min) / width;
  }
  double cell_y(int iy) const {
    return y_min + (iy + 0.5) * (y_max - y_min) / height;
  }
  double cell_z(int iz) const {
    return z_min + (iz + 0.5) * (z_max - z_min) / depth;
  }
  int x_to_cell(double x) const {
    const int ix = static_cast<int>(std::floor((x - x_min) / (x_max - x_min) * width));
    return std::clamp(ix, 0, width - 1);
  }
  int y_to_cell(double y) const {
    const int iy = static_cast<int>(std::floor((y - y_min) / (y_max - y_min) * height));
    return std::clamp(iy, 0, height - 1);
  }
  double cell_size_x() const { return (x_max - x_min) / width; }
  double cell_size_y() const { return (y_max - y_min) / height; }
  double z_mid() const { return 0.5 * (z_min + z_max); }

  void validate() const {
    if (x_max <= x_min || y_max <= y_min || z_max <= z_min)
      throw std::invalid_argument("BevGridSpec: non-positive extent");
    if (depth <= 0 || height <= 0 || width <= 0)
      throw std::invalid_argument("BevGridSpec: non-positive resolution");
  }
};

struct Heatmap {
  Tensor values;  // [H, W]
  BevGridSpec spec;
};

/// Maps image-pixel coordinates into feature-map pixels with pixel-center
/// alignment (the standard stride-s convention).
inline double image_to_feat(double px, int image_extent, int feat_extent) {
  const double s = static_cast<double>(feat_extent) / image_extent;
  return (px + 0.5) * s - 0.5;
}

struct GridProjection {
  double u = 0.0, v = 0.0;  // feature-map pixels
  bool valid = false;
};

/// G': every cell center projected through every camera, with validity from
/// the full-resolution image bounds and uv rescaled to feature-map pixels.
struct ProjectedGrid {
  BevGridSpec spec;
  int n_views = 0;
  int feat_w = 0, feat_h = 0;
  // Layout: [cell][view], cell index = (iz*H + iy)*W + ix.
  std::vector<std::vector<GridProjection>> cells;

  std::size_t cell_index(int iz, int iy, int ix) const {
    return (static_cast<std::size_t>(iz) * spec.height + iy) * spec.width + ix;
  }
};

inline ProjectedGrid build_projected_grid(const BevGridSpec& spec,
                                          const CameraRig& rig, int feat_w,
                                          int feat_h) {
  spec.validate();
  if (rig.n_views() < 1) throw std::invalid_argument("rig must have >= 1 view");
  ProjectedGrid g;
  g.spec = spec;
  g.n_views = rig.n_views();
  g.feat_w = feat_w;
  g.feat_h = feat_h;
  g.cells.resize(static_cast<std::size_t>(spec.depth) * spec.height * spec.width);
  for (int iz = 0; iz < spec.depth; ++iz)
    for (int iy = 0; iy < spec.height; ++iy)
      for (int ix = 0; ix < spec.width; ++ix) {
        const Vec3 p{spec.cell_x(ix), spec.cell_y(iy), spec.cell_z(iz)};
        auto& cell = g.cells[g.cell_index(iz, iy, ix)];
        cell.resize(static_cast<std::size_t>(g.n_views));
        for (int n = 0; n < g.n_views; ++n) {
          const Projection pr = project_one(rig.cameras[static_cast<std::size_t>(n)], p);
          auto& gp = cell[static_cast<std::size_t>(n)];
          gp.valid = pr.valid;
          if (pr.valid) {
            gp.u = image_to_feat(pr.u, rig.cameras[static_cast<std::size_t>(n)].width, feat_w);
            gp.v = image_to_feat(pr.v, rig.cameras[static_cast<std::size_t>(n)].height, feat_h);
          }
        }
      }
  return g;
}

namespace detail {

inline void bilinear_accumulate(const Tensor& fmap, double u, double v,
                                double weight, double* out, int C) {
  const int H = fmap.dim(1), W = fmap.dim(2);
  const int x0 = static_cast<int>(std::floor(u));
  const int y0 = static_cast<int>(std::floor(v));
  const double fx = u - x0, fy = v - y0;
  auto texel = [&](int c, int y, int x) -> double {
    if (x < 0 || x >= W || y < 0 || y >= H) return 0.0;
    return fmap.at3(c, y, x);
  };
  for (int c = 0; c < C; ++c)
    out[c] += weight * ((1 - fy) * ((1 - fx) * texel(c, y0, x0) + fx * texel(c, y0, x0 + 1)) +
                        fy * ((1 - fx) * texel(c, y0 + 1, x0) + fx * texel(c, y0 + 1, x0 + 1)));
}

inline void bilinear_scatter(Tensor& grad_map, double u, double v, double weight,
                             const double* g, int C) {
  const int H = grad_map.dim(1), W = grad_map.dim(2);
  const int x0 = static_cast<int>(std::floor(u));
  const int y0 = static_cast<int>(std::floor(v));
  const double fx = u - x0, fy = v - y0;
  auto scatter = [&](int c, int y, int x, double w) {
    if (x < 0 || x >= W || y < 0 || y >= H) return;
    grad_map.at3(c, y, x) += w;
  };
  for (int c = 0; c < C; ++c) {
    const double gc = weight * g[c];
    scatter(c, y0, x0, gc * (1 - fy) * (1 - fx));
    scatter(c, y0, x0 + 1, gc * (1 - fy) * fx);
    scatter(c, y0 + 1, x0, gc * fy * (1 - fx));
    scatter(c, y0 + 1, x0 + 1, gc * fy * fx);
  }
}

}  // namespace detail

/// F_V: per cell, the average of bilinear samples over valid views; zero
/// when no view is valid. Differentiable w.r.t. the feature maps.
inline Var volumetric_sample(const std::vector<Var>& features,
                             const ProjectedGrid& grid) {
  if (static_cast<int>(features.size()) != grid.n_views)
    throw std::invalid_argument("volumetric_sample: feature count != N_view");
  const int C = features[0]->value.dim(0);
  for (const auto& f : features)
    if (f->value.ndim() != 3 || f->value.dim(0) != C)
      throw std::invalid_argument("volumetric_sample: inconsistent maps");
  const int D = grid.spec.depth, H = grid.spec.height, W = grid.spec.width;
  Tensor out({C, D, H, W});
  const std::size_t hw = static_cast<std::size_t>(D) * H * W;
  std::vector<double> buf(static_cast<std::size_t>(C));
  for (int iz = 0; iz < D; ++iz)
    for (int iy = 0; iy < H; ++iy)
      for (int ix = 0; ix < W; ++ix) {
        const auto& cell = grid.cells[grid.cell_index(iz, iy, ix)];
        int n_valid = 0;
        for (const auto& gp : cell) n_valid += gp.valid ? 1 : 0;
        if (n_valid == 0) continue;
        std::fill(buf.begin(), buf.end(), 0.0);
        const double w = 1.0 / n_valid;
        for (int n = 0; n < grid.n_views; ++n)
          if (cell[static_cast<std::size_t>(n)].valid)
            detail::bilinear_accumulate(features[static_cast<std::size_t>(n)]->value,
                                        cell[static_cast<std::size_t>(n)].u,
                                        cell[static_cast<std::size_t>(n)].v, w,
                                        buf.data(), C);
        const std::size_t cell_flat = (static_cast<std::size_t>(iz) * H + iy) * W + ix;
        for (int c = 0; c < C; ++c) out.vec()[c * hw + cell_flat] = buf[static_cast<std::size_t>(c)];
      }
  return make_node(std::move(out), features, [grid, C, D, H, W, hw](Node& n) {
    std::vector<double> g(static_cast<std::size_t>(C));
    for (int iz = 0; iz < D; ++iz)
      for (int iy = 0; iy < H; ++iy)
        for (int ix = 0; ix < W; ++ix) {
          const auto& cell = grid.cells[grid.cell_index(iz, iy, ix)];
          int n_valid = 0;
          for (const auto& gp : cell) n_valid += gp.valid ? 1 : 0;
          if (n_valid == 0) continue;
          const std::size_t cell_flat = (static_cast<std::size_t>(iz) * H + iy) * W + ix;
          for (int c = 0; c < C; ++c) g[static_cast<std::size_t>(c)] = n.grad.vec()[c * hw + cell_flat];
          const double w = 1.0 / n_valid;
          for (std::size_t v = 0; v < cell.size(); ++v)
            if (cell[v].valid && n.parents[v]->requires_grad)
              detail::bilinear_scatter(n.parents[v]->grad, cell[v].u, cell[v].v,
                                       w, g.data(), C);
        }
  });
}

/// Learned 1x1 channel compression: [C,D,H,W] -> [C,H,W] by folding depth
/// into channels and applying a per-cell linear map.
struct BevCompressor {
  LinearMap proj;  // [C, C*D]

  Var apply(const Var& f_v) const {
    const Tensor& F = f_v->value;
    if (F.ndim() != 4) throw std::invalid_argument("compress_to_bev: need [C,D,H,W]");
    const int C = F.dim(0), D = F.dim(1), H = F.dim(2), W = F.dim(3);
    if (proj.in_dim() != C * D)
      throw std::invalid_argument("compress_to_bev: weight shape mismatch");
    // [C,D,H,W] -> [H*W, C*D] rows, linear, -> [Cout,H,W].
    Var folded = reshape(f_v, {C * D, H * W});
    Var rows = transpose(folded);
    Var out_rows = proj.apply_rows(rows);       // [H*W, Cout]
    Var out = transpose(out_rows);              // [Cout, H*W]
    return reshape(out, {proj.out_dim(), H, W});
  }
};

/// Desk-scale heatmap head: three 3x3 conv layers with ReLU, then a 1x1
/// projection to a single logit channel.
struct HeatmapNet {
  Var w1, b1, w2, b2, w3, b3;  // 3x3 convs
  Var w_out, b_out;            // 1x1 head

  Var logits(const Var& f_bev) const {
    Var h = relu(conv2d(f_bev, w1, b1, 1));
    h = relu(conv2d(h, w2, b2, 1));
    h = relu(conv2d(h, w3, b3, 1));
    Var o = conv2d(h, w_out, b_out, 0);  // [1,H,W]
    return reshape(o, {o->value.dim(1), o->value.dim(2)});
  }
};

/// M_gt: Gaussian splats with sigma = (2r+1)/6, combined by elementwise max;
/// the center cell of every box is exactly 1.
inline Heatmap draw_gt_heatmap(const std::vector<Box3D>& boxes,
                               const BevGridSpec& spec, int radius = 3) {
  spec.validate();
  Heatmap hm{Tensor({spec.height, spec.width}), spec};
  const double sigma = (2.0 * radius + 1.0) / 6.0;
  for (const auto& box : boxes) {
    const int cx = spec.x_to_cell(box.center.x);
    const int cy = spec.y_to_cell(box.center.y);
    for (int iy = std::max(0, cy - 2 * radius); iy <= std::min(spec.height - 1, cy + 2 * radius); ++iy)
      for (int ix = std::max(0, cx - 2 * radius); ix <= std::min(spec.width - 1, cx + 2 * radius); ++ix) {
        const double d2 = static_cast<double>((ix - cx) * (ix - cx) + (iy - cy) * (iy - cy));
        const double v = std::exp(-d2 / (2.0 * sigma * sigma));
        hm.values.at2(iy, ix) = std::max(hm.values.at2(iy, ix), v);
      }
    hm.values.at2(cy, cx) = 1.0;
  }
  return hm;
}

/// Penalty-reduced focal loss against a Gaussian ground-truth heatmap,
/// alpha = 2, beta = 4, normalized by the number of exact-1 cells (min 1).
inline Var gaussian_focal_loss(const Var& predicted, const Heatmap& gt) {
  if (!predicted->value.same_shape(gt.values))
    throw std::invalid_argument("gaussian_focal_loss: shape mismatch");
  const std::size_t n = gt.values.numel();
  Tensor pos_mask(predicted->value.shape());
  Tensor neg_weight(predicted->value.shape());
  int n_pos = 0;
  for (std::size_t i = 0; i < n; ++i) {
    const double y = gt.values[i];
    if (y == 1.0) {
      pos_mask[i] = 1.0;
      ++n_pos;
    } else {
      neg_weight[i] = std::pow(1.0 - y, 4.0);
    }
  }
  Var p = clamp(predicted, 1e-6, 1.0 - 1e-6);
  Var one_minus_p = add_scalar(scale(p, -1.0), 1.0);
  Var pos_term = mul(mul(powc(one_minus_p, 2.0), vlog(p)), constant(pos_mask));
  Var neg_term = mul(mul(powc(p, 2.0), vlog(one_minus_p)), constant(neg_weight));
  Var total = add(vsum(pos_term), vsum(neg_term));
  return scale(total, -1.0 / std::max(1, n_pos));
}

struct SelectedCell {
  int ix = 0, iy = 0;
  double x = 0.0, y = 0.0;  // BEV meters (cell center)
  double score = 0.0;
};

/// Window NMS (a cell survives iff it is the max of its l x l neighborhood,
/// ties toward the smaller flattened index) followed by top-k selection.
inline std::vector<SelectedCell> nms_topk(const Heatmap& hm, int window, int k) {
  if (window % 2 != 1 || window < 1)
    throw std::invalid_argument("nms_topk: window must be odd");
  if (k < 1) throw std::invalid_argument("nms_topk: k must be >= 1");
  const int H = hm.spec.height, W = hm.spec.width;
  const int r = window / 2;
  std::vector<SelectedCell> survivors;
  for (int iy = 0; iy < H; ++iy)
    for (int ix = 0; ix < W; ++ix) {
      const double v = hm.values.at2(iy, ix);
      const std::size_t flat = static_cast<std::size_t>(iy) * W + ix;
      bool is_max = true;
      for (int dy = -r; dy <= r && is_max; ++dy)
        for (int dx = -r; dx <= r; ++dx) {
          const int ny = iy + dy, nx = ix + dx;
          if (ny < 0 || ny >= H || nx < 0 || nx >= W) continue;
          const double nv = hm.values.at2(ny, nx);
          const std::size_t nflat = static_cast<std::size_t>(ny) * W + nx;
          if (nv > v || (nv == v && nflat < flat)) {
            is_max = false;
            break;
          }
        }
      if (is_max)
        survivors.push_back({ix, iy, hm.spec.cell_x(ix), hm.spec.cell_y(iy), v});
    }
  std::stable_sort(survivors.begin(), survivors.end(),
                   [](const SelectedCell& a, const SelectedCell& b) {
                     return a.score > b.score;
                   });
  if (static_cast<int>(survivors.size()) > k) survivors.resize(static_cast<std::size_t>(k));
  return survivors;
}

/// Differentiable nearest-cell gather from F_BEV [C,H,W] at selected cells.
inline Var gather_cells(const Var& f_bev, const std::vector<SelectedCell>& cells) {
  const Tensor& F = f_bev->value;
  if (F.ndim() != 3) throw std::invalid_argument("gather_cells: need [C,H,W]");
  const int C = F.dim(0), H = F.dim(1), W = F.dim(2);
  Tensor out({static_cast<int>(cells.size()), C});
  for (std::size_t q = 0; q < cells.size(); ++q)
    for (int c = 0; c < C; ++c)
      out.at2(static_cast<int>(q), c) = F.at3(c, cells[q].iy, cells[q].ix);
  std::vector<SelectedCell> cp = cells;
  return make_node(std::move(out), {f_bev}, [cp = std::move(cp), C, H, W](Node& n) {
    (void)H; (void)W;
    for (std::size_t q = 0; q < cp.size(); ++q)
      for (int c = 0; c < C; ++c)
        n.parents[0]->grad.at3(c, cp[q].iy, cp[q].ix) += n.grad.at2(static_cast<int>(q), c);
  });
}

/// Position + feature initialization of the query set from NMS-selected
/// heatmap peaks. When `learned_features` is non-null (ablation switch),
/// query features come from learned embeddings instead of F_BEV.
inline QuerySet init_queries(std::vector<SelectedCell> selected, const Var& f_bev,
                             const LinearMap& pos_encoder, double z_default,
                             int n_query, const Var& learned_features = nullptr) {
  if (selected.empty()) throw std::invalid_argument("init_queries: empty selection");
  QuerySet qs;
  if (static_cast<int>(selected.size()) < n_query) {
    qs.padded = true;
    std::size_t src = 0;
    while (static_cast<int>(selected.size()) < n_query)
      selected.push_back(selected[src++ % selected.size()]);
  }
  const int nq = static_cast<int>(selected.size());
  Tensor centers({nq, 3});
  for (int q = 0; q < nq; ++q) {
    qs.centers.push_back({selected[static_cast<std::size_t>(q)].x,
                          selected[static_cast<std::size_t>(q)].y, z_default});
    centers.at2(q, 0) = selected[static_cast<std::size_t>(q)].x;
    centers.at2(q, 1) = selected[static_cast<std::size_t>(q)].y;
    centers.at2(q, 2) = z_default;
  }
  qs.pos_enc = pos_encoder.apply_rows(constant(centers));
  if (learned_features) {
    if (learned_features->value.dim(0) < nq)
      throw std::invalid_argument("init_queries: embedding table too small");
    std::vector<Var> rows;
    for (int q = 0; q < nq; ++q) rows.push_back(row(learned_features, q));
    qs.features = stack_rows(rows);
  } else {
    qs.features = gather_cells(f_bev, selected);
  }
  return qs;
}

/// Recomputed positional encodings for an existing center list.
inline Var encode_centers(const std::vector<Vec3>& centers,
                          const LinearMap& pos_encoder) {
  Tensor c({static_cast<int>(centers.size()), 3});
  for (std::size_t i = 0; i < centers.size(); ++i) {
    c.at2(static_cast<int>(i), 0) = centers[i].x;
    c.at2(static_cast<int>(i), 1) = centers[i].y;
    c.at2(static_cast<int>(i), 2) = centers[i].z;
  }
  return pos_encoder.apply_rows(constant(c));
}

}  // namespace mvdet
