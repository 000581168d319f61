#pragma once

#include <cmath>
#include <optional>
#include <stdexcept>
#include <vector>

#include "mvdet/autodiff.hpp"
#include "mvdet/bev.hpp"
#include "mvdet/geometry.hpp"
#include "mvdet/types.hpp"

namespace mvdet {

// ---------------------------------------------------------------------------
// Differentiable pinhole projection
// ---------------------------------------------------------------------------

struct ProjectedPointVar {
  Var uv;             // [2] feature-map pixels
  bool valid = false; // depth and image-bound check at the current value
};

/// Projects an ego-frame point node through one camera, rescaling into
/// feature-map pixels. The uv node carries the projection Jacobian so
/// gradients reach learned 3D offsets through the sampling coordinates.
inline ProjectedPointVar project_point_var(const Var& point,
                                           const CameraModel& cam, int feat_w,
                                           int feat_h) {
  const Vec3 p{point->value[0], point->value[1], point->value[2]};
  const ProjectionJac pj = project_one_jac(cam, p);
  ProjectedPointVar out;
  out.valid = pj.proj.valid;
  if (!out.valid) {
    out.uv = constant(Tensor({2}));
    return out;
  }
  const double su = static_cast<double>(feat_w) / cam.width;
  const double sv = static_cast<double>(feat_h) / cam.height;
  Tensor uv({2}, {image_to_feat(pj.proj.u, cam.width, feat_w),
                  image_to_feat(pj.proj.v, cam.height, feat_h)});
  out.uv = make_node(std::move(uv), {point}, [jac = pj.duv_dp, su, sv](Node& n) {
    for (int j = 0; j < 3; ++j)
      n.parents[0]->grad[static_cast<std::size_t>(j)] +=
          n.grad[0] * su * jac[static_cast<std::size_t>(j)] +
          n.grad[1] * sv * jac[static_cast<std::size_t>(3 + j)];
  });
  return out;
}

// ---------------------------------------------------------------------------
// Projective cross-attention
// ---------------------------------------------------------------------------

enum class AttnKind {
  pca,    // 3D sampling offsets around the object center, projected per view
  sca2d,  // baseline: project the center, predict offsets per image plane
};

struct PcaWeights {
  std::vector<LinearMap> value_proj;  // per head, [C/N_h, C]
  LinearMap output_proj;              // [C, C] (stacked per-head output maps)
  LinearMap offset_head;              // [N_h*N_s*3, C] (or *2 for sca2d)
  LinearMap attn_head;                // [N_h*N_s, C]
  int n_heads = 0;
  int n_points = 0;
  AttnKind kind = AttnKind::pca;

  int offset_coords() const { return kind == AttnKind::pca ? 3 : 2; }

  void validate(int channels) const {
    if (n_heads < 1 || channels % n_heads != 0)
      throw std::invalid_argument("PcaWeights: N_h must divide C");
    if (static_cast<int>(value_proj.size()) != n_heads)
      throw std::invalid_argument("PcaWeights: need one value projection per head");
    if (offset_head.out_dim() != n_heads * n_points * offset_coords())
      throw std::invalid_argument("PcaWeights: offset head shape mismatch");
    if (attn_head.out_dim() != n_heads * n_points)
      throw std::invalid_argument("PcaWeights: attention head shape mismatch");
    for (const auto& vp : value_proj)
      if (!vp.weight->value.all_finite())
        throw std::invalid_argument("PcaWeights: non-finite weights");
  }
};

/// One frame's sampling context: per-view feature maps plus the rig that
/// projects ego-frame points into them.
struct FrameFeatures {
  std::vector<Var> maps;  // per view [C, Hf, Wf]
  const CameraRig* rig = nullptr;
};

namespace detail {

inline Var average_valid(std::vector<Var> contributions, int head_dim) {
  if (contributions.empty()) return constant(Tensor({head_dim}));
  Var acc = contributions[0];
  for (std::size_t i = 1; i < contributions.size(); ++i)
    acc = add(acc, contributions[i]);
  return scale(acc, 1.0 / static_cast<double>(contributions.size()));
}

}  // namespace detail

/// Eq. core of the cross-attention: for one query, gather value-projected
/// bilinear samples at projected sampling points, average over valid views,
/// combine with softmax attention weights per head, then output-project.
inline Var cross_attention_query(const Var& q_in, const Vec3& center,
                                 const FrameFeatures& frame,
                                 const PcaWeights& w) {
  const int C = q_in->value.dim(0);
  const int head_dim = C / w.n_heads;
  const int feat_h = frame.maps[0]->value.dim(1);
  const int feat_w = frame.maps[0]->value.dim(2);

  Var offsets = w.offset_head.apply(q_in);  // [N_h*N_s*coords]
  Var attn = softmax_last(reshape(w.attn_head.apply(q_in), {w.n_heads, w.n_points}));

  // sca2d: center projected once per view; offsets live in image planes.
  std::vector<ProjectedPointVar> center_proj;
  if (w.kind == AttnKind::sca2d) {
    Var center_node = constant(Tensor({3}, {center.x, center.y, center.z}));
    for (std::size_t n = 0; n < frame.maps.size(); ++n)
      center_proj.push_back(project_point_var(
          center_node, frame.rig->cameras[n], feat_w, feat_h));
  }

  std::vector<Var> head_outputs;
  for (int h = 0; h < w.n_heads; ++h) {
    Var head_acc;  // sum over s of A_hs * f_hs
    for (int s = 0; s < w.n_points; ++s) {
      const int flat = h * w.n_points + s;
      std::vector<Var> per_view;
      if (w.kind == AttnKind::pca) {
        Var delta = slice_vec(offsets, flat * 3, 3);
        Var point = add(delta, constant(Tensor({3}, {center.x, center.y, center.z})));
        for (std::size_t n = 0; n < frame.maps.size(); ++n) {
          ProjectedPointVar pp =
              project_point_var(point, frame.rig->cameras[n], feat_w, feat_h);
          if (!pp.valid) continue;
          per_view.push_back(
              w.value_proj[static_cast<std::size_t>(h)].apply(
                  bilinear_sample(frame.maps[n], pp.uv)));
        }
      } else {
        Var duv = slice_vec(offsets, flat * 2, 2);
        for (std::size_t n = 0; n < frame.maps.size(); ++n) {
          if (!center_proj[n].valid) continue;  // the Fig. 3a information loss
          Var uv = add(center_proj[n].uv, duv);
          per_view.push_back(
              w.value_proj[static_cast<std::size_t>(h)].apply(
                  bilinear_sample(frame.maps[n], uv)));
        }
      }
      Var f_hs = detail::average_valid(std::move(per_view), head_dim);
      Var a_hs = slice_vec(reshape(attn, {w.n_heads * w.n_points}), flat, 1);
      Var weighted = smul(f_hs, a_hs);
      head_acc = head_acc ? add(head_acc, weighted) : weighted;
    }
    head_outputs.push_back(head_acc);
  }
  return w.output_proj.apply(concat_vec(head_outputs));
}

/// PCA over a whole query set. `centers_override` substitutes the sampling
/// centers (used by the cross-frame variant after ego-motion alignment).
inline Var pca_forward(const QuerySet& queries, const FrameFeatures& frame,
                       const PcaWeights& weights,
                       const std::vector<Vec3>* centers_override = nullptr) {
  const int C = queries.channels();
  weights.validate(C);
  if (static_cast<int>(frame.maps.size()) != frame.rig->n_views())
    throw std::invalid_argument("pca_forward: feature maps != N_view");
  const std::vector<Vec3>& centers =
      centers_override ? *centers_override : queries.centers;
  Var q_in = add(queries.features, queries.pos_enc);
  std::vector<Var> rows_out;
  for (int q = 0; q < queries.size(); ++q)
    rows_out.push_back(cross_attention_query(
        row(q_in, q), centers[static_cast<std::size_t>(q)], frame, weights));
  return stack_rows(rows_out);
}

struct CrossFrameResult {
  Var output;            // [N_q, C]
  bool used_past = false;
};

/// Cross-frame feature aggregation: run PCA against the current frame and,
/// when a past frame is available, against the past frame at ego-motion
/// aligned centers; the two outputs are averaged with shared weights.
inline CrossFrameResult pca_cross_frame(const QuerySet& queries,
                                        const FrameFeatures& frame_now,
                                        const FrameFeatures* frame_past,
                                        const EgoPose& pose_now,
                                        const EgoPose& pose_past,
                                        const PcaWeights& weights,
                                        bool align_ego_motion = true) {
  CrossFrameResult r;
  Var q_now = pca_forward(queries, frame_now, weights);
  if (!frame_past) {
    r.output = q_now;
    return r;
  }
  std::vector<Vec3> past_centers = queries.centers;
  if (align_ego_motion)
    for (auto& c : past_centers) c = align_center_to_past(c, pose_now, pose_past);
  Var q_past = pca_forward(queries, *frame_past, weights, &past_centers);
  r.output = scale(add(q_now, q_past), 0.5);
  r.used_past = true;
  return r;
}

// ---------------------------------------------------------------------------
// Standard multi-head attention
// ---------------------------------------------------------------------------

struct MhaWeights {
  LinearMap wq, wk, wv, wo;  // all [C, C]
  int n_heads = 0;
};

inline Var mha(const Var& query, const Var& key, const Var& value,
               const MhaWeights& w) {
  const int C = query->value.dim(1);
  if (key->value.dim(1) != C || value->value.dim(1) != C ||
      key->value.dim(0) != value->value.dim(0))
    throw std::invalid_argument("mha: dimension mismatch");
  if (w.n_heads < 1 || C % w.n_heads != 0)
    throw std::invalid_argument("mha: N_h must divide C");
  const int dh = C / w.n_heads;
  Var Q = w.wq.apply_rows(query);
  Var K = w.wk.apply_rows(key);
  Var V = w.wv.apply_rows(value);
  std::vector<Var> heads;
  for (int h = 0; h < w.n_heads; ++h) {
    Var Qh = slice_cols(Q, h * dh, dh);
    Var Kh = slice_cols(K, h * dh, dh);
    Var Vh = slice_cols(V, h * dh, dh);
    Var scores = scale(matmul(Qh, transpose(Kh)), 1.0 / std::sqrt(static_cast<double>(dh)));
    Var attn = softmax_last(scores);
    heads.push_back(matmul(attn, Vh));
  }
  // Column-concatenate per-head outputs.
  std::vector<Var> tr;
  for (auto& hv : heads) tr.push_back(transpose(hv));
  Var merged = transpose(concat_rows(tr));
  return w.wo.apply_rows(merged);
}

// ---------------------------------------------------------------------------
// Temporal self-attention
// ---------------------------------------------------------------------------

/// Past queries as cached by the memory bank: detached final-layer features
/// with their refined centers, expressed in the past ego frame.
struct PastQueries {
  Tensor features;            // [N_q, C]
  std::vector<Vec3> centers;  // past ego frame
};

/// TSA: current queries attend over [current, rectified past] queries.
/// Past centers are re-expressed in the current ego frame before their
/// positional encodings are recomputed.
inline Var temporal_self_attention(const QuerySet& q_now,
                                   const PastQueries* q_past,
                                   const EgoPose& pose_now,
                                   const EgoPose& pose_past,
                                   const MhaWeights& w,
                                   const LinearMap& pos_encoder,
                                   bool align_ego_motion = true) {
  Var now_in = add(q_now.features, q_now.pos_enc);
  if (!q_past || q_past->features.numel() == 0)
    return mha(now_in, now_in, now_in, w);
  std::vector<Vec3> rectified = q_past->centers;
  if (align_ego_motion)
    for (auto& c : rectified)
      c = align_center_to_past(c, pose_past, pose_now);  // past -> current frame
  Var past_in = add(constant(q_past->features), encode_centers(rectified, pos_encoder));
  Var kv = concat_rows({now_in, past_in});
  return mha(now_in, kv, kv, w);
}

}  // namespace mvdet
