#pragma once

#include <algorithm>
#include <cmath>
#include <fstream>
#include <map>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "mvdet/attention.hpp"
#include "mvdet/bev.hpp"
#include "mvdet/gradcheck.hpp"
#include "mvdet/hungarian.hpp"
#include "mvdet/types.hpp"

namespace mvdet {

struct DecoderConfig {
  int layers = 2;
  int channels = 32;
  int n_heads = 4;
  int n_points = 4;
  int n_query = 25;
  int n_classes = 3;
  int ffn_hidden = 64;
  double lambda_cls = 2.0;
  double lambda_center = 0.25;  // also the L1 regression weight
  double lambda_heatmap = 1.0;
  double center_trust_region = 4.0;  // meters, tanh-bounded refinement

  void validate() const {
    if (layers < 1) throw std::invalid_argument("DecoderConfig: layers >= 1");
    if (channels % n_heads != 0)
      throw std::invalid_argument("DecoderConfig: N_h must divide C");
  }
};

// ---------------------------------------------------------------------------
// Box decoding
// ---------------------------------------------------------------------------

/// Raw regression layout: [dx,dy,dz, log w, log l, log h, sin, cos, vx, vy].
inline constexpr int kRegDim = 10;

inline Box3D decode_box(const double* raw, const Vec3& center,
                        const double* cls_logits, int n_classes,
                        double trust_region) {
  Box3D b;
  b.center = {center.x + trust_region * std::tanh(raw[0]),
              center.y + trust_region * std::tanh(raw[1]),
              center.z + trust_region * std::tanh(raw[2])};
  b.w = std::exp(raw[3]);
  b.l = std::exp(raw[4]);
  b.h = std::exp(raw[5]);
  const double s = raw[6], c = raw[7];
  b.yaw = (std::abs(s) < 1e-12 && std::abs(c) < 1e-12)
              ? 0.0  // zero raw input reads as (sin,cos) = (0,1)
              : normalize_yaw(std::atan2(s, c));
  b.vx = raw[8];
  b.vy = raw[9];
  int best = 0;
  for (int k = 1; k < n_classes; ++k)
    if (cls_logits[k] > cls_logits[best]) best = k;
  b.class_id = best;
  b.score = 1.0 / (1.0 + std::exp(-cls_logits[best]));
  return b;
}

inline std::vector<Box3D> decode_boxes(const Tensor& reg, const Tensor& cls,
                                       const std::vector<Vec3>& centers,
                                       double trust_region) {
  const int nq = reg.dim(0);
  const int n_classes = cls.dim(1);
  std::vector<Box3D> out;
  out.reserve(static_cast<std::size_t>(nq));
  for (int q = 0; q < nq; ++q)
    out.push_back(decode_box(reg.data() + reg.idx2(q, 0), centers[static_cast<std::size_t>(q)],
                             cls.data() + cls.idx2(q, 0), n_classes, trust_region));
  return out;
}

// ---------------------------------------------------------------------------
// Set matching
// ---------------------------------------------------------------------------

struct MatchResult {
  std::vector<int> pred_of_gt;  // per gt, the matched prediction index
};

inline MatchResult hungarian_match(const std::vector<Box3D>& preds,
                                   const std::vector<Box3D>& gts,
                                   const std::vector<Tensor>* cls_probs,
                                   double lambda_cls, double lambda_center) {
  MatchResult r;
  if (gts.empty() || preds.empty()) return r;
  if (gts.size() > preds.size())
    throw std::invalid_argument("hungarian_match: more gt than predictions");
  std::vector<std::vector<double>> cost(
      gts.size(), std::vector<double>(preds.size(), 0.0));
  for (std::size_t g = 0; g < gts.size(); ++g)
    for (std::size_t p = 0; p < preds.size(); ++p) {
      const double p_cls =
          cls_probs ? (*cls_probs)[p][static_cast<std::size_t>(gts[g].class_id)]
                    : (preds[p].class_id == gts[g].class_id ? preds[p].score : 0.0);
      const double center_l1 = std::abs(preds[p].center.x - gts[g].center.x) +
                               std::abs(preds[p].center.y - gts[g].center.y);
      cost[g][p] = lambda_cls * (1.0 - p_cls) + lambda_center * center_l1;
      if (!std::isfinite(cost[g][p]))
        throw std::invalid_argument("hungarian_match: non-finite cost");
    }
  r.pred_of_gt = hungarian_assign(cost);
  return r;
}

// ---------------------------------------------------------------------------
// Model weights
// ---------------------------------------------------------------------------

struct DecoderLayerWeights {
  MhaWeights tsa;
  PcaWeights pca;
  LinearMap ffn1, ffn2;
  Var ln1_g, ln1_b, ln2_g, ln2_b, ln3_g, ln3_b;
  LinearMap cls_head;  // [n_classes, C]
  LinearMap reg_head;  // [kRegDim, C]
};

struct ModelFlags {
  bool position_init = true;   // heatmap-guided query positions
  bool feature_init = true;    // query features from F_BEV
  bool temporal = false;       // enable the past-frame path
  bool query_aggregation = true;
  bool feature_aggregation = true;
  bool ego_alignment = true;
  AttnKind attn_kind = AttnKind::pca;
};

struct DetectorModel {
  DecoderConfig cfg;
  BevGridSpec grid;
  ModelFlags flags;
  int nms_window = 3;
  int gt_radius = 3;

  BevCompressor compressor;
  HeatmapNet heatmap;
  LinearMap pos_encoder;  // [C, 3]
  Var query_embed;        // [n_query, C]
  std::vector<Vec3> anchor_centers;  // used when position_init is off
  std::vector<DecoderLayerWeights> layers;

  std::vector<std::pair<std::string, Var>> named_params() {
    std::vector<std::pair<std::string, Var>> out;
    auto lin = [&](const std::string& name, LinearMap& m) {
      out.emplace_back(name + ".w", m.weight);
      if (m.bias) out.emplace_back(name + ".b", m.bias);
    };
    lin("compress", compressor.proj);
    out.emplace_back("hm.w1", heatmap.w1);
    out.emplace_back("hm.b1", heatmap.b1);
    out.emplace_back("hm.w2", heatmap.w2);
    out.emplace_back("hm.b2", heatmap.b2);
    out.emplace_back("hm.w3", heatmap.w3);
    out.emplace_back("hm.b3", heatmap.b3);
    out.emplace_back("hm.wo", heatmap.w_out);
    out.emplace_back("hm.bo", heatmap.b_out);
    lin("pos_enc", pos_encoder);
    out.emplace_back("query_embed", query_embed);
    for (std::size_t i = 0; i < layers.size(); ++i) {
      const std::string p = "layer" + std::to_string(i);
      auto& L = layers[i];
      lin(p + ".tsa.q", L.tsa.wq);
      lin(p + ".tsa.k", L.tsa.wk);
      lin(p + ".tsa.v", L.tsa.wv);
      lin(p + ".tsa.o", L.tsa.wo);
      for (std::size_t h = 0; h < L.pca.value_proj.size(); ++h)
        lin(p + ".pca.v" + std::to_string(h), L.pca.value_proj[h]);
      lin(p + ".pca.out", L.pca.output_proj);
      lin(p + ".pca.off", L.pca.offset_head);
      lin(p + ".pca.attn", L.pca.attn_head);
      lin(p + ".ffn1", L.ffn1);
      lin(p + ".ffn2", L.ffn2);
      out.emplace_back(p + ".ln1.g", L.ln1_g);
      out.emplace_back(p + ".ln1.b", L.ln1_b);
      out.emplace_back(p + ".ln2.g", L.ln2_g);
      out.emplace_back(p + ".ln2.b", L.ln2_b);
      out.emplace_back(p + ".ln3.g", L.ln3_g);
      out.emplace_back(p + ".ln3.b", L.ln3_b);
      lin(p + ".cls", L.cls_head);
      lin(p + ".reg", L.reg_head);
    }
    return out;
  }
};

namespace detail {

inline LinearMap make_linear(Rng& rng, int out_dim, int in_dim,
                             bool zero_init = false, double bias_init = 0.0) {
  LinearMap m;
  if (zero_init) {
    m.weight = make_leaf(Tensor({out_dim, in_dim}), true);
  } else {
    const double s = std::sqrt(2.0 / (in_dim + out_dim));
    m.weight = make_leaf(rng.tensor_normal({out_dim, in_dim}, s), true);
  }
  Tensor b({out_dim}, bias_init);
  m.bias = make_leaf(std::move(b), true);
  return m;
}

inline Var ones(int n) { return make_leaf(Tensor({n}, 1.0), true); }
inline Var zeros(int n) { return make_leaf(Tensor({n}), true); }

}  // namespace detail

inline DetectorModel build_model(const DecoderConfig& cfg, const BevGridSpec& grid,
                                 const ModelFlags& flags, std::uint64_t seed) {
  cfg.validate();
  grid.validate();
  Rng rng(seed);
  DetectorModel m;
  m.cfg = cfg;
  m.grid = grid;
  m.flags = flags;
  const int C = cfg.channels;
  const int hm_hidden = 32;
  m.compressor.proj = detail::make_linear(rng, C, C * grid.depth);
  auto conv_w = [&](int co, int ci, int k) {
    const double s = std::sqrt(2.0 / (ci * k * k));
    return make_leaf(rng.tensor_normal({co, ci, k, k}, s), true);
  };
  m.heatmap.w1 = conv_w(hm_hidden, C, 3);
  m.heatmap.b1 = detail::zeros(hm_hidden);
  m.heatmap.w2 = conv_w(hm_hidden, hm_hidden, 3);
  m.heatmap.b2 = detail::zeros(hm_hidden);
  m.heatmap.w3 = conv_w(hm_hidden, hm_hidden, 3);
  m.heatmap.b3 = detail::zeros(hm_hidden);
  m.heatmap.w_out = conv_w(1, hm_hidden, 1);
  m.heatmap.b_out = make_leaf(Tensor({1}, -2.19), true);  // starts near p = 0.1
  m.pos_encoder = detail::make_linear(rng, C, 3);
  m.query_embed = make_leaf(rng.tensor_normal({cfg.n_query, C}, 0.1), true);
  // Frozen scatter of fallback anchors over the BEV range.
  for (int q = 0; q < cfg.n_query; ++q)
    m.anchor_centers.push_back({rng.uniform(grid.x_min, grid.x_max),
                                rng.uniform(grid.y_min, grid.y_max),
                                grid.z_mid()});
  for (int l = 0; l < cfg.layers; ++l) {
    DecoderLayerWeights L;
    L.tsa.n_heads = cfg.n_heads;
    L.tsa.wq = detail::make_linear(rng, C, C);
    L.tsa.wk = detail::make_linear(rng, C, C);
    L.tsa.wv = detail::make_linear(rng, C, C);
    L.tsa.wo = detail::make_linear(rng, C, C);
    L.pca.n_heads = cfg.n_heads;
    L.pca.n_points = cfg.n_points;
    L.pca.kind = flags.attn_kind;
    for (int h = 0; h < cfg.n_heads; ++h)
      L.pca.value_proj.push_back(detail::make_linear(rng, C / cfg.n_heads, C));
    L.pca.output_proj = detail::make_linear(rng, C, C);
    // Zero-initialized offsets: training starts at exact center sampling.
    L.pca.offset_head = detail::make_linear(
        rng, cfg.n_heads * cfg.n_points * L.pca.offset_coords(), C, true);
    L.pca.attn_head = detail::make_linear(rng, cfg.n_heads * cfg.n_points, C, true);
    L.ffn1 = detail::make_linear(rng, cfg.ffn_hidden, C);
    L.ffn2 = detail::make_linear(rng, C, cfg.ffn_hidden);
    L.ln1_g = detail::ones(C);
    L.ln1_b = detail::zeros(C);
    L.ln2_g = detail::ones(C);
    L.ln2_b = detail::zeros(C);
    L.ln3_g = detail::ones(C);
    L.ln3_b = detail::zeros(C);
    L.cls_head = detail::make_linear(rng, cfg.n_classes, C, false, -2.19);
    L.reg_head = detail::make_linear(rng, kRegDim, C, true);
    m.layers.push_back(std::move(L));
  }
  return m;
}

// ---------------------------------------------------------------------------
// Forward pass
// ---------------------------------------------------------------------------

/// One frame's inputs to the detector.
struct FrameInput {
  std::vector<Var> feature_maps;  // per view [C, Hf, Wf]
  const CameraRig* rig = nullptr;
  EgoPose ego_pose;
  std::vector<Box3D> gt_boxes;  // empty at inference
};

/// Cached past-frame context (detached).
struct PastContext {
  PastQueries queries;
  std::vector<Tensor> feature_maps;
  CameraRig rig;
  EgoPose ego_pose;
};

struct ForwardResult {
  Var heatmap_logits;             // [H, W]
  Heatmap heatmap_values;         // sigmoid(logits), detached
  std::vector<SelectedCell> selected;
  std::vector<Var> layer_cls;     // per layer [N_q, n_classes]
  std::vector<Var> layer_reg;     // per layer [N_q, kRegDim]
  std::vector<std::vector<Vec3>> layer_centers;  // centers feeding each layer
  QuerySet final_queries;         // post-final-layer
  bool used_past = false;
};

inline ForwardResult model_forward(DetectorModel& m, const FrameInput& frame,
                                   const PastContext* past) {
  ForwardResult r;
  const int feat_h = frame.feature_maps[0]->value.dim(1);
  const int feat_w = frame.feature_maps[0]->value.dim(2);

  // Heatmap branch: volumetric sampling -> BEV compression -> logits.
  ProjectedGrid grid = build_projected_grid(m.grid, *frame.rig, feat_w, feat_h);
  Var f_v = volumetric_sample(frame.feature_maps, grid);
  Var f_bev = m.compressor.apply(f_v);
  r.heatmap_logits = m.heatmap.logits(f_bev);
  Tensor hm_vals = r.heatmap_logits->value;
  for (auto& v : hm_vals.vec()) v = 1.0 / (1.0 + std::exp(-v));
  r.heatmap_values = Heatmap{std::move(hm_vals), m.grid};

  // Query initialization.
  QuerySet queries;
  if (m.flags.position_init) {
    r.selected = nms_topk(r.heatmap_values, m.nms_window, m.cfg.n_query);
    queries = init_queries(r.selected, f_bev, m.pos_encoder, m.grid.z_mid(),
                           m.cfg.n_query,
                           m.flags.feature_init ? nullptr : m.query_embed);
  } else {
    queries.centers = m.anchor_centers;
    std::vector<Var> rows;
    for (int q = 0; q < m.cfg.n_query; ++q) rows.push_back(row(m.query_embed, q));
    queries.features = stack_rows(rows);
    queries.pos_enc = encode_centers(queries.centers, m.pos_encoder);
  }

  FrameFeatures now{frame.feature_maps, frame.rig};
  std::optional<FrameFeatures> past_feats;
  std::vector<Var> past_map_vars;
  const bool have_past = m.flags.temporal && past != nullptr;
  if (have_past && m.flags.feature_aggregation) {
    for (const auto& t : past->feature_maps) past_map_vars.push_back(constant(t));
    past_feats = FrameFeatures{past_map_vars, &past->rig};
  }

  for (auto& L : m.layers) {
    r.layer_centers.push_back(queries.centers);
    // Temporal self-attention (plain self-attention without a past frame).
    Var tsa_out = temporal_self_attention(
        queries,
        (have_past && m.flags.query_aggregation) ? &past->queries : nullptr,
        frame.ego_pose, have_past ? past->ego_pose : frame.ego_pose, L.tsa,
        m.pos_encoder, m.flags.ego_alignment);
    Var x = layer_norm(add(queries.features, tsa_out), L.ln1_g, L.ln1_b);
    queries.features = x;

    // Cross-attention into image features.
    Var ca_out;
    if (past_feats) {
      CrossFrameResult cf = pca_cross_frame(
          queries, now, &*past_feats, frame.ego_pose, past->ego_pose, L.pca,
          m.flags.ego_alignment);
      ca_out = cf.output;
      r.used_past = true;
    } else {
      ca_out = pca_forward(queries, now, L.pca);
    }
    x = layer_norm(add(x, ca_out), L.ln2_g, L.ln2_b);
    Var ffn = L.ffn2.apply_rows(relu(L.ffn1.apply_rows(x)));
    x = layer_norm(add(x, ffn), L.ln3_g, L.ln3_b);
    queries.features = x;

    Var cls = L.cls_head.apply_rows(x);
    Var reg = L.reg_head.apply_rows(x);
    r.layer_cls.push_back(cls);
    r.layer_reg.push_back(reg);

    // Center refinement for the next layer (detached), clamped to range.
    std::vector<Vec3> refined = queries.centers;
    for (int q = 0; q < m.cfg.n_query; ++q) {
      const double* raw = reg->value.data() + reg->value.idx2(q, 0);
      auto& c = refined[static_cast<std::size_t>(q)];
      c.x = std::clamp(c.x + m.cfg.center_trust_region * std::tanh(raw[0]),
                       m.grid.x_min, m.grid.x_max);
      c.y = std::clamp(c.y + m.cfg.center_trust_region * std::tanh(raw[1]),
                       m.grid.y_min, m.grid.y_max);
      c.z = std::clamp(c.z + m.cfg.center_trust_region * std::tanh(raw[2]),
                       m.grid.z_min, m.grid.z_max);
    }
    queries.centers = std::move(refined);
    queries.pos_enc = encode_centers(queries.centers, m.pos_encoder);
  }
  r.final_queries = queries;
  return r;
}

// ---------------------------------------------------------------------------
// Losses
// ---------------------------------------------------------------------------

struct LossReport {
  double total = 0.0;
  double cls = 0.0;
  double reg = 0.0;
  double heatmap = 0.0;
};

/// Sigmoid focal classification loss with one-hot targets from the matching.
inline Var focal_cls_loss(const Var& cls_logits, const std::vector<int>& gt_class_of_query,
                          int n_matched, double alpha = 0.25, double gamma = 2.0) {
  const int nq = cls_logits->value.dim(0);
  const int k = cls_logits->value.dim(1);
  Tensor target({nq, k});
  for (int q = 0; q < nq; ++q)
    if (gt_class_of_query[static_cast<std::size_t>(q)] >= 0)
      target.at2(q, gt_class_of_query[static_cast<std::size_t>(q)]) = 1.0;
  Var p = clamp(sigmoid(cls_logits), 1e-6, 1.0 - 1e-6);
  Var one_minus_p = add_scalar(scale(p, -1.0), 1.0);
  Tensor tmask = target;
  Tensor nmask({nq, k});
  for (std::size_t i = 0; i < nmask.numel(); ++i) nmask[i] = 1.0 - target[i];
  Var pos = mul(mul(powc(one_minus_p, gamma), vlog(p)), constant(tmask));
  Var neg = mul(mul(powc(p, gamma), vlog(one_minus_p)), constant(nmask));
  Var total = add(scale(vsum(pos), alpha), scale(vsum(neg), 1.0 - alpha));
  return scale(total, -1.0 / std::max(1, n_matched));
}

struct DetectionLossResult {
  Var loss;
  LossReport report;
  std::vector<MatchResult> matches;  // per layer
};

/// Deep-supervised detection loss: per layer, focal classification + L1
/// regression on matched pairs, plus the weighted heatmap term.
inline DetectionLossResult detection_loss(DetectorModel& m, const ForwardResult& fwd,
                                          const std::vector<Box3D>& gt,
                                          bool supervise_velocity) {
  DetectionLossResult out;
  Var total;
  for (std::size_t li = 0; li < fwd.layer_cls.size(); ++li) {
    const Var& cls = fwd.layer_cls[li];
    const Var& reg = fwd.layer_reg[li];
    const auto& centers = fwd.layer_centers[li];
    const int nq = cls->value.dim(0);

    std::vector<Box3D> decoded =
        decode_boxes(reg->value, cls->value, centers, m.cfg.center_trust_region);
    std::vector<Tensor> cls_probs;
    for (int q = 0; q < nq; ++q) {
      Tensor p({m.cfg.n_classes});
      for (int k = 0; k < m.cfg.n_classes; ++k)
        p[static_cast<std::size_t>(k)] =
            1.0 / (1.0 + std::exp(-cls->value.at2(q, k)));
      cls_probs.push_back(std::move(p));
    }
    MatchResult match = hungarian_match(decoded, gt, &cls_probs,
                                        m.cfg.lambda_cls, m.cfg.lambda_center);

    std::vector<int> gt_class_of_query(static_cast<std::size_t>(nq), -1);
    for (std::size_t g = 0; g < match.pred_of_gt.size(); ++g)
      if (match.pred_of_gt[g] >= 0)
        gt_class_of_query[static_cast<std::size_t>(match.pred_of_gt[g])] =
            gt[g].class_id;
    const int n_matched = static_cast<int>(gt.size());

    Var cls_loss = scale(focal_cls_loss(cls, gt_class_of_query, n_matched),
                         m.cfg.lambda_cls);
    Var layer_loss = cls_loss;

    if (!gt.empty()) {
      Var reg_loss;
      for (std::size_t g = 0; g < gt.size(); ++g) {
        const int q = match.pred_of_gt[g];
        if (q < 0) continue;
        Var raw = row(reg, q);
        const Vec3& base = centers[static_cast<std::size_t>(q)];
        // Differentiable decoded center vs gt center.
        Var center_pred = add(
            scale(vtanh(slice_vec(raw, 0, 3)), m.cfg.center_trust_region),
            constant(Tensor({3}, {base.x, base.y, base.z})));
        Var t1 = l1_to(center_pred, Tensor({3}, {gt[g].center.x, gt[g].center.y,
                                                 gt[g].center.z}));
        Var t2 = l1_to(slice_vec(raw, 3, 3),
                       Tensor({3}, {std::log(gt[g].w), std::log(gt[g].l),
                                    std::log(gt[g].h)}));
        Var t3 = l1_to(slice_vec(raw, 6, 2),
                       Tensor({2}, {std::sin(gt[g].yaw), std::cos(gt[g].yaw)}));
        Var term = add(t1, add(t2, t3));
        if (supervise_velocity) {
          Var t4 = l1_to(slice_vec(raw, 8, 2), Tensor({2}, {gt[g].vx, gt[g].vy}));
          term = add(term, t4);
        }
        reg_loss = reg_loss ? add(reg_loss, term) : term;
      }
      if (reg_loss) {
        reg_loss = scale(reg_loss, m.cfg.lambda_center / std::max(1, n_matched));
        layer_loss = add(layer_loss, reg_loss);
        out.report.reg += reg_loss->value[0];
      }
    }
    out.report.cls += cls_loss->value[0];
    total = total ? add(total, layer_loss) : layer_loss;
    out.matches.push_back(std::move(match));
  }

  Heatmap gt_hm = draw_gt_heatmap(gt, m.grid, m.gt_radius);
  Var hm_loss = scale(gaussian_focal_loss(sigmoid(fwd.heatmap_logits), gt_hm),
                      m.cfg.lambda_heatmap);
  out.report.heatmap = hm_loss->value[0];
  total = add(total, hm_loss);
  out.report.total = total->value[0];
  out.loss = total;
  return out;
}

// ---------------------------------------------------------------------------
// Optimizer
// ---------------------------------------------------------------------------

struct AdamW {
  double lr = 2e-4;
  double beta1 = 0.9, beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.01;

  std::vector<Tensor> m1, m2;
  long step_count = 0;

  void step(std::vector<std::pair<std::string, Var>>& params) {
    if (m1.empty()) {
      for (auto& [name, p] : params) {
        m1.emplace_back(p->value.shape());
        m2.emplace_back(p->value.shape());
      }
    }
    ++step_count;
    const double bc1 = 1.0 - std::pow(beta1, static_cast<double>(step_count));
    const double bc2 = 1.0 - std::pow(beta2, static_cast<double>(step_count));
    for (std::size_t i = 0; i < params.size(); ++i) {
      Var& p = params[i].second;
      p->ensure_grad();
      for (std::size_t j = 0; j < p->value.numel(); ++j) {
        const double g = p->grad[j];
        m1[i][j] = beta1 * m1[i][j] + (1.0 - beta1) * g;
        m2[i][j] = beta2 * m2[i][j] + (1.0 - beta2) * g * g;
        const double mhat = m1[i][j] / bc1;
        const double vhat = m2[i][j] / bc2;
        p->value[j] -= lr * (mhat / (std::sqrt(vhat) + eps) +
                             weight_decay * p->value[j]);
      }
    }
  }
};

// ---------------------------------------------------------------------------
// Training step
// ---------------------------------------------------------------------------

struct TrainBatch {
  FrameInput current;
  const FrameInput* past = nullptr;  // optional, temporal mode
};

/// Runs the past frame (if any) without gradient, then a full forward +
/// backward + AdamW update on the current frame.
inline LossReport train_step(DetectorModel& model, AdamW& opt,
                             const TrainBatch& batch,
                             std::vector<std::pair<std::string, Var>>& params) {
  std::optional<PastContext> past_ctx;
  if (model.flags.temporal && batch.past) {
    // Past forward produces detached queries and features; no backward here.
    ForwardResult past_fwd = model_forward(model, *batch.past, nullptr);
    PastContext ctx;
    ctx.queries.features = past_fwd.final_queries.features->value;
    ctx.queries.centers = past_fwd.final_queries.centers;
    for (const auto& fm : batch.past->feature_maps)
      ctx.feature_maps.push_back(fm->value);
    ctx.rig = *batch.past->rig;
    ctx.ego_pose = batch.past->ego_pose;
    past_ctx = std::move(ctx);
  }

  ForwardResult fwd =
      model_forward(model, batch.current, past_ctx ? &*past_ctx : nullptr);
  DetectionLossResult loss = detection_loss(
      model, fwd, batch.current.gt_boxes, model.flags.temporal && batch.past);
  if (!std::isfinite(loss.loss->value[0]))
    throw std::runtime_error("train_step: non-finite loss (diverged)");
  for (auto& [name, p] : params) {
    p->ensure_grad();
    p->zero_grad();
  }
  backward(loss.loss);
  opt.step(params);
  return loss.report;
}

// ---------------------------------------------------------------------------
// Checkpoints
// ---------------------------------------------------------------------------

inline void save_checkpoint(const std::string& dir, DetectorModel& model,
                            const std::string& config_hash) {
  std::ofstream manifest(dir + "/manifest.txt");
  if (!manifest) throw std::runtime_error("cannot write manifest in " + dir);
  std::ofstream blob(dir + "/weights.bin", std::ios::binary);
  auto params = model.named_params();
  manifest << "mvdet-checkpoint v1\n";
  manifest << "config_hash " << config_hash << "\n";
  manifest << "tensors " << params.size() << "\n";
  for (auto& [name, p] : params) {
    manifest << name << " " << p->value.shape_str() << "\n";
    blob << name << "\n";
    save_tensor(blob, p->value);
  }
}

inline void load_checkpoint(const std::string& dir, DetectorModel& model) {
  std::ifstream blob(dir + "/weights.bin", std::ios::binary);
  if (!blob) throw std::runtime_error("cannot read weights in " + dir);
  auto params = model.named_params();
  std::map<std::string, Var> by_name(params.begin(), params.end());
  std::string name;
  while (std::getline(blob, name)) {
    Tensor t = load_tensor(blob);
    auto it = by_name.find(name);
    if (it == by_name.end())
      throw std::runtime_error("checkpoint has unknown tensor: " + name);
    if (!it->second->value.same_shape(t))
      throw std::runtime_error("checkpoint shape mismatch for: " + name);
    it->second->value = std::move(t);
  }
}

}  // namespace mvdet
