#pragma once

#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "mvdet/config.hpp"
#include "mvdet/detector.hpp"
#include "mvdet/metrics.hpp"
#include "mvdet/synth.hpp"
#include "mvdet/temporal.hpp"

namespace mvdet {

/// Everything a training or evaluation run needs, wired from one Config.
struct Harness {
  Config cfg;
  DetectorModel model;
  std::optional<FeatureEncoder> encoder;
  std::vector<std::pair<std::string, Var>> params;
  AdamW optimizer;

  explicit Harness(const Config& config)
      : cfg(config),
        model(build_model(config.decoder, config.grid, config.flags, config.seed)) {
    if (cfg.use_encoder) {
      encoder = FeatureEncoder::build(cfg.feat_channels, cfg.seed + 99);
      for (auto& p : encoder->named_params()) params.push_back(p);
    }
    for (auto& p : model.named_params()) params.push_back(p);
    optimizer.lr = cfg.learning_rate;
    optimizer.weight_decay = cfg.weight_decay;
  }

  std::vector<Var> make_feature_vars(const std::vector<Tensor>& maps) {
    std::vector<Var> out;
    for (const auto& m : maps) {
      Var v = constant(m);
      if (encoder) v = encoder->apply(v);
      out.push_back(v);
    }
    return out;
  }

  std::vector<Scene> make_scenes(int count, std::uint64_t seed_base) const {
    std::vector<Scene> scenes;
    for (int i = 0; i < count; ++i) {
      SceneSpec s = cfg.scene;
      s.seed = seed_base + static_cast<std::uint64_t>(i);
      scenes.push_back(generate_scene(s));
    }
    return scenes;
  }

  /// One deterministic training step drawn from the scene pool.
  LossReport training_step(const std::vector<Scene>& scenes, int step) {
    Rng step_rng(cfg.seed * 7349ULL + static_cast<std::uint64_t>(step) * 131ULL);
    const Scene& scene =
        scenes[static_cast<std::size_t>(step) % scenes.size()];
    const int frame =
        step_rng.uniform_int(0, scene.n_frames() - 1);
    const double t = scene.frame_time(frame);

    std::vector<Tensor> maps_now =
        render_features(scene, t, cfg.feat_channels, cfg.feat_size, cfg.feat_size);
    FrameInput current;
    std::vector<Var> now_vars = make_feature_vars(maps_now);
    current.feature_maps = now_vars;
    current.rig = &scene.rig;
    current.ego_pose = scene.ego_pose(t);
    current.gt_boxes = ground_truth(scene, t, cfg.grid);

    TrainBatch batch;
    batch.current = current;
    FrameInput past;
    std::vector<Var> past_vars;
    std::vector<Tensor> maps_past;
    if (cfg.flags.temporal) {
      std::vector<double> ts;
      for (int i = 0; i < scene.n_frames(); ++i) ts.push_back(scene.frame_time(i));
      const int past_idx = sample_training_pair(ts, frame, step_rng, cfg.pair_window);
      if (past_idx >= 0) {
        const double tp = scene.frame_time(past_idx);
        maps_past = render_features(scene, tp, cfg.feat_channels, cfg.feat_size,
                                    cfg.feat_size);
        past_vars = make_feature_vars(maps_past);
        past.feature_maps = past_vars;
        past.rig = &scene.rig;
        past.ego_pose = scene.ego_pose(tp);
        batch.past = &past;
      }
    }
    return train_step(model, optimizer, batch, params);
  }

  std::vector<LossReport> train(const std::vector<Scene>& scenes, int steps,
                                const std::function<void(int, const LossReport&)>&
                                    on_step = nullptr) {
    std::vector<LossReport> trace;
    for (int s = 0; s < steps; ++s) {
      LossReport r = training_step(scenes, s);
      trace.push_back(r);
      if (on_step) on_step(s, r);
    }
    return trace;
  }

  /// Sequence inference with the memory bank; features are computed once per
  /// frame (render_count exposes the invocation counter for verification).
  struct SequenceResult {
    std::vector<std::vector<Box3D>> preds_per_frame;
    std::vector<std::vector<Box3D>> gt_per_frame;
    std::vector<std::vector<SelectedCell>> selected_per_frame;
    std::vector<Heatmap> heatmaps;
    int render_count = 0;
  };

  SequenceResult run_sequence(const Scene& scene) {
    SequenceResult res;
    MemoryBank bank(cfg.bank_capacity, cfg.bank_horizon);
    for (int i = 0; i < scene.n_frames(); ++i) {
      const double t = scene.frame_time(i);
      std::vector<Tensor> maps =
          render_features(scene, t, cfg.feat_channels, cfg.feat_size, cfg.feat_size);
      ++res.render_count;
      std::vector<Var> vars = make_feature_vars(maps);
      FrameInput frame;
      frame.feature_maps = vars;
      frame.rig = &scene.rig;
      frame.ego_pose = scene.ego_pose(t);

      std::optional<PastContext> past;
      if (cfg.flags.temporal) {
        const FrameRecord* rec = bank.fetch(t, cfg.fetch_interval);
        if (rec) {
          PastContext ctx;
          ctx.queries = rec->queries;
          ctx.feature_maps = rec->feature_maps;
          ctx.rig = rec->rig;
          ctx.ego_pose = rec->ego_pose;
          past = std::move(ctx);
        }
      }
      ForwardResult fwd = model_forward(model, frame, past ? &*past : nullptr);

      const Var& cls = fwd.layer_cls.back();
      const Var& reg = fwd.layer_reg.back();
      res.preds_per_frame.push_back(
          decode_boxes(reg->value, cls->value, fwd.layer_centers.back(),
                       model.cfg.center_trust_region));
      res.gt_per_frame.push_back(ground_truth(scene, t, cfg.grid));
      res.selected_per_frame.push_back(fwd.selected);
      res.heatmaps.push_back(fwd.heatmap_values);

      FrameRecord rec;
      rec.timestamp = t;
      rec.queries.features = fwd.final_queries.features->value;
      rec.queries.centers = fwd.final_queries.centers;
      for (const auto& v : vars) rec.feature_maps.push_back(v->value);
      rec.rig = scene.rig;
      rec.ego_pose = frame.ego_pose;
      bank.push(std::move(rec));
    }
    return res;
  }

  EvalReport evaluate_scenes(const std::vector<Scene>& scenes,
                             SequenceResult* last = nullptr) {
    std::vector<std::vector<Box3D>> preds, gts;
    for (const auto& scene : scenes) {
      SequenceResult r = run_sequence(scene);
      preds.insert(preds.end(), r.preds_per_frame.begin(), r.preds_per_frame.end());
      gts.insert(gts.end(), r.gt_per_frame.begin(), r.gt_per_frame.end());
      if (last) *last = std::move(r);
    }
    return evaluate(preds, gts);
  }
};

}  // namespace mvdet
