#include <chrono>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <string>

#include <CLI11.hpp>

#include "mvdet/harness.hpp"
#include "mvdet/svg.hpp"

namespace fs = std::filesystem;
using namespace mvdet;

namespace {

struct CommonOpts {
  std::string config_file;
  std::string preset = "desk";
  std::uint64_t seed = 0;
  bool seed_set = false;
  std::string out_dir = "out";
  std::string temporal;  // "on" | "off" | ""
  std::string attn;      // "pca" | "sca2d" | ""
};

void add_common(CLI::App* cmd, CommonOpts& o) {
  cmd->add_option("--config", o.config_file, "config file (overrides --preset)");
  cmd->add_option("--preset", o.preset, "desk | paper-scale");
  cmd->add_option("--seed", o.seed, "RNG seed")->each([&](const std::string&) {
    o.seed_set = true;
  });
  cmd->add_option("--out-dir", o.out_dir, "artifact directory");
  cmd->add_option("--temporal", o.temporal, "on | off")
      ->check(CLI::IsMember({"on", "off"}));
  cmd->add_option("--attn", o.attn, "pca | sca2d")
      ->check(CLI::IsMember({"pca", "sca2d"}));
}

Config resolve_config(const CommonOpts& o) {
  Config c = o.config_file.empty() ? preset_config(o.preset)
                                   : load_config_file(o.config_file);
  if (o.seed_set) c.seed = o.seed;
  if (o.temporal == "on") c.flags.temporal = true;
  if (o.temporal == "off") c.flags.temporal = false;
  if (o.attn == "pca") c.flags.attn_kind = AttnKind::pca;
  if (o.attn == "sca2d") c.flags.attn_kind = AttnKind::sca2d;
  return c;
}

void write_text(const std::string& path, const std::string& text) {
  std::ofstream os(path);
  if (!os) throw std::runtime_error("cannot write " + path);
  os << text;
}

void write_heatmap_csv(const std::string& path, const Tensor& values) {
  std::ofstream os(path);
  if (!os) throw std::runtime_error("cannot write " + path);
  for (int y = 0; y < values.dim(0); ++y) {
    for (int x = 0; x < values.dim(1); ++x) {
      if (x) os << ",";
      char buf[32];
      std::snprintf(buf, sizeof buf, "%.9g", values.at2(y, x));
      os << buf;
    }
    os << "\n";
  }
}

// ---------------------------------------------------------------------------
// gradcheck
// ---------------------------------------------------------------------------

int run_gradcheck() {
  int failures = 0;
  auto report = [&](const std::string& name, const GradCheckReport& rep) {
    std::printf("%-28s %s  (max rel err %.3e at %s)\n", name.c_str(),
                rep.pass ? "ok" : "FAIL", rep.max_rel_error,
                rep.worst_input.empty() ? "-" : rep.worst_input.c_str());
    if (!rep.pass) ++failures;
  };
  Rng rng(2024);

  {
    Var fmap = make_leaf(rng.tensor({3, 6, 6}), true);
    Var uv = make_leaf(Tensor({2}, {2.3, 1.6}), true);
    Tensor probe = rng.tensor({3});
    report("bilinear_sample", grad_check(
        [probe](const std::vector<Var>& l) {
          return vsum(mul(bilinear_sample(l[0], l[1]), constant(probe)));
        },
        {fmap, uv}));
  }
  {
    Var x = make_leaf(rng.tensor({3, 5}), true);
    Tensor probe = rng.tensor({3, 5});
    report("softmax", grad_check(
        [probe](const std::vector<Var>& l) {
          return vsum(mul(softmax_last(l[0]), constant(probe)));
        },
        {x}));
  }
  {
    const int C = 8;
    MhaWeights w;
    w.n_heads = 2;
    for (LinearMap* lm : {&w.wq, &w.wk, &w.wv, &w.wo}) {
      lm->weight = make_leaf(rng.tensor({C, C}, -0.4, 0.4), true);
      lm->bias = make_leaf(rng.tensor({C}, -0.1, 0.1), true);
    }
    Var q = make_leaf(rng.tensor({3, C}), true);
    Var kv = make_leaf(rng.tensor({4, C}), true);
    Tensor probe = rng.tensor({3, C});
    report("mha", grad_check(
        [&, probe](const std::vector<Var>&) {
          return vsum(mul(mha(q, kv, kv, w), constant(probe)));
        },
        {q, kv, w.wq.weight, w.wk.weight, w.wv.weight, w.wo.weight}));
  }
  {
    const BevGridSpec spec{-16, 16, -16, 16, -2, 2, 4, 8, 8};
    Box3D b;
    b.center = {2.0, -3.0, 0.0};
    Heatmap gt = draw_gt_heatmap({b}, spec, 2);
    Var logits = make_leaf(rng.tensor({8, 8}, -2.0, 2.0), true);
    report("gaussian_focal_loss", grad_check(
        [&gt](const std::vector<Var>& l) {
          return gaussian_focal_loss(sigmoid(l[0]), gt);
        },
        {logits}));
  }
  {
    const CameraRig rig = make_default_rig();
    const int C = 4;
    PcaWeights w;
    w.n_heads = 2;
    w.n_points = 2;
    for (int h = 0; h < 2; ++h) {
      LinearMap vp;
      vp.weight = make_leaf(rng.tensor({C / 2, C}, -0.5, 0.5), true);
      vp.bias = make_leaf(rng.tensor({C / 2}, -0.1, 0.1), true);
      w.value_proj.push_back(vp);
    }
    w.output_proj.weight = make_leaf(rng.tensor({C, C}, -0.5, 0.5), true);
    w.output_proj.bias = make_leaf(rng.tensor({C}, -0.1, 0.1), true);
    w.offset_head.weight = make_leaf(rng.tensor({12, C}, -0.3, 0.3), true);
    w.offset_head.bias = make_leaf(rng.tensor({12}, -1.0, 1.0), true);
    w.attn_head.weight = make_leaf(rng.tensor({4, C}, -0.5, 0.5), true);
    w.attn_head.bias = make_leaf(rng.tensor({4}, -0.5, 0.5), true);
    QuerySet qs;
    qs.features = make_leaf(rng.tensor({2, C}), true);
    qs.pos_enc = make_leaf(rng.tensor({2, C}, -0.2, 0.2), true);
    qs.centers = {{5.0, 1.0, 0.0}, {-4.0, 3.0, 0.5}};
    FrameFeatures fr;
    fr.rig = &rig;
    std::vector<Var> maps;
    for (int n = 0; n < rig.n_views(); ++n) {
      maps.push_back(make_leaf(rng.tensor({C, 6, 6}), true));
      fr.maps.push_back(maps.back());
    }
    Tensor probe = rng.tensor({2, C});
    std::vector<Var> leaves = {qs.features,        qs.pos_enc,
                               w.offset_head.weight, w.offset_head.bias,
                               w.attn_head.weight,  w.output_proj.weight,
                               w.value_proj[0].weight, w.value_proj[1].weight,
                               maps[0], maps[1], maps[2], maps[3]};
    report("pca_forward", grad_check(
        [&, probe](const std::vector<Var>&) {
          return vsum(mul(pca_forward(qs, fr, w), constant(probe)));
        },
        leaves));
  }
  {
    DecoderConfig cfg;
    cfg.layers = 1;
    cfg.channels = 8;
    cfg.n_heads = 2;
    cfg.n_points = 2;
    cfg.n_query = 4;
    cfg.n_classes = 2;
    cfg.ffn_hidden = 8;
    const BevGridSpec grid{-16, 16, -16, 16, -2, 2, 2, 8, 8};
    const CameraRig rig = make_default_rig();
    DetectorModel m = build_model(cfg, grid, ModelFlags{}, 3);
    Rng nudge(4);
    for (auto& [name, p] : m.named_params())
      if (name.find("offset") != std::string::npos ||
          name.find("attn") != std::string::npos)
        for (auto& v : p->value.vec()) v = nudge.uniform(-0.2, 0.2);
    FrameInput frame;
    frame.rig = &rig;
    for (int n = 0; n < rig.n_views(); ++n)
      frame.feature_maps.push_back(make_leaf(rng.tensor({cfg.channels, 6, 6})));
    Box3D b;
    b.center = {5.0, 2.0, 0.0};
    b.class_id = 1;
    frame.gt_boxes.push_back(b);
    std::vector<Var> leaves = {frame.feature_maps[0]};
    for (auto& [name, p] : m.named_params())
      if (name.find("layer0.cls") != std::string::npos ||
          name.find("layer0.reg") != std::string::npos ||
          name.find("layer0.pca.offset") != std::string::npos)
        leaves.push_back(p);
    for (auto& l : leaves) l->requires_grad = true;
    report("decoder_loss(1 layer)", grad_check(
        [&](const std::vector<Var>&) {
          ForwardResult fwd = model_forward(m, frame, nullptr);
          return detection_loss(m, fwd, frame.gt_boxes, false).loss;
        },
        leaves));
  }
  return failures == 0 ? 0 : 1;
}

// ---------------------------------------------------------------------------
// train / eval
// ---------------------------------------------------------------------------

int run_train(const Config& cfg, const std::string& out_dir) {
  fs::create_directories(out_dir);
  Harness h(cfg);
  auto scenes = h.make_scenes(cfg.train_scenes, cfg.seed * 1000ULL + 100ULL);

  std::ofstream loss_csv(out_dir + "/loss.csv");
  loss_csv << "step,total,cls,reg,heatmap\n";
  h.train(scenes, cfg.train_steps, [&](int s, const LossReport& r) {
    loss_csv << s << "," << r.total << "," << r.cls << "," << r.reg << ","
             << r.heatmap << "\n";
    if (s % 100 == 0)
      std::printf("step %5d  loss %.4f  (cls %.4f reg %.4f hm %.4f)\n", s,
                  r.total, r.cls, r.reg, r.heatmap);
  });
  save_checkpoint(out_dir, h.model, config_hash(cfg));
  write_text(out_dir + "/config.cfg", emit_config(cfg));
  std::ofstream scene_file(out_dir + "/scene0.scene");
  save_scene(scene_file, scenes[0]);
  std::printf("checkpoint written to %s\n", out_dir.c_str());
  return 0;
}

int run_eval(const Config& cfg, const std::string& out_dir,
             const std::string& checkpoint) {
  fs::create_directories(out_dir);
  Harness h(cfg);
  if (!checkpoint.empty()) load_checkpoint(checkpoint, h.model);
  auto scenes = h.make_scenes(4, cfg.seed * 1000ULL + 900ULL);
  Harness::SequenceResult last;
  EvalReport rep = h.evaluate_scenes(scenes, &last);

  std::ofstream csv(out_dir + "/report.csv");
  csv << "metric,value\n";
  for (auto& [thr, ap] : rep.ap_at_thresholds)
    csv << "ap@" << thr << "," << ap << "\n";
  csv << "mean_ate," << rep.mean_ate << "\n";
  csv << "mean_ave," << rep.mean_ave << "\n";
  csv << "recall@2," << rep.recall << "\n";

  if (!last.heatmaps.empty()) {
    write_heatmap_svg(out_dir + "/heatmap.svg", last.heatmaps.back(),
                      last.selected_per_frame.back());
    write_bev_svg(out_dir + "/bev.svg", last.preds_per_frame.back(),
                  last.gt_per_frame.back(), cfg.grid);
  }
  for (auto& [thr, ap] : rep.ap_at_thresholds)
    std::printf("AP@%-3g %.3f\n", thr, ap);
  std::printf("ATE %.3f  AVE %.3f  recall@2 %.3f\n", rep.mean_ate, rep.mean_ave,
              rep.recall);
  return 0;
}

// ---------------------------------------------------------------------------
// bench
// ---------------------------------------------------------------------------

int run_bench(const Config& cfg, const std::string& out_dir) {
  fs::create_directories(out_dir);
  std::ofstream csv(out_dir + "/bench.csv");
  csv << "kernel,param,value,ms\n";
  Rng rng(cfg.seed + 7);
  const CameraRig rig = make_default_rig();
  const int C = 16;

  auto time_ms = [](auto&& fn, int reps) {
    const auto t0 = std::chrono::steady_clock::now();
    for (int i = 0; i < reps; ++i) fn();
    const auto t1 = std::chrono::steady_clock::now();
    return std::chrono::duration<double, std::milli>(t1 - t0).count() / reps;
  };

  for (int side : {4, 8, 16, 32}) {
    const BevGridSpec spec{-16, 16, -16, 16, -2, 2, 4, side, side};
    ProjectedGrid grid = build_projected_grid(spec, rig, 32, 32);
    std::vector<Var> maps;
    for (int n = 0; n < rig.n_views(); ++n)
      maps.push_back(constant(rng.tensor({C, 32, 32})));
    const double ms = time_ms([&] { volumetric_sample(maps, grid); }, 5);
    csv << "volumetric_sample,grid_side," << side << "," << ms << "\n";
    std::printf("volumetric_sample  grid %3dx%-3d  %8.3f ms\n", side, side, ms);
  }

  for (int nq : {5, 10, 25, 50, 100}) {
    PcaWeights w;
    w.n_heads = 4;
    w.n_points = 4;
    for (int h = 0; h < 4; ++h) {
      LinearMap vp;
      vp.weight = constant(rng.tensor({C / 4, C}, -0.3, 0.3));
      vp.bias = constant(rng.tensor({C / 4}));
      w.value_proj.push_back(vp);
    }
    w.output_proj.weight = constant(rng.tensor({C, C}, -0.3, 0.3));
    w.output_proj.bias = constant(rng.tensor({C}));
    w.offset_head.weight = constant(rng.tensor({48, C}, -0.1, 0.1));
    w.offset_head.bias = constant(rng.tensor({48}, -1.0, 1.0));
    w.attn_head.weight = constant(rng.tensor({16, C}, -0.3, 0.3));
    w.attn_head.bias = constant(rng.tensor({16}));
    QuerySet qs;
    qs.features = constant(rng.tensor({nq, C}));
    qs.pos_enc = constant(rng.tensor({nq, C}, -0.2, 0.2));
    for (int q = 0; q < nq; ++q)
      qs.centers.push_back({rng.uniform(-10, 10), rng.uniform(-10, 10), 0.0});
    FrameFeatures fr;
    fr.rig = &rig;
    for (int n = 0; n < rig.n_views(); ++n)
      fr.maps.push_back(constant(rng.tensor({C, 32, 32})));
    const double ms = time_ms([&] { pca_forward(qs, fr, w); }, 5);
    csv << "pca_forward,n_query," << nq << "," << ms << "\n";
    std::printf("pca_forward        n_query %4d  %8.3f ms\n", nq, ms);
  }
  return 0;
}

// ---------------------------------------------------------------------------
// dump-heatmap
// ---------------------------------------------------------------------------

int run_dump_heatmap(const Config& cfg, const std::string& out_dir,
                     const std::string& checkpoint, const std::string& scene_file,
                     int frame_index) {
  fs::create_directories(out_dir);
  Harness h(cfg);
  if (!checkpoint.empty()) load_checkpoint(checkpoint, h.model);
  Scene scene;
  if (!scene_file.empty()) {
    std::ifstream is(scene_file);
    if (!is) throw std::runtime_error("cannot read " + scene_file);
    scene = load_scene(is);
  } else {
    scene = h.make_scenes(1, cfg.seed * 1000ULL + 100ULL)[0];
  }
  if (frame_index < 0 || frame_index >= scene.n_frames())
    throw std::runtime_error("frame index out of range");
  const double t = scene.frame_time(frame_index);

  std::vector<Tensor> maps =
      render_features(scene, t, cfg.feat_channels, cfg.feat_size, cfg.feat_size);
  FrameInput frame;
  std::vector<Var> vars = h.make_feature_vars(maps);
  frame.feature_maps = vars;
  frame.rig = &scene.rig;
  frame.ego_pose = scene.ego_pose(t);
  ForwardResult fwd = model_forward(h.model, frame, nullptr);

  const std::vector<Box3D> gt = ground_truth(scene, t, cfg.grid);
  Heatmap gt_hm = draw_gt_heatmap(gt, cfg.grid, h.model.gt_radius);

  write_heatmap_csv(out_dir + "/heatmap_pred.csv", fwd.heatmap_values.values);
  write_heatmap_csv(out_dir + "/heatmap_gt.csv", gt_hm.values);
  write_heatmap_svg(out_dir + "/heatmap_pred.svg", fwd.heatmap_values, fwd.selected);
  write_heatmap_svg(out_dir + "/heatmap_gt.svg", gt_hm, {});
  save_tensor_file(out_dir + "/heatmap_pred.tensor", fwd.heatmap_values.values);
  std::printf("wrote heatmap CSV/SVG/tensor dumps to %s\n", out_dir.c_str());
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"multi-view 3D detection toolkit"};
  app.require_subcommand(1);

  CommonOpts o_grad, o_train, o_eval, o_bench, o_dump;
  std::string eval_ckpt, dump_ckpt, dump_scene;
  int dump_frame = 0;

  CLI::App* c_grad = app.add_subcommand("gradcheck", "finite-difference suite");
  add_common(c_grad, o_grad);
  CLI::App* c_train = app.add_subcommand("train", "train on generated scenes");
  add_common(c_train, o_train);
  CLI::App* c_eval = app.add_subcommand("eval", "evaluate a checkpoint");
  add_common(c_eval, o_eval);
  c_eval->add_option("--checkpoint", eval_ckpt, "checkpoint directory");
  CLI::App* c_bench = app.add_subcommand("bench", "kernel micro-benchmarks");
  add_common(c_bench, o_bench);
  CLI::App* c_dump =
      app.add_subcommand("dump-heatmap", "dump predicted and gt heatmaps");
  add_common(c_dump, o_dump);
  c_dump->add_option("--checkpoint", dump_ckpt, "checkpoint directory");
  c_dump->add_option("--scene", dump_scene, "scene file (default: generated)");
  c_dump->add_option("--frame", dump_frame, "frame index");

  CLI11_PARSE(app, argc, argv);

  try {
    if (c_grad->parsed()) return run_gradcheck();
    if (c_train->parsed()) return run_train(resolve_config(o_train), o_train.out_dir);
    if (c_eval->parsed())
      return run_eval(resolve_config(o_eval), o_eval.out_dir, eval_ckpt);
    if (c_bench->parsed()) return run_bench(resolve_config(o_bench), o_bench.out_dir);
    if (c_dump->parsed())
      return run_dump_heatmap(resolve_config(o_dump), o_dump.out_dir, dump_ckpt,
                              dump_scene, dump_frame);
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 1;
  }
  return 0;
}
