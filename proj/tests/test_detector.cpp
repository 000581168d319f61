#include <catch2/catch_amalgamated.hpp>

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <numeric>

#include "mvdet/detector.hpp"
#include "mvdet/gradcheck.hpp"
#include "mvdet/synth.hpp"

using namespace mvdet;

namespace {

// Brute-force assignment oracle: try every permutation of column subsets.
double best_assignment_cost(const std::vector<std::vector<double>>& cost) {
  const int n = static_cast<int>(cost.size());
  const int m = static_cast<int>(cost[0].size());
  std::vector<int> cols(static_cast<std::size_t>(m));
  std::iota(cols.begin(), cols.end(), 0);
  double best = std::numeric_limits<double>::infinity();
  // permute all columns, take the first n
  std::sort(cols.begin(), cols.end());
  do {
    double acc = 0.0;
    for (int i = 0; i < n; ++i) acc += cost[static_cast<std::size_t>(i)][static_cast<std::size_t>(cols[static_cast<std::size_t>(i)])];
    best = std::min(best, acc);
  } while (std::next_permutation(cols.begin(), cols.end()));
  return best;
}

DecoderConfig tiny_config() {
  DecoderConfig c;
  c.layers = 1;
  c.channels = 8;
  c.n_heads = 2;
  c.n_points = 2;
  c.n_query = 4;
  c.n_classes = 2;
  c.ffn_hidden = 8;
  return c;
}

BevGridSpec tiny_grid() { return {-16, 16, -16, 16, -2, 2, 2, 8, 8}; }

FrameInput tiny_frame(Rng& rng, const CameraRig& rig, int C, int fs) {
  FrameInput f;
  f.rig = &rig;
  for (int n = 0; n < rig.n_views(); ++n)
    f.feature_maps.push_back(make_leaf(rng.tensor({C, fs, fs})));
  Box3D b;
  b.center = {5.0, 2.0, 0.0};
  b.w = 2.0;
  b.l = 4.0;
  b.h = 1.5;
  b.yaw = 0.4;
  b.class_id = 1;
  f.gt_boxes.push_back(b);
  return f;
}

}  // namespace

TEST_CASE("assignment solver matches the permutation oracle") {
  Rng rng(61);
  for (int trial = 0; trial < 20; ++trial) {
    const int n = rng.uniform_int(1, 4);
    const int m = n + rng.uniform_int(0, 3);
    std::vector<std::vector<double>> cost(static_cast<std::size_t>(n));
    for (auto& row : cost) {
      row.resize(static_cast<std::size_t>(m));
      for (auto& v : row) v = rng.uniform(0.0, 10.0);
    }
    std::vector<int> a = hungarian_assign(cost);
    double got = 0.0;
    std::vector<char> used(static_cast<std::size_t>(m), 0);
    for (int i = 0; i < n; ++i) {
      REQUIRE(a[static_cast<std::size_t>(i)] >= 0);
      REQUIRE_FALSE(used[static_cast<std::size_t>(a[static_cast<std::size_t>(i)])]);
      used[static_cast<std::size_t>(a[static_cast<std::size_t>(i)])] = 1;
      got += cost[static_cast<std::size_t>(i)][static_cast<std::size_t>(a[static_cast<std::size_t>(i)])];
    }
    REQUIRE(got == Catch::Approx(best_assignment_cost(cost)).margin(1e-9));
  }
  REQUIRE_THROWS_AS(hungarian_assign({{1.0}, {2.0}}), std::invalid_argument);
}

TEST_CASE("box decoding matches a scalar transcription") {
  const double raw[kRegDim] = {0.3, -0.8, 0.1, std::log(1.9), std::log(4.2),
                               std::log(1.4), std::sin(0.7), std::cos(0.7),
                               1.5, -0.5};
  const double logits[3] = {-1.0, 2.0, 0.5};
  const Vec3 base{3.0, -1.0, 0.2};
  Box3D b = decode_box(raw, base, logits, 3, 4.0);
  REQUIRE(b.center.x == Catch::Approx(3.0 + 4.0 * std::tanh(0.3)).margin(1e-12));
  REQUIRE(b.center.y == Catch::Approx(-1.0 + 4.0 * std::tanh(-0.8)).margin(1e-12));
  REQUIRE(b.w == Catch::Approx(1.9).margin(1e-12));
  REQUIRE(b.l == Catch::Approx(4.2).margin(1e-12));
  REQUIRE(b.h == Catch::Approx(1.4).margin(1e-12));
  REQUIRE(b.yaw == Catch::Approx(0.7).margin(1e-12));
  REQUIRE(b.vx == 1.5);
  REQUIRE(b.vy == -0.5);
  REQUIRE(b.class_id == 1);
  REQUIRE(b.score == Catch::Approx(1.0 / (1.0 + std::exp(-2.0))).margin(1e-12));
}

TEST_CASE("matching pairs nearby centers and rejects gt surplus") {
  std::vector<Box3D> preds(3), gts(2);
  preds[0].center = {0.0, 0.0, 0.0};
  preds[1].center = {10.0, 0.0, 0.0};
  preds[2].center = {0.0, 10.0, 0.0};
  gts[0].center = {9.5, 0.0, 0.0};
  gts[1].center = {0.5, 0.0, 0.0};
  MatchResult m = hungarian_match(preds, gts, nullptr, 0.0, 1.0);
  REQUIRE(m.pred_of_gt[0] == 1);
  REQUIRE(m.pred_of_gt[1] == 0);
  std::vector<Box3D> too_many(4);
  REQUIRE_THROWS_AS(hungarian_match(preds, too_many, nullptr, 0.0, 1.0),
                    std::invalid_argument);
}

TEST_CASE("classification cost steers the matching") {
  std::vector<Box3D> preds(2), gts(1);
  preds[0].center = {0.0, 0.0, 0.0};
  preds[1].center = {0.6, 0.0, 0.0};
  gts[0].center = {0.3, 0.0, 0.0};
  gts[0].class_id = 0;
  // Equal center costs up to 0.3 each; class prob breaks the tie hard.
  std::vector<Tensor> probs = {Tensor({1}, {0.01}), Tensor({1}, {0.99})};
  MatchResult m = hungarian_match(preds, gts, &probs, 2.0, 1.0);
  REQUIRE(m.pred_of_gt[0] == 1);
}

TEST_CASE("focal classification loss matches a scalar oracle") {
  Rng rng(62);
  const int nq = 5, k = 3;
  Var logits = make_leaf(rng.tensor({nq, k}, -2.0, 2.0), true);
  std::vector<int> assign = {1, -1, 0, -1, 2};
  const int n_matched = 3;
  const double alpha = 0.25, gamma = 2.0;
  double want = 0.0;
  for (int q = 0; q < nq; ++q)
    for (int c = 0; c < k; ++c) {
      const double p = 1.0 / (1.0 + std::exp(-logits->value.at2(q, c)));
      if (assign[static_cast<std::size_t>(q)] == c)
        want += alpha * std::pow(1.0 - p, gamma) * std::log(p);
      else
        want += (1.0 - alpha) * std::pow(p, gamma) * std::log(1.0 - p);
    }
  want = -want / n_matched;
  Var loss = focal_cls_loss(logits, assign, n_matched, alpha, gamma);
  REQUIRE(loss->value[0] == Catch::Approx(want).margin(1e-10));

  auto fn = [&assign, n_matched](const std::vector<Var>& l) {
    return focal_cls_loss(l[0], assign, n_matched);
  };
  REQUIRE(grad_check(fn, {logits}).pass);
}

TEST_CASE("forward pass produces consistent shapes and clamped centers") {
  Rng rng(63);
  const CameraRig rig = make_default_rig();
  DecoderConfig cfg = tiny_config();
  BevGridSpec grid = tiny_grid();
  DetectorModel m = build_model(cfg, grid, ModelFlags{}, 5);
  FrameInput frame = tiny_frame(rng, rig, cfg.channels, 8);
  ForwardResult fwd = model_forward(m, frame, nullptr);

  REQUIRE(fwd.heatmap_logits->value.shape() == std::vector<int>{8, 8});
  REQUIRE(static_cast<int>(fwd.layer_cls.size()) == cfg.layers);
  for (int l = 0; l < cfg.layers; ++l) {
    REQUIRE(fwd.layer_cls[static_cast<std::size_t>(l)]->value.shape() ==
            std::vector<int>{cfg.n_query, cfg.n_classes});
    REQUIRE(fwd.layer_reg[static_cast<std::size_t>(l)]->value.shape() ==
            std::vector<int>{cfg.n_query, kRegDim});
  }
  REQUIRE_FALSE(fwd.selected.empty());
  for (const auto& c : fwd.final_queries.centers) {
    REQUIRE(c.x >= grid.x_min);
    REQUIRE(c.x <= grid.x_max);
    REQUIRE(c.y >= grid.y_min);
    REQUIRE(c.y <= grid.y_max);
  }
}

TEST_CASE("one-layer decoder loss passes finite differences") {
  Rng rng(64);
  const CameraRig rig = make_default_rig();
  DecoderConfig cfg = tiny_config();
  BevGridSpec grid = tiny_grid();
  DetectorModel m = build_model(cfg, grid, ModelFlags{}, 7);
  FrameInput frame = tiny_frame(rng, rig, cfg.channels, 6);

  // Offset and attention heads start at zero; nudge them so their gradient
  // paths (projection Jacobian, softmax) are exercised away from the origin.
  auto params = m.named_params();
  Rng nudge(65);
  for (auto& [name, p] : params)
    if (name.find("offset") != std::string::npos ||
        name.find("attn") != std::string::npos)
      for (auto& v : p->value.vec()) v = nudge.uniform(-0.2, 0.2);

  std::vector<Var> leaves = {frame.feature_maps[0], frame.feature_maps[1]};
  for (auto& [name, p] : params)
    if (name.find("layer0.pca.offset") != std::string::npos ||
        name.find("layer0.cls") != std::string::npos ||
        name.find("layer0.reg") != std::string::npos)
      leaves.push_back(p);
  for (auto& l : leaves) l->requires_grad = true;

  auto loss = [&](const std::vector<Var>&) {
    ForwardResult fwd = model_forward(m, frame, nullptr);
    return detection_loss(m, fwd, frame.gt_boxes, false).loss;
  };
  auto rep = grad_check(loss, leaves, 1e-5, 1e-4);
  INFO(rep.worst_input << " err " << rep.max_rel_error);
  REQUIRE(rep.pass);
}

TEST_CASE("training on one frame reduces the loss") {
  Rng rng(66);
  const CameraRig rig = make_default_rig();
  DecoderConfig cfg = tiny_config();
  DetectorModel m = build_model(cfg, tiny_grid(), ModelFlags{}, 9);
  FrameInput frame = tiny_frame(rng, rig, cfg.channels, 8);
  auto params = m.named_params();
  AdamW opt;
  opt.lr = 1e-3;
  TrainBatch batch{frame, nullptr};
  const double first = train_step(m, opt, batch, params).total;
  double last = first;
  for (int s = 0; s < 40; ++s) last = train_step(m, opt, batch, params).total;
  REQUIRE(last < first);
}

TEST_CASE("optimizer update matches the decoupled-decay reference") {
  Var p = make_leaf(Tensor({1}, {2.0}), true);
  p->ensure_grad();
  p->grad[0] = 0.5;
  std::vector<std::pair<std::string, Var>> params = {{"p", p}};
  AdamW opt;
  opt.lr = 0.1;
  opt.weight_decay = 0.01;
  opt.step(params);
  // Bias-corrected first step: mhat = g, vhat = g^2, update = g/|g| = 1.
  const double want = 2.0 - 0.1 * (0.5 / (0.5 + 1e-8) + 0.01 * 2.0);
  REQUIRE(p->value[0] == Catch::Approx(want).margin(1e-12));
}

TEST_CASE("checkpoints round-trip bit-exactly and validate names/shapes") {
  namespace fs = std::filesystem;
  Rng rng(67);
  DecoderConfig cfg = tiny_config();
  DetectorModel m = build_model(cfg, tiny_grid(), ModelFlags{}, 11);
  const std::string dir = (fs::temp_directory_path() / "mvdet_ckpt_test").string();
  fs::create_directories(dir);
  save_checkpoint(dir, m, "deadbeef");

  // Perturb, then restore.
  auto params = m.named_params();
  std::vector<Tensor> original;
  for (auto& [name, p] : params) {
    original.push_back(p->value);
    for (auto& v : p->value.vec()) v += rng.uniform(-1.0, 1.0);
  }
  load_checkpoint(dir, m);
  for (std::size_t i = 0; i < params.size(); ++i)
    for (std::size_t j = 0; j < original[i].numel(); ++j)
      REQUIRE(params[i].second->value[j] == original[i][j]);

  // Manifest is text and carries the config hash.
  std::ifstream manifest(dir + "/manifest.txt");
  std::string line;
  std::getline(manifest, line);
  REQUIRE(line == "mvdet-checkpoint v1");
  std::getline(manifest, line);
  REQUIRE(line == "config_hash deadbeef");

  // Loading into a mismatched model fails loudly.
  DecoderConfig other = cfg;
  other.channels = 16;
  DetectorModel m2 = build_model(other, tiny_grid(), ModelFlags{}, 11);
  REQUIRE_THROWS_AS(load_checkpoint(dir, m2), std::runtime_error);
  fs::remove_all(dir);
}

TEST_CASE("deep supervision: every layer contributes to the loss") {
  Rng rng(68);
  const CameraRig rig = make_default_rig();
  DecoderConfig cfg = tiny_config();
  cfg.layers = 2;
  DetectorModel m = build_model(cfg, tiny_grid(), ModelFlags{}, 13);
  FrameInput frame = tiny_frame(rng, rig, cfg.channels, 8);
  ForwardResult fwd = model_forward(m, frame, nullptr);
  DetectionLossResult full = detection_loss(m, fwd, frame.gt_boxes, false);
  REQUIRE(full.matches.size() == 2);

  // Zeroing one layer's contribution changes the total.
  ForwardResult fwd1 = fwd;
  fwd1.layer_cls.pop_back();
  fwd1.layer_reg.pop_back();
  fwd1.layer_centers.pop_back();
  DetectionLossResult partial = detection_loss(m, fwd1, frame.gt_boxes, false);
  REQUIRE(partial.matches.size() == 1);
  REQUIRE(std::abs(full.report.total - partial.report.total) > 1e-12);
}
