#include <catch2/catch_amalgamated.hpp>

#include <cmath>

#include "mvdet/bev.hpp"
#include "mvdet/gradcheck.hpp"
#include "mvdet/synth.hpp"

using namespace mvdet;

namespace {

// Nested-loop reference for the volumetric pool: project every cell center,
// bilinear-sample every valid view, average. Shares no code with the library
// path beyond project_one.
Tensor volumetric_reference(const std::vector<Tensor>& maps,
                            const BevGridSpec& spec, const CameraRig& rig,
                            int feat_w, int feat_h) {
  const int C = maps[0].dim(0);
  Tensor out({C, spec.depth, spec.height, spec.width});
  auto sample = [&](const Tensor& m, int c, double u, double v) {
    const int x0 = static_cast<int>(std::floor(u));
    const int y0 = static_cast<int>(std::floor(v));
    double acc = 0.0;
    for (int dy = 0; dy <= 1; ++dy)
      for (int dx = 0; dx <= 1; ++dx) {
        const int x = x0 + dx, y = y0 + dy;
        if (x < 0 || x >= m.dim(2) || y < 0 || y >= m.dim(1)) continue;
        const double w =
            (dx == 0 ? 1.0 - (u - x0) : u - x0) * (dy == 0 ? 1.0 - (v - y0) : v - y0);
        acc += w * m.at3(c, y, x);
      }
    return acc;
  };
  for (int iz = 0; iz < spec.depth; ++iz)
    for (int iy = 0; iy < spec.height; ++iy)
      for (int ix = 0; ix < spec.width; ++ix) {
        const Vec3 p{spec.cell_x(ix), spec.cell_y(iy), spec.cell_z(iz)};
        int n_valid = 0;
        std::vector<double> acc(static_cast<std::size_t>(C), 0.0);
        for (std::size_t n = 0; n < rig.cameras.size(); ++n) {
          const Projection pr = project_one(rig.cameras[n], p);
          if (!pr.valid) continue;
          ++n_valid;
          const double u = image_to_feat(pr.u, rig.cameras[n].width, feat_w);
          const double v = image_to_feat(pr.v, rig.cameras[n].height, feat_h);
          for (int c = 0; c < C; ++c) acc[static_cast<std::size_t>(c)] += sample(maps[n], c, u, v);
        }
        if (n_valid == 0) continue;
        for (int c = 0; c < C; ++c)
          out.vec()[((static_cast<std::size_t>(c) * spec.depth + iz) * spec.height + iy) *
                        spec.width +
                    ix] = acc[static_cast<std::size_t>(c)] / n_valid;
      }
  return out;
}

}  // namespace

TEST_CASE("volumetric sample matches the nested-loop reference") {
  Rng rng(31);
  const CameraRig rig = make_default_rig();
  const BevGridSpec spec{-16, 16, -16, 16, -2, 2, 3, 6, 6};
  const int feat = 8, C = 4;
  std::vector<Var> maps;
  std::vector<Tensor> raw;
  for (int n = 0; n < rig.n_views(); ++n) {
    raw.push_back(rng.tensor({C, feat, feat}));
    maps.push_back(make_leaf(raw.back()));
  }
  ProjectedGrid grid = build_projected_grid(spec, rig, feat, feat);
  Var out = volumetric_sample(maps, grid);
  Tensor want = volumetric_reference(raw, spec, rig, feat, feat);
  REQUIRE(out->value.shape() == want.shape());
  for (std::size_t i = 0; i < want.numel(); ++i)
    REQUIRE(out->value[i] == Catch::Approx(want[i]).margin(1e-12));
}

TEST_CASE("cells outside every frustum pool to exactly zero") {
  // One forward camera only: everything behind it must be zero.
  CameraRig rig{{make_camera(0.0, M_PI / 2, 64, 64)}};
  const BevGridSpec spec{-16, 16, -16, 16, -2, 2, 2, 4, 4};
  ProjectedGrid grid = build_projected_grid(spec, rig, 8, 8);
  Var map = make_leaf(Tensor({2, 8, 8}, 5.0));
  Var out = volumetric_sample({map}, grid);
  bool found_zero_cell = false;
  for (int iz = 0; iz < spec.depth; ++iz)
    for (int iy = 0; iy < spec.height; ++iy)
      for (int ix = 0; ix < spec.width; ++ix) {
        const auto& cell = grid.cells[grid.cell_index(iz, iy, ix)];
        if (!cell[0].valid) {
          found_zero_cell = true;
          for (int c = 0; c < 2; ++c)
            REQUIRE(out->value.vec()[((static_cast<std::size_t>(c) * spec.depth + iz) *
                                          spec.height +
                                      iy) *
                                         spec.width +
                                     ix] == 0.0);
        }
      }
  REQUIRE(found_zero_cell);
}

TEST_CASE("volumetric sample gradients pass finite differences") {
  Rng rng(32);
  const CameraRig rig = make_default_rig();
  const BevGridSpec spec{-16, 16, -16, 16, -2, 2, 2, 4, 4};
  ProjectedGrid grid = build_projected_grid(spec, rig, 6, 6);
  std::vector<Var> maps;
  for (int n = 0; n < rig.n_views(); ++n)
    maps.push_back(make_leaf(rng.tensor({2, 6, 6}), true));
  Tensor probe = rng.tensor({2, 2, 4, 4});
  auto loss = [&grid, probe](const std::vector<Var>& l) {
    return vsum(mul(volumetric_sample(l, grid), constant(probe)));
  };
  auto rep = grad_check(loss, maps);
  INFO(rep.worst_input << " err " << rep.max_rel_error);
  REQUIRE(rep.pass);
}

TEST_CASE("image_to_feat maps pixel centers consistently") {
  // Full-res pixel 0 center and feature pixel 0 center coincide under the
  // half-pixel convention: ((0+0.5)*s - 0.5) with s = 8/64 = 1/8.
  REQUIRE(image_to_feat(0.0, 64, 8) == Catch::Approx(-0.4375).margin(1e-12));
  // Middle of the image maps to the middle of the feature map.
  REQUIRE(image_to_feat(31.5, 64, 8) == Catch::Approx(3.5).margin(1e-12));
}

TEST_CASE("gt heatmap: center cells are exactly one, falloff is gaussian") {
  const BevGridSpec spec{-16, 16, -16, 16, -2, 2, 4, 16, 16};
  Box3D box;
  box.center = {1.0, -3.0, 0.0};
  Heatmap hm = draw_gt_heatmap({box}, spec, 3);
  const int cx = spec.x_to_cell(1.0), cy = spec.y_to_cell(-3.0);
  REQUIRE(hm.values.at2(cy, cx) == 1.0);
  const double sigma = 7.0 / 6.0;
  REQUIRE(hm.values.at2(cy, cx + 2) ==
          Catch::Approx(std::exp(-4.0 / (2.0 * sigma * sigma))).margin(1e-12));
  // Monotone decay along a row away from the peak.
  REQUIRE(hm.values.at2(cy, cx + 1) > hm.values.at2(cy, cx + 2));
}

TEST_CASE("gt heatmap combines overlapping boxes by max") {
  const BevGridSpec spec{-16, 16, -16, 16, -2, 2, 4, 16, 16};
  Box3D a, b;
  a.center = {0.0, 0.0, 0.0};
  b.center = {4.0, 0.0, 0.0};
  Heatmap ha = draw_gt_heatmap({a}, spec, 3);
  Heatmap hb = draw_gt_heatmap({b}, spec, 3);
  Heatmap both = draw_gt_heatmap({a, b}, spec, 3);
  for (std::size_t i = 0; i < both.values.numel(); ++i)
    REQUIRE(both.values[i] ==
            Catch::Approx(std::max(ha.values[i], hb.values[i])).margin(1e-12));
}

TEST_CASE("gaussian focal loss matches a scalar transcription") {
  const BevGridSpec spec{-16, 16, -16, 16, -2, 2, 4, 4, 4};
  Box3D box;
  box.center = {0.0, 0.0, 0.0};
  Heatmap gt = draw_gt_heatmap({box}, spec, 1);
  Rng rng(33);
  Tensor pred({4, 4});
  for (auto& v : pred.vec()) v = rng.uniform(0.05, 0.95);
  // Scalar reference: per-cell penalty-reduced focal terms, alpha=2, beta=4.
  double want = 0.0;
  int n_pos = 0;
  for (std::size_t i = 0; i < 16; ++i) {
    const double p = pred[i], y = gt.values[i];
    if (y == 1.0) {
      want += std::pow(1.0 - p, 2.0) * std::log(p);
      ++n_pos;
    } else {
      want += std::pow(1.0 - y, 4.0) * std::pow(p, 2.0) * std::log(1.0 - p);
    }
  }
  want = -want / n_pos;
  Var loss = gaussian_focal_loss(make_leaf(pred), gt);
  REQUIRE(loss->value[0] == Catch::Approx(want).margin(1e-12));
}

TEST_CASE("gaussian focal loss is zero-ish for a perfect prediction and grads pass") {
  const BevGridSpec spec{-16, 16, -16, 16, -2, 2, 4, 8, 8};
  Box3D box;
  box.center = {2.0, 2.0, 0.0};
  Heatmap gt = draw_gt_heatmap({box}, spec, 2);
  // Ideal prediction (1 at centers, 0 elsewhere): loss must be tiny but
  // finite thanks to the clamp.
  Tensor ideal(gt.values.shape());
  for (std::size_t i = 0; i < ideal.numel(); ++i)
    ideal[i] = gt.values[i] == 1.0 ? 1.0 : 0.0;
  Var perfect = gaussian_focal_loss(constant(ideal), gt);
  REQUIRE(perfect->value[0] < 1e-4);
  REQUIRE(std::isfinite(perfect->value[0]));

  Rng rng(34);
  Var logits = make_leaf(rng.tensor({8, 8}, -2.0, 2.0), true);
  auto loss = [&gt](const std::vector<Var>& l) {
    return gaussian_focal_loss(sigmoid(l[0]), gt);
  };
  REQUIRE(grad_check(loss, {logits}).pass);
}

TEST_CASE("window NMS keeps local maxima only, top-k orders by score") {
  const BevGridSpec spec{0, 8, 0, 8, 0, 1, 1, 8, 8};
  Heatmap hm{Tensor({8, 8}), spec};
  hm.values.at2(2, 2) = 0.9;
  hm.values.at2(2, 3) = 0.8;  // suppressed by the 0.9 neighbor
  hm.values.at2(6, 6) = 0.7;
  auto sel = nms_topk(hm, 3, 4);
  // Background zeros tie everywhere; assert the two real peaks lead.
  REQUIRE(sel.size() >= 2);
  REQUIRE(sel[0].ix == 2);
  REQUIRE(sel[0].iy == 2);
  REQUIRE(sel[0].score == 0.9);
  REQUIRE(sel[1].ix == 6);
  REQUIRE(sel[1].iy == 6);
  for (const auto& c : sel) {
    REQUIRE(!(c.ix == 3 && c.iy == 2));  // the suppressed cell never survives
  }
}

TEST_CASE("NMS top-k truncates and rejects even windows") {
  const BevGridSpec spec{0, 8, 0, 8, 0, 1, 1, 8, 8};
  Heatmap hm{Tensor({8, 8}), spec};
  Rng rng(35);
  for (auto& v : hm.values.vec()) v = rng.uniform(0.0, 1.0);
  auto sel = nms_topk(hm, 3, 2);
  REQUIRE(sel.size() <= 2);
  REQUIRE_THROWS_AS(nms_topk(hm, 4, 2), std::invalid_argument);
}

TEST_CASE("gather_cells routes gradients to the gathered cells only") {
  Rng rng(36);
  Var f = make_leaf(rng.tensor({3, 4, 4}), true);
  std::vector<SelectedCell> cells = {{1, 2, 0, 0, 0.5}, {3, 0, 0, 0, 0.4}};
  Var g = gather_cells(f, cells);
  REQUIRE(g->value.dim(0) == 2);
  REQUIRE(g->value.at2(0, 1) == f->value.at3(1, 2, 1));
  f->ensure_grad();
  backward(vsum(g));
  for (int c = 0; c < 3; ++c) {
    REQUIRE(f->grad.at3(c, 2, 1) == 1.0);
    REQUIRE(f->grad.at3(c, 0, 3) == 1.0);
    REQUIRE(f->grad.at3(c, 0, 0) == 0.0);
  }
}

TEST_CASE("init_queries pads short selections and flags it") {
  Rng rng(37);
  Var f = make_leaf(rng.tensor({4, 4, 4}));
  LinearMap pe;
  pe.weight = make_leaf(rng.tensor({4, 3}));
  pe.bias = make_leaf(rng.tensor({4}));
  std::vector<SelectedCell> sel = {{1, 1, -2.0, -2.0, 0.9}, {2, 2, 2.0, 2.0, 0.8}};
  QuerySet qs = init_queries(sel, f, pe, -0.5, 5);
  REQUIRE(qs.padded);
  REQUIRE(qs.centers.size() == 5);
  REQUIRE(qs.features->value.dim(0) == 5);
  // Padding repeats from the front.
  REQUIRE(qs.centers[2].x == qs.centers[0].x);
  REQUIRE(qs.centers[3].x == qs.centers[1].x);
  REQUIRE(qs.centers[0].z == -0.5);
  REQUIRE_THROWS_AS(init_queries({}, f, pe, 0.0, 5), std::invalid_argument);
}

TEST_CASE("init_queries with learned embeddings ignores F_BEV") {
  Rng rng(38);
  Var f = make_leaf(rng.tensor({4, 4, 4}));
  Var emb = make_leaf(rng.tensor({5, 4}));
  LinearMap pe;
  pe.weight = make_leaf(rng.tensor({4, 3}));
  pe.bias = make_leaf(rng.tensor({4}));
  std::vector<SelectedCell> sel = {{1, 1, -2.0, -2.0, 0.9}, {2, 2, 2.0, 2.0, 0.8}};
  QuerySet qs = init_queries(sel, f, pe, 0.0, 2, emb);
  for (int q = 0; q < 2; ++q)
    for (int c = 0; c < 4; ++c)
      REQUIRE(qs.features->value.at2(q, c) == emb->value.at2(q, c));
}

TEST_CASE("BEV compression is an exact per-cell linear map") {
  Rng rng(39);
  const int C = 3, D = 2, H = 3, W = 3, Cout = 4;
  Var f = make_leaf(rng.tensor({C, D, H, W}));
  BevCompressor comp;
  comp.proj.weight = make_leaf(rng.tensor({Cout, C * D}));
  comp.proj.bias = make_leaf(rng.tensor({Cout}));
  Var out = comp.apply(f);
  REQUIRE(out->value.shape() == std::vector<int>{Cout, H, W});
  for (int y = 0; y < H; ++y)
    for (int x = 0; x < W; ++x)
      for (int co = 0; co < Cout; ++co) {
        double want = comp.proj.bias->value[static_cast<std::size_t>(co)];
        for (int c = 0; c < C; ++c)
          for (int d = 0; d < D; ++d)
            want += comp.proj.weight->value.at2(co, c * D + d) *
                    f->value.vec()[((static_cast<std::size_t>(c) * D + d) * H + y) * W + x];
        REQUIRE(out->value.at3(co, y, x) == Catch::Approx(want).margin(1e-10));
      }
}
