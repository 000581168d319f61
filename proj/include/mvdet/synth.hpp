#pragma once

#include <cmath>
#include <cstdint>
#include <fstream>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "mvdet/autodiff.hpp"
#include "mvdet/bev.hpp"
#include "mvdet/geometry.hpp"
#include "mvdet/gradcheck.hpp"
#include "mvdet/types.hpp"

namespace mvdet {

// ---------------------------------------------------------------------------
// Rig construction
// ---------------------------------------------------------------------------

/// Camera at ego position with the optical axis on the given BEV heading.
/// Camera convention: +z forward, +x right, +y down.
inline CameraModel make_camera(double heading_rad, double hfov_rad, int width,
                               int height, double cam_height = 1.0) {
  CameraModel cam;
  cam.width = width;
  cam.height = height;
  cam.fx = (width / 2.0) / std::tan(hfov_rad / 2.0);
  cam.fy = cam.fx;
  cam.cx = (width - 1) / 2.0;
  cam.cy = (height - 1) / 2.0;
  const double c = std::cos(heading_rad), s = std::sin(heading_rad);
  cam.ego_from_cam.rotation = Mat3{{s, 0, c, -c, 0, s, 0, -1, 0}};
  cam.ego_from_cam.translation = {0.0, 0.0, cam_height};
  return cam;
}

/// Default rig: 4 cameras at 90 degree headings with 100 degree horizontal
/// FOV, so adjacent frusta overlap and objects can straddle views.
inline CameraRig make_default_rig(int image_size = 64) {
  CameraRig rig;
  const double hfov = 100.0 * M_PI / 180.0;
  for (int i = 0; i < 4; ++i)
    rig.cameras.push_back(make_camera(i * M_PI / 2.0, hfov, image_size, image_size));
  return rig;
}

// ---------------------------------------------------------------------------
// Scene
// ---------------------------------------------------------------------------

struct ObjectSpec {
  Vec3 center0;  // world frame at t = 0
  double vx = 0.0, vy = 0.0;  // world-frame m/s, constant velocity
  double w = 1.6, l = 3.8, h = 1.5;
  double yaw = 0.0;  // world frame
  int class_id = 0;

  Vec3 center_at(double t) const {
    return {center0.x + vx * t, center0.y + vy * t, center0.z};
  }
};

struct Scene {
  CameraRig rig;
  std::vector<ObjectSpec> objects;
  double ego_speed = 0.0;      // m/s along the arc
  double ego_yaw_rate = 0.0;   // rad/s
  double duration = 4.0;
  double frame_period = 0.5;
  double noise_sigma = 0.0;  // i.i.d. feature rendering noise
  int n_clutter = 0;         // transient distractor blobs per view per frame
  std::uint64_t seed = 0;

  /// Smooth arc: straight line when yaw_rate ~ 0, circle otherwise.
  EgoPose ego_pose(double t) const {
    EgoPose p;
    p.timestamp = t;
    if (std::abs(ego_yaw_rate) < 1e-9) {
      p.world_from_ego.translation = {ego_speed * t, 0.0, 0.0};
      p.world_from_ego.rotation = Mat3::identity();
    } else {
      const double r = ego_speed / ego_yaw_rate;
      const double a = ego_yaw_rate * t;
      p.world_from_ego.translation = {r * std::sin(a), r * (1.0 - std::cos(a)), 0.0};
      p.world_from_ego.rotation = Mat3::rot_z(a);
    }
    return p;
  }

  int n_frames() const {
    return static_cast<int>(std::floor(duration / frame_period)) + 1;
  }
  double frame_time(int i) const { return i * frame_period; }
};

struct SceneSpec {
  int n_objects = 3;
  double speed_min = 0.0, speed_max = 2.0;  // object speed range, m/s
  double placement_radius = 10.0;           // initial scatter around origin
  double ego_speed = 0.0;
  double ego_yaw_rate = 0.0;
  double duration = 4.0;
  double frame_period = 0.5;
  double noise_sigma = 0.0;
  int n_clutter = 0;
  std::uint64_t seed = 1;
};

inline Scene generate_scene(const SceneSpec& spec) {
  if (spec.n_objects < 0) throw std::invalid_argument("generate_scene: n_objects < 0");
  Rng rng(spec.seed);
  Scene s;
  s.rig = make_default_rig();
  s.ego_speed = spec.ego_speed;
  s.ego_yaw_rate = spec.ego_yaw_rate;
  s.duration = spec.duration;
  s.frame_period = spec.frame_period;
  s.noise_sigma = spec.noise_sigma;
  s.n_clutter = spec.n_clutter;
  s.seed = spec.seed;
  for (int i = 0; i < spec.n_objects; ++i) {
    ObjectSpec o;
    const double ang = rng.uniform(0.0, 2.0 * M_PI);
    const double rad = rng.uniform(3.0, spec.placement_radius);
    o.center0 = {rad * std::cos(ang), rad * std::sin(ang), 0.5};
    const double speed = rng.uniform(spec.speed_min, spec.speed_max);
    const double dir = rng.uniform(0.0, 2.0 * M_PI);
    o.vx = speed * std::cos(dir);
    o.vy = speed * std::sin(dir);
    o.yaw = dir;
    o.w = rng.uniform(1.2, 2.0);
    o.l = rng.uniform(3.0, 4.5);
    o.h = rng.uniform(1.2, 1.8);
    o.class_id = rng.uniform_int(0, 2);
    s.objects.push_back(o);
  }
  return s;
}

// ---------------------------------------------------------------------------
// Ground truth
// ---------------------------------------------------------------------------

inline std::vector<Box3D> ground_truth(const Scene& scene, double t,
                                       const BevGridSpec& range) {
  if (t < 0.0 || t > scene.duration + 1e-9)
    throw std::invalid_argument("ground_truth: t outside duration");
  const Pose ego_from_world = scene.ego_pose(t).world_from_ego.inverse();
  const double ego_yaw =
      std::atan2(scene.ego_pose(t).world_from_ego.rotation.at(1, 0),
                 scene.ego_pose(t).world_from_ego.rotation.at(0, 0));
  std::vector<Box3D> out;
  for (const auto& o : scene.objects) {
    Box3D b;
    b.center = ego_from_world.apply(o.center_at(t));
    if (b.center.x < range.x_min || b.center.x > range.x_max ||
        b.center.y < range.y_min || b.center.y > range.y_max)
      continue;
    b.w = o.w;
    b.l = o.l;
    b.h = o.h;
    b.yaw = normalize_yaw(o.yaw - ego_yaw);
    const Vec3 v_ego = ego_from_world.rotation * Vec3{o.vx, o.vy, 0.0};
    b.vx = v_ego.x;
    b.vy = v_ego.y;
    b.class_id = o.class_id;
    b.score = 1.0;
    out.push_back(b);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Feature rendering (backbone stand-in)
// ---------------------------------------------------------------------------

/// Deterministic per-class signature vector in R^C.
inline Tensor class_signature(int class_id, int channels) {
  Rng rng(0x9e3779b9ULL + static_cast<std::uint64_t>(class_id) * 7919ULL);
  Tensor sig({channels});
  for (auto& v : sig.vec()) v = rng.uniform(0.2, 1.0);
  return sig;
}

/// Renders one frame's per-view feature maps: each visible object splats its
/// class signature as a Gaussian blob at the projected center, blob width
/// scaled by 1/depth, on top of a small constant background. Optional
/// deterministic per-frame noise models backbone jitter.
inline std::vector<Tensor> render_features(const Scene& scene, double t,
                                           int channels, int feat_w, int feat_h) {
  if (t < 0.0 || t > scene.duration + 1e-9)
    throw std::invalid_argument("render_features: t outside duration");
  const Pose ego_from_world = scene.ego_pose(t).world_from_ego.inverse();
  const int n_views = scene.rig.n_views();
  std::vector<Tensor> maps;
  for (int n = 0; n < n_views; ++n)
    maps.emplace_back(std::vector<int>{channels, feat_h, feat_w}, 0.05);

  for (const auto& o : scene.objects) {
    const Vec3 p_ego = ego_from_world.apply(o.center_at(t));
    const Tensor sig = class_signature(o.class_id, channels);
    for (int n = 0; n < n_views; ++n) {
      const auto& cam = scene.rig.cameras[static_cast<std::size_t>(n)];
      const Projection pr = project_one(cam, p_ego);
      if (!pr.valid) continue;
      const double uf = image_to_feat(pr.u, cam.width, feat_w);
      const double vf = image_to_feat(pr.v, cam.height, feat_h);
      const double fx_feat = cam.fx * feat_w / cam.width;
      const double sigma = std::clamp(0.6 * o.l * fx_feat / pr.depth / 3.0, 0.7, 6.0);
      const int r = static_cast<int>(std::ceil(3.0 * sigma));
      const int x_lo = std::max(0, static_cast<int>(std::floor(uf)) - r);
      const int x_hi = std::min(feat_w - 1, static_cast<int>(std::ceil(uf)) + r);
      const int y_lo = std::max(0, static_cast<int>(std::floor(vf)) - r);
      const int y_hi = std::min(feat_h - 1, static_cast<int>(std::ceil(vf)) + r);
      for (int y = y_lo; y <= y_hi; ++y)
        for (int x = x_lo; x <= x_hi; ++x) {
          const double d2 = (x - uf) * (x - uf) + (y - vf) * (y - vf);
          const double g = std::exp(-d2 / (2.0 * sigma * sigma));
          for (int c = 0; c < channels; ++c)
            maps[static_cast<std::size_t>(n)].at3(c, y, x) +=
                g * sig[static_cast<std::size_t>(c)];
        }
    }
  }

  const std::uint64_t frame_idx =
      static_cast<std::uint64_t>(std::llround(t / scene.frame_period));

  // Transient clutter: phantom objects at fresh 3D positions every frame,
  // rendered through the same projection pipeline as real objects. Within a
  // single frame a phantom is indistinguishable from a real object; only
  // cross-frame fusion can discount it, since real objects persist.
  if (scene.n_clutter > 0) {
    Rng clutter(scene.seed * 1000003ULL + frame_idx * 10007ULL + 29ULL);
    for (int k = 0; k < scene.n_clutter; ++k) {
      const double ang = clutter.uniform(0.0, 2.0 * M_PI);
      const double rad = clutter.uniform(3.0, 12.0);
      const Vec3 p_ego{rad * std::cos(ang), rad * std::sin(ang), 0.5};
      const double length = clutter.uniform(3.0, 4.5);
      const Tensor sig = class_signature(clutter.uniform_int(0, 2), channels);
      for (int n = 0; n < n_views; ++n) {
        const auto& cam = scene.rig.cameras[static_cast<std::size_t>(n)];
        const Projection pr = project_one(cam, p_ego);
        if (!pr.valid) continue;
        const double uf = image_to_feat(pr.u, cam.width, feat_w);
        const double vf = image_to_feat(pr.v, cam.height, feat_h);
        const double fx_feat = cam.fx * feat_w / cam.width;
        const double sigma =
            std::clamp(0.6 * length * fx_feat / pr.depth / 3.0, 0.7, 6.0);
        const int r = static_cast<int>(std::ceil(3.0 * sigma));
        const int x_lo = std::max(0, static_cast<int>(std::floor(uf)) - r);
        const int x_hi = std::min(feat_w - 1, static_cast<int>(std::ceil(uf)) + r);
        const int y_lo = std::max(0, static_cast<int>(std::floor(vf)) - r);
        const int y_hi = std::min(feat_h - 1, static_cast<int>(std::ceil(vf)) + r);
        for (int y = y_lo; y <= y_hi; ++y)
          for (int x = x_lo; x <= x_hi; ++x) {
            const double d2 = (x - uf) * (x - uf) + (y - vf) * (y - vf);
            const double g = std::exp(-d2 / (2.0 * sigma * sigma));
            for (int c = 0; c < channels; ++c)
              maps[static_cast<std::size_t>(n)].at3(c, y, x) +=
                  g * sig[static_cast<std::size_t>(c)];
          }
      }
    }
  }

  if (scene.noise_sigma > 0.0) {
    Rng noise(scene.seed * 1000003ULL + frame_idx * 10007ULL + 17ULL);
    for (auto& map : maps)
      for (auto& v : map.vec()) v += noise.normal(0.0, scene.noise_sigma);
  }
  return maps;
}

/// Optional learnable 2-layer conv encoder applied on rendered maps.
struct FeatureEncoder {
  Var w1, b1, w2, b2;

  static FeatureEncoder build(int channels, std::uint64_t seed) {
    Rng rng(seed);
    FeatureEncoder e;
    const double s = std::sqrt(2.0 / (channels * 9.0));
    e.w1 = make_leaf(rng.tensor_normal({channels, channels, 3, 3}, s), true);
    e.b1 = make_leaf(Tensor({channels}), true);
    e.w2 = make_leaf(rng.tensor_normal({channels, channels, 3, 3}, s), true);
    e.b2 = make_leaf(Tensor({channels}), true);
    return e;
  }

  Var apply(const Var& map) const {
    return conv2d(relu(conv2d(map, w1, b1, 1)), w2, b2, 1);
  }

  std::vector<std::pair<std::string, Var>> named_params() {
    return {{"enc.w1", w1}, {"enc.b1", b1}, {"enc.w2", w2}, {"enc.b2", b2}};
  }
};

// ---------------------------------------------------------------------------
// Frustum-straddling scenario (cross-view coverage tests)
// ---------------------------------------------------------------------------

struct StraddlingScenario {
  Scene scene;
  Vec3 object_center;  // ego frame; valid in exactly one view
  int center_view = 0;
  int adjacent_view = 1;
};

/// Two cameras with abutting 90 degree frusta (headings 0 and 90 degrees).
/// The object's center projects only into view 0, right next to the shared
/// frustum boundary, while a large part of its extent lies in view 1.
inline StraddlingScenario make_straddling_scenario(int image_size = 64) {
  StraddlingScenario sc;
  const double hfov = M_PI / 2.0;
  sc.scene.rig.cameras.push_back(make_camera(0.0, hfov, image_size, image_size));
  sc.scene.rig.cameras.push_back(make_camera(M_PI / 2.0, hfov, image_size, image_size));
  ObjectSpec o;
  // Just inside view 0's left edge: direction ~42 degrees off the +x axis.
  const double ang = 42.0 * M_PI / 180.0;
  const double dist = 8.0;
  o.center0 = {dist * std::cos(ang), dist * std::sin(ang), 0.5};
  o.l = 4.5;  // long enough that >=30% of the extent crosses the boundary
  o.w = 1.8;
  o.yaw = ang + M_PI / 2.0;  // extent roughly along the boundary normal
  o.class_id = 1;
  sc.scene.objects.push_back(o);
  sc.scene.duration = 1.0;
  sc.object_center = o.center0;
  sc.center_view = 0;
  sc.adjacent_view = 1;
  return sc;
}

// ---------------------------------------------------------------------------
// Scene file I/O (documented schema, human readable)
// ---------------------------------------------------------------------------

inline void save_scene(std::ostream& os, const Scene& s) {
  os << "mvdet-scene v1\n";
  os << "seed " << s.seed << "\n";
  os << "duration " << s.duration << "\n";
  os << "frame_period " << s.frame_period << "\n";
  os << "noise_sigma " << s.noise_sigma << "\n";
  os << "n_clutter " << s.n_clutter << "\n";
  os << "ego_speed " << s.ego_speed << "\n";
  os << "ego_yaw_rate " << s.ego_yaw_rate << "\n";
  os << "cameras " << s.rig.n_views() << "\n";
  os.precision(17);
  for (const auto& c : s.rig.cameras) {
    os << "camera " << c.fx << " " << c.fy << " " << c.cx << " " << c.cy << " "
       << c.width << " " << c.height;
    for (int i = 0; i < 9; ++i) os << " " << c.ego_from_cam.rotation.m[static_cast<std::size_t>(i)];
    os << " " << c.ego_from_cam.translation.x << " " << c.ego_from_cam.translation.y
       << " " << c.ego_from_cam.translation.z << "\n";
  }
  os << "objects " << s.objects.size() << "\n";
  for (const auto& o : s.objects)
    os << "object " << o.center0.x << " " << o.center0.y << " " << o.center0.z
       << " " << o.vx << " " << o.vy << " " << o.w << " " << o.l << " " << o.h
       << " " << o.yaw << " " << o.class_id << "\n";
}

inline Scene load_scene(std::istream& is) {
  std::string line;
  if (!std::getline(is, line) || line != "mvdet-scene v1")
    throw std::runtime_error("load_scene: bad header");
  Scene s;
  int n_cameras = 0, n_objects = 0;
  while (std::getline(is, line)) {
    std::istringstream ss(line);
    std::string key;
    ss >> key;
    if (key == "seed") ss >> s.seed;
    else if (key == "duration") ss >> s.duration;
    else if (key == "frame_period") ss >> s.frame_period;
    else if (key == "noise_sigma") ss >> s.noise_sigma;
    else if (key == "n_clutter") ss >> s.n_clutter;
    else if (key == "ego_speed") ss >> s.ego_speed;
    else if (key == "ego_yaw_rate") ss >> s.ego_yaw_rate;
    else if (key == "cameras") ss >> n_cameras;
    else if (key == "objects") ss >> n_objects;
    else if (key == "camera") {
      CameraModel c;
      ss >> c.fx >> c.fy >> c.cx >> c.cy >> c.width >> c.height;
      for (int i = 0; i < 9; ++i) ss >> c.ego_from_cam.rotation.m[static_cast<std::size_t>(i)];
      ss >> c.ego_from_cam.translation.x >> c.ego_from_cam.translation.y >>
          c.ego_from_cam.translation.z;
      s.rig.cameras.push_back(c);
    } else if (key == "object") {
      ObjectSpec o;
      ss >> o.center0.x >> o.center0.y >> o.center0.z >> o.vx >> o.vy >> o.w >>
          o.l >> o.h >> o.yaw >> o.class_id;
      s.objects.push_back(o);
    }
  }
  if (static_cast<int>(s.rig.cameras.size()) != n_cameras ||
      static_cast<int>(s.objects.size()) != n_objects)
    throw std::runtime_error("load_scene: truncated file");
  return s;
}

}  // namespace mvdet
