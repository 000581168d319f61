#pragma once

#include <array>
#include <cmath>
#include <stdexcept>
#include <vector>

namespace mvdet {

struct Vec3 {
  double x = 0.0, y = 0.0, z = 0.0;

  Vec3 operator+(const Vec3& o) const { return {x + o.x, y + o.y, z + o.z}; }
  Vec3 operator-(const Vec3& o) const { return {x - o.x, y - o.y, z - o.z}; }
  Vec3 operator*(double s) const { return {x * s, y * s, z * s}; }
  double norm() const { return std::sqrt(x * x + y * y + z * z); }
  bool finite() const {
    return std::isfinite(x) && std::isfinite(y) && std::isfinite(z);
  }
};

struct Mat3 {
  // Row-major.
  std::array<double, 9> m{1, 0, 0, 0, 1, 0, 0, 0, 1};

  static Mat3 identity() { return Mat3{}; }

  static Mat3 rot_z(double yaw) {
    const double c = std::cos(yaw), s = std::sin(yaw);
    return Mat3{{c, -s, 0, s, c, 0, 0, 0, 1}};
  }
  static Mat3 rot_y(double a) {
    const double c = std::cos(a), s = std::sin(a);
    return Mat3{{c, 0, s, 0, 1, 0, -s, 0, c}};
  }
  static Mat3 rot_x(double a) {
    const double c = std::cos(a), s = std::sin(a);
    return Mat3{{1, 0, 0, 0, c, -s, 0, s, c}};
  }

  double at(int r, int c) const { return m[static_cast<std::size_t>(r * 3 + c)]; }
  double& at(int r, int c) { return m[static_cast<std::size_t>(r * 3 + c)]; }

  Vec3 operator*(const Vec3& v) const {
    return {at(0, 0) * v.x + at(0, 1) * v.y + at(0, 2) * v.z,
            at(1, 0) * v.x + at(1, 1) * v.y + at(1, 2) * v.z,
            at(2, 0) * v.x + at(2, 1) * v.y + at(2, 2) * v.z};
  }

  Mat3 operator*(const Mat3& o) const {
    Mat3 r{};
    for (int i = 0; i < 3; ++i)
      for (int j = 0; j < 3; ++j) {
        double s = 0.0;
        for (int k = 0; k < 3; ++k) s += at(i, k) * o.at(k, j);
        r.at(i, j) = s;
      }
    return r;
  }

  Mat3 transposed() const {
    Mat3 r{};
    for (int i = 0; i < 3; ++i)
      for (int j = 0; j < 3; ++j) r.at(i, j) = at(j, i);
    return r;
  }

  double det() const {
    return at(0, 0) * (at(1, 1) * at(2, 2) - at(1, 2) * at(2, 1)) -
           at(0, 1) * (at(1, 0) * at(2, 2) - at(1, 2) * at(2, 0)) +
           at(0, 2) * (at(1, 0) * at(2, 1) - at(1, 1) * at(2, 0));
  }

  bool orthonormal(double tol = 1e-9) const {
    const Mat3 rtr = transposed() * (*this);
    for (int i = 0; i < 3; ++i)
      for (int j = 0; j < 3; ++j) {
        const double want = (i == j) ? 1.0 : 0.0;
        if (std::abs(rtr.at(i, j) - want) > tol) return false;
      }
    return std::abs(det() - 1.0) <= 1e-6;
  }
};

/// Rigid transform: p_out = R p + t.
struct Pose {
  Mat3 rotation;
  Vec3 translation;

  static Pose identity() { return Pose{}; }

  Vec3 apply(const Vec3& p) const { return rotation * p + translation; }

  Pose compose(const Pose& inner) const {
    // this ∘ inner: apply inner first.
    return Pose{rotation * inner.rotation, rotation * inner.translation + translation};
  }

  Pose inverse() const {
    check_rotation();
    const Mat3 rt = rotation.transposed();
    return Pose{rt, (rt * translation) * -1.0};
  }

  void check_rotation() const {
    if (!rotation.orthonormal())
      throw std::invalid_argument("Pose: rotation not orthonormal");
  }
};

struct EgoPose {
  Pose world_from_ego;
  double timestamp = 0.0;
};

struct CameraModel {
  // Zero-skew pinhole.
  double fx = 0.0, fy = 0.0, cx = 0.0, cy = 0.0;
  Pose ego_from_cam;
  int width = 0, height = 0;
};

struct CameraRig {
  std::vector<CameraModel> cameras;
  int n_views() const { return static_cast<int>(cameras.size()); }
};

inline constexpr double kDepthEpsilon = 1e-3;  // meters

struct Projection {
  int view = -1;
  double u = 0.0, v = 0.0;
  double depth = 0.0;
  bool valid = false;
};

/// Projects an ego-frame point through one camera. Camera looks along its
/// local +z. Valid iff depth > kDepthEpsilon and uv within the closed image
/// bounds [0,w-1]x[0,h-1].
inline Projection project_one(const CameraModel& cam, const Vec3& point_ego) {
  Projection p;
  const Vec3 pc = cam.ego_from_cam.inverse().apply(point_ego);
  p.depth = pc.z;
  if (pc.z <= kDepthEpsilon) return p;
  p.u = cam.fx * pc.x / pc.z + cam.cx;
  p.v = cam.fy * pc.y / pc.z + cam.cy;
  p.valid = p.u >= 0.0 && p.u <= cam.width - 1 && p.v >= 0.0 &&
            p.v <= cam.height - 1;
  return p;
}

inline std::vector<Projection> project(const CameraRig& rig, const Vec3& point_ego) {
  if (!point_ego.finite())
    throw std::invalid_argument("project: non-finite point");
  std::vector<Projection> out(rig.cameras.size());
  for (std::size_t n = 0; n < rig.cameras.size(); ++n) {
    out[n] = project_one(rig.cameras[n], point_ego);
    out[n].view = static_cast<int>(n);
  }
  return out;
}

/// Projection with the 2x3 Jacobian d(u,v)/d(point_ego). Used where the
/// sampling coordinates must carry gradient back to learned 3D offsets.
struct ProjectionJac {
  Projection proj;
  std::array<double, 6> duv_dp{};  // row-major [2][3]
};

inline ProjectionJac project_one_jac(const CameraModel& cam, const Vec3& point_ego) {
  ProjectionJac r;
  const Pose cam_from_ego = cam.ego_from_cam.inverse();
  const Vec3 pc = cam_from_ego.apply(point_ego);
  r.proj.depth = pc.z;
  if (pc.z <= kDepthEpsilon) return r;
  r.proj.u = cam.fx * pc.x / pc.z + cam.cx;
  r.proj.v = cam.fy * pc.y / pc.z + cam.cy;
  r.proj.valid = r.proj.u >= 0.0 && r.proj.u <= cam.width - 1 &&
                 r.proj.v >= 0.0 && r.proj.v <= cam.height - 1;
  // du/dpc = fx [1/z, 0, -x/z^2]; dv/dpc = fy [0, 1/z, -y/z^2]; chain with R.
  const Mat3& R = cam_from_ego.rotation;
  const double iz = 1.0 / pc.z;
  const double du_dpc[3] = {cam.fx * iz, 0.0, -cam.fx * pc.x * iz * iz};
  const double dv_dpc[3] = {0.0, cam.fy * iz, -cam.fy * pc.y * iz * iz};
  for (int j = 0; j < 3; ++j) {
    double su = 0.0, sv = 0.0;
    for (int k = 0; k < 3; ++k) {
      su += du_dpc[k] * R.at(k, j);
      sv += dv_dpc[k] * R.at(k, j);
    }
    r.duv_dp[static_cast<std::size_t>(j)] = su;
    r.duv_dp[static_cast<std::size_t>(3 + j)] = sv;
  }
  return r;
}

/// Expresses a current-frame ego coordinate in the previous frame's ego
/// frame: invert(world_from_past) ∘ world_from_now.
inline Vec3 align_center_to_past(const Vec3& center_now, const EgoPose& pose_now,
                                 const EgoPose& pose_past) {
  return pose_past.world_from_ego.inverse()
      .compose(pose_now.world_from_ego)
      .apply(center_now);
}

}  // namespace mvdet
