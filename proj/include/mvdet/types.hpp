#pragma once

#include <cmath>
#include <vector>

#include "mvdet/autodiff.hpp"
#include "mvdet/geometry.hpp"

namespace mvdet {

/// One candidate object per row: feature vector, 3D reference center in the
/// current ego frame, and positional encoding of that center.
struct QuerySet {
  Var features;               // [N_q, C]
  std::vector<Vec3> centers;  // ego-frame meters, length N_q
  Var pos_enc;                // [N_q, C]
  bool padded = false;        // set when top-k had to repeat entries

  int size() const { return features ? features->value.dim(0) : 0; }
  int channels() const { return features ? features->value.dim(1) : 0; }
};

struct Box3D {
  Vec3 center;                   // ego-frame meters
  double w = 1.0, l = 1.0, h = 1.0;
  double yaw = 0.0;              // radians, normalized to (-pi, pi]
  double vx = 0.0, vy = 0.0;     // m/s
  int class_id = 0;
  double score = 0.0;
};

inline double normalize_yaw(double yaw) {
  while (yaw > M_PI) yaw -= 2.0 * M_PI;
  while (yaw <= -M_PI) yaw += 2.0 * M_PI;
  return yaw;
}

}  // namespace mvdet
