#pragma once

#include <cmath>
#include <deque>
#include <optional>
#include <stdexcept>
#include <vector>

#include "mvdet/attention.hpp"
#include "mvdet/geometry.hpp"
#include "mvdet/gradcheck.hpp"

namespace mvdet {

/// One cached frame: final-layer queries (detached), per-view feature maps,
/// ego pose and rig at that timestamp.
struct FrameRecord {
  double timestamp = 0.0;
  PastQueries queries;
  std::vector<Tensor> feature_maps;
  CameraRig rig;
  EgoPose ego_pose;
};

class MemoryBank {
 public:
  MemoryBank(int capacity = 8, double horizon = 2.5)
      : capacity_(capacity), horizon_(horizon) {}

  void push(FrameRecord record) {
    if (!records_.empty() && record.timestamp <= records_.back().timestamp)
      throw std::invalid_argument("MemoryBank::push: out-of-order timestamp");
    records_.push_back(std::move(record));
    while (static_cast<int>(records_.size()) > capacity_) records_.pop_front();
    while (!records_.empty() &&
           records_.back().timestamp - records_.front().timestamp > horizon_)
      records_.pop_front();
  }

  /// Record whose age (now - timestamp) is closest to desired_interval;
  /// ties go to the older record. Never returns a record newer than now.
  const FrameRecord* fetch(double now, double desired_interval = 1.5) const {
    const FrameRecord* best = nullptr;
    double best_err = 0.0;
    for (const auto& r : records_) {
      if (r.timestamp > now) continue;
      const double err = std::abs((now - r.timestamp) - desired_interval);
      if (!best || err < best_err ||
          (err == best_err && r.timestamp < best->timestamp)) {
        best = &r;
        best_err = err;
      }
    }
    return best;
  }

  std::size_t size() const { return records_.size(); }
  bool empty() const { return records_.empty(); }
  const std::deque<FrameRecord>& records() const { return records_; }

 private:
  int capacity_;
  double horizon_;
  std::deque<FrameRecord> records_;
};

/// Training-time frame pairing: uniform choice among frames strictly before
/// the current one and within the 2 s window. Returns -1 when none exists.
inline int sample_training_pair(const std::vector<double>& timestamps,
                                int current_index, Rng& rng,
                                double window = 2.0) {
  const double now = timestamps.at(static_cast<std::size_t>(current_index));
  std::vector<int> eligible;
  for (int i = 0; i < current_index; ++i)
    if (now - timestamps[static_cast<std::size_t>(i)] <= window &&
        timestamps[static_cast<std::size_t>(i)] < now)
      eligible.push_back(i);
  if (eligible.empty()) return -1;
  return eligible[static_cast<std::size_t>(
      rng.uniform_int(0, static_cast<int>(eligible.size()) - 1))];
}

}  // namespace mvdet
