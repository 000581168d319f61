#pragma once

#include <algorithm>
#include <cmath>
#include <map>
#include <stdexcept>
#include <vector>

#include "mvdet/types.hpp"

namespace mvdet {

struct EvalReport {
  std::map<double, double> ap_at_thresholds;  // threshold(m) -> AP in [0,1]
  double mean_ate = 0.0;  // meters, TPs at the 2 m threshold
  double mean_ave = 0.0;  // m/s, TPs at the 2 m threshold
  double recall = 0.0;    // at the 2 m threshold

  bool operator==(const EvalReport& o) const {
    return ap_at_thresholds == o.ap_at_thresholds && mean_ate == o.mean_ate &&
           mean_ave == o.mean_ave && recall == o.recall;
  }
};

namespace detail {

inline double bev_dist(const Box3D& a, const Box3D& b) {
  const double dx = a.center.x - b.center.x;
  const double dy = a.center.y - b.center.y;
  return std::sqrt(dx * dx + dy * dy);
}

}  // namespace detail

/// Center-distance matched AP with greedy score-descending matching and
/// 11-point interpolation. ATE/AVE are averaged over true positives at the
/// 2 m threshold.
inline EvalReport evaluate(const std::vector<std::vector<Box3D>>& preds_per_frame,
                           const std::vector<std::vector<Box3D>>& gt_per_frame,
                           const std::vector<double>& thresholds = {0.5, 1.0, 2.0, 4.0}) {
  if (preds_per_frame.size() != gt_per_frame.size())
    throw std::invalid_argument("evaluate: frame count mismatch");
  struct Entry {
    std::size_t frame;
    std::size_t idx;
    double score;
  };
  std::vector<Entry> entries;
  std::size_t n_gt = 0;
  for (std::size_t f = 0; f < preds_per_frame.size(); ++f) {
    for (std::size_t i = 0; i < preds_per_frame[f].size(); ++i)
      entries.push_back({f, i, preds_per_frame[f][i].score});
    n_gt += gt_per_frame[f].size();
  }
  std::stable_sort(entries.begin(), entries.end(),
                   [](const Entry& a, const Entry& b) { return a.score > b.score; });

  EvalReport report;
  for (double thr : thresholds) {
    std::vector<std::vector<char>> gt_used(gt_per_frame.size());
    for (std::size_t f = 0; f < gt_per_frame.size(); ++f)
      gt_used[f].assign(gt_per_frame[f].size(), 0);
    std::vector<char> is_tp(entries.size(), 0);
    double sum_ate = 0.0, sum_ave = 0.0;
    std::size_t n_tp_total = 0;
    for (std::size_t e = 0; e < entries.size(); ++e) {
      const auto& pred = preds_per_frame[entries[e].frame][entries[e].idx];
      const auto& gts = gt_per_frame[entries[e].frame];
      int best = -1;
      double best_d = thr;
      for (std::size_t g = 0; g < gts.size(); ++g) {
        if (gt_used[entries[e].frame][g]) continue;
        const double d = detail::bev_dist(pred, gts[g]);
        if (d <= best_d) {
          best_d = d;
          best = static_cast<int>(g);
        }
      }
      if (best >= 0) {
        gt_used[entries[e].frame][static_cast<std::size_t>(best)] = 1;
        is_tp[e] = 1;
        ++n_tp_total;
        if (thr == 2.0) {
          const auto& g = gts[static_cast<std::size_t>(best)];
          sum_ate += best_d;
          const double dvx = pred.vx - g.vx, dvy = pred.vy - g.vy;
          sum_ave += std::sqrt(dvx * dvx + dvy * dvy);
        }
      }
    }
    // Precision-recall curve, 11-point interpolated AP.
    double ap = 0.0;
    if (n_gt > 0) {
      std::vector<double> precision, recall;
      std::size_t tp = 0, fp = 0;
      for (std::size_t e = 0; e < entries.size(); ++e) {
        if (is_tp[e]) ++tp; else ++fp;
        precision.push_back(static_cast<double>(tp) / (tp + fp));
        recall.push_back(static_cast<double>(tp) / n_gt);
      }
      for (int r = 0; r <= 10; ++r) {
        const double rr = r / 10.0;
        double pmax = 0.0;
        for (std::size_t e = 0; e < entries.size(); ++e)
          if (recall[e] >= rr) pmax = std::max(pmax, precision[e]);
        ap += pmax / 11.0;
      }
    }
    report.ap_at_thresholds[thr] = ap;
    if (thr == 2.0) {
      report.recall = n_gt > 0 ? static_cast<double>(n_tp_total) / n_gt : 0.0;
      report.mean_ate = n_tp_total > 0 ? sum_ate / n_tp_total : 0.0;
      report.mean_ave = n_tp_total > 0 ? sum_ave / n_tp_total : 0.0;
    }
  }
  return report;
}

}  // namespace mvdet
