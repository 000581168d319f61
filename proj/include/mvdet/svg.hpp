#pragma once

#include <algorithm>
#include <cmath>
#include <fstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "mvdet/bev.hpp"
#include "mvdet/types.hpp"

namespace mvdet {

namespace detail {

inline std::string heat_color(double v) {
  // Black -> red -> yellow ramp.
  v = std::clamp(v, 0.0, 1.0);
  const int r = static_cast<int>(255.0 * std::min(1.0, 2.0 * v));
  const int g = static_cast<int>(255.0 * std::max(0.0, 2.0 * v - 1.0));
  return "rgb(" + std::to_string(r) + "," + std::to_string(g) + ",0)";
}

}  // namespace detail

/// Heatmap as a colored cell grid with selected query positions overlaid.
inline void write_heatmap_svg(const std::string& path, const Heatmap& hm,
                              const std::vector<SelectedCell>& selected) {
  const int cell = 16;
  const int W = hm.spec.width * cell, H = hm.spec.height * cell;
  std::ofstream os(path);
  if (!os) throw std::runtime_error("cannot write " + path);
  os << "<svg xmlns='http://www.w3.org/2000/svg' width='" << W << "' height='"
     << H << "'>\n";
  for (int iy = 0; iy < hm.spec.height; ++iy)
    for (int ix = 0; ix < hm.spec.width; ++ix)
      os << "<rect x='" << ix * cell << "' y='" << (hm.spec.height - 1 - iy) * cell
         << "' width='" << cell << "' height='" << cell << "' fill='"
         << detail::heat_color(hm.values.at2(iy, ix)) << "'/>\n";
  for (const auto& s : selected)
    os << "<circle cx='" << s.ix * cell + cell / 2 << "' cy='"
       << (hm.spec.height - 1 - s.iy) * cell + cell / 2
       << "' r='3' fill='none' stroke='lime' stroke-width='2'/>\n";
  os << "</svg>\n";
}

/// Top-down box plot: ground truth in green, predictions in red with
/// opacity by score.
inline void write_bev_svg(const std::string& path, const std::vector<Box3D>& preds,
                          const std::vector<Box3D>& gts, const BevGridSpec& range,
                          double min_score = 0.3) {
  const double px_per_m = 12.0;
  const int W = static_cast<int>((range.x_max - range.x_min) * px_per_m);
  const int H = static_cast<int>((range.y_max - range.y_min) * px_per_m);
  std::ofstream os(path);
  if (!os) throw std::runtime_error("cannot write " + path);
  os << "<svg xmlns='http://www.w3.org/2000/svg' width='" << W << "' height='"
     << H << "'>\n<rect width='100%' height='100%' fill='white'/>\n";
  auto draw = [&](const Box3D& b, const char* color, double opacity) {
    const double cx = (b.center.x - range.x_min) * px_per_m;
    const double cy = H - (b.center.y - range.y_min) * px_per_m;
    const double hw = 0.5 * b.w * px_per_m, hl = 0.5 * b.l * px_per_m;
    os << "<g transform='translate(" << cx << "," << cy << ") rotate("
       << -b.yaw * 180.0 / M_PI << ")' opacity='" << opacity << "'>"
       << "<rect x='" << -hl << "' y='" << -hw << "' width='" << 2 * hl
       << "' height='" << 2 * hw << "' fill='none' stroke='" << color
       << "' stroke-width='2'/>"
       << "<line x1='0' y1='0' x2='" << hl << "' y2='0' stroke='" << color
       << "' stroke-width='2'/></g>\n";
  };
  for (const auto& g : gts) draw(g, "green", 1.0);
  for (const auto& p : preds)
    if (p.score >= min_score) draw(p, "red", std::clamp(p.score, 0.3, 1.0));
  os << "</svg>\n";
}

}  // namespace mvdet
