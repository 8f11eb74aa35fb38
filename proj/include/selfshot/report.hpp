#pragma once

#include <string>
#include <vector>

#include "selfshot/evalmod.hpp"

namespace selfshot::report {

struct Series {
  std::string label;
  std::vector<std::pair<double, double>> points;
  std::string color = "#1f6fb4";
};

// Static figures are emitted as SVG text (axes, ticks, legend included).
std::string line_chart_svg(const std::string& title, const std::string& x_label,
                           const std::string& y_label, const std::vector<Series>& series,
                           bool log_x = false);

// All-point precision/recall polyline from pooled detections.
Series pr_series(const std::vector<std::pair<double, bool>>& detections, int total_gt,
                 const std::string& label);

// Grayscale cell grid; values are min-max normalized per map.
std::string heatmap_svg(const std::string& title, const Tensor& map2d);

// Fixed-width text table of experiment cells (the semi grid prints as a
// lower-triangular oracle x self block).
std::string summary_table(const std::string& summary_json);

}  // namespace selfshot::report
