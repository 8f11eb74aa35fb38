#include "selfshot/report.hpp"

#include <json.hpp>

#include <algorithm>
#include <cmath>
#include <iomanip>
#include <sstream>

using ordered_json = nlohmann::ordered_json;

namespace selfshot::report {

namespace {
constexpr double kW = 640, kH = 420;
constexpr double kMarginL = 70, kMarginR = 30, kMarginT = 50, kMarginB = 55;

std::string fmt(double v) {
  std::ostringstream ss;
  ss << std::setprecision(4) << v;
  return ss.str();
}

const char* kPalette[] = {"#1f6fb4", "#d1495b", "#3a7d44", "#8e6c8a", "#c87d2f", "#31708e"};
}  // namespace

std::string line_chart_svg(const std::string& title, const std::string& x_label,
                           const std::string& y_label, const std::vector<Series>& series,
                           bool log_x) {
  double xmin = 1e300, xmax = -1e300, ymin = 1e300, ymax = -1e300;
  for (const auto& s : series) {
    for (auto [x, y] : s.points) {
      double xv = log_x ? std::log10(std::max(x, 1e-12)) : x;
      xmin = std::min(xmin, xv);
      xmax = std::max(xmax, xv);
      ymin = std::min(ymin, y);
      ymax = std::max(ymax, y);
    }
  }
  if (xmin > xmax) {
    xmin = 0;
    xmax = 1;
    ymin = 0;
    ymax = 1;
  }
  if (xmax - xmin < 1e-12) {
    xmin -= 0.5;
    xmax += 0.5;
  }
  if (ymax - ymin < 1e-12) {
    ymin -= 0.05;
    ymax += 0.05;
  }
  double ypad = 0.06 * (ymax - ymin);
  ymin -= ypad;
  ymax += ypad;

  auto px = [&](double x) {
    double xv = log_x ? std::log10(std::max(x, 1e-12)) : x;
    return kMarginL + (xv - xmin) / (xmax - xmin) * (kW - kMarginL - kMarginR);
  };
  auto py = [&](double y) {
    return kH - kMarginB - (y - ymin) / (ymax - ymin) * (kH - kMarginT - kMarginB);
  };

  std::ostringstream svg;
  svg << "<svg xmlns='http://www.w3.org/2000/svg' width='" << kW << "' height='" << kH
      << "' font-family='monospace' font-size='12'>\n";
  svg << "<rect width='100%' height='100%' fill='white'/>\n";
  svg << "<text x='" << kW / 2 << "' y='24' text-anchor='middle' font-size='15'>" << title
      << "</text>\n";
  // axes
  svg << "<line x1='" << kMarginL << "' y1='" << kH - kMarginB << "' x2='" << kW - kMarginR
      << "' y2='" << kH - kMarginB << "' stroke='black'/>\n";
  svg << "<line x1='" << kMarginL << "' y1='" << kMarginT << "' x2='" << kMarginL << "' y2='"
      << kH - kMarginB << "' stroke='black'/>\n";
  for (int i = 0; i <= 5; ++i) {
    double fx = xmin + (xmax - xmin) * i / 5.0;
    double gx = kMarginL + (kW - kMarginL - kMarginR) * i / 5.0;
    double label = log_x ? std::pow(10.0, fx) : fx;
    svg << "<line x1='" << gx << "' y1='" << kH - kMarginB << "' x2='" << gx << "' y2='"
        << kH - kMarginB + 5 << "' stroke='black'/>\n";
    svg << "<text x='" << gx << "' y='" << kH - kMarginB + 20 << "' text-anchor='middle'>"
        << fmt(label) << "</text>\n";
    double fy = ymin + (ymax - ymin) * i / 5.0;
    double gy = kH - kMarginB - (kH - kMarginT - kMarginB) * i / 5.0;
    svg << "<line x1='" << kMarginL - 5 << "' y1='" << gy << "' x2='" << kMarginL << "' y2='" << gy
        << "' stroke='black'/>\n";
    svg << "<text x='" << kMarginL - 8 << "' y='" << gy + 4 << "' text-anchor='end'>" << fmt(fy)
        << "</text>\n";
    svg << "<line x1='" << kMarginL << "' y1='" << gy << "' x2='" << kW - kMarginR << "' y2='"
        << gy << "' stroke='#dddddd'/>\n";
  }
  svg << "<text x='" << kW / 2 << "' y='" << kH - 12 << "' text-anchor='middle'>" << x_label
      << "</text>\n";
  svg << "<text x='18' y='" << kH / 2 << "' text-anchor='middle' transform='rotate(-90 18 "
      << kH / 2 << ")'>" << y_label << "</text>\n";

  int ci = 0;
  for (const auto& s : series) {
    std::string color = s.color.empty() ? kPalette[ci % 6] : s.color;
    if (s.color.empty() || series.size() > 1) color = kPalette[ci % 6];
    std::ostringstream pts;
    for (auto [x, y] : s.points) pts << px(x) << "," << py(y) << " ";
    svg << "<polyline fill='none' stroke='" << color << "' stroke-width='2' points='" << pts.str()
        << "'/>\n";
    for (auto [x, y] : s.points)
      svg << "<circle cx='" << px(x) << "' cy='" << py(y) << "' r='3' fill='" << color << "'/>\n";
    svg << "<text x='" << kW - kMarginR - 8 << "' y='" << kMarginT + 16 + 16 * ci
        << "' text-anchor='end' fill='" << color << "'>" << s.label << "</text>\n";
    ++ci;
  }
  svg << "</svg>\n";
  return svg.str();
}

Series pr_series(const std::vector<std::pair<double, bool>>& detections, int total_gt,
                 const std::string& label) {
  Series s;
  s.label = label;
  if (total_gt <= 0) return s;
  auto sorted = detections;
  std::stable_sort(sorted.begin(), sorted.end(),
                   [](const auto& a, const auto& b) { return a.first > b.first; });
  int tp = 0, seen = 0;
  s.points.emplace_back(0.0, 1.0);
  for (const auto& [score, is_tp] : sorted) {
    ++seen;
    if (is_tp) ++tp;
    s.points.emplace_back(static_cast<double>(tp) / total_gt,
                          static_cast<double>(tp) / seen);
  }
  return s;
}

std::string heatmap_svg(const std::string& title, const Tensor& map2d) {
  SS_CHECK(map2d.rank() == 2, "heatmap needs a 2-d map");
  std::int64_t h = map2d.dim(0), w = map2d.dim(1);
  double lo = 1e300, hi = -1e300;
  for (std::int64_t i = 0; i < map2d.numel(); ++i) {
    lo = std::min(lo, map2d[i]);
    hi = std::max(hi, map2d[i]);
  }
  double span = (hi - lo) < 1e-12 ? 1.0 : hi - lo;
  double cell = std::min(24.0, 480.0 / static_cast<double>(std::max(h, w)));
  double W = w * cell + 20, H = h * cell + 50;
  std::ostringstream svg;
  svg << "<svg xmlns='http://www.w3.org/2000/svg' width='" << W << "' height='" << H
      << "' font-family='monospace' font-size='12'>\n";
  svg << "<rect width='100%' height='100%' fill='white'/>\n";
  svg << "<text x='" << W / 2 << "' y='20' text-anchor='middle'>" << title << "</text>\n";
  for (std::int64_t y = 0; y < h; ++y) {
    for (std::int64_t x = 0; x < w; ++x) {
      int v = static_cast<int>(255.0 * (map2d.at2(y, x) - lo) / span);
      svg << "<rect x='" << 10 + x * cell << "' y='" << 35 + y * cell << "' width='" << cell
          << "' height='" << cell << "' fill='rgb(" << v << "," << v << "," << 255 - v / 3
          << ")'/>\n";
    }
  }
  svg << "</svg>\n";
  return svg.str();
}

std::string summary_table(const std::string& summary_json) {
  ordered_json j = ordered_json::parse(summary_json);
  std::ostringstream out;
  out << "experiment summary (seed " << j.value("seed", 0) << ", " << j.value("queries", 0)
      << " queries, pool " << j.value("pool", 0) << ")\n";
  out << std::string(72, '-') << "\n";
  out << std::left << std::setw(26) << "cell" << std::setw(10) << "mode" << std::setw(8) << "mAP"
      << std::setw(14) << "support-prec" << "status\n";
  std::map<std::pair<int, int>, double> semi;
  int semi_omax = 0, semi_smax = 0;
  for (const auto& c : j.at("cells")) {
    std::string name = c.value("name", "");
    bool failed = c.value("failed", false);
    out << std::left << std::setw(26) << name << std::setw(10) << c.value("mode", "")
        << std::setw(8) << (failed ? std::string("-") : fmt(c.value("map", 0.0)))
        << std::setw(14)
        << (c.value("support_precision", -1.0) >= 0 ? fmt(c.value("support_precision", 0.0))
                                                     : std::string("-"))
        << (failed ? "FAILED: " + c.value("error", "") : "ok") << "\n";
    if (name.rfind("semi_", 0) == 0 && !failed) {
      int o = c.value("oracle", 0), s = c.value("self", 0);
      semi[{o, s}] = c.value("map", 0.0);
      semi_omax = std::max(semi_omax, o);
      semi_smax = std::max(semi_smax, s);
    }
  }
  out << std::string(72, '-') << "\n";
  out << "oracle - random mAP gap: " << fmt(j.value("oracle_minus_random_map", 0.0)) << "\n";
  if (!semi.empty()) {
    out << "\nsemi-shot grid (rows: self-shot count, cols: oracle count)\n";
    out << std::setw(6) << "";
    for (int o = 0; o <= semi_omax; ++o) out << std::setw(8) << o;
    out << "\n";
    for (int s = 0; s <= semi_smax; ++s) {
      out << std::setw(6) << s;
      for (int o = 0; o <= semi_omax; ++o) {
        auto it = semi.find({o, s});
        out << std::setw(8) << (it == semi.end() ? std::string("") : fmt(it->second));
      }
      out << "\n";
    }
  }
  return out.str();
}

}  // namespace selfshot::report
