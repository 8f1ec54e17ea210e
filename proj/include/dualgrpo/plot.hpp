#pragma once

// Reward curves as a self-contained SVG line chart.

#include <algorithm>
#include <cstdio>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "dualgrpo/trainer.hpp"

namespace dualgrpo {

struct Series {
  std::string name;
  std::string color;
  std::vector<double> y;
};

namespace detail {
inline std::string num(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.2f", v);
  return buf;
}
}  // namespace detail

/// One polyline per series over a shared x axis; the y range is fitted to
/// the data (a constant series draws as a horizontal line).
inline std::string render_svg(const std::vector<double>& x, const std::vector<Series>& series,
                              const std::string& title = "Reward curves", const std::string& x_label = "iteration",
                              const std::string& y_label = "mean reward") {
  if (x.empty()) throw std::invalid_argument("plot: no data points");
  for (const auto& s : series)
    if (s.y.size() != x.size()) throw std::invalid_argument("plot: series '" + s.name + "' length mismatch");

  const double w = 720, h = 420, left = 70, right = 150, top = 40, bottom = 60;
  const double pw = w - left - right, ph = h - top - bottom;
  double x0 = x.front(), x1 = x.back();
  if (x1 == x0) x1 = x0 + 1.0;
  double y0 = 0.0, y1 = 1.0;
  if (!series.empty()) {
    y0 = y1 = series.front().y.front();
    for (const auto& s : series)
      for (double v : s.y) {
        y0 = std::min(y0, v);
        y1 = std::max(y1, v);
      }
  }
  if (y1 - y0 < 1e-12) {
    y0 -= 0.5;
    y1 += 0.5;
  }
  auto px = [&](double v) { return left + (v - x0) / (x1 - x0) * pw; };
  auto py = [&](double v) { return top + (1.0 - (v - y0) / (y1 - y0)) * ph; };
  using detail::num;

  std::ostringstream o;
  o << "<?xml version=\"1.0\" encoding=\"UTF-8\"?>\n";
  o << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << w << "\" height=\"" << h << "\" viewBox=\"0 0 " << w
    << " " << h << "\" font-family=\"sans-serif\" font-size=\"12\">\n";
  o << "  <rect x=\"0\" y=\"0\" width=\"" << w << "\" height=\"" << h << "\" fill=\"white\"/>\n";
  o << "  <text x=\"" << num(left + pw / 2) << "\" y=\"24\" text-anchor=\"middle\" font-size=\"15\">" << title
    << "</text>\n";
  o << "  <g stroke=\"#444\" stroke-width=\"1\">\n";
  o << "    <line x1=\"" << num(left) << "\" y1=\"" << num(top + ph) << "\" x2=\"" << num(left + pw) << "\" y2=\""
    << num(top + ph) << "\"/>\n";
  o << "    <line x1=\"" << num(left) << "\" y1=\"" << num(top) << "\" x2=\"" << num(left) << "\" y2=\""
    << num(top + ph) << "\"/>\n";
  o << "  </g>\n";
  for (int i = 0; i <= 4; ++i) {
    const double fx = x0 + (x1 - x0) * i / 4.0, fy = y0 + (y1 - y0) * i / 4.0;
    o << "  <text x=\"" << num(px(fx)) << "\" y=\"" << num(top + ph + 18) << "\" text-anchor=\"middle\">"
      << num(fx) << "</text>\n";
    o << "  <text x=\"" << num(left - 8) << "\" y=\"" << num(py(fy) + 4) << "\" text-anchor=\"end\">" << num(fy)
      << "</text>\n";
  }
  o << "  <text class=\"x-label\" x=\"" << num(left + pw / 2) << "\" y=\"" << num(h - 14)
    << "\" text-anchor=\"middle\">" << x_label << "</text>\n";
  o << "  <text class=\"y-label\" x=\"18\" y=\"" << num(top + ph / 2) << "\" text-anchor=\"middle\" transform=\"rotate(-90 18 "
    << num(top + ph / 2) << ")\">" << y_label << "</text>\n";
  for (std::size_t s = 0; s < series.size(); ++s) {
    o << "  <polyline data-series=\"" << series[s].name << "\" fill=\"none\" stroke=\"" << series[s].color
      << "\" stroke-width=\"1.5\" points=\"";
    for (std::size_t i = 0; i < x.size(); ++i) o << (i ? " " : "") << num(px(x[i])) << "," << num(py(series[s].y[i]));
    o << "\"/>\n";
    const double ly = top + 16 + 18.0 * static_cast<double>(s);
    o << "  <line x1=\"" << num(left + pw + 14) << "\" y1=\"" << num(ly) << "\" x2=\"" << num(left + pw + 34)
      << "\" y2=\"" << num(ly) << "\" stroke=\"" << series[s].color << "\" stroke-width=\"2\"/>\n";
    o << "  <text x=\"" << num(left + pw + 40) << "\" y=\"" << num(ly + 4) << "\">" << series[s].name << "</text>\n";
  }
  o << "</svg>\n";
  return o.str();
}

inline std::string plot_curves(const std::vector<MetricsRow>& rows) {
  if (rows.empty()) throw std::invalid_argument("plot: metrics file has no rows");
  std::vector<double> x;
  Series sem{"r_sem", "#1f77b4", {}}, aes{"r_aes", "#ff7f0e", {}}, con{"r_con", "#2ca02c", {}};
  for (const auto& r : rows) {
    x.push_back(static_cast<double>(r.iteration));
    sem.y.push_back(r.r_sem);
    aes.y.push_back(r.r_aes);
    con.y.push_back(r.r_con);
  }
  return render_svg(x, {sem, aes, con});
}

}  // namespace dualgrpo
