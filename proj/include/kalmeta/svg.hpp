#pragma once

#include <cmath>
#include <cstdio>
#include <limits>
#include <string>
#include <vector>

#include "kalmeta/common.hpp"
#include "kalmeta/metrics.hpp"

namespace kalmeta {

struct PlotSeries {
  std::string label;
  std::vector<double> x;
  std::vector<double> y;
  std::vector<double> lo;  // optional band, same length as x when present
  std::vector<double> hi;
  std::string color;  // assigned from a palette when empty
};

struct PlotOptions {
  int width = 640;
  int height = 420;
  std::string title;
  std::string xlabel;
  std::string ylabel;
  bool diagonal = false;  // draw the y = x reference line
  // NaN means derive the bound from the data
  double xmin = std::numeric_limits<double>::quiet_NaN();
  double xmax = std::numeric_limits<double>::quiet_NaN();
  double ymin = std::numeric_limits<double>::quiet_NaN();
  double ymax = std::numeric_limits<double>::quiet_NaN();
};

namespace detail {

inline std::string xml_escape(const std::string& s) {
  std::string out;
  for (char c : s) {
    switch (c) {
      case '&': out += "&amp;"; break;
      case '<': out += "&lt;"; break;
      case '>': out += "&gt;"; break;
      case '"': out += "&quot;"; break;
      case '\'': out += "&apos;"; break;
      default: out += c;
    }
  }
  return out;
}

inline std::string fixed2(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.2f", v);
  return std::string(buf);
}

inline std::string tick_label(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.4g", v);
  return std::string(buf);
}

inline const char* plot_palette(std::size_t i) {
  static const char* colors[] = {"#1f77b4", "#d62728", "#2ca02c",
                                 "#9467bd", "#ff7f0e", "#8c564b"};
  return colors[i % 6];
}

}  // namespace detail

// Renders line series with optional confidence bands into a standalone SVG
// document. No external assets; everything is plain shapes and text.
inline std::string line_chart_svg(const std::vector<PlotSeries>& series,
                                  const PlotOptions& opts) {
  require(!series.empty(), "line_chart_svg: no series");
  for (const PlotSeries& s : series) {
    require(!s.x.empty() && s.x.size() == s.y.size(),
            "line_chart_svg: series needs matching x and y");
    require(s.lo.empty() || (s.lo.size() == s.x.size() &&
                             s.hi.size() == s.x.size()),
            "line_chart_svg: band must cover every point");
  }

  double xmin = opts.xmin, xmax = opts.xmax, ymin = opts.ymin, ymax = opts.ymax;
  auto widen = [](double& lo, double& hi, double v) {
    if (std::isnan(lo) || v < lo) lo = v;
    if (std::isnan(hi) || v > hi) hi = v;
  };
  if (std::isnan(xmin) || std::isnan(xmax) || std::isnan(ymin) ||
      std::isnan(ymax)) {
    double dxmin = std::numeric_limits<double>::quiet_NaN(), dxmax = dxmin,
           dymin = dxmin, dymax = dxmin;
    for (const PlotSeries& s : series)
      for (std::size_t i = 0; i < s.x.size(); ++i) {
        widen(dxmin, dxmax, s.x[i]);
        widen(dymin, dymax, s.y[i]);
        if (!s.lo.empty()) {
          widen(dymin, dymax, s.lo[i]);
          widen(dymin, dymax, s.hi[i]);
        }
      }
    if (std::isnan(xmin)) xmin = dxmin;
    if (std::isnan(xmax)) xmax = dxmax;
    if (std::isnan(ymin)) ymin = dymin;
    if (std::isnan(ymax)) ymax = dymax;
  }
  if (xmax - xmin <= 0) {
    xmin -= 0.5;
    xmax += 0.5;
  }
  if (ymax - ymin <= 0) {
    ymin -= 0.5;
    ymax += 0.5;
  }

  const double L = 58, R = 16, T = opts.title.empty() ? 16 : 38, B = 46;
  const double pw = opts.width - L - R, ph = opts.height - T - B;
  auto px = [&](double v) { return L + pw * (v - xmin) / (xmax - xmin); };
  auto py = [&](double v) { return T + ph * (1.0 - (v - ymin) / (ymax - ymin)); };

  std::string svg;
  svg += "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" +
         std::to_string(opts.width) + "\" height=\"" +
         std::to_string(opts.height) + "\" viewBox=\"0 0 " +
         std::to_string(opts.width) + " " + std::to_string(opts.height) +
         "\" font-family=\"sans-serif\" font-size=\"12\">\n";
  svg += "<rect x=\"0\" y=\"0\" width=\"" + std::to_string(opts.width) +
         "\" height=\"" + std::to_string(opts.height) + "\" fill=\"white\"/>\n";

  if (!opts.title.empty())
    svg += "<text x=\"" + detail::fixed2(L + pw / 2) +
           "\" y=\"20\" text-anchor=\"middle\" font-size=\"15\">" +
           detail::xml_escape(opts.title) + "</text>\n";

  // gridlines and tick labels
  for (int t = 0; t <= 4; ++t) {
    const double fx = xmin + (xmax - xmin) * t / 4.0;
    const double fy = ymin + (ymax - ymin) * t / 4.0;
    svg += "<line x1=\"" + detail::fixed2(px(fx)) + "\" y1=\"" +
           detail::fixed2(T) + "\" x2=\"" + detail::fixed2(px(fx)) +
           "\" y2=\"" + detail::fixed2(T + ph) +
           "\" stroke=\"#dddddd\" stroke-width=\"1\"/>\n";
    svg += "<line x1=\"" + detail::fixed2(L) + "\" y1=\"" +
           detail::fixed2(py(fy)) + "\" x2=\"" + detail::fixed2(L + pw) +
           "\" y2=\"" + detail::fixed2(py(fy)) +
           "\" stroke=\"#dddddd\" stroke-width=\"1\"/>\n";
    svg += "<text x=\"" + detail::fixed2(px(fx)) + "\" y=\"" +
           detail::fixed2(T + ph + 16) + "\" text-anchor=\"middle\">" +
           detail::xml_escape(detail::tick_label(fx)) + "</text>\n";
    svg += "<text x=\"" + detail::fixed2(L - 6) + "\" y=\"" +
           detail::fixed2(py(fy) + 4) + "\" text-anchor=\"end\">" +
           detail::xml_escape(detail::tick_label(fy)) + "</text>\n";
  }

  // axes
  svg += "<line x1=\"" + detail::fixed2(L) + "\" y1=\"" + detail::fixed2(T) +
         "\" x2=\"" + detail::fixed2(L) + "\" y2=\"" + detail::fixed2(T + ph) +
         "\" stroke=\"black\" stroke-width=\"1\"/>\n";
  svg += "<line x1=\"" + detail::fixed2(L) + "\" y1=\"" +
         detail::fixed2(T + ph) + "\" x2=\"" + detail::fixed2(L + pw) +
         "\" y2=\"" + detail::fixed2(T + ph) +
         "\" stroke=\"black\" stroke-width=\"1\"/>\n";
  if (!opts.xlabel.empty())
    svg += "<text x=\"" + detail::fixed2(L + pw / 2) + "\" y=\"" +
           detail::fixed2(T + ph + 36) + "\" text-anchor=\"middle\">" +
           detail::xml_escape(opts.xlabel) + "</text>\n";
  if (!opts.ylabel.empty())
    svg += "<text x=\"14\" y=\"" + detail::fixed2(T + ph / 2) +
           "\" text-anchor=\"middle\" transform=\"rotate(-90 14 " +
           detail::fixed2(T + ph / 2) + ")\">" +
           detail::xml_escape(opts.ylabel) + "</text>\n";

  if (opts.diagonal) {
    // the ideal reference: y = x across the shared span
    const double lo = std::max(xmin, ymin), hi = std::min(xmax, ymax);
    svg += "<line class=\"ideal\" x1=\"" + detail::fixed2(px(lo)) +
           "\" y1=\"" + detail::fixed2(py(lo)) + "\" x2=\"" +
           detail::fixed2(px(hi)) + "\" y2=\"" + detail::fixed2(py(hi)) +
           "\" stroke=\"#888888\" stroke-width=\"1\" stroke-dasharray=\"5 4\"/>\n";
  }

  for (std::size_t si = 0; si < series.size(); ++si) {
    const PlotSeries& s = series[si];
    const std::string color =
        s.color.empty() ? detail::plot_palette(si) : s.color;
    if (!s.lo.empty()) {
      std::string pts;
      for (std::size_t i = 0; i < s.x.size(); ++i)
        pts += detail::fixed2(px(s.x[i])) + "," + detail::fixed2(py(s.hi[i])) + " ";
      for (std::size_t i = s.x.size(); i-- > 0;)
        pts += detail::fixed2(px(s.x[i])) + "," + detail::fixed2(py(s.lo[i])) + " ";
      pts.pop_back();
      svg += "<polygon points=\"" + pts + "\" fill=\"" + color +
             "\" fill-opacity=\"0.15\" stroke=\"none\"/>\n";
    }
    std::string pts;
    for (std::size_t i = 0; i < s.x.size(); ++i)
      pts += detail::fixed2(px(s.x[i])) + "," + detail::fixed2(py(s.y[i])) + " ";
    pts.pop_back();
    svg += "<polyline points=\"" + pts + "\" fill=\"none\" stroke=\"" + color +
           "\" stroke-width=\"2\"/>\n";
    for (std::size_t i = 0; i < s.x.size(); ++i)
      svg += "<circle cx=\"" + detail::fixed2(px(s.x[i])) + "\" cy=\"" +
             detail::fixed2(py(s.y[i])) + "\" r=\"2.5\" fill=\"" + color +
             "\"/>\n";

    // legend entry
    const double ly = T + 14 + 18 * static_cast<double>(si);
    svg += "<rect x=\"" + detail::fixed2(L + pw - 130) + "\" y=\"" +
           detail::fixed2(ly - 9) +
           "\" width=\"12\" height=\"12\" fill=\"" + color + "\"/>\n";
    svg += "<text x=\"" + detail::fixed2(L + pw - 112) + "\" y=\"" +
           detail::fixed2(ly + 2) + "\">" + detail::xml_escape(s.label) +
           "</text>\n";
  }

  svg += "</svg>\n";
  return svg;
}

// Reliability diagram: empirical coverage against the nominal level, always
// with the ideal diagonal and the unit square as the frame.
inline std::string calibration_svg(
    const std::vector<std::pair<std::string, std::vector<CalibrationPoint>>>&
        curves,
    const std::string& title = "Calibration") {
  require(!curves.empty(), "calibration_svg: no curves");
  std::vector<PlotSeries> series;
  for (const auto& [label, curve] : curves) {
    require(!curve.empty(), "calibration_svg: empty curve");
    PlotSeries s;
    s.label = label;
    for (const CalibrationPoint& p : curve) {
      s.x.push_back(p.level);
      s.y.push_back(p.coverage);
    }
    series.push_back(std::move(s));
  }
  PlotOptions opts;
  opts.title = title;
  opts.xlabel = "nominal level";
  opts.ylabel = "empirical coverage";
  opts.diagonal = true;
  opts.xmin = 0.0;
  opts.xmax = 1.0;
  opts.ymin = 0.0;
  opts.ymax = 1.0;
  return line_chart_svg(series, opts);
}

}  // namespace kalmeta
