#pragma once

// Self-contained SVG line chart: one polyline per series, linear axes.

#include <algorithm>
#include <cstdio>
#include <string>
#include <utility>
#include <vector>

namespace sbfm::harness {

struct PlotSeries {
  std::string name;
  std::vector<std::pair<double, double>> points;  // (x, y), drawn in order
};

struct PlotSpec {
  std::string title;
  std::string x_label;
  std::string y_label;
  double y_min = 0.0;
  double y_max = 1.0;
  int width = 640;
  int height = 420;
};

inline std::string xml_escape(const std::string& s) {
  std::string out;
  for (char c : s) {
    switch (c) {
      case '&': out += "&amp;"; break;
      case '<': out += "&lt;"; break;
      case '>': out += "&gt;"; break;
      case '"': out += "&quot;"; break;
      default: out += c;
    }
  }
  return out;
}

namespace detail {

inline std::string fmt(const char* f, double v) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), f, v);
  return buf;
}

}  // namespace detail

inline std::string render_line_plot(const std::vector<PlotSeries>& series, const PlotSpec& spec) {
  static const char* palette[] = {"#1f77b4", "#d62728", "#2ca02c", "#ff7f0e",
                                  "#9467bd", "#8c564b", "#e377c2", "#7f7f7f"};
  const double left = 70, right = 170, top = 40, bottom = 55;
  const double pw = spec.width - left - right, ph = spec.height - top - bottom;

  double x_min = 0.0, x_max = 1.0;
  bool first = true;
  for (const auto& s : series)
    for (const auto& [x, y] : s.points) {
      x_min = first ? x : std::min(x_min, x);
      x_max = first ? x : std::max(x_max, x);
      first = false;
    }
  if (x_max <= x_min) x_max = x_min + 1.0;
  const double y_span = spec.y_max > spec.y_min ? spec.y_max - spec.y_min : 1.0;
  auto sx = [&](double x) { return left + (x - x_min) / (x_max - x_min) * pw; };
  auto sy = [&](double y) { return top + (1.0 - (y - spec.y_min) / y_span) * ph; };

  std::string o;
  o += "<?xml version=\"1.0\" encoding=\"UTF-8\"?>\n";
  o += "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" + std::to_string(spec.width) + "\" height=\"" +
       std::to_string(spec.height) + "\" viewBox=\"0 0 " + std::to_string(spec.width) + " " +
       std::to_string(spec.height) + "\" font-family=\"sans-serif\" font-size=\"12\">\n";
  o += "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
  o += "<text x=\"" + detail::fmt("%.1f", left + pw / 2) + "\" y=\"22\" text-anchor=\"middle\" font-size=\"14\">" +
       xml_escape(spec.title) + "</text>\n";

  for (int i = 0; i <= 5; ++i) {
    const double yv = spec.y_min + y_span * i / 5.0, y = sy(yv);
    o += "<line x1=\"" + detail::fmt("%.1f", left) + "\" y1=\"" + detail::fmt("%.1f", y) + "\" x2=\"" +
         detail::fmt("%.1f", left + pw) + "\" y2=\"" + detail::fmt("%.1f", y) + "\" stroke=\"#ddd\"/>\n";
    o += "<text x=\"" + detail::fmt("%.1f", left - 6) + "\" y=\"" + detail::fmt("%.1f", y + 4) +
         "\" text-anchor=\"end\">" + detail::fmt("%.2f", yv) + "</text>\n";
  }
  for (int i = 0; i <= 5; ++i) {
    const double xv = x_min + (x_max - x_min) * i / 5.0, x = sx(xv);
    o += "<line x1=\"" + detail::fmt("%.1f", x) + "\" y1=\"" + detail::fmt("%.1f", top + ph) + "\" x2=\"" +
         detail::fmt("%.1f", x) + "\" y2=\"" + detail::fmt("%.1f", top + ph + 5) + "\" stroke=\"black\"/>\n";
    o += "<text x=\"" + detail::fmt("%.1f", x) + "\" y=\"" + detail::fmt("%.1f", top + ph + 18) +
         "\" text-anchor=\"middle\">" + detail::fmt("%.3g", xv) + "</text>\n";
  }
  o += "<rect x=\"" + detail::fmt("%.1f", left) + "\" y=\"" + detail::fmt("%.1f", top) + "\" width=\"" +
       detail::fmt("%.1f", pw) + "\" height=\"" + detail::fmt("%.1f", ph) +
       "\" fill=\"none\" stroke=\"black\"/>\n";
  o += "<text x=\"" + detail::fmt("%.1f", left + pw / 2) + "\" y=\"" + std::to_string(spec.height - 12) +
       "\" text-anchor=\"middle\">" + xml_escape(spec.x_label) + "</text>\n";
  o += "<text transform=\"translate(18," + detail::fmt("%.1f", top + ph / 2) +
       ") rotate(-90)\" text-anchor=\"middle\">" + xml_escape(spec.y_label) + "</text>\n";

  for (std::size_t s = 0; s < series.size(); ++s) {
    const char* colour = palette[s % (sizeof(palette) / sizeof(*palette))];
    std::string pts;
    for (const auto& [x, y] : series[s].points) {
      if (!pts.empty()) pts += ' ';
      pts += detail::fmt("%.2f", sx(x)) + "," + detail::fmt("%.2f", sy(y));
    }
    o += "<polyline class=\"series\" data-name=\"" + xml_escape(series[s].name) + "\" points=\"" + pts +
         "\" fill=\"none\" stroke=\"" + colour + "\" stroke-width=\"2\"/>\n";
    for (const auto& [x, y] : series[s].points) {
      o += "<circle cx=\"" + detail::fmt("%.2f", sx(x)) + "\" cy=\"" + detail::fmt("%.2f", sy(y)) +
           "\" r=\"3\" fill=\"" + colour + "\"/>\n";
    }
    const double ly = top + 10 + 18.0 * static_cast<double>(s);
    o += "<line x1=\"" + detail::fmt("%.1f", left + pw + 12) + "\" y1=\"" + detail::fmt("%.1f", ly) + "\" x2=\"" +
         detail::fmt("%.1f", left + pw + 32) + "\" y2=\"" + detail::fmt("%.1f", ly) + "\" stroke=\"" + colour +
         "\" stroke-width=\"2\"/>\n";
    o += "<text x=\"" + detail::fmt("%.1f", left + pw + 38) + "\" y=\"" + detail::fmt("%.1f", ly + 4) + "\">" +
         xml_escape(series[s].name) + "</text>\n";
  }
  o += "</svg>\n";
  return o;
}

}  // namespace sbfm::harness
