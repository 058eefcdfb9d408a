#pragma once

// Report emission: CSV tables with lossless number formatting, the report JSON
// document (schema in docs/report-schema.md) and its plottable sections, and
// standalone SVG rendering of those sections.

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <limits>
#include <map>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "ctl/errors.hpp"
#include "ctl/stats.hpp"

namespace ctl {

inline constexpr int kReportSchemaVersion = 1;

/// 17 significant digits in scientific notation: parses back to the same double.
inline std::string format_sci(double v) {
  if (std::isnan(v)) return "nan";
  if (std::isinf(v)) return v > 0 ? "inf" : "-inf";
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.16e", v);
  return buf;
}

class CsvTable {
 public:
  explicit CsvTable(std::vector<std::string> header) : header_(std::move(header)) {}

  struct Cell {
    Cell(const std::string& s) : text(s) {}
    Cell(const char* s) : text(s) {}
    Cell(double v) : text(format_sci(v)) {}
    Cell(std::size_t v) : text(std::to_string(v)) {}
    Cell(int v) : text(std::to_string(v)) {}
    std::string text;
  };

  void add(std::vector<Cell> cells) {
    if (cells.size() != header_.size()) throw ValidationError("csv row has the wrong number of cells");
    std::vector<std::string> row;
    for (auto& c : cells) row.push_back(std::move(c.text));
    rows_.push_back(std::move(row));
  }

  std::size_t rows() const noexcept { return rows_.size(); }
  const std::vector<std::string>& header() const noexcept { return header_; }

  std::string str() const {
    std::string out;
    auto line = [&](const std::vector<std::string>& cells) {
      for (std::size_t k = 0; k < cells.size(); ++k) {
        if (k) out += ',';
        out += quote(cells[k]);
      }
      out += '\n';
    };
    line(header_);
    for (const auto& r : rows_) line(r);
    return out;
  }

 private:
  static std::string quote(const std::string& s) {
    if (s.find_first_of(",\"\n") == std::string::npos) return s;
    std::string q = "\"";
    for (char ch : s) {
      if (ch == '"') q += '"';
      q += ch;
    }
    return q + "\"";
  }

  std::vector<std::string> header_;
  std::vector<std::vector<std::string>> rows_;
};

inline nlohmann::json summary_json(const Summary& s) {
  return {{"mean", s.mean}, {"q1", s.q1}, {"median", s.median}, {"q3", s.q3}, {"count", s.count}, {"excluded", s.excluded}};
}

/// One error-bar glyph: a mean with its quartile bar at position x of a series.
struct ErrorBar {
  std::string series;
  double x = 0.0;
  double mean = 0.0, q1 = 0.0, q3 = 0.0;
};

struct ScatterPoint {
  double x = 0.0, y = 0.0;
  std::string label;
};

struct PlotSections {
  std::string title;
  std::string x_label, y_label;
  std::vector<ErrorBar> errorbars;
  std::vector<ScatterPoint> points;
  bool reference_identity = false;  // draw y = x on scatter plots
};

inline nlohmann::json plots_json(const PlotSections& p) {
  nlohmann::json j{{"title", p.title}, {"x_label", p.x_label}, {"y_label", p.y_label}};
  j["errorbars"] = nlohmann::json::array();
  for (const auto& e : p.errorbars)
    j["errorbars"].push_back({{"series", e.series}, {"x", e.x}, {"mean", e.mean}, {"q1", e.q1}, {"q3", e.q3}});
  j["points"] = nlohmann::json::array();
  for (const auto& s : p.points) j["points"].push_back({{"x", s.x}, {"y", s.y}, {"label", s.label}});
  j["reference_line"] = p.reference_identity ? nlohmann::json("y=x") : nlohmann::json(nullptr);
  return j;
}

/// Thrown when a report document cannot serve the requested plot.
class ReportSchemaError : public ValidationError {
 public:
  using ValidationError::ValidationError;
};

inline PlotSections plots_from_json(const nlohmann::json& report) {
  if (!report.is_object() || report.empty()) throw ReportSchemaError("report is empty");
  if (!report.contains("schema_version") || !report["schema_version"].is_number_integer())
    throw ReportSchemaError("report has no schema_version");
  if (report["schema_version"].get<int>() != kReportSchemaVersion)
    throw ReportSchemaError("report schema_version " + report["schema_version"].dump() + " is not supported");
  if (!report.contains("plots") || !report["plots"].is_object()) throw ReportSchemaError("report has no plots section");
  const auto& j = report["plots"];
  PlotSections p;
  auto str = [&](const char* k) { return j.contains(k) && j[k].is_string() ? j[k].get<std::string>() : std::string(); };
  p.title = str("title");
  p.x_label = str("x_label");
  p.y_label = str("y_label");
  auto num = [](const nlohmann::json& o, const char* k) {
    if (!o.contains(k) || !o[k].is_number()) throw ReportSchemaError(std::string("plot entry lacks numeric '") + k + "'");
    return o[k].get<double>();
  };
  if (j.contains("errorbars")) {
    if (!j["errorbars"].is_array()) throw ReportSchemaError("plots.errorbars must be an array");
    for (const auto& e : j["errorbars"])
      p.errorbars.push_back({e.value("series", std::string()), num(e, "x"), num(e, "mean"), num(e, "q1"), num(e, "q3")});
  }
  if (j.contains("points")) {
    if (!j["points"].is_array()) throw ReportSchemaError("plots.points must be an array");
    for (const auto& s : j["points"]) p.points.push_back({num(s, "x"), num(s, "y"), s.value("label", std::string())});
  }
  p.reference_identity = j.contains("reference_line") && j["reference_line"] == "y=x";
  return p;
}

// ---------------------------------------------------------------------------
// SVG

namespace detail {

inline std::string svg_num(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.3f", v);
  return buf;
}

inline std::string xml_escape(const std::string& s) {
  std::string out;
  for (char ch : s) {
    switch (ch) {
      case '&': out += "&amp;"; break;
      case '<': out += "&lt;"; break;
      case '>': out += "&gt;"; break;
      case '"': out += "&quot;"; break;
      default: out += ch;
    }
  }
  return out;
}

struct Frame {
  double x0, x1, y0, y1;  // data range
  static constexpr double W = 640, H = 420, L = 70, R = 20, T = 40, B = 60;

  double px(double x) const { return L + (x - x0) / (x1 - x0) * (W - L - R); }
  double py(double y) const { return H - B - (y - y0) / (y1 - y0) * (H - T - B); }
};

inline void pad_range(double& lo, double& hi) {
  if (!(hi > lo)) {
    const double m = std::abs(lo) > 0 ? std::abs(lo) * 0.1 : 1.0;
    lo -= m;
    hi += m;
  } else {
    const double m = (hi - lo) * 0.05;
    lo -= m;
    hi += m;
  }
}

inline std::string svg_open(const Frame& f, const PlotSections& p) {
  std::string s = "<?xml version=\"1.0\" encoding=\"UTF-8\"?>\n";
  s += "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" + svg_num(Frame::W) + "\" height=\"" + svg_num(Frame::H) +
       "\" viewBox=\"0 0 " + svg_num(Frame::W) + " " + svg_num(Frame::H) + "\">\n";
  s += "<rect x=\"0\" y=\"0\" width=\"" + svg_num(Frame::W) + "\" height=\"" + svg_num(Frame::H) + "\" fill=\"white\"/>\n";
  s += "<text x=\"" + svg_num(Frame::W / 2) + "\" y=\"24\" text-anchor=\"middle\" font-size=\"15\">" +
       xml_escape(p.title) + "</text>\n";
  const double bx = Frame::L, by = Frame::H - Frame::B, ex = Frame::W - Frame::R, ey = Frame::T;
  s += "<g class=\"axes\" stroke=\"black\" stroke-width=\"1\">\n";
  s += "<line x1=\"" + svg_num(bx) + "\" y1=\"" + svg_num(by) + "\" x2=\"" + svg_num(ex) + "\" y2=\"" + svg_num(by) + "\"/>\n";
  s += "<line x1=\"" + svg_num(bx) + "\" y1=\"" + svg_num(by) + "\" x2=\"" + svg_num(bx) + "\" y2=\"" + svg_num(ey) + "\"/>\n";
  s += "</g>\n";
  for (int k = 0; k <= 4; ++k) {
    const double xv = f.x0 + (f.x1 - f.x0) * k / 4.0, yv = f.y0 + (f.y1 - f.y0) * k / 4.0;
    char xl[32], yl[32];
    std::snprintf(xl, sizeof xl, "%.3g", xv);
    std::snprintf(yl, sizeof yl, "%.3g", yv);
    s += "<text x=\"" + svg_num(f.px(xv)) + "\" y=\"" + svg_num(by + 16) + "\" text-anchor=\"middle\" font-size=\"11\">" +
         xl + "</text>\n";
    s += "<text x=\"" + svg_num(bx - 6) + "\" y=\"" + svg_num(f.py(yv) + 4) + "\" text-anchor=\"end\" font-size=\"11\">" +
         yl + "</text>\n";
  }
  s += "<text x=\"" + svg_num((bx + ex) / 2) + "\" y=\"" + svg_num(Frame::H - 14) +
       "\" text-anchor=\"middle\" font-size=\"12\">" + xml_escape(p.x_label) + "</text>\n";
  s += "<text x=\"16\" y=\"" + svg_num((by + ey) / 2) + "\" text-anchor=\"middle\" font-size=\"12\" transform=\"rotate(-90 16 " +
       svg_num((by + ey) / 2) + ")\">" + xml_escape(p.y_label) + "</text>\n";
  return s;
}

inline const char* palette(std::size_t k) {
  static const char* colors[] = {"#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b", "#17becf", "#7f7f7f"};
  return colors[k % 8];
}

}  // namespace detail

/// Mean markers with quartile bars; one color per series, series offset
/// slightly along x so overlapping bars stay visible.
inline std::string render_errorbar_svg(const PlotSections& p) {
  if (p.errorbars.empty()) throw ReportSchemaError("report has no error-bar entries");
  double x0 = std::numeric_limits<double>::infinity(), x1 = -x0, y0 = x0, y1 = -x0;
  std::vector<std::string> series;
  for (const auto& e : p.errorbars) {
    x0 = std::min(x0, e.x);
    x1 = std::max(x1, e.x);
    y0 = std::min({y0, e.q1, e.mean});
    y1 = std::max({y1, e.q3, e.mean});
    if (std::find(series.begin(), series.end(), e.series) == series.end()) series.push_back(e.series);
  }
  detail::pad_range(x0, x1);
  detail::pad_range(y0, y1);
  const detail::Frame f{x0, x1, y0, y1};
  std::string s = detail::svg_open(f, p);
  const double spread = series.size() > 1 ? 6.0 : 0.0;
  for (std::size_t k = 0; k < series.size(); ++k) {
    const double off = series.size() > 1 ? spread * (static_cast<double>(k) - (series.size() - 1) / 2.0) : 0.0;
    s += "<g class=\"series\" stroke=\"" + std::string(detail::palette(k)) + "\" fill=\"" + detail::palette(k) + "\">\n";
    for (const auto& e : p.errorbars) {
      if (e.series != series[k]) continue;
      const double cx = f.px(e.x) + off;
      s += "<g class=\"errorbar\">";
      s += "<line x1=\"" + detail::svg_num(cx) + "\" y1=\"" + detail::svg_num(f.py(e.q1)) + "\" x2=\"" +
           detail::svg_num(cx) + "\" y2=\"" + detail::svg_num(f.py(e.q3)) + "\" stroke-width=\"1.5\"/>";
      s += "<circle cx=\"" + detail::svg_num(cx) + "\" cy=\"" + detail::svg_num(f.py(e.mean)) + "\" r=\"3\"/>";
      s += "</g>\n";
    }
    s += "</g>\n";
    s += "<text x=\"" + detail::svg_num(detail::Frame::W - detail::Frame::R - 4) + "\" y=\"" +
         detail::svg_num(detail::Frame::T + 14 * (k + 1)) + "\" text-anchor=\"end\" font-size=\"11\" fill=\"" +
         detail::palette(k) + "\">" + detail::xml_escape(series[k]) + "</text>\n";
  }
  return s + "</svg>\n";
}

inline std::string render_scatter_svg(const PlotSections& p) {
  if (p.points.empty()) throw ReportSchemaError("report has no scatter points");
  double x0 = std::numeric_limits<double>::infinity(), x1 = -x0, y0 = x0, y1 = -x0;
  for (const auto& q : p.points) {
    x0 = std::min(x0, q.x);
    x1 = std::max(x1, q.x);
    y0 = std::min(y0, q.y);
    y1 = std::max(y1, q.y);
  }
  if (p.reference_identity) {  // shared range so y = x is the diagonal
    x0 = y0 = std::min(x0, y0);
    x1 = y1 = std::max(x1, y1);
  }
  detail::pad_range(x0, x1);
  detail::pad_range(y0, y1);
  const detail::Frame f{x0, x1, y0, y1};
  std::string s = detail::svg_open(f, p);
  if (p.reference_identity) {
    const double lo = std::max(x0, y0), hi = std::min(x1, y1);
    s += "<line class=\"reference\" x1=\"" + detail::svg_num(f.px(lo)) + "\" y1=\"" + detail::svg_num(f.py(lo)) +
         "\" x2=\"" + detail::svg_num(f.px(hi)) + "\" y2=\"" + detail::svg_num(f.py(hi)) +
         "\" stroke=\"grey\" stroke-dasharray=\"6 4\"/>\n";
  }
  s += "<g class=\"points\" fill=\"#1f77b4\" fill-opacity=\"0.7\">\n";
  for (const auto& q : p.points)
    s += "<circle cx=\"" + detail::svg_num(f.px(q.x)) + "\" cy=\"" + detail::svg_num(f.py(q.y)) + "\" r=\"2.5\"/>\n";
  s += "</g>\n";
  return s + "</svg>\n";
}

/// Renders `kind` ("errorbar" or "scatter") from a report document.
inline std::string render_plot(const nlohmann::json& report, const std::string& kind) {
  const PlotSections p = plots_from_json(report);
  if (kind == "errorbar") return render_errorbar_svg(p);
  if (kind == "scatter") return render_scatter_svg(p);
  throw ReportSchemaError("unknown plot kind '" + kind + "' (errorbar, scatter)");
}

inline void write_text_file(const std::filesystem::path& path, const std::string& text) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error("cannot write " + path.string());
  out << text;
  if (!out) throw Error("failed writing " + path.string());
}

}  // namespace ctl
