#pragma once

// Figure data (CSV with columns x,series,mean,std,n) and deterministic SVG
// plots: a line per series with a shaded ±std band, or grouped bars.

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "glstm/graph.hpp"

namespace glstm {

class ReportError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct SeriesPoint {
  double x = 0.0;
  double mean = 0.0;
  double std = 0.0;
  std::size_t n = 0;
};

struct Series {
  std::string name;
  std::vector<SeriesPoint> points;
};

enum class PlotKind { kLineBand, kBar };

struct FigureSpec {
  std::string id;
  std::vector<std::filesystem::path> inputs;
  PlotKind kind = PlotKind::kLineBand;
  std::string title;
  std::string x_label = "x";
  std::string y_label = "y";
  bool log_x = false;
  bool log_y = false;
};

inline constexpr const char* kFigureCsvHeader = "x,series,mean,std,n";

inline void write_figure_csv(std::ostream& os, const std::vector<Series>& series) {
  os << kFigureCsvHeader << '\n';
  for (const auto& s : series)
    for (const auto& p : s.points)
      os << format_real(p.x) << ',' << s.name << ',' << format_real(p.mean) << ',' << format_real(p.std) << ','
         << p.n << '\n';
}

/// Parses figure CSV; series keep first-appearance order, points are sorted
/// by x.
inline std::vector<Series> read_figure_csv(std::istream& is, const std::string& source = "csv") {
  std::string line;
  if (!std::getline(is, line)) throw ReportError(source + ": empty file");
  if (!line.empty() && line.back() == '\r') line.pop_back();
  if (line != kFigureCsvHeader)
    throw ReportError(source + ": schema mismatch, expected header '" + kFigureCsvHeader + "', got '" + line + "'");
  std::vector<Series> out;
  std::map<std::string, std::size_t> index;
  std::size_t line_no = 1;
  while (std::getline(is, line)) {
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    std::vector<std::string> f;
    std::stringstream ss(line);
    std::string cell;
    while (std::getline(ss, cell, ',')) f.push_back(cell);
    if (f.size() != 5) throw ReportError(source + ":" + std::to_string(line_no) + ": expected 5 columns");
    SeriesPoint p;
    try {
      std::size_t pos = 0;
      p.x = std::stod(f[0], &pos);
      p.mean = std::stod(f[2]);
      p.std = std::stod(f[3]);
      p.n = std::stoul(f[4]);
    } catch (const std::exception&) {
      throw ReportError(source + ":" + std::to_string(line_no) + ": invalid number");
    }
    auto [it, fresh] = index.emplace(f[1], out.size());
    if (fresh) out.push_back({f[1], {}});
    out[it->second].points.push_back(p);
  }
  for (auto& s : out)
    std::stable_sort(s.points.begin(), s.points.end(),
                     [](const SeriesPoint& a, const SeriesPoint& b) { return a.x < b.x; });
  return out;
}

namespace detail {

inline std::string fmt(double v, int prec = 2) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.*f", prec, v);
  std::string s = buf;
  if (s == "-0.00" || s == "-0.0" || s == "-0") s = s.substr(1);
  return s;
}

inline std::string tick_label(double v) {
  char buf[64];
  if (v != 0.0 && (std::fabs(v) >= 1e5 || std::fabs(v) < 1e-3)) std::snprintf(buf, sizeof(buf), "%.0e", v);
  else std::snprintf(buf, sizeof(buf), "%.4g", v);
  return buf;
}

inline std::string escape(const std::string& s) {
  std::string o;
  for (char c : s) {
    switch (c) {
      case '<': o += "&lt;"; break;
      case '>': o += "&gt;"; break;
      case '&': o += "&amp;"; break;
      case '"': o += "&quot;"; break;
      default: o += c;
    }
  }
  return o;
}

inline constexpr const char* kPalette[] = {"#1f77b4", "#d62728", "#2ca02c", "#ff7f0e",
                                           "#9467bd", "#8c564b", "#e377c2", "#17becf"};

struct Axis {
  double lo = 0, hi = 1;
  bool log = false;
  double to_unit(double v) const {
    const double a = log ? std::log10(v) : v;
    const double l = log ? std::log10(lo) : lo, h = log ? std::log10(hi) : hi;
    return h > l ? (a - l) / (h - l) : 0.5;
  }
};

inline std::vector<double> linear_ticks(double lo, double hi) {
  const double span = hi - lo;
  if (!(span > 0)) return {lo};
  const double raw = span / 5.0;
  const double mag = std::pow(10.0, std::floor(std::log10(raw)));
  double step = mag;
  for (double m : {1.0, 2.0, 2.5, 5.0, 10.0})
    if (raw <= m * mag) {
      step = m * mag;
      break;
    }
  std::vector<double> t;
  for (double v = std::ceil(lo / step) * step; v <= hi + 1e-9 * step; v += step) t.push_back(std::fabs(v) < 1e-12 * step ? 0.0 : v);
  return t;
}

inline std::vector<double> decade_ticks(double lo, double hi) {
  std::vector<double> t;
  for (double e = std::floor(std::log10(lo)); e <= std::ceil(std::log10(hi)); e += 1.0) {
    const double v = std::pow(10.0, e);
    if (v >= lo * (1 - 1e-12) && v <= hi * (1 + 1e-12)) t.push_back(v);
  }
  if (t.size() < 2) t = {lo, hi};
  return t;
}

}  // namespace detail

/// Renders series to SVG text. Output depends only on the inputs.
inline std::string render_svg(const FigureSpec& spec, const std::vector<Series>& series) {
  using namespace detail;
  if (series.empty()) throw ReportError("figure '" + spec.id + "': no series to plot");
  for (const auto& s : series) {
    if (s.points.empty()) throw ReportError("figure '" + spec.id + "': series '" + s.name + "' is empty");
    for (const auto& p : s.points) {
      if (!std::isfinite(p.x) || !std::isfinite(p.mean) || !std::isfinite(p.std))
        throw ReportError("figure '" + spec.id + "': non-finite value in series '" + s.name + "'");
      if (spec.log_x && p.x <= 0) throw ReportError("figure '" + spec.id + "': log x axis needs x > 0");
    }
  }
  const double W = 640, H = 420, ml = 70, mr = 150, mt = 40, mb = 55;
  const double pw = W - ml - mr, ph = H - mt - mb;

  std::vector<double> xs;
  double ylo = INFINITY, yhi = -INFINITY, ypos = INFINITY;
  for (const auto& s : series)
    for (const auto& p : s.points) {
      xs.push_back(p.x);
      ylo = std::min(ylo, p.mean - p.std);
      yhi = std::max(yhi, p.mean + p.std);
      if (p.mean > 0) ypos = std::min(ypos, p.mean);
      if (p.mean - p.std > 0) ypos = std::min(ypos, p.mean - p.std);
    }
  std::sort(xs.begin(), xs.end());
  xs.erase(std::unique(xs.begin(), xs.end()), xs.end());
  Axis ax{xs.front(), xs.back(), spec.log_x};
  if (ax.hi == ax.lo) {
    ax.lo = spec.log_x ? ax.lo / 2 : ax.lo - 1;
    ax.hi = spec.log_x ? ax.hi * 2 : ax.hi + 1;
  }
  if (spec.kind == PlotKind::kBar && !spec.log_y) ylo = std::min(ylo, 0.0);
  Axis ay{ylo, yhi, spec.log_y};
  if (spec.log_y) {
    if (!std::isfinite(ypos)) throw ReportError("figure '" + spec.id + "': log y axis needs positive values");
    ay.lo = std::max(ylo, ypos);
  }
  if (ay.hi <= ay.lo) {
    ay.lo = spec.log_y ? ay.lo / 2 : ay.lo - 0.5;
    ay.hi = spec.log_y ? ay.hi * 2 : ay.hi + 0.5;
  } else if (!spec.log_y) {
    const double pad = 0.05 * (ay.hi - ay.lo);
    ay.lo -= pad;
    ay.hi += pad;
  }
  auto px = [&](double x) { return ml + pw * ax.to_unit(x); };
  auto py = [&](double y) {
    if (spec.log_y) y = std::max(y, ay.lo);
    return mt + ph * (1.0 - ay.to_unit(y));
  };

  std::ostringstream o;
  o << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << fmt(W, 0) << "\" height=\"" << fmt(H, 0)
    << "\" viewBox=\"0 0 " << fmt(W, 0) << ' ' << fmt(H, 0) << "\" font-family=\"sans-serif\" font-size=\"12\">\n";
  o << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
  if (!spec.title.empty())
    o << "<text x=\"" << fmt(ml + pw / 2) << "\" y=\"22\" text-anchor=\"middle\" font-size=\"14\">"
      << escape(spec.title) << "</text>\n";
  // axes
  o << "<g stroke=\"black\" stroke-width=\"1\">\n";
  o << "<line x1=\"" << fmt(ml) << "\" y1=\"" << fmt(mt + ph) << "\" x2=\"" << fmt(ml + pw) << "\" y2=\""
    << fmt(mt + ph) << "\"/>\n";
  o << "<line x1=\"" << fmt(ml) << "\" y1=\"" << fmt(mt) << "\" x2=\"" << fmt(ml) << "\" y2=\"" << fmt(mt + ph)
    << "\"/>\n</g>\n";
  const std::vector<double> xt = spec.kind == PlotKind::kBar || spec.log_x ? xs : linear_ticks(ax.lo, ax.hi);
  const std::vector<double> yt = spec.log_y ? decade_ticks(ay.lo, ay.hi) : linear_ticks(ay.lo, ay.hi);
  o << "<g font-size=\"11\">\n";
  for (double t : xt) {
    const double x = px(t);
    o << "<line x1=\"" << fmt(x) << "\" y1=\"" << fmt(mt + ph) << "\" x2=\"" << fmt(x) << "\" y2=\""
      << fmt(mt + ph + 5) << "\" stroke=\"black\"/>";
    o << "<text x=\"" << fmt(x) << "\" y=\"" << fmt(mt + ph + 18) << "\" text-anchor=\"middle\">" << tick_label(t)
      << "</text>\n";
  }
  for (double t : yt) {
    const double y = py(t);
    o << "<line x1=\"" << fmt(ml - 5) << "\" y1=\"" << fmt(y) << "\" x2=\"" << fmt(ml) << "\" y2=\"" << fmt(y)
      << "\" stroke=\"black\"/>";
    o << "<line x1=\"" << fmt(ml) << "\" y1=\"" << fmt(y) << "\" x2=\"" << fmt(ml + pw) << "\" y2=\"" << fmt(y)
      << "\" stroke=\"#dddddd\"/>";
    o << "<text x=\"" << fmt(ml - 8) << "\" y=\"" << fmt(y + 4) << "\" text-anchor=\"end\">" << tick_label(t)
      << "</text>\n";
  }
  o << "</g>\n";
  o << "<text x=\"" << fmt(ml + pw / 2) << "\" y=\"" << fmt(H - 12) << "\" text-anchor=\"middle\">"
    << escape(spec.x_label) << "</text>\n";
  o << "<text x=\"18\" y=\"" << fmt(mt + ph / 2) << "\" text-anchor=\"middle\" transform=\"rotate(-90 18 "
    << fmt(mt + ph / 2) << ")\">" << escape(spec.y_label) << "</text>\n";

  const std::size_t ns = series.size();
  for (std::size_t si = 0; si < ns; ++si) {
    const auto& s = series[si];
    const char* color = kPalette[si % std::size(kPalette)];
    o << "<g id=\"series-" << si << "\">\n";
    if (spec.kind == PlotKind::kLineBand) {
      std::string band, line;
      for (const auto& p : s.points) band += fmt(px(p.x)) + "," + fmt(py(p.mean + p.std)) + " ";
      for (auto it = s.points.rbegin(); it != s.points.rend(); ++it)
        band += fmt(px(it->x)) + "," + fmt(py(it->mean - it->std)) + " ";
      for (const auto& p : s.points) line += fmt(px(p.x)) + "," + fmt(py(p.mean)) + " ";
      band.pop_back();
      line.pop_back();
      o << "<polygon points=\"" << band << "\" fill=\"" << color << "\" fill-opacity=\"0.2\" stroke=\"none\"/>\n";
      o << "<polyline points=\"" << line << "\" fill=\"none\" stroke=\"" << color << "\" stroke-width=\"2\"/>\n";
      for (const auto& p : s.points)
        o << "<circle cx=\"" << fmt(px(p.x)) << "\" cy=\"" << fmt(py(p.mean)) << "\" r=\"3\" fill=\"" << color
          << "\"/>\n";
    } else {
      const double slot = pw / static_cast<double>(xs.size());
      const double bw = 0.8 * slot / static_cast<double>(ns);
      for (const auto& p : s.points) {
        const auto k = static_cast<double>(std::lower_bound(xs.begin(), xs.end(), p.x) - xs.begin());
        const double x0 = ml + slot * k + 0.1 * slot + bw * static_cast<double>(si);
        const double base = spec.log_y ? ay.lo : std::max(ay.lo, 0.0);
        const double y0 = py(std::max(p.mean, base)), y1 = py(base);
        o << "<rect x=\"" << fmt(x0) << "\" y=\"" << fmt(std::min(y0, y1)) << "\" width=\"" << fmt(bw)
          << "\" height=\"" << fmt(std::fabs(y1 - y0)) << "\" fill=\"" << color << "\" fill-opacity=\"0.7\"/>\n";
        const double cx = x0 + bw / 2;
        o << "<line x1=\"" << fmt(cx) << "\" y1=\"" << fmt(py(p.mean - p.std)) << "\" x2=\"" << fmt(cx)
          << "\" y2=\"" << fmt(py(p.mean + p.std)) << "\" stroke=\"black\"/>\n";
      }
    }
    const double ly = mt + 10 + 18 * static_cast<double>(si);
    o << "<rect x=\"" << fmt(ml + pw + 15) << "\" y=\"" << fmt(ly - 8) << "\" width=\"12\" height=\"12\" fill=\""
      << color << "\"/>";
    o << "<text x=\"" << fmt(ml + pw + 32) << "\" y=\"" << fmt(ly + 2) << "\">" << escape(s.name) << "</text>\n";
    o << "</g>\n";
  }
  o << "</svg>\n";
  return o.str();
}

/// Reads every input CSV, writes <out_dir>/<id>.csv (merged) and <id>.svg.
inline void emit_report(const FigureSpec& spec, const std::filesystem::path& out_dir) {
  if (spec.inputs.empty()) throw ReportError("figure '" + spec.id + "': no input CSVs");
  std::vector<Series> all;
  for (const auto& path : spec.inputs) {
    std::ifstream is(path);
    if (!is) throw ReportError("figure '" + spec.id + "': missing input " + path.string());
    for (auto& s : read_figure_csv(is, path.string())) all.push_back(std::move(s));
  }
  const std::string svg = render_svg(spec, all);
  std::filesystem::create_directories(out_dir);
  std::ofstream svg_os(out_dir / (spec.id + ".svg"), std::ios::binary);
  svg_os << svg;
  std::ofstream csv_os(out_dir / (spec.id + ".csv"), std::ios::binary);
  write_figure_csv(csv_os, all);
  if (!svg_os || !csv_os) throw ReportError("figure '" + spec.id + "': failed writing to " + out_dir.string());
}

}  // namespace glstm
