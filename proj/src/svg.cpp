#include "terse/svg.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <limits>
#include <sstream>
#include <stdexcept>

namespace terse::svg {
namespace {

constexpr double kW = 640, kH = 400, kL = 70, kR = 160, kT = 40, kB = 50;
const char* kPalette[] = {"#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#17becf", "#7f7f7f"};

std::string esc(const std::string& s) {
  std::string out;
  for (char c : s) {
    if (c == '<') out += "&lt;";
    else if (c == '>') out += "&gt;";
    else if (c == '&') out += "&amp;";
    else out += c;
  }
  return out;
}

struct Range {
  double lo = std::numeric_limits<double>::infinity();
  double hi = -std::numeric_limits<double>::infinity();
  void add(double v) {
    if (!std::isfinite(v)) return;
    lo = std::min(lo, v);
    hi = std::max(hi, v);
  }
  void finish() {
    if (!std::isfinite(lo)) lo = 0, hi = 1;
    if (hi - lo < 1e-12) lo -= 0.5, hi += 0.5;
    const double pad = 0.05 * (hi - lo);
    lo -= pad;
    hi += pad;
  }
};

std::string num(double v) {
  std::ostringstream o;
  o.precision(4);
  o << v;
  return o.str();
}

class Canvas {
 public:
  Canvas(const std::string& title, Range xr, Range yr) : xr_(xr), yr_(yr) {
    o_ << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << kW << "\" height=\"" << kH
       << "\" font-family=\"sans-serif\" font-size=\"11\">\n"
       << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n"
       << "<text x=\"" << kW / 2 << "\" y=\"20\" text-anchor=\"middle\" font-size=\"14\">" << esc(title)
       << "</text>\n";
  }
  double px(double x) const { return kL + (x - xr_.lo) / (xr_.hi - xr_.lo) * (kW - kL - kR); }
  double py(double y) const { return kH - kB - (y - yr_.lo) / (yr_.hi - yr_.lo) * (kH - kT - kB); }

  void axes(const std::string& xl, const std::string& yl, bool x_ticks = true) {
    o_ << "<line x1=\"" << kL << "\" y1=\"" << kH - kB << "\" x2=\"" << kW - kR << "\" y2=\"" << kH - kB
       << "\" stroke=\"black\"/>\n"
       << "<line x1=\"" << kL << "\" y1=\"" << kT << "\" x2=\"" << kL << "\" y2=\"" << kH - kB
       << "\" stroke=\"black\"/>\n";
    for (int i = 0; i <= 4; ++i) {
      const double yv = yr_.lo + (yr_.hi - yr_.lo) * i / 4.0;
      o_ << "<text x=\"" << kL - 5 << "\" y=\"" << py(yv) + 4 << "\" text-anchor=\"end\">" << num(yv)
         << "</text>\n";
      if (x_ticks) {
        const double xv = xr_.lo + (xr_.hi - xr_.lo) * i / 4.0;
        o_ << "<text x=\"" << px(xv) << "\" y=\"" << kH - kB + 15 << "\" text-anchor=\"middle\">" << num(xv)
           << "</text>\n";
      }
    }
    o_ << "<text x=\"" << (kL + kW - kR) / 2 << "\" y=\"" << kH - 10 << "\" text-anchor=\"middle\">" << esc(xl)
       << "</text>\n"
       << "<text x=\"15\" y=\"" << (kT + kH - kB) / 2 << "\" text-anchor=\"middle\" transform=\"rotate(-90 15 "
       << (kT + kH - kB) / 2 << ")\">" << esc(yl) << "</text>\n";
  }
  void legend(std::size_t i, const std::string& label) {
    const double y = kT + 10 + 16.0 * static_cast<double>(i);
    o_ << "<rect x=\"" << kW - kR + 10 << "\" y=\"" << y - 8 << "\" width=\"10\" height=\"10\" fill=\""
       << color(i) << "\"/>\n<text x=\"" << kW - kR + 25 << "\" y=\"" << y << "\">" << esc(label) << "</text>\n";
  }
  static const char* color(std::size_t i) { return kPalette[i % 8]; }
  std::ostringstream& out() { return o_; }
  std::string finish() {
    o_ << "</svg>\n";
    return o_.str();
  }

 private:
  Range xr_, yr_;
  std::ostringstream o_;
};

}  // namespace

std::string line_chart(const std::string& title, const std::string& x_label, const std::string& y_label,
                       const std::vector<Series>& series) {
  Range xr, yr;
  for (const auto& s : series) {
    if (s.x.size() != s.y.size()) throw std::invalid_argument("line_chart: x/y size mismatch");
    for (double v : s.x) xr.add(v);
    for (double v : s.y) yr.add(v);
  }
  xr.finish();
  yr.finish();
  Canvas c(title, xr, yr);
  c.axes(x_label, y_label);
  for (std::size_t i = 0; i < series.size(); ++i) {
    const auto& s = series[i];
    c.out() << "<polyline fill=\"none\" stroke=\"" << Canvas::color(i) << "\" stroke-width=\"1.5\" points=\"";
    for (std::size_t k = 0; k < s.x.size(); ++k)
      if (std::isfinite(s.y[k])) c.out() << c.px(s.x[k]) << ',' << c.py(s.y[k]) << ' ';
    c.out() << "\"/>\n";
    for (std::size_t k = 0; k < s.x.size(); ++k)
      if (std::isfinite(s.y[k]))
        c.out() << "<circle cx=\"" << c.px(s.x[k]) << "\" cy=\"" << c.py(s.y[k]) << "\" r=\"2.5\" fill=\""
                << Canvas::color(i) << "\"/>\n";
    c.legend(i, s.label);
  }
  return c.finish();
}

std::string scatter_chart(const std::string& title, const std::string& x_label, const std::string& y_label,
                          const std::vector<ScatterGroup>& groups) {
  Range xr, yr;
  for (const auto& g : groups) {
    if (g.x.size() != g.y.size()) throw std::invalid_argument("scatter_chart: x/y size mismatch");
    for (double v : g.x) xr.add(v);
    for (double v : g.y) yr.add(v);
  }
  xr.finish();
  yr.finish();
  Canvas c(title, xr, yr);
  c.axes(x_label, y_label);
  for (std::size_t i = 0; i < groups.size(); ++i) {
    for (std::size_t k = 0; k < groups[i].x.size(); ++k)
      c.out() << "<circle cx=\"" << c.px(groups[i].x[k]) << "\" cy=\"" << c.py(groups[i].y[k])
              << "\" r=\"2.5\" fill-opacity=\"0.6\" fill=\"" << Canvas::color(i) << "\"/>\n";
    c.legend(i, groups[i].label);
  }
  return c.finish();
}

std::string bar_chart(const std::string& title, const std::vector<std::string>& series_labels,
                      const std::vector<Bar>& bars) {
  Range yr;
  yr.add(0.0);
  for (const auto& b : bars) {
    if (b.values.size() != series_labels.size()) throw std::invalid_argument("bar_chart: value count mismatch");
    for (double v : b.values) yr.add(v);
  }
  yr.finish();
  Range xr;
  xr.lo = 0;
  xr.hi = static_cast<double>(std::max<std::size_t>(bars.size(), 1));
  Canvas c(title, xr, yr);
  c.axes("", "", false);
  const double slot = (c.px(1) - c.px(0)) * 0.8;
  const double w = slot / static_cast<double>(std::max<std::size_t>(series_labels.size(), 1));
  for (std::size_t b = 0; b < bars.size(); ++b) {
    const double x0 = c.px(static_cast<double>(b)) + (c.px(1) - c.px(0)) * 0.1;
    for (std::size_t s = 0; s < series_labels.size(); ++s) {
      const double v = bars[b].values[s];
      const double top = c.py(std::max(v, 0.0)), bot = c.py(std::min(v, 0.0));
      c.out() << "<rect x=\"" << x0 + w * static_cast<double>(s) << "\" y=\"" << top << "\" width=\"" << w * 0.9
              << "\" height=\"" << bot - top << "\" fill=\"" << Canvas::color(s) << "\"/>\n";
    }
    c.out() << "<text x=\"" << x0 + slot / 2 << "\" y=\"" << kH - kB + 15 << "\" text-anchor=\"middle\">"
            << esc(bars[b].category) << "</text>\n";
  }
  for (std::size_t s = 0; s < series_labels.size(); ++s) c.legend(s, series_labels[s]);
  return c.finish();
}

void write_file(const std::string& path, const std::string& content) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write " + path);
  out << content;
  if (!out) throw std::runtime_error("write failed: " + path);
}

}  // namespace terse::svg
