#include "devstyle/plot.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <limits>
#include <stdexcept>

namespace devstyle {
namespace {

constexpr int kLeft = 64, kRight = 20, kTop = 34, kBottom = 48;

std::string format_tick(double v, bool hz) {
  char buf[32];
  if (hz && v >= 1000.0) {
    const double k = v / 1000.0;
    if (std::abs(k - std::round(k)) < 1e-9)
      std::snprintf(buf, sizeof buf, "%.0fk", k);
    else
      std::snprintf(buf, sizeof buf, "%.1fk", k);
  } else if (std::abs(v - std::round(v)) < 1e-9) {
    std::snprintf(buf, sizeof buf, "%.0f", v);
  } else {
    std::snprintf(buf, sizeof buf, "%.3g", v);
  }
  return buf;
}

double nice_step(double span, int target_ticks) {
  if (!(span > 0)) return 1.0;
  const double raw = span / target_ticks;
  const double mag = std::pow(10.0, std::floor(std::log10(raw)));
  for (const double m : {1.0, 2.0, 5.0, 10.0})
    if (m * mag >= raw) return m * mag;
  return 10.0 * mag;
}

struct Frame {
  int x0, y0, x1, y1;  // plot area in pixels, y0 top
  double xmin, xmax, ymin, ymax;
  bool log_x;

  double px(double x) const {
    const double t = log_x ? (std::log10(x) - std::log10(xmin)) / (std::log10(xmax) - std::log10(xmin))
                           : (x - xmin) / (xmax - xmin);
    return x0 + t * (x1 - x0);
  }
  double py(double y) const { return y1 - (y - ymin) / (ymax - ymin) * (y1 - y0); }
};

Frame draw_axes(Canvas& c, const AxesStyle& style, double xmin, double xmax, double ymin, double ymax) {
  if (style.log_x && !(xmin > 0)) throw std::invalid_argument("render_line_plot: log-x needs positive x");
  if (xmax <= xmin) xmax = xmin + (style.log_x ? xmin : 1.0);
  double step = style.y_step > 0 ? style.y_step : nice_step(ymax - ymin, 6);
  double lo = std::floor(ymin / step) * step;
  double hi = std::ceil(ymax / step) * step;
  if (hi - lo < step * 0.5) {
    lo -= step;
    hi += step;
  }
  while ((hi - lo) / step > 16) step *= 2;

  Frame f{kLeft, kTop, style.width_px - kRight, style.height_px - kBottom, xmin, xmax, lo, hi, style.log_x};

  // y grid + labels
  for (double v = lo; v <= hi + step * 1e-9; v += step) {
    const int y = static_cast<int>(std::lround(f.py(v)));
    c.draw_line(f.x0, y, f.x1, y, kGridGray);
    const auto s = format_tick(v, false);
    c.draw_text(f.x0 - 6 - text_width(s), y - 3, s, kBlack);
  }
  // x grid + labels
  if (style.log_x) {
    for (double decade = std::pow(10.0, std::floor(std::log10(xmin))); decade <= xmax; decade *= 10.0) {
      for (const double m : {1.0, 2.0, 5.0}) {
        const double v = decade * m;
        if (v < xmin * (1 - 1e-9) || v > xmax * (1 + 1e-9)) continue;
        const int x = static_cast<int>(std::lround(f.px(v)));
        c.draw_line(x, f.y0, x, f.y1, kGridGray);
        const auto s = format_tick(v, true);
        c.draw_text(x - text_width(s) / 2, f.y1 + 6, s, kBlack);
      }
    }
  } else {
    const double xs = nice_step(xmax - xmin, 8);
    for (double v = std::ceil(xmin / xs) * xs; v <= xmax + xs * 1e-9; v += xs) {
      const int x = static_cast<int>(std::lround(f.px(v)));
      c.draw_line(x, f.y0, x, f.y1, kGridGray);
      const auto s = format_tick(v, false);
      c.draw_text(x - text_width(s) / 2, f.y1 + 6, s, kBlack);
    }
  }
  c.draw_rect(f.x0, f.y0, f.x1, f.y1, kBlack);
  if (!style.title.empty()) c.draw_text((style.width_px - text_width(style.title, 2)) / 2, 8, style.title, kBlack, 2);
  if (!style.x_label.empty())
    c.draw_text((f.x0 + f.x1 - text_width(style.x_label)) / 2, style.height_px - 18, style.x_label, kBlack);
  if (!style.y_label.empty()) c.draw_text(4, f.y0 - 14, style.y_label, kBlack);
  return f;
}

void draw_legend(Canvas& c, const Frame& f, const std::vector<std::pair<std::string, Rgb>>& entries) {
  if (entries.empty()) return;
  int w = 0;
  for (const auto& [name, col] : entries) w = std::max(w, text_width(name));
  const int box_w = w + 34, box_h = static_cast<int>(entries.size()) * 12 + 8;
  const int bx = f.x1 - box_w - 8, by = f.y0 + 8;
  c.fill_rect(bx, by, bx + box_w, by + box_h, kWhite);
  c.draw_rect(bx, by, bx + box_w, by + box_h, kBlack);
  int y = by + 6;
  for (const auto& [name, col] : entries) {
    c.draw_line(bx + 6, y + 3, bx + 24, y + 3, col, 2);
    c.draw_text(bx + 30, y, name, kBlack);
    y += 12;
  }
}

}  // namespace

Canvas render_line_plot(const AxesStyle& style, const std::vector<PlotSeries>& series) {
  if (series.empty()) throw std::invalid_argument("render_line_plot: no series");
  double xmin = std::numeric_limits<double>::infinity(), xmax = -xmin, ymin = xmin, ymax = -xmin;
  for (const auto& s : series) {
    if (s.x.size() != s.y.size()) throw std::invalid_argument("render_line_plot: x/y length mismatch");
    for (std::size_t i = 0; i < s.x.size(); ++i) {
      xmin = std::min(xmin, s.x[i]);
      xmax = std::max(xmax, s.x[i]);
      ymin = std::min(ymin, s.y[i]);
      ymax = std::max(ymax, s.y[i]);
    }
  }
  if (!std::isfinite(xmin)) throw std::invalid_argument("render_line_plot: series are empty");
  Canvas c(style.width_px, style.height_px);
  const Frame f = draw_axes(c, style, xmin, xmax, ymin, ymax);
  std::vector<std::pair<std::string, Rgb>> legend;
  for (const auto& s : series) {
    for (std::size_t i = 1; i < s.x.size(); ++i)
      c.draw_line(f.px(s.x[i - 1]), f.py(s.y[i - 1]), f.px(s.x[i]), f.py(s.y[i]), s.color, style.line_width);
    if (s.x.size() == 1) c.draw_line(f.px(s.x[0]), f.py(s.y[0]), f.px(s.x[0]), f.py(s.y[0]), s.color, 3);
    legend.emplace_back(s.name, s.color);
  }
  if (style.legend) draw_legend(c, f, legend);
  return c;
}

Canvas render_scatter(const AxesStyle& style, const std::vector<ScatterPoint>& points) {
  if (points.empty()) throw std::invalid_argument("render_scatter: no points");
  double xmin = points[0].x, xmax = xmin, ymin = points[0].y, ymax = ymin;
  std::vector<std::string> labels;
  for (const auto& p : points) {
    xmin = std::min(xmin, p.x);
    xmax = std::max(xmax, p.x);
    ymin = std::min(ymin, p.y);
    ymax = std::max(ymax, p.y);
    if (std::find(labels.begin(), labels.end(), p.label) == labels.end()) labels.push_back(p.label);
  }
  const double padx = 0.05 * (xmax - xmin + 1e-12);
  Canvas c(style.width_px, style.height_px);
  AxesStyle st = style;
  st.log_x = false;
  const Frame f = draw_axes(c, st, xmin - padx, xmax + padx, ymin, ymax);
  const auto& pal = series_palette();
  std::vector<std::pair<std::string, Rgb>> legend;
  for (std::size_t li = 0; li < labels.size(); ++li) legend.emplace_back(labels[li], pal[li % pal.size()]);
  for (const auto& p : points) {
    const auto li = static_cast<std::size_t>(std::find(labels.begin(), labels.end(), p.label) - labels.begin());
    const int x = static_cast<int>(std::lround(f.px(p.x))), y = static_cast<int>(std::lround(f.py(p.y)));
    c.fill_rect(x - 2, y - 2, x + 2, y + 2, pal[li % pal.size()]);
  }
  if (style.legend) draw_legend(c, f, legend);
  return c;
}

Canvas render_heatmap(int width_px, int height_px, const std::vector<std::vector<double>>& values, double lo,
                      double hi, const std::string& title) {
  if (values.empty() || values[0].empty()) throw std::invalid_argument("render_heatmap: empty matrix");
  Canvas c(width_px, height_px);
  const int top = title.empty() ? 0 : 14;
  if (!title.empty()) c.draw_text(4, 3, title, kBlack);
  const int rows = static_cast<int>(values.size()), cols = static_cast<int>(values[0].size());
  const int h = height_px - top;
  for (int py = 0; py < h; ++py) {
    const int r = std::min(rows - 1, (h - 1 - py) * rows / h);
    for (int px = 0; px < width_px; ++px) {
      const int col = std::min(cols - 1, px * cols / width_px);
      const double t = std::clamp((values[r][col] - lo) / (hi - lo + 1e-12), 0.0, 1.0);
      // dark blue -> magenta -> yellow
      const auto ch = [](double v) { return static_cast<std::uint8_t>(std::lround(255.0 * std::clamp(v, 0.0, 1.0))); };
      c.set(px, top + py, Rgb{ch(1.6 * t - 0.1), ch(2.0 * t * t - 0.3), ch(0.35 + 0.9 * t - 1.2 * t * t)});
    }
  }
  return c;
}

}  // namespace devstyle
