#pragma once

#include <optional>
#include <string>
#include <vector>

#include "devstyle/canvas.hpp"

namespace devstyle {

struct PlotSeries {
  std::string name;
  std::vector<double> x, y;
  Rgb color;
};

struct AxesStyle {
  int width_px = 800;
  int height_px = 500;
  bool log_x = false;
  // y-range is padded outward to multiples of this step; 0 picks a step automatically.
  double y_step = 0.0;
  int line_width = 2;
  bool legend = true;
  std::string title;
  std::string x_label;
  std::string y_label;
};

Canvas render_line_plot(const AxesStyle& style, const std::vector<PlotSeries>& series);

struct ScatterPoint {
  double x = 0, y = 0;
  std::string label;
};

// One color per distinct label, in order of first appearance.
Canvas render_scatter(const AxesStyle& style, const std::vector<ScatterPoint>& points);

// Row-major values[rows][cols]; row 0 is drawn at the bottom. Values map onto
// a fixed dark-to-bright colormap over [lo, hi].
Canvas render_heatmap(int width_px, int height_px, const std::vector<std::vector<double>>& values, double lo,
                      double hi, const std::string& title);

}  // namespace devstyle
