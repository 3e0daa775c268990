#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "devstyle/frc.hpp"

namespace devstyle {

// Fixed rendering style: white background, log-x axis, dB y-axis padded
// to 6 dB multiples, 2 px lines, legend on.
struct GraphStyle {
  int width_px = 800;
  int height_px = 500;
  double y_pad_db = 6.0;
  int line_width = 2;
};

struct FrcLineGraph {
  std::vector<std::uint8_t> image_bytes;  // PNG
  int width_px = 0;
  int height_px = 0;
  std::vector<std::string> series_names;
};

// One series per curve, plus the target (drawn last, in orange) when given.
FrcLineGraph render_line_graph(const std::vector<FrequencyResponse>& frs, const std::optional<TargetCurve>& target,
                               const GraphStyle& style = {});

}  // namespace devstyle
