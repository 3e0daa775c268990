#include "devstyle/frc_graph.hpp"

#include <stdexcept>

#include "devstyle/plot.hpp"

namespace devstyle {

FrcLineGraph render_line_graph(const std::vector<FrequencyResponse>& frs, const std::optional<TargetCurve>& target,
                               const GraphStyle& style) {
  if (frs.empty()) throw std::invalid_argument("render_line_graph: at least one curve is required");
  AxesStyle axes;
  axes.width_px = style.width_px;
  axes.height_px = style.height_px;
  axes.log_x = true;
  axes.y_step = style.y_pad_db;
  axes.line_width = style.line_width;
  axes.legend = true;
  axes.x_label = "Frequency (Hz)";
  axes.y_label = "dB";

  std::vector<PlotSeries> series;
  const auto& pal = series_palette();
  for (std::size_t i = 0; i < frs.size(); ++i) {
    frs[i].validate();
    const std::string name = frs[i].device_name.empty() ? "device " + std::to_string(i) : frs[i].device_name;
    series.push_back({name, frs[i].freqs_hz, frs[i].mags_db, pal[i % pal.size()]});
  }
  if (target) {
    target->curve.validate();
    const std::string name = target->kind == TargetKind::harman ? "Harman"
                             : target->curve.device_name.empty() ? "Target"
                                                                 : target->curve.device_name;
    series.push_back({name, target->curve.freqs_hz, target->curve.mags_db, kHarmanOrange});
  }

  FrcLineGraph g;
  g.image_bytes = render_line_plot(axes, series).encode_png();
  g.width_px = style.width_px;
  g.height_px = style.height_px;
  for (const auto& s : series) g.series_names.push_back(s.name);
  return g;
}

}  // namespace devstyle
