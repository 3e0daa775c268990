#pragma once

#include <cstdint>
#include <string>
#include <string_view>
#include <vector>

namespace devstyle {

struct Rgb {
  std::uint8_t r = 0, g = 0, b = 0;
  bool operator==(const Rgb&) const = default;
};

inline constexpr Rgb kWhite{255, 255, 255};
inline constexpr Rgb kBlack{0, 0, 0};
inline constexpr Rgb kGridGray{220, 220, 220};
inline constexpr Rgb kHarmanOrange{255, 140, 0};

// Fixed, colorblind-friendly series palette (orange is reserved for the target).
const std::vector<Rgb>& series_palette();

// 8-bit RGB raster with integer-pixel primitives. Everything is deterministic.
class Canvas {
 public:
  Canvas(int width, int height, Rgb background = kWhite);

  int width() const { return width_; }
  int height() const { return height_; }
  Rgb at(int x, int y) const;

  void set(int x, int y, Rgb c);
  void fill_rect(int x0, int y0, int x1, int y1, Rgb c);
  void draw_rect(int x0, int y0, int x1, int y1, Rgb c);
  // Line with a square brush of `thickness` pixels.
  void draw_line(double x0, double y0, double x1, double y1, Rgb c, int thickness = 1);
  // 5x7 bitmap font; lowercase letters render as uppercase. Returns drawn width.
  int draw_text(int x, int y, std::string_view text, Rgb c, int scale = 1);
  void blit(const Canvas& src, int x, int y);

  std::vector<std::uint8_t> encode_png() const;

 private:
  int width_, height_;
  std::vector<std::uint8_t> pixels_;
};

int text_width(std::string_view text, int scale = 1);
inline constexpr int kGlyphHeight = 7;

}  // namespace devstyle
