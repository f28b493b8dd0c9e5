#pragma once

#include <array>
#include <cstdint>
#include <fstream>
#include <string>
#include <vector>

#include "varc/common.hpp"
#include "varc/geometry.hpp"

namespace varc {

// Binary 8-bit PGM (P5).
inline void write_pgm(const std::string& path, int width, int height,
                      const std::vector<std::uint8_t>& pixels) {
  check(static_cast<std::size_t>(width) * height == pixels.size(), Errc::ShapeMismatch,
        "pixel buffer does not match " + std::to_string(width) + "x" + std::to_string(height));
  std::ofstream out(path, std::ios::binary);
  check(out.good(), Errc::IoError, "cannot write " + path);
  out << "P5\n" << width << " " << height << "\n255\n";
  out.write(reinterpret_cast<const char*>(pixels.data()), static_cast<std::streamsize>(pixels.size()));
  check(out.good(), Errc::IoError, "short write to " + path);
}

// Fixed gray palette for the 12 symbols: colors 0..9 spread over mid grays,
// BG black, BD white, so structure is visible at a glance.
inline std::uint8_t symbol_gray(std::uint8_t symbol) {
  static constexpr std::array<std::uint8_t, 12> palette = {
      40, 60, 80, 100, 120, 140, 160, 180, 200, 220, 0, 255};
  return palette[symbol < 12 ? symbol : 0];
}

inline void write_canvas_pgm(const std::string& path, const Canvas& canvas) {
  std::vector<std::uint8_t> px(canvas.cells.size());
  for (std::size_t i = 0; i < px.size(); ++i) px[i] = symbol_gray(canvas.cells[i]);
  write_pgm(path, canvas.size, canvas.size, px);
}

// Min-max normalize a float map to 0..255 (constant maps render mid-gray).
inline void write_heatmap_pgm(const std::string& path, int width, int height,
                              const std::vector<float>& values) {
  check(static_cast<std::size_t>(width) * height == values.size(), Errc::ShapeMismatch,
        "heatmap buffer does not match dimensions");
  float lo = values.empty() ? 0.0f : values[0];
  float hi = lo;
  for (float v : values) {
    lo = std::min(lo, v);
    hi = std::max(hi, v);
  }
  const float range = hi - lo;
  std::vector<std::uint8_t> px(values.size());
  for (std::size_t i = 0; i < values.size(); ++i) {
    px[i] = range > 0 ? static_cast<std::uint8_t>(255.0f * (values[i] - lo) / range) : 128;
  }
  write_pgm(path, width, height, px);
}

}  // namespace varc
