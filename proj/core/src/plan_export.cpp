#include "pbp/plan_export.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>

#include "binary_io.hpp"
#include "pbp/errors.hpp"

namespace pbp::ct {

std::string plan_csv(std::span<const double> values, std::size_t rows, std::size_t cols) {
  if (values.size() != rows * cols) throw DimensionError("plan_csv: value count does not match rows × cols");
  std::string out;
  char buf[32];
  for (std::size_t r = 0; r < rows; ++r) {
    for (std::size_t c = 0; c < cols; ++c) {
      std::snprintf(buf, sizeof buf, "%.9g", values[r * cols + c]);
      if (c) out.push_back(',');
      out += buf;
    }
    out.push_back('\n');
  }
  return out;
}

std::string heatmap_pgm(std::span<const double> values, std::size_t width, std::size_t height) {
  if (values.size() != width * height) throw DimensionError("heatmap_pgm: value count does not match the grid");
  double mx = 0.0;
  for (double v : values) mx = std::max(mx, v);
  std::string out = "P2\n" + std::to_string(width) + " " + std::to_string(height) + "\n255\n";
  for (std::size_t r = 0; r < height; ++r) {
    for (std::size_t c = 0; c < width; ++c) {
      const double v = values[r * width + c];
      const long level = mx > 0.0 ? std::lround(255.0 * std::max(v, 0.0) / mx) : 0L;
      if (c) out.push_back(' ');
      out += std::to_string(level);
    }
    out.push_back('\n');
  }
  return out;
}

std::pair<std::size_t, std::size_t> patch_grid(std::size_t patches) {
  const auto side = static_cast<std::size_t>(std::llround(std::sqrt(static_cast<double>(patches))));
  if (side * side == patches) return {side, side};
  return {patches, 1};
}

void write_text(const std::filesystem::path& path, const std::string& text) { io::write_file(path, text); }

}  // namespace pbp::ct
