#pragma once

// Text exports of transport plans for inspection and diffing.

#include <cstddef>
#include <filesystem>
#include <span>
#include <string>
#include <utility>

namespace pbp::ct {

// rows × cols, comma separated, 9 significant digits, '\n' line ends.
std::string plan_csv(std::span<const double> values, std::size_t rows, std::size_t cols);

// ASCII PGM (P2), maxval 255. Values are scaled by the matrix maximum and
// rounded; an all-zero matrix maps to all zeros.
std::string heatmap_pgm(std::span<const double> values, std::size_t width, std::size_t height);

// (width, height) used to lay M patches out as a grid: √M when M is a perfect
// square, otherwise a single row of M.
std::pair<std::size_t, std::size_t> patch_grid(std::size_t patches);

void write_text(const std::filesystem::path& path, const std::string& text);

}  // namespace pbp::ct
