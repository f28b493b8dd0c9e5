#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "varc/common.hpp"

namespace varc {

// A rectangular puzzle grid of color cells, row-major.
struct Grid {
  int rows = 0;
  int cols = 0;
  std::vector<std::uint8_t> cells;  // rows * cols

  Grid() = default;
  Grid(int r, int c, std::uint8_t fill = 0)
      : rows(r), cols(c), cells(static_cast<std::size_t>(r) * c, fill) {}

  std::uint8_t& at(int r, int c) { return cells[static_cast<std::size_t>(r) * cols + c]; }
  std::uint8_t at(int r, int c) const { return cells[static_cast<std::size_t>(r) * cols + c]; }

  bool operator==(const Grid& other) const {
    return rows == other.rows && cols == other.cols && cells == other.cells;
  }
  bool operator!=(const Grid& other) const { return !(*this == other); }
};

// One input/output example. The output may be absent on held-out inference
// pairs whose ground truth is withheld.
struct ExamplePair {
  Grid input;
  std::optional<Grid> output;

  bool has_output() const { return output.has_value(); }
};

// A single puzzle: demonstration pairs (outputs always present) plus the
// inference pairs the solver is judged on.
struct Task {
  std::string id;
  std::vector<ExamplePair> demo;
  std::vector<ExamplePair> infer;
};

struct TaskSet {
  std::vector<Task> tasks;
  std::string split;  // informational tag: train / eval / test
};

inline std::string grid_to_string(const Grid& g) {
  std::string out;
  out.reserve(static_cast<std::size_t>(g.rows) * (g.cols + 1));
  for (int r = 0; r < g.rows; ++r) {
    for (int c = 0; c < g.cols; ++c) {
      const std::uint8_t v = g.at(r, c);
      if (v < 10) {
        out.push_back(static_cast<char>('0' + v));
      } else {
        out.push_back(v == kBG ? '.' : '#');
      }
    }
    out.push_back('\n');
  }
  return out;
}

}  // namespace varc
