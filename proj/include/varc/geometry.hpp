#pragma once

#include <array>
#include <cstdint>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "varc/common.hpp"
#include "varc/grid.hpp"
#include "varc/rng.hpp"
#include "varc/tensor.hpp"

namespace varc {

// ---------------------------------------------------------------------------
// Dihedral transforms
// ---------------------------------------------------------------------------

// The six grid symmetries used for augmentation. Rotations are clockwise;
// flip_h mirrors left<->right, flip_v top<->bottom. Note this is a subset of
// the full dihedral group: it is not closed under composition (a flip
// followed by an odd rotation is a diagonal reflection, which is not a
// member), so compose() is partial.
enum class Dihedral : int { identity = 0, flip_h, flip_v, rot90, rot180, rot270 };

constexpr int kNumDihedral = 6;

inline const char* dihedral_name(Dihedral d) {
  switch (d) {
    case Dihedral::identity: return "identity";
    case Dihedral::flip_h: return "flip_h";
    case Dihedral::flip_v: return "flip_v";
    case Dihedral::rot90: return "rot90";
    case Dihedral::rot180: return "rot180";
    case Dihedral::rot270: return "rot270";
  }
  return "?";
}

inline Grid apply_dihedral(const Grid& g, Dihedral d) {
  const int h = g.rows, w = g.cols;
  switch (d) {
    case Dihedral::identity:
      return g;
    case Dihedral::flip_h: {
      Grid out(h, w);
      for (int r = 0; r < h; ++r)
        for (int c = 0; c < w; ++c) out.at(r, c) = g.at(r, w - 1 - c);
      return out;
    }
    case Dihedral::flip_v: {
      Grid out(h, w);
      for (int r = 0; r < h; ++r)
        for (int c = 0; c < w; ++c) out.at(r, c) = g.at(h - 1 - r, c);
      return out;
    }
    case Dihedral::rot90: {
      Grid out(w, h);
      for (int r = 0; r < w; ++r)
        for (int c = 0; c < h; ++c) out.at(r, c) = g.at(h - 1 - c, r);
      return out;
    }
    case Dihedral::rot180: {
      Grid out(h, w);
      for (int r = 0; r < h; ++r)
        for (int c = 0; c < w; ++c) out.at(r, c) = g.at(h - 1 - r, w - 1 - c);
      return out;
    }
    case Dihedral::rot270: {
      Grid out(w, h);
      for (int r = 0; r < w; ++r)
        for (int c = 0; c < h; ++c) out.at(r, c) = g.at(c, w - 1 - r);
      return out;
    }
  }
  fail(Errc::BadConfig, "unknown dihedral element");
}

inline Dihedral dihedral_inverse(Dihedral d) {
  switch (d) {
    case Dihedral::rot90: return Dihedral::rot270;
    case Dihedral::rot270: return Dihedral::rot90;
    default: return d;  // identity, both flips, and rot180 are involutions
  }
}

// Composition "a then b" where the result is again one of the six elements;
// flip-then-odd-rotation (and vice versa) falls outside the set.
inline std::optional<Dihedral> dihedral_compose(Dihedral a, Dihedral b) {
  using D = Dihedral;
  static constexpr int kNone = -1;
  // Row = a, column = b, values index into Dihedral; -1 = not in the set.
  static constexpr int table[6][6] = {
      // id     fh     fv     r90    r180   r270
      {0, 1, 2, 3, 4, 5},              // identity then b
      {1, 0, 4, kNone, 2, kNone},      // flip_h then b
      {2, 4, 0, kNone, 1, kNone},      // flip_v then b
      {3, kNone, kNone, 4, 5, 0},      // rot90 then b
      {4, 2, 1, 5, 0, 3},              // rot180 then b
      {5, kNone, kNone, 0, 3, 4},      // rot270 then b
  };
  const int r = table[static_cast<int>(a)][static_cast<int>(b)];
  if (r == kNone) return std::nullopt;
  return static_cast<D>(r);
}

// Shape of an h x w grid after the transform (odd rotations transpose).
inline std::pair<int, int> dihedral_shape(int h, int w, Dihedral d) {
  if (d == Dihedral::rot90 || d == Dihedral::rot270) return {w, h};
  return {h, w};
}

// ---------------------------------------------------------------------------
// Color permutations
// ---------------------------------------------------------------------------

// A bijection on the ten colors; BG and BD are always fixed points.
struct ColorPerm {
  std::array<std::uint8_t, 10> map{0, 1, 2, 3, 4, 5, 6, 7, 8, 9};

  bool operator==(const ColorPerm& other) const { return map == other.map; }
  bool operator!=(const ColorPerm& other) const { return !(*this == other); }

  bool is_identity() const {
    for (int i = 0; i < 10; ++i)
      if (map[i] != i) return false;
    return true;
  }
};

inline ColorPerm color_perm_identity() { return ColorPerm{}; }

inline ColorPerm color_perm_inverse(const ColorPerm& p) {
  ColorPerm inv;
  for (int i = 0; i < 10; ++i) inv.map[p.map[i]] = static_cast<std::uint8_t>(i);
  return inv;
}

inline ColorPerm random_color_perm(Rng& rng) {
  ColorPerm p;
  std::vector<std::uint8_t> v(p.map.begin(), p.map.end());
  rng.shuffle(v);
  for (int i = 0; i < 10; ++i) p.map[i] = v[i];
  return p;
}

inline Grid apply_color_perm(const Grid& g, const ColorPerm& p) {
  Grid out = g;
  for (auto& cell : out.cells) {
    if (cell < kNumColors) cell = p.map[cell];
  }
  return out;
}

// ---------------------------------------------------------------------------
// Scaling and canvas placement
// ---------------------------------------------------------------------------

// Duplicate every cell into an s x s block. If capacity > 0, reject results
// whose side would exceed it.
inline Grid scale_grid(const Grid& g, int s, int capacity = 0) {
  check(s >= 1, Errc::BadConfig, "scale factor must be >= 1, got " + std::to_string(s));
  if (capacity > 0) {
    check(static_cast<std::int64_t>(s) * g.rows <= capacity &&
              static_cast<std::int64_t>(s) * g.cols <= capacity,
          Errc::ScaleOverflow,
          std::to_string(g.rows) + "x" + std::to_string(g.cols) + " at scale " +
              std::to_string(s) + " exceeds capacity " + std::to_string(capacity));
  }
  if (s == 1) return g;
  Grid out(g.rows * s, g.cols * s);
  for (int r = 0; r < out.rows; ++r)
    for (int c = 0; c < out.cols; ++c) out.at(r, c) = g.at(r / s, c / s);
  return out;
}

// Fixed-size square field over the 12-symbol alphabet, BG-filled.
struct Canvas {
  int size = 0;
  std::vector<std::uint8_t> cells;

  Canvas() = default;
  explicit Canvas(int s) : size(s), cells(static_cast<std::size_t>(s) * s, kBG) {}

  std::uint8_t& at(int r, int c) { return cells[static_cast<std::size_t>(r) * size + c]; }
  std::uint8_t at(int r, int c) const { return cells[static_cast<std::size_t>(r) * size + c]; }

  bool operator==(const Canvas& other) const {
    return size == other.size && cells == other.cells;
  }
};

// One sampled augmentation: symbolic part (dihedral + color relabeling) and
// geometric part (integer scale + top-left placement offset).
struct ViewTransform {
  Dihedral dihedral = Dihedral::identity;
  ColorPerm color;
  int scale = 1;
  int row0 = 0;
  int col0 = 0;
};

// Dihedral, then color relabeling; the two commute, but the order is fixed
// so inverses can be applied unambiguously on decode.
inline Grid transform_grid(const Grid& g, const ViewTransform& v) {
  return apply_color_perm(apply_dihedral(g, v.dihedral), v.color);
}

namespace detail {

inline Canvas place_common(const Grid& g, const ViewTransform& v, int canvas_size,
                           bool with_border) {
  const Grid t = scale_grid(transform_grid(g, v), v.scale);
  const int extra = with_border ? 1 : 0;
  check(v.row0 >= 0 && v.col0 >= 0 && v.row0 + t.rows + extra <= canvas_size &&
            v.col0 + t.cols + extra <= canvas_size,
        Errc::PlacementOverflow,
        std::to_string(t.rows) + "x" + std::to_string(t.cols) + (with_border ? " + border" : "") +
            " at (" + std::to_string(v.row0) + "," + std::to_string(v.col0) +
            ") does not fit canvas " + std::to_string(canvas_size));
  Canvas out(canvas_size);
  for (int r = 0; r < t.rows; ++r)
    for (int c = 0; c < t.cols; ++c) out.at(v.row0 + r, v.col0 + c) = t.at(r, c);
  if (with_border) {
    // L-shaped border one cell outside the placed grid: full bottom row and
    // right column, sharing the corner cell.
    const int br = v.row0 + t.rows;
    const int bc = v.col0 + t.cols;
    for (int c = v.col0; c <= bc; ++c) out.at(br, c) = kBD;
    for (int r = v.row0; r <= br; ++r) out.at(r, bc) = kBD;
  }
  return out;
}

}  // namespace detail

// BG-filled canvas holding the transformed grid at the view's offset.
inline Canvas place_input(const Grid& g, const ViewTransform& v, int canvas_size) {
  return detail::place_common(g, v, canvas_size, /*with_border=*/false);
}

// As place_input, plus the BD border marking the right and bottom edges of
// the placed region (used as the training target and to recover predicted
// output shape).
inline Canvas place_target(const Grid& g, const ViewTransform& v, int canvas_size) {
  return detail::place_common(g, v, canvas_size, /*with_border=*/true);
}

// Draw a geometric view: scale uniform over the feasible range, then offset
// uniform over all placements that keep the input — and the target plus its
// border, when the output shape is known — fully on the canvas. The dihedral
// and color fields are left at identity; callers doing symbolic augmentation
// set them (and pass shapes as they are *after* the dihedral).
inline ViewTransform sample_view(Rng& rng, int in_rows, int in_cols,
                                 std::optional<std::pair<int, int>> out_shape, int canvas_size,
                                 int max_scale = 8) {
  check(in_rows >= 1 && in_cols >= 1, Errc::BadConfig, "input shape must be positive");
  int s_max = 0;
  for (int s = 1; s <= max_scale; ++s) {
    const bool in_ok = s * std::max(in_rows, in_cols) <= canvas_size;
    const bool out_ok =
        !out_shape || s * std::max(out_shape->first, out_shape->second) + 1 <= canvas_size;
    if (in_ok && out_ok) s_max = s;
  }
  check(s_max >= 1, Errc::NoFeasibleView,
        "no feasible scale for " + std::to_string(in_rows) + "x" + std::to_string(in_cols) +
            " on canvas " + std::to_string(canvas_size));

  ViewTransform v;
  v.scale = rng.uniform_int(1, s_max);
  int row_limit = canvas_size - v.scale * in_rows;
  int col_limit = canvas_size - v.scale * in_cols;
  if (out_shape) {
    row_limit = std::min(row_limit, canvas_size - v.scale * out_shape->first - 1);
    col_limit = std::min(col_limit, canvas_size - v.scale * out_shape->second - 1);
  }
  v.row0 = rng.uniform_int(0, row_limit);
  v.col0 = rng.uniform_int(0, col_limit);
  return v;
}

// ---------------------------------------------------------------------------
// Prediction decoding
// ---------------------------------------------------------------------------

// Per-cell probability vectors over the 12 symbols, shape [S, S, 12].
using ProbField = Tensor;

inline ProbField one_hot_field(const Canvas& canvas) {
  ProbField p({canvas.size, canvas.size, kNumSymbols});
  for (int r = 0; r < canvas.size; ++r)
    for (int c = 0; c < canvas.size; ++c)
      p.data[(static_cast<std::size_t>(r) * canvas.size + c) * kNumSymbols +
             canvas.at(r, c)] = 1.0f;
  return p;
}

enum class DecodeStatus { Ok, NoBorder, Misaligned, Degenerate };

inline const char* decode_status_name(DecodeStatus s) {
  switch (s) {
    case DecodeStatus::Ok: return "ok";
    case DecodeStatus::NoBorder: return "no_border";
    case DecodeStatus::Misaligned: return "misaligned";
    case DecodeStatus::Degenerate: return "degenerate";
  }
  return "?";
}

struct DecodeResult {
  DecodeStatus status = DecodeStatus::NoBorder;
  Grid grid;  // valid only when status == Ok

  bool ok() const { return status == DecodeStatus::Ok; }
};

// Recover the raw output grid from a probability field: locate the
// bottom-most / right-most predicted border cells, crop the region between
// the view offset and the border (exclusive), average probabilities over
// each s x s block, renormalize over the ten colors, pick the argmax (ties
// to the lowest color index), and undo the view's color and dihedral
// transforms. Failures are values, not exceptions: callers drop the view.
inline DecodeResult decode_prediction(const ProbField& p, const ViewTransform& v) {
  check(p.shape.size() == 3 && p.shape[0] == p.shape[1] && p.shape[2] == kNumSymbols,
        Errc::ShapeMismatch, "probability field must be [S, S, 12]");
  const int S = static_cast<int>(p.shape[0]);
  const auto prob_at = [&](int r, int c, int sym) {
    return p.data[(static_cast<std::size_t>(r) * S + c) * kNumSymbols + sym];
  };

  int r_star = -1, c_star = -1;
  for (int r = 0; r < S; ++r) {
    for (int c = 0; c < S; ++c) {
      int arg = 0;
      float best = prob_at(r, c, 0);
      for (int sym = 1; sym < kNumSymbols; ++sym) {
        const float val = prob_at(r, c, sym);
        if (val > best) {
          best = val;
          arg = sym;
        }
      }
      if (arg == kBD) {
        r_star = std::max(r_star, r);
        c_star = std::max(c_star, c);
      }
    }
  }
  if (r_star < 0) return {DecodeStatus::NoBorder, {}};

  const int height = r_star - v.row0;
  const int width = c_star - v.col0;
  if (height <= 0 || width <= 0) return {DecodeStatus::Degenerate, {}};
  if (height % v.scale != 0 || width % v.scale != 0) return {DecodeStatus::Misaligned, {}};

  Grid out(height / v.scale, width / v.scale);
  for (int i = 0; i < out.rows; ++i) {
    for (int j = 0; j < out.cols; ++j) {
      float color_mass[kNumColors] = {};
      for (int dr = 0; dr < v.scale; ++dr) {
        for (int dc = 0; dc < v.scale; ++dc) {
          const int r = v.row0 + i * v.scale + dr;
          const int c = v.col0 + j * v.scale + dc;
          for (int sym = 0; sym < kNumColors; ++sym) color_mass[sym] += prob_at(r, c, sym);
        }
      }
      int arg = 0;
      for (int sym = 1; sym < kNumColors; ++sym) {
        if (color_mass[sym] > color_mass[arg]) arg = sym;
      }
      out.at(i, j) = static_cast<std::uint8_t>(arg);
    }
  }
  Grid restored =
      apply_dihedral(apply_color_perm(out, color_perm_inverse(v.color)), dihedral_inverse(v.dihedral));
  return {DecodeStatus::Ok, std::move(restored)};
}

inline std::string canvas_to_string(const Canvas& canvas) {
  Grid g(canvas.size, canvas.size);
  g.cells = canvas.cells;
  return grid_to_string(g);
}

}  // namespace varc
