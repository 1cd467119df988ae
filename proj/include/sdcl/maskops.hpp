#pragma once

// Binary-mask constructions: the copy-paste mask, the discrepancy and error
// masks, and largest-connected-component refinement of pseudo-labels.

#include <array>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <string>
#include <vector>

#include "sdcl/error.hpp"
#include "sdcl/rng.hpp"
#include "sdcl/volume.hpp"

namespace sdcl {

enum class MaskMode { kRandom, kCentered };

inline const char* mask_mode_name(MaskMode m) { return m == MaskMode::kRandom ? "random" : "centered"; }

inline MaskMode parse_mask_mode(const std::string& s) {
  if (s == "random") return MaskMode::kRandom;
  if (s == "centered") return MaskMode::kCentered;
  throw ConfigError("mask_mode", "expected 'random' or 'centered', got '" + s + "'");
}

/// Zero-block extents round(beta * dim), rounding half away from zero.
inline Extent3 zero_block_extent(Extent3 shape, double beta) {
  if (shape.w == 0 || shape.h == 0 || shape.d == 0) {
    throw ShapeError("copy_paste_mask", "degenerate shape " + shape.str());
  }
  if (!(beta > 0.0 && beta <= 1.0)) throw ConfigError("beta", "must lie in (0, 1]");
  const auto r = [beta](std::size_t dim) { return static_cast<std::size_t>(std::round(beta * static_cast<double>(dim))); };
  Extent3 b{r(shape.w), r(shape.h), r(shape.d)};
  const std::size_t dims[] = {shape.w, shape.h, shape.d};
  const std::size_t blk[] = {b.w, b.h, b.d};
  for (int a = 0; a < 3; ++a) {
    if (blk[a] < 1 || blk[a] > dims[a]) {
      throw ShapeError("copy_paste_mask", "block extent " + std::to_string(blk[a]) + " invalid for axis " +
                                              std::to_string(a) + " of length " + std::to_string(dims[a]));
    }
  }
  return b;
}

struct MaskPlacement {
  Extent3 block;
  std::array<std::size_t, 3> corner{};
};

/// Chooses the block corner: uniform over all fully-contained positions, or
/// the exact center (floor of the slack) in centered mode.
inline MaskPlacement place_zero_block(Extent3 shape, double beta, Rng& rng, MaskMode mode = MaskMode::kRandom) {
  MaskPlacement p;
  p.block = zero_block_extent(shape, beta);
  const std::size_t slack[] = {shape.w - p.block.w, shape.h - p.block.h, shape.d - p.block.d};
  for (int a = 0; a < 3; ++a) {
    p.corner[a] = mode == MaskMode::kCentered ? slack[a] / 2 : uniform_index(rng, slack[a] + 1);
  }
  return p;
}

inline BinaryMask mask_from_placement(Extent3 shape, const MaskPlacement& p) {
  BinaryMask m(shape, 1);
  for (std::size_t x = p.corner[0]; x < p.corner[0] + p.block.w; ++x) {
    for (std::size_t y = p.corner[1]; y < p.corner[1] + p.block.h; ++y) {
      for (std::size_t z = p.corner[2]; z < p.corner[2] + p.block.d; ++z) m.at(x, y, z) = 0;
    }
  }
  return m;
}

/// One axis-aligned block of zeros of extents round(beta * dim); ones elsewhere.
inline BinaryMask gen_copy_paste_mask(Extent3 shape, double beta, Rng& rng, MaskMode mode = MaskMode::kRandom) {
  return mask_from_placement(shape, place_zero_block(shape, beta, rng, mode));
}

/// 1 where the two hard predictions differ.
inline BinaryMask diff_mask(const LabelMap& a, const LabelMap& b) {
  require_same_extent("diff_mask", a, b);
  BinaryMask m(a.extent());
  for (std::size_t i = 0; i < m.size(); ++i) m[i] = a[i] != b[i];
  return m;
}

/// 1 where the prediction disagrees with the mixed label.
inline BinaryMask err_mask(const LabelMap& pred, const LabelMap& label) {
  require_same_extent("err_mask", pred, label);
  BinaryMask m(pred.extent());
  for (std::size_t i = 0; i < m.size(); ++i) m[i] = pred[i] != label[i];
  return m;
}

inline BinaryMask differr_mask(const BinaryMask& diff, const BinaryMask& err) {
  require_same_extent("differr_mask", diff, err);
  BinaryMask m(diff.extent());
  for (std::size_t i = 0; i < m.size(); ++i) m[i] = diff[i] & err[i];
  return m;
}

namespace detail {

struct DisjointSets {
  std::vector<std::uint32_t> parent;

  explicit DisjointSets(std::size_t n) : parent(n) { std::iota(parent.begin(), parent.end(), 0u); }

  std::uint32_t find(std::uint32_t v) {
    while (parent[v] != v) {
      parent[v] = parent[parent[v]];
      v = parent[v];
    }
    return v;
  }

  // The root is always the smaller index, so a root is its component's
  // lowest linear index.
  void unite(std::uint32_t a, std::uint32_t b) {
    a = find(a);
    b = find(b);
    if (a == b) return;
    if (a < b) parent[b] = a;
    else parent[a] = b;
  }
};

}  // namespace detail

/// For every foreground class independently, keeps the largest 26-connected
/// component (8-connected when depth is 1) and demotes the rest to class 0.
/// Ties go to the component containing the lowest linear voxel index.
inline LabelMap largest_connected_component(const LabelMap& raw, std::size_t K) {
  const Extent3 e = raw.extent();
  for (std::size_t i = 0; i < raw.size(); ++i) {
    if (raw[i] >= K) throw ShapeError("largest_connected_component", "label " + std::to_string(raw[i]) + " >= K");
  }
  detail::DisjointSets sets(raw.size());
  // Half of the 26-neighbourhood: offsets that precede the voxel in linear order.
  for (std::size_t x = 0; x < e.w; ++x) {
    for (std::size_t y = 0; y < e.h; ++y) {
      for (std::size_t z = 0; z < e.d; ++z) {
        const std::size_t v = e.index(x, y, z);
        if (raw[v] == 0) continue;
        for (int dx = -1; dx <= 0; ++dx) {
          for (int dy = -1; dy <= 1; ++dy) {
            for (int dz = -1; dz <= 1; ++dz) {
              if (dx == 0 && (dy > 0 || (dy == 0 && dz >= 0))) continue;
              const long nx = static_cast<long>(x) + dx, ny = static_cast<long>(y) + dy, nz = static_cast<long>(z) + dz;
              if (nx < 0 || ny < 0 || nz < 0 || ny >= static_cast<long>(e.h) || nz >= static_cast<long>(e.d)) continue;
              const std::size_t u = e.index(static_cast<std::size_t>(nx), static_cast<std::size_t>(ny), static_cast<std::size_t>(nz));
              if (raw[u] == raw[v]) sets.unite(static_cast<std::uint32_t>(u), static_cast<std::uint32_t>(v));
            }
          }
        }
      }
    }
  }
  std::vector<std::uint32_t> size(raw.size(), 0);
  for (std::size_t v = 0; v < raw.size(); ++v) {
    if (raw[v] != 0) ++size[sets.find(static_cast<std::uint32_t>(v))];
  }
  // Best root per class; scanning roots in increasing index keeps the lowest on ties.
  std::vector<std::uint32_t> best(K, 0), best_size(K, 0);
  for (std::size_t v = 0; v < raw.size(); ++v) {
    if (raw[v] == 0 || size[v] == 0) continue;
    if (size[v] > best_size[raw[v]]) {
      best_size[raw[v]] = size[v];
      best[raw[v]] = static_cast<std::uint32_t>(v);
    }
  }
  LabelMap out = raw;
  for (std::size_t v = 0; v < raw.size(); ++v) {
    if (raw[v] != 0 && sets.find(static_cast<std::uint32_t>(v)) != best[raw[v]]) out[v] = 0;
  }
  return out;
}

}  // namespace sdcl
