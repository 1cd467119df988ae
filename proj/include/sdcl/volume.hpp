#pragma once

// Dense single-channel voxel grids and their conversions to/from tensors.
// A 2D slice is stored as a volume with depth 1.

#include <cstddef>
#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "sdcl/error.hpp"
#include "sdcl/tensor.hpp"

namespace sdcl {

struct Extent3 {
  std::size_t w = 0, h = 0, d = 0;

  std::size_t size() const { return w * h * d; }
  std::size_t index(std::size_t x, std::size_t y, std::size_t z) const { return (x * h + y) * d + z; }
  bool operator==(const Extent3&) const = default;
  std::string str() const {
    return "(" + std::to_string(w) + ", " + std::to_string(h) + ", " + std::to_string(d) + ")";
  }
};

template <class T, class Tag>
class VoxelGrid {
 public:
  using value_type = T;

  VoxelGrid() = default;
  explicit VoxelGrid(Extent3 extent, T fill = T{}) : extent_(extent), data_(extent.size(), fill) {}
  VoxelGrid(Extent3 extent, std::vector<T> data) : extent_(extent), data_(std::move(data)) {
    if (data_.size() != extent_.size()) {
      throw ShapeError("grid", "extent " + extent_.str() + " needs " + std::to_string(extent_.size()) + " voxels, got " +
                                   std::to_string(data_.size()));
    }
  }

  const Extent3& extent() const { return extent_; }
  std::size_t size() const { return data_.size(); }

  T& operator[](std::size_t i) { return data_[i]; }
  const T& operator[](std::size_t i) const { return data_[i]; }
  T& at(std::size_t x, std::size_t y, std::size_t z) { return data_[extent_.index(x, y, z)]; }
  const T& at(std::size_t x, std::size_t y, std::size_t z) const { return data_[extent_.index(x, y, z)]; }

  std::vector<T>& data() { return data_; }
  const std::vector<T>& data() const { return data_; }

  bool operator==(const VoxelGrid&) const = default;

 private:
  Extent3 extent_;
  std::vector<T> data_;
};

struct ImageTag {};
struct LabelTag {};
struct MaskTag {};

using Image = VoxelGrid<double, ImageTag>;
using LabelMap = VoxelGrid<std::uint8_t, LabelTag>;
using BinaryMask = VoxelGrid<std::uint8_t, MaskTag>;

template <class A, class B>
void require_same_extent(const char* op, const A& a, const B& b) {
  if (!(a.extent() == b.extent())) {
    std::string axes;
    const char* names[] = {"W", "H", "D"};
    const std::size_t ea[] = {a.extent().w, a.extent().h, a.extent().d};
    const std::size_t eb[] = {b.extent().w, b.extent().h, b.extent().d};
    for (int i = 0; i < 3; ++i) {
      if (ea[i] != eb[i]) axes += std::string(axes.empty() ? "" : ",") + names[i];
    }
    throw ShapeError(op, "extents " + a.extent().str() + " and " + b.extent().str() + " differ on " + axes);
  }
}

inline std::size_t count_ones(const BinaryMask& m) {
  std::size_t n = 0;
  for (auto v : m.data()) n += v;
  return n;
}

/// Stacks single-channel images into a (B, 1, W, H, D) constant tensor.
inline Tensor stack_images(const std::vector<const Image*>& images) {
  if (images.empty()) throw ShapeError("stack_images", "empty batch");
  const Extent3 e = images.front()->extent();
  std::vector<double> values;
  values.reserve(images.size() * e.size());
  for (const Image* img : images) {
    require_same_extent("stack_images", *images.front(), *img);
    values.insert(values.end(), img->data().begin(), img->data().end());
  }
  return Tensor::from_values({images.size(), 1, e.w, e.h, e.d}, std::move(values));
}

inline Tensor stack_images(std::initializer_list<const Image*> images) {
  return stack_images(std::vector<const Image*>(images));
}

inline Extent3 spatial_extent(const Tensor& t) {
  if (t.rank() != 5) throw ShapeError("spatial_extent", "expected (B, C, W, H, D), got " + to_string(t.shape()));
  return {t.dim(2), t.dim(3), t.dim(4)};
}

/// Per-voxel argmax over channels of sample `b`; ties go to the lower class.
inline LabelMap argmax_channels(const Tensor& probs, std::size_t b) {
  const Extent3 e = spatial_extent(probs);
  const std::size_t C = probs.dim(1), S = e.size();
  if (b >= probs.dim(0)) throw ShapeError("argmax_channels", "batch index out of range");
  LabelMap out(e);
  const double* p = probs.values().data() + b * C * S;
  for (std::size_t s = 0; s < S; ++s) {
    std::size_t best = 0;
    double bv = p[s];
    for (std::size_t c = 1; c < C; ++c) {
      if (p[c * S + s] > bv) {
        bv = p[c * S + s];
        best = c;
      }
    }
    out[s] = static_cast<std::uint8_t>(best);
  }
  return out;
}

/// One-hot encodes labels of a batch into a (B, K, W, H, D) constant tensor.
inline Tensor one_hot(const std::vector<const LabelMap*>& labels, std::size_t K) {
  if (labels.empty()) throw ShapeError("one_hot", "empty batch");
  const Extent3 e = labels.front()->extent();
  const std::size_t S = e.size();
  std::vector<double> values(labels.size() * K * S, 0.0);
  for (std::size_t b = 0; b < labels.size(); ++b) {
    require_same_extent("one_hot", *labels.front(), *labels[b]);
    for (std::size_t s = 0; s < S; ++s) {
      const std::size_t c = (*labels[b])[s];
      if (c >= K) throw ShapeError("one_hot", "label " + std::to_string(c) + " is not below K=" + std::to_string(K));
      values[(b * K + c) * S + s] = 1.0;
    }
  }
  return Tensor::from_values({labels.size(), K, e.w, e.h, e.d}, std::move(values));
}

/// Broadcasts per-sample masks (0/1 or weights) over K channels: (B, K, W, H, D).
inline Tensor expand_weights(const std::vector<std::vector<double>>& per_sample, Extent3 e, std::size_t K) {
  const std::size_t S = e.size();
  std::vector<double> values(per_sample.size() * K * S);
  for (std::size_t b = 0; b < per_sample.size(); ++b) {
    if (per_sample[b].size() != S) throw ShapeError("expand_weights", "weight map size mismatch");
    for (std::size_t c = 0; c < K; ++c) {
      std::copy(per_sample[b].begin(), per_sample[b].end(), values.begin() + static_cast<std::ptrdiff_t>((b * K + c) * S));
    }
  }
  return Tensor::from_values({per_sample.size(), K, e.w, e.h, e.d}, std::move(values));
}

}  // namespace sdcl
