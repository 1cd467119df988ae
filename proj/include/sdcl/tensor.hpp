#pragma once

// Minimal N-dimensional float64 tensor with tape-based reverse-mode autodiff.
//
// Every op records a node holding its parents and a backward closure whenever
// an input requires a gradient (and no NoGradGuard is active). backward()
// orders the recorded graph topologically, runs it in reverse, then releases
// it. Leaf gradients must be reset before the next backward().

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <memory>
#include <numeric>
#include <span>
#include <string>
#include <unordered_set>
#include <vector>

#include "sdcl/detail/conv_kernels.hpp"
#include "sdcl/detail/vmath.hpp"
#include "sdcl/error.hpp"

namespace sdcl {

using Shape = std::vector<std::size_t>;

inline std::size_t numel(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

inline std::string to_string(const Shape& shape) {
  std::string s = "(";
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) s += ", ";
    s += std::to_string(shape[i]);
  }
  return s + ")";
}

namespace detail {

struct Node {
  Shape shape;
  std::vector<double> value;
  std::vector<double> grad;  // empty until something accumulates into it
  bool requires_grad = false;
  bool is_leaf = true;
  bool released = false;
  std::string op = "leaf";
  std::vector<std::shared_ptr<Node>> parents;
  std::function<void(Node&)> backward;

  std::vector<double>& grad_buffer() {
    if (grad.empty()) grad.assign(value.size(), 0.0);
    return grad;
  }
};

inline bool& no_grad_flag() {
  thread_local bool flag = false;
  return flag;
}

}  // namespace detail

/// Disables graph recording on this thread while alive.
class NoGradGuard {
 public:
  NoGradGuard() : previous_(detail::no_grad_flag()) { detail::no_grad_flag() = true; }
  ~NoGradGuard() { detail::no_grad_flag() = previous_; }
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

class Tensor {
 public:
  Tensor() = default;

  static Tensor from_values(Shape shape, std::vector<double> values, bool requires_grad = false) {
    if (values.size() != sdcl::numel(shape)) {
      throw ShapeError("tensor", "shape " + to_string(shape) + " needs " + std::to_string(sdcl::numel(shape)) +
                                     " values, got " + std::to_string(values.size()));
    }
    auto node = std::make_shared<detail::Node>();
    node->shape = std::move(shape);
    node->value = std::move(values);
    node->requires_grad = requires_grad;
    return Tensor(std::move(node));
  }

  static Tensor zeros(Shape shape, bool requires_grad = false) { return full(std::move(shape), 0.0, requires_grad); }

  static Tensor full(Shape shape, double v, bool requires_grad = false) {
    const std::size_t n = sdcl::numel(shape);
    return from_values(std::move(shape), std::vector<double>(n, v), requires_grad);
  }

  static Tensor scalar(double v) { return from_values({1}, {v}); }

  bool defined() const { return node_ != nullptr; }
  const Shape& shape() const { return node_->shape; }
  std::size_t dim(std::size_t axis) const { return node_->shape.at(axis); }
  std::size_t rank() const { return node_->shape.size(); }
  std::size_t numel() const { return node_->value.size(); }

  std::span<const double> values() const { return node_->value; }
  double operator[](std::size_t i) const { return node_->value[i]; }

  /// In-place access for parameter updates; only leaves may be mutated.
  std::span<double> mutable_values() {
    if (!node_->is_leaf) throw GraphError("mutable_values: only leaf tensors may be modified in place");
    return node_->value;
  }

  double item() const {
    if (numel() != 1) throw ShapeError("item", "tensor of shape " + to_string(shape()) + " is not a scalar");
    return node_->value[0];
  }

  bool requires_grad() const { return node_->requires_grad; }
  bool is_leaf() const { return node_->is_leaf; }
  /// True when this tensor was produced by a recorded op.
  bool has_history() const { return !node_->parents.empty(); }
  const std::string& op_name() const { return node_->op; }

  bool has_grad() const { return !node_->grad.empty(); }
  std::span<const double> grad() const { return node_->grad; }
  void reset_grad() { node_->grad.clear(); }

  /// Deep copy of the values as a fresh leaf.
  Tensor clone(bool requires_grad = false) const { return from_values(shape(), node_->value, requires_grad); }

  bool same_node(const Tensor& other) const { return node_ == other.node_; }

 private:
  explicit Tensor(std::shared_ptr<detail::Node> node) : node_(std::move(node)) {}

  std::shared_ptr<detail::Node> node_;

  friend struct TensorAccess;
};

/// Internal bridge used by op implementations.
struct TensorAccess {
  static detail::Node& node(const Tensor& t) { return *t.node_; }
  static const std::shared_ptr<detail::Node>& ptr(const Tensor& t) { return t.node_; }
  static Tensor wrap(std::shared_ptr<detail::Node> n) { return Tensor(std::move(n)); }
};

namespace detail {

inline void require_defined(const char* op, const Tensor& t) {
  if (!t.defined()) throw ShapeError(op, "undefined input tensor");
}

inline bool all_finite(std::span<const double> values) {
  // Exponent-field test on the raw bits; an integer OR-reduction vectorizes.
  constexpr std::uint64_t kExp = 0x7ff0000000000000ULL;
  std::uint64_t bad = 0;
  for (double v : values) bad |= static_cast<std::uint64_t>((std::bit_cast<std::uint64_t>(v) & kExp) == kExp);
  return bad == 0;
}

inline void require_finite(const char* op, const Tensor& t) {
  require_defined(op, t);
  if (!all_finite(t.values())) throw NumericError(std::string(op) + ": non-finite input value");
}

inline void require_same_shape(const char* op, const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape()) {
    std::string axes;
    const std::size_t r = std::max(a.rank(), b.rank());
    for (std::size_t i = 0; i < r; ++i) {
      const bool differ = i >= a.rank() || i >= b.rank() || a.shape()[i] != b.shape()[i];
      if (differ) axes += (axes.empty() ? "" : ",") + std::to_string(i);
    }
    throw ShapeError(op, "shapes " + to_string(a.shape()) + " and " + to_string(b.shape()) +
                             " differ on axes [" + axes + "]");
  }
}

/// Builds an op result; records parents and the backward closure only when
/// some input requires a gradient and recording is enabled.
inline Tensor make_result(const char* op, Shape shape, std::vector<double> value,
                          std::vector<Tensor> inputs, std::function<void(Node&)> backward) {
  auto node = std::make_shared<Node>();
  node->shape = std::move(shape);
  node->value = std::move(value);
  node->op = op;
  const bool record = !no_grad_flag() && std::any_of(inputs.begin(), inputs.end(),
                                                     [](const Tensor& t) { return t.requires_grad(); });
  if (record) {
    node->requires_grad = true;
    node->is_leaf = false;
    for (const auto& t : inputs) node->parents.push_back(TensorAccess::ptr(t));
    node->backward = std::move(backward);
  }
  return TensorAccess::wrap(std::move(node));
}

inline bool wants_grad(const Node& parent) { return parent.requires_grad; }

/// Splits a (B, C, ...) shape into batch, channels and trailing spatial size.
struct ChannelLayout {
  std::size_t batch, channels, spatial;
};

inline ChannelLayout channel_layout(const char* op, const Shape& s) {
  if (s.size() < 2) throw ShapeError(op, "expected at least (batch, channel) axes, got " + to_string(s));
  std::size_t spatial = 1;
  for (std::size_t i = 2; i < s.size(); ++i) spatial *= s[i];
  return {s[0], s[1], spatial};
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Elementwise ops

inline Tensor add(const Tensor& a, const Tensor& b) {
  detail::require_finite("add", a);
  detail::require_finite("add", b);
  detail::require_same_shape("add", a, b);
  std::vector<double> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] + b[i];
  return detail::make_result("add", a.shape(), std::move(out), {a, b}, [](detail::Node& self) {
    for (auto& p : self.parents) {
      if (!detail::wants_grad(*p)) continue;
      auto& g = p->grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
    }
  });
}

inline Tensor sub(const Tensor& a, const Tensor& b) {
  detail::require_finite("sub", a);
  detail::require_finite("sub", b);
  detail::require_same_shape("sub", a, b);
  std::vector<double> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] - b[i];
  return detail::make_result("sub", a.shape(), std::move(out), {a, b}, [](detail::Node& self) {
    if (detail::wants_grad(*self.parents[0])) {
      auto& g = self.parents[0]->grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
    }
    if (detail::wants_grad(*self.parents[1])) {
      auto& g = self.parents[1]->grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] -= self.grad[i];
    }
  });
}

/// Elementwise product. Either side may be a constant (e.g. a binary mask).
inline Tensor mul(const Tensor& a, const Tensor& b) {
  detail::require_finite("mul", a);
  detail::require_finite("mul", b);
  detail::require_same_shape("mul", a, b);
  std::vector<double> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] * b[i];
  return detail::make_result("mul", a.shape(), std::move(out), {a, b}, [](detail::Node& self) {
    auto& pa = *self.parents[0];
    auto& pb = *self.parents[1];
    if (detail::wants_grad(pa)) {
      auto& g = pa.grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * pb.value[i];
    }
    if (detail::wants_grad(pb)) {
      auto& g = pb.grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * pa.value[i];
    }
  });
}

inline Tensor scale(const Tensor& x, double c) {
  detail::require_finite("scale", x);
  std::vector<double> out(x.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = c * x[i];
  return detail::make_result("scale", x.shape(), std::move(out), {x}, [c](detail::Node& self) {
    auto& g = self.parents[0]->grad_buffer();
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += c * self.grad[i];
  });
}

inline Tensor negate(const Tensor& x) {
  detail::require_finite("negate", x);
  std::vector<double> out(x.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = -x[i];
  return detail::make_result("negate", x.shape(), std::move(out), {x}, [](detail::Node& self) {
    auto& g = self.parents[0]->grad_buffer();
    for (std::size_t i = 0; i < g.size(); ++i) g[i] -= self.grad[i];
  });
}

inline Tensor add_scalar(const Tensor& x, double c) {
  detail::require_finite("add_scalar", x);
  std::vector<double> out(x.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = x[i] + c;
  return detail::make_result("add_scalar", x.shape(), std::move(out), {x}, [](detail::Node& self) {
    auto& g = self.parents[0]->grad_buffer();
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
  });
}

inline Tensor square(const Tensor& x) {
  detail::require_finite("square", x);
  std::vector<double> out(x.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = x[i] * x[i];
  return detail::make_result("square", x.shape(), std::move(out), {x}, [](detail::Node& self) {
    auto& p = *self.parents[0];
    auto& g = p.grad_buffer();
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += 2.0 * p.value[i] * self.grad[i];
  });
}

inline Tensor relu(const Tensor& x) {
  detail::require_finite("relu", x);
  std::vector<double> out(x.numel());
  const double* in = x.values().data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = in[i] > 0.0 ? in[i] : 0.0;
  return detail::make_result("relu", x.shape(), std::move(out), {x}, [](detail::Node& self) {
    auto& p = *self.parents[0];
    auto& g = p.grad_buffer();
    const double* v = p.value.data();
    const double* up = self.grad.data();
    double* gp = g.data();
    for (std::size_t i = 0; i < g.size(); ++i) gp[i] += v[i] > 0.0 ? up[i] : 0.0;
  });
}

/// log(max(x, floor)). Entries at or below `floor` get zero gradient. With
/// floor == 0 every entry must be strictly positive.
inline Tensor log(const Tensor& x, double floor = 0.0) {
  detail::require_finite("log", x);
  std::vector<double> out(x.numel());
  for (std::size_t i = 0; i < out.size(); ++i) {
    out[i] = std::max(x[i], floor);
    if (!(out[i] > 0.0)) throw NumericError("log: non-positive input " + std::to_string(x[i]));
  }
  detail::log_inplace(out.data(), out.size());
  return detail::make_result("log", x.shape(), std::move(out), {x}, [floor](detail::Node& self) {
    auto& p = *self.parents[0];
    auto& g = p.grad_buffer();
    for (std::size_t i = 0; i < g.size(); ++i) {
      if (p.value[i] > floor) g[i] += self.grad[i] / p.value[i];
    }
  });
}

inline Tensor reciprocal(const Tensor& x) {
  detail::require_finite("reciprocal", x);
  std::vector<double> out(x.numel());
  for (std::size_t i = 0; i < out.size(); ++i) {
    if (x[i] == 0.0) throw NumericError("reciprocal: zero input");
    out[i] = 1.0 / x[i];
  }
  return detail::make_result("reciprocal", x.shape(), std::move(out), {x}, [](detail::Node& self) {
    auto& g = self.parents[0]->grad_buffer();
    for (std::size_t i = 0; i < g.size(); ++i) g[i] -= self.grad[i] * self.value[i] * self.value[i];
  });
}

// ---------------------------------------------------------------------------
// Reductions

inline Tensor sum(const Tensor& x) {
  detail::require_finite("sum", x);
  double s = 0.0;
  for (double v : x.values()) s += v;
  return detail::make_result("sum", {1}, {s}, {x}, [](detail::Node& self) {
    auto& g = self.parents[0]->grad_buffer();
    const double up = self.grad[0];
    for (auto& v : g) v += up;
  });
}

inline Tensor mean(const Tensor& x) {
  detail::require_finite("mean", x);
  if (x.numel() == 0) throw ShapeError("mean", "empty tensor");
  double s = 0.0;
  for (double v : x.values()) s += v;
  const double n = static_cast<double>(x.numel());
  return detail::make_result("mean", {1}, {s / n}, {x}, [n](detail::Node& self) {
    auto& g = self.parents[0]->grad_buffer();
    const double up = self.grad[0] / n;
    for (auto& v : g) v += up;
  });
}

/// Sums over the channel axis: (B, C, ...) -> (B, 1, ...).
inline Tensor sum_channels(const Tensor& x) {
  detail::require_finite("sum_channels", x);
  const auto [B, C, S] = detail::channel_layout("sum_channels", x.shape());
  Shape shape = x.shape();
  shape[1] = 1;
  std::vector<double> out(B * S, 0.0);
  for (std::size_t b = 0; b < B; ++b) {
    for (std::size_t c = 0; c < C; ++c) {
      const double* src = x.values().data() + (b * C + c) * S;
      double* dst = out.data() + b * S;
      for (std::size_t s = 0; s < S; ++s) dst[s] += src[s];
    }
  }
  return detail::make_result("sum_channels", shape, std::move(out), {x}, [B, C, S](detail::Node& self) {
    auto& g = self.parents[0]->grad_buffer();
    for (std::size_t b = 0; b < B; ++b) {
      for (std::size_t c = 0; c < C; ++c) {
        for (std::size_t s = 0; s < S; ++s) g[(b * C + c) * S + s] += self.grad[b * S + s];
      }
    }
  });
}

/// Per-channel totals over batch and spatial axes: (B, C, ...) -> (C).
inline Tensor channel_totals(const Tensor& x) {
  detail::require_finite("channel_totals", x);
  const auto [B, C, S] = detail::channel_layout("channel_totals", x.shape());
  std::vector<double> out(C, 0.0);
  for (std::size_t b = 0; b < B; ++b) {
    for (std::size_t c = 0; c < C; ++c) {
      const double* src = x.values().data() + (b * C + c) * S;
      double s = 0.0;
      for (std::size_t i = 0; i < S; ++i) s += src[i];
      out[c] += s;
    }
  }
  return detail::make_result("channel_totals", {C}, std::move(out), {x}, [B, C, S](detail::Node& self) {
    auto& g = self.parents[0]->grad_buffer();
    for (std::size_t b = 0; b < B; ++b) {
      for (std::size_t c = 0; c < C; ++c) {
        const double up = self.grad[c];
        for (std::size_t s = 0; s < S; ++s) g[(b * C + c) * S + s] += up;
      }
    }
  });
}

/// Samples [begin, begin + count) along the batch axis.
inline Tensor slice_batch(const Tensor& x, std::size_t begin, std::size_t count) {
  detail::require_finite("slice_batch", x);
  if (x.rank() < 1 || count == 0 || begin + count > x.dim(0)) {
    throw ShapeError("slice_batch", "range [" + std::to_string(begin) + ", " + std::to_string(begin + count) +
                                        ") outside batch axis 0 of " + to_string(x.shape()));
  }
  const std::size_t per = x.numel() / x.dim(0);
  Shape shape = x.shape();
  shape[0] = count;
  std::vector<double> out(x.values().begin() + static_cast<std::ptrdiff_t>(begin * per),
                          x.values().begin() + static_cast<std::ptrdiff_t>((begin + count) * per));
  return detail::make_result("slice_batch", shape, std::move(out), {x}, [begin, per](detail::Node& self) {
    auto& g = self.parents[0]->grad_buffer();
    double* dst = g.data() + begin * per;
    for (std::size_t i = 0; i < self.grad.size(); ++i) dst[i] += self.grad[i];
  });
}

// ---------------------------------------------------------------------------
// Network ops

/// Softmax over the channel axis of a (B, C, ...) tensor.
inline Tensor softmax_channels(const Tensor& x) {
  detail::require_finite("softmax_channels", x);
  const auto [B, C, S] = detail::channel_layout("softmax_channels", x.shape());
  std::vector<double> out(x.numel());
  std::vector<double> mx(S), z(S);
  for (std::size_t b = 0; b < B; ++b) {
    const double* in = x.values().data() + b * C * S;
    double* o = out.data() + b * C * S;
    std::copy_n(in, S, mx.data());
    for (std::size_t c = 1; c < C; ++c) {
      for (std::size_t s = 0; s < S; ++s) mx[s] = std::max(mx[s], in[c * S + s]);
    }
    std::fill(z.begin(), z.end(), 0.0);
    for (std::size_t c = 0; c < C; ++c) {
      for (std::size_t s = 0; s < S; ++s) o[c * S + s] = in[c * S + s] - mx[s];
    }
    detail::exp_inplace(o, C * S);
    for (std::size_t c = 0; c < C; ++c) {
      for (std::size_t s = 0; s < S; ++s) z[s] += o[c * S + s];
    }
    for (std::size_t s = 0; s < S; ++s) z[s] = 1.0 / z[s];
    for (std::size_t c = 0; c < C; ++c) {
      for (std::size_t s = 0; s < S; ++s) o[c * S + s] *= z[s];
    }
  }
  return detail::make_result("softmax_channels", x.shape(), std::move(out), {x}, [B, C, S](detail::Node& self) {
    auto& g = self.parents[0]->grad_buffer();
    std::vector<double> dot(S);
    for (std::size_t b = 0; b < B; ++b) {
      const double* y = self.value.data() + b * C * S;
      const double* gy = self.grad.data() + b * C * S;
      double* gx = g.data() + b * C * S;
      std::fill(dot.begin(), dot.end(), 0.0);
      for (std::size_t c = 0; c < C; ++c) {
        for (std::size_t s = 0; s < S; ++s) dot[s] += y[c * S + s] * gy[c * S + s];
      }
      for (std::size_t c = 0; c < C; ++c) {
        for (std::size_t s = 0; s < S; ++s) gx[c * S + s] += y[c * S + s] * (gy[c * S + s] - dot[s]);
      }
    }
  });
}

/// Adds bias[c] to every voxel of channel c in a (B, C, ...) tensor.
inline Tensor add_channel_bias(const Tensor& x, const Tensor& bias) {
  detail::require_finite("add_channel_bias", x);
  detail::require_finite("add_channel_bias", bias);
  const auto [B, C, S] = detail::channel_layout("add_channel_bias", x.shape());
  if (bias.rank() != 1 || bias.dim(0) != C) {
    throw ShapeError("add_channel_bias", "bias shape " + to_string(bias.shape()) + " does not match channel axis 1 of " +
                                             to_string(x.shape()));
  }
  std::vector<double> out(x.values().begin(), x.values().end());
  for (std::size_t b = 0; b < B; ++b) {
    for (std::size_t c = 0; c < C; ++c) {
      double* dst = out.data() + (b * C + c) * S;
      for (std::size_t s = 0; s < S; ++s) dst[s] += bias[c];
    }
  }
  return detail::make_result("add_channel_bias", x.shape(), std::move(out), {x, bias}, [B, C, S](detail::Node& self) {
    auto& px = *self.parents[0];
    auto& pb = *self.parents[1];
    if (detail::wants_grad(px)) {
      auto& g = px.grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
    }
    if (detail::wants_grad(pb)) {
      auto& g = pb.grad_buffer();
      for (std::size_t b = 0; b < B; ++b) {
        for (std::size_t c = 0; c < C; ++c) {
          const double* src = self.grad.data() + (b * C + c) * S;
          double s = 0.0;
          for (std::size_t i = 0; i < S; ++i) s += src[i];
          g[c] += s;
        }
      }
    }
  });
}

/// Same-padded, stride-1 convolution. x is (B, Ci, W, H, D); weight is
/// (Co, Ci, kw, kh, kd) with odd kernel extents. An optional per-channel
/// bias of shape (Co) is added to the output.
namespace detail {

inline Tensor conv_op(const char* op, const Tensor& x, const Tensor& weight, const Tensor& bias, bool with_relu) {
  require_finite(op, x);
  require_finite(op, weight);
  if (x.rank() != 5) throw ShapeError(op, "input must be (B, C, W, H, D), got " + to_string(x.shape()));
  if (weight.rank() != 5) {
    throw ShapeError(op, "weight must be (Co, Ci, kw, kh, kd), got " + to_string(weight.shape()));
  }
  if (weight.dim(1) != x.dim(1)) {
    throw ShapeError(op, "input channel axis 1 has " + std::to_string(x.dim(1)) + " but weight axis 1 has " +
                                   std::to_string(weight.dim(1)));
  }
  for (std::size_t axis = 2; axis < 5; ++axis) {
    if (weight.dim(axis) % 2 == 0) {
      throw ShapeError(op, "kernel extent on weight axis " + std::to_string(axis) + " must be odd");
    }
  }
  const bool has_bias = bias.defined();
  if (has_bias) {
    require_finite(op, bias);
    if (bias.rank() != 1 || bias.dim(0) != weight.dim(0)) {
      throw ShapeError(op, "bias shape " + to_string(bias.shape()) + " does not match weight axis 0 (" +
                                     std::to_string(weight.dim(0)) + ")");
    }
  }
  ConvGeometry g;
  g.batch = x.dim(0);
  g.in_channels = x.dim(1);
  g.out_channels = weight.dim(0);
  g.w = x.dim(2);
  g.h = x.dim(3);
  g.d = x.dim(4);
  g.kw = weight.dim(2);
  g.kh = weight.dim(3);
  g.kd = weight.dim(4);
  std::vector<double> out(g.batch * g.out_channels * g.plane());
  conv_forward(g, x.values().data(), weight.values().data(), out.data(),
               Epilogue{has_bias ? bias.values().data() : nullptr, with_relu});
  std::vector<Tensor> inputs{x, weight};
  if (has_bias) inputs.push_back(bias);
  Shape shape{g.batch, g.out_channels, g.w, g.h, g.d};
  return make_result(op, shape, std::move(out), std::move(inputs), [g, with_relu](Node& self) {
    auto& px = *self.parents[0];
    auto& pw = *self.parents[1];
    const double* go = self.grad.data();
    if (with_relu) {
      thread_local std::vector<double> masked;
      masked.resize(self.grad.size());
      const double* v = self.value.data();
      for (std::size_t i = 0; i < masked.size(); ++i) masked[i] = v[i] > 0.0 ? go[i] : 0.0;
      go = masked.data();
    }
    if (self.parents.size() > 2 && wants_grad(*self.parents[2])) {
      auto& gb = self.parents[2]->grad_buffer();
      const std::size_t S = g.plane();
      for (std::size_t b = 0; b < g.batch; ++b) {
        for (std::size_t c = 0; c < g.out_channels; ++c) {
          const double* src = go + (b * g.out_channels + c) * S;
          double s = 0.0;
          for (std::size_t i = 0; i < S; ++i) s += src[i];
          gb[c] += s;
        }
      }
    }
    if (wants_grad(pw)) conv_backward_weight(g, px.value.data(), go, pw.grad_buffer().data());
    if (wants_grad(px)) {
      if (px.grad.empty()) {
        px.grad.resize(px.value.size());
        conv_backward_input(g, go, pw.value.data(), px.grad.data());
      } else {
        thread_local std::vector<double> gi;
        gi.resize(px.value.size());
        conv_backward_input(g, go, pw.value.data(), gi.data());
        for (std::size_t i = 0; i < gi.size(); ++i) px.grad[i] += gi[i];
      }
    }
  });
}

}  // namespace detail

/// Same-padded 3D convolution with optional per-output-channel bias.
inline Tensor conv3d(const Tensor& x, const Tensor& weight, const Tensor& bias = Tensor()) {
  return detail::conv_op("conv3d", x, weight, bias, false);
}

/// relu(conv3d(x, weight, bias)) as a single node.
inline Tensor conv3d_relu(const Tensor& x, const Tensor& weight, const Tensor& bias = Tensor()) {
  return detail::conv_op("conv3d_relu", x, weight, bias, true);
}

// ---------------------------------------------------------------------------
// Uniform dispatch over op kinds, used by the gradient checker.

enum class OpKind {
  kConv,
  kConvRelu,
  kChannelBias,
  kRelu,
  kAdd,
  kSub,
  kMul,
  kSoftmax,
  kSum,
  kMean,
  kSumChannels,
  kChannelTotals,
  kLog,
  kSquare,
  kNegate,
  kScale,
  kAddScalar,
  kReciprocal,
  kSliceBatch,
};

inline constexpr OpKind kAllOpKinds[] = {
    OpKind::kConv,     OpKind::kConvRelu,    OpKind::kChannelBias, OpKind::kRelu,          OpKind::kAdd,    OpKind::kSub,
    OpKind::kMul,      OpKind::kSoftmax,     OpKind::kSum,           OpKind::kMean,   OpKind::kSumChannels,
    OpKind::kChannelTotals, OpKind::kLog,    OpKind::kSquare,        OpKind::kNegate, OpKind::kScale,
    OpKind::kAddScalar, OpKind::kReciprocal, OpKind::kSliceBatch,
};

inline const char* op_kind_name(OpKind kind) {
  switch (kind) {
    case OpKind::kConv: return "conv3d";
    case OpKind::kConvRelu: return "conv3d_relu";
    case OpKind::kChannelBias: return "add_channel_bias";
    case OpKind::kRelu: return "relu";
    case OpKind::kAdd: return "add";
    case OpKind::kSub: return "sub";
    case OpKind::kMul: return "mul";
    case OpKind::kSoftmax: return "softmax_channels";
    case OpKind::kSum: return "sum";
    case OpKind::kMean: return "mean";
    case OpKind::kSumChannels: return "sum_channels";
    case OpKind::kChannelTotals: return "channel_totals";
    case OpKind::kLog: return "log";
    case OpKind::kSquare: return "square";
    case OpKind::kNegate: return "negate";
    case OpKind::kScale: return "scale";
    case OpKind::kAddScalar: return "add_scalar";
    case OpKind::kReciprocal: return "reciprocal";
    case OpKind::kSliceBatch: return "slice_batch";
  }
  return "unknown";
}

struct OpAttrs {
  double scalar = 1.0;     // scale factor or added constant
  double log_floor = 0.0;  // clamp for log
  std::size_t begin = 0;   // slice_batch range
  std::size_t count = 1;
};

inline std::size_t op_arity(OpKind kind) {
  switch (kind) {
    case OpKind::kConv:
    case OpKind::kConvRelu:
    case OpKind::kChannelBias:
    case OpKind::kAdd:
    case OpKind::kSub:
    case OpKind::kMul: return 2;
    default: return 1;
  }
}

inline Tensor apply(OpKind kind, std::span<const Tensor> inputs, const OpAttrs& attrs = {}) {
  if (kind == OpKind::kConv && (inputs.size() == 2 || inputs.size() == 3)) {
    return conv3d(inputs[0], inputs[1], inputs.size() == 3 ? inputs[2] : Tensor());
  }
  if (kind == OpKind::kConvRelu && (inputs.size() == 2 || inputs.size() == 3)) {
    return conv3d_relu(inputs[0], inputs[1], inputs.size() == 3 ? inputs[2] : Tensor());
  }
  if (inputs.size() != op_arity(kind)) {
    throw ShapeError(op_kind_name(kind), "expects " + std::to_string(op_arity(kind)) + " inputs, got " +
                                             std::to_string(inputs.size()));
  }
  switch (kind) {
    case OpKind::kConv:
    case OpKind::kConvRelu: break;
    case OpKind::kChannelBias: return add_channel_bias(inputs[0], inputs[1]);
    case OpKind::kRelu: return relu(inputs[0]);
    case OpKind::kAdd: return add(inputs[0], inputs[1]);
    case OpKind::kSub: return sub(inputs[0], inputs[1]);
    case OpKind::kMul: return mul(inputs[0], inputs[1]);
    case OpKind::kSoftmax: return softmax_channels(inputs[0]);
    case OpKind::kSum: return sum(inputs[0]);
    case OpKind::kMean: return mean(inputs[0]);
    case OpKind::kSumChannels: return sum_channels(inputs[0]);
    case OpKind::kChannelTotals: return channel_totals(inputs[0]);
    case OpKind::kLog: return log(inputs[0], attrs.log_floor);
    case OpKind::kSquare: return square(inputs[0]);
    case OpKind::kNegate: return negate(inputs[0]);
    case OpKind::kScale: return scale(inputs[0], attrs.scalar);
    case OpKind::kAddScalar: return add_scalar(inputs[0], attrs.scalar);
    case OpKind::kReciprocal: return reciprocal(inputs[0]);
    case OpKind::kSliceBatch: return slice_batch(inputs[0], attrs.begin, attrs.count);
  }
  throw ShapeError("apply", "unknown op kind");
}

// ---------------------------------------------------------------------------
// Reverse pass

/// Populates .grad on every requires_grad leaf reachable from `loss`, then
/// releases the recorded graph. Throws GraphError for a non-scalar loss, a
/// graph that was already consumed, or a leaf whose gradient was not reset.
inline void backward(const Tensor& loss) {
  if (!loss.defined()) throw GraphError("backward: undefined loss");
  if (loss.numel() != 1) throw GraphError("backward: loss must be a scalar, got shape " + to_string(loss.shape()));
  auto& root = TensorAccess::node(loss);
  if (root.released) throw GraphError("backward: graph already consumed; rebuild the loss after reset");
  if (!root.requires_grad) throw GraphError("backward: loss does not depend on any requires_grad tensor");
  if (root.is_leaf) throw GraphError("backward: loss is a leaf");

  // Iterative post-order DFS gives a topological order.
  std::vector<detail::Node*> order;
  std::unordered_set<detail::Node*> seen;
  std::vector<std::pair<detail::Node*, std::size_t>> stack{{&root, 0}};
  seen.insert(&root);
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->parents.size()) {
      detail::Node* p = node->parents[next++].get();
      if (p->requires_grad && !seen.count(p)) {
        seen.insert(p);
        stack.emplace_back(p, 0);
      }
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }
  for (detail::Node* n : order) {
    if (n->is_leaf && !n->grad.empty()) {
      throw GraphError("backward: leaf gradient not reset since the previous backward");
    }
  }

  root.grad.assign(1, 1.0);
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    detail::Node* n = *it;
    if (n->is_leaf || n->grad.empty()) continue;
    n->backward(*n);
  }
  for (detail::Node* n : order) {
    if (n->is_leaf) continue;
    n->released = true;
    n->grad.clear();
    n->grad.shrink_to_fit();
    n->parents.clear();
    n->backward = nullptr;
  }
}

}  // namespace sdcl
