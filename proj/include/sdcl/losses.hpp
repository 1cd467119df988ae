#pragma once

// Training objectives. Each loss is a single autodiff node over the
// probability tensor with a closed-form backward pass.
//
// Regions: for direction kIn the mask's ones carry weight 1 and its zeros
// weight alpha; kOut swaps them.

#include <cmath>
#include <cstddef>
#include <string>
#include <vector>

#include "sdcl/error.hpp"
#include "sdcl/tensor.hpp"
#include "sdcl/volume.hpp"

namespace sdcl {

enum class Direction { kIn, kOut };

inline constexpr double kProbFloor = 1e-12;
inline constexpr double kDiceSmooth = 1e-5;
inline constexpr double kGateEps = 1e-8;

struct LossWeights {
  double alpha = 0.5;
  double gamma = 0.3;
  double mu = 0.1;
};

namespace detail {

struct ProbLayout {
  std::size_t batch, classes, voxels;
};

inline ProbLayout check_probs(const char* op, const Tensor& probs, std::size_t n_labels, const Extent3& e) {
  require_finite(op, probs);
  if (probs.rank() != 5) throw ShapeError(op, "probs must be (B, K, W, H, D), got " + to_string(probs.shape()));
  const Extent3 pe = spatial_extent(probs);
  if (!(pe == e)) throw ShapeError(op, "probs spatial extent " + pe.str() + " differs from mask " + e.str());
  if (n_labels != probs.dim(0)) {
    throw ShapeError(op, "batch axis 0 has " + std::to_string(probs.dim(0)) + " samples but " +
                             std::to_string(n_labels) + " maps were given");
  }
  return {probs.dim(0), probs.dim(1), e.size()};
}

/// Region weight per voxel: 1 for the primary region, alpha for the other.
inline std::vector<double> region_weights(const BinaryMask& mask, double alpha, Direction dir) {
  std::vector<double> w(mask.size());
  const std::uint8_t primary = dir == Direction::kIn ? 1 : 0;
  for (std::size_t v = 0; v < mask.size(); ++v) w[v] = mask[v] == primary ? 1.0 : alpha;
  return w;
}

/// 0.5 * mean CE + 0.5 * soft Dice over the voxels where `in_region(v)`
/// holds, for every sample. Adds weight * d/dp into `grad` when non-null.
template <class InRegion>
double region_loss(const double* p, const std::vector<const LabelMap*>& labels, ProbLayout L, InRegion in_region,
                   double weight, double* grad) {
  const std::size_t K = L.classes, S = L.voxels;
  std::size_t n = 0;
  double ce = 0.0;
  std::vector<double> inter(K, 0.0), psq(K, 0.0), gsq(K, 0.0);
  for (std::size_t b = 0; b < L.batch; ++b) {
    const double* pb = p + b * K * S;
    const LabelMap& y = *labels[b];
    for (std::size_t v = 0; v < S; ++v) {
      if (!in_region(v)) continue;
      ++n;
      const std::size_t t = y[v];
      ce -= std::log(std::max(pb[t * S + v], kProbFloor));
      inter[t] += pb[t * S + v];
      gsq[t] += 1.0;
      for (std::size_t c = 0; c < K; ++c) psq[c] += pb[c * S + v] * pb[c * S + v];
    }
  }
  if (n == 0) return 0.0;
  const double nn = static_cast<double>(n);
  double dice = 0.0;
  std::vector<double> num(K), den(K);
  for (std::size_t c = 0; c < K; ++c) {
    num[c] = 2.0 * inter[c] + kDiceSmooth;
    den[c] = psq[c] + gsq[c] + kDiceSmooth;
    dice += 1.0 - num[c] / den[c];
  }
  dice /= static_cast<double>(K);
  if (grad) {
    const double kk = static_cast<double>(K);
    for (std::size_t b = 0; b < L.batch; ++b) {
      const double* pb = p + b * K * S;
      double* gb = grad + b * K * S;
      const LabelMap& y = *labels[b];
      for (std::size_t v = 0; v < S; ++v) {
        if (!in_region(v)) continue;
        const std::size_t t = y[v];
        for (std::size_t c = 0; c < K; ++c) {
          const double pc = pb[c * S + v];
          const double g = c == t ? 1.0 : 0.0;
          // d dice_c / d p = -(2 g den - num 2 p) / den^2, averaged over classes.
          double d = -0.5 * (2.0 * g * den[c] - num[c] * 2.0 * pc) / (den[c] * den[c] * kk);
          if (c == t && pc > kProbFloor) d -= 0.5 / (nn * pc);
          gb[c * S + v] += weight * d;
        }
      }
    }
  }
  return 0.5 * (ce / nn) + 0.5 * dice;
}

}  // namespace detail

/// Weighted two-region segmentation loss for one mixing direction. `labels`
/// holds one mixed label per sample; the mask is shared by all samples.
inline Tensor bcp_seg_loss(const Tensor& probs, const std::vector<const LabelMap*>& labels, const BinaryMask& mask,
                           double alpha, Direction dir) {
  const auto L = detail::check_probs("bcp_seg_loss", probs, labels.size(), mask.extent());
  for (const LabelMap* y : labels) {
    require_same_extent("bcp_seg_loss", *y, mask);
    for (auto c : y->data()) {
      if (c >= L.classes) throw ShapeError("bcp_seg_loss", "label value " + std::to_string(c) + " >= K");
    }
  }
  const std::uint8_t primary = dir == Direction::kIn ? 1 : 0;
  const auto in_primary = [&](std::size_t v) { return mask[v] == primary; };
  const auto in_other = [&](std::size_t v) { return mask[v] != primary; };
  const double* p = probs.values().data();
  const double value = detail::region_loss(p, labels, L, in_primary, 1.0, nullptr) +
                       alpha * detail::region_loss(p, labels, L, in_other, alpha, nullptr);
  std::vector<LabelMap> owned;
  for (const LabelMap* y : labels) owned.push_back(*y);
  return detail::make_result("bcp_seg_loss", {1}, {value}, {probs},
                             [owned = std::move(owned), mask, alpha, primary, L](detail::Node& self) {
                               std::vector<const LabelMap*> labels;
                               for (const auto& y : owned) labels.push_back(&y);
                               auto& pn = *self.parents[0];
                               std::vector<double> g(pn.value.size(), 0.0);
                               const auto a = [&](std::size_t v) { return mask[v] == primary; };
                               const auto o = [&](std::size_t v) { return mask[v] != primary; };
                               detail::region_loss(pn.value.data(), labels, L, a, 1.0, g.data());
                               detail::region_loss(pn.value.data(), labels, L, o, alpha, g.data());
                               auto& dst = pn.grad_buffer();
                               const double up = self.grad[0];
                               for (std::size_t i = 0; i < dst.size(); ++i) dst[i] += up * g[i];
                             });
}

/// Squared error to the one-hot label, region-weighted and gated by per-sample
/// `gate` masks, normalised by the number of gated voxels.
inline Tensor masked_mse_loss(const Tensor& probs, const std::vector<const LabelMap*>& labels, const BinaryMask& mask,
                              const std::vector<const BinaryMask*>& gate, double alpha, Direction dir) {
  const auto L = detail::check_probs("masked_mse_loss", probs, labels.size(), mask.extent());
  if (gate.size() != L.batch) throw ShapeError("masked_mse_loss", "one gate mask per sample required");
  for (std::size_t b = 0; b < L.batch; ++b) {
    require_same_extent("masked_mse_loss", *labels[b], mask);
    require_same_extent("masked_mse_loss", *gate[b], mask);
  }
  const auto w = detail::region_weights(mask, alpha, dir);
  const std::size_t K = L.classes, S = L.voxels;
  double count = 0.0, total = 0.0;
  const double* p = probs.values().data();
  for (std::size_t b = 0; b < L.batch; ++b) {
    const double* pb = p + b * K * S;
    for (std::size_t v = 0; v < S; ++v) {
      if (!(*gate[b])[v]) continue;
      count += 1.0;
      double se = 0.0;
      for (std::size_t c = 0; c < K; ++c) {
        const double diff = pb[c * S + v] - (c == (*labels[b])[v] ? 1.0 : 0.0);
        se += diff * diff;
      }
      total += w[v] * se;
    }
  }
  const double den = count + kGateEps;
  std::vector<LabelMap> labels_owned;
  std::vector<BinaryMask> gate_owned;
  for (std::size_t b = 0; b < L.batch; ++b) {
    labels_owned.push_back(*labels[b]);
    gate_owned.push_back(*gate[b]);
  }
  return detail::make_result("masked_mse_loss", {1}, {total / den}, {probs},
                             [labels = std::move(labels_owned), gate = std::move(gate_owned), w, den,
                              L](detail::Node& self) {
                               auto& pn = *self.parents[0];
                               auto& dst = pn.grad_buffer();
                               const double up = self.grad[0];
                               const std::size_t K = L.classes, S = L.voxels;
                               for (std::size_t b = 0; b < L.batch; ++b) {
                                 for (std::size_t v = 0; v < S; ++v) {
                                   if (!gate[b][v]) continue;
                                   const double f = up * 2.0 * w[v] / den;
                                   for (std::size_t c = 0; c < K; ++c) {
                                     const std::size_t i = (b * K + c) * S + v;
                                     dst[i] += f * (pn.value[i] - (c == labels[b][v] ? 1.0 : 0.0));
                                   }
                                 }
                               }
                             });
}

/// D_KL(u || p) with u uniform over K classes, region-weighted and gated by
/// per-sample `gate` masks, normalised by the number of gated voxels.
inline Tensor masked_kl_uniform_loss(const Tensor& probs, const BinaryMask& mask,
                                     const std::vector<const BinaryMask*>& gate, double alpha, Direction dir) {
  const auto L = detail::check_probs("masked_kl_uniform_loss", probs, gate.size(), mask.extent());
  for (const BinaryMask* g : gate) require_same_extent("masked_kl_uniform_loss", *g, mask);
  const auto w = detail::region_weights(mask, alpha, dir);
  const std::size_t K = L.classes, S = L.voxels;
  const double inv_k = 1.0 / static_cast<double>(K);
  const double log_k = std::log(static_cast<double>(K));
  double count = 0.0, total = 0.0;
  const double* p = probs.values().data();
  for (std::size_t b = 0; b < L.batch; ++b) {
    const double* pb = p + b * K * S;
    for (std::size_t v = 0; v < S; ++v) {
      if (!(*gate[b])[v]) continue;
      count += 1.0;
      double kl = 0.0;
      for (std::size_t c = 0; c < K; ++c) kl += inv_k * (-log_k - std::log(std::max(pb[c * S + v], kProbFloor)));
      total += w[v] * kl;
    }
  }
  const double den = count + kGateEps;
  std::vector<BinaryMask> gate_owned;
  for (const BinaryMask* g : gate) gate_owned.push_back(*g);
  return detail::make_result("masked_kl_uniform_loss", {1}, {total / den}, {probs},
                             [gate = std::move(gate_owned), w, den, inv_k, L](detail::Node& self) {
                               auto& pn = *self.parents[0];
                               auto& dst = pn.grad_buffer();
                               const double up = self.grad[0];
                               const std::size_t K = L.classes, S = L.voxels;
                               for (std::size_t b = 0; b < L.batch; ++b) {
                                 for (std::size_t v = 0; v < S; ++v) {
                                   if (!gate[b][v]) continue;
                                   const double f = up * w[v] * inv_k / den;
                                   for (std::size_t c = 0; c < K; ++c) {
                                     const std::size_t i = (b * K + c) * S + v;
                                     if (pn.value[i] > kProbFloor) dst[i] -= f / pn.value[i];
                                   }
                                 }
                               }
                             });
}

/// The six per-student terms of one step.
struct LossTerms {
  Tensor seg_in, seg_out, mse_in, mse_out, kl_in, kl_out;
};

/// seg_in + seg_out + gamma (mse_in + mse_out) + mu (kl_in + kl_out). Terms
/// with a zero weight are left out of the graph entirely.
inline Tensor total_loss(const LossTerms& t, double gamma, double mu) {
  Tensor total = add(t.seg_in, t.seg_out);
  if (gamma != 0.0) total = add(total, scale(add(t.mse_in, t.mse_out), gamma));
  if (mu != 0.0) total = add(total, scale(add(t.kl_in, t.kl_out), mu));
  return total;
}

inline double total_loss_value(double seg_in, double seg_out, double mse_in, double mse_out, double kl_in,
                               double kl_out, double gamma, double mu) {
  double total = seg_in + seg_out;
  if (gamma != 0.0) total = total + gamma * (mse_in + mse_out);
  if (mu != 0.0) total = total + mu * (kl_in + kl_out);
  return total;
}

/// Per-voxel 0.5 * CE plus the constant 0.5 * (whole-volume soft Dice) for
/// sample `b`; its mean equals the seg loss over the whole volume.
inline Image seg_loss_map(const Tensor& probs, const LabelMap& label, std::size_t b = 0) {
  const Extent3 e = label.extent();
  const auto L = detail::check_probs("seg_loss_map", slice_batch(probs, b, 1), 1, e);
  const Tensor one = slice_batch(probs, b, 1);
  const std::vector<const LabelMap*> labels{&label};
  const double whole = detail::region_loss(one.values().data(), labels, L, [](std::size_t) { return true; }, 1.0,
                                           nullptr);
  double ce_total = 0.0;
  Image map(e);
  for (std::size_t v = 0; v < e.size(); ++v) {
    map[v] = -std::log(std::max(one[label[v] * L.voxels + v], kProbFloor));
    ce_total += map[v];
  }
  const double n = static_cast<double>(e.size());
  const double dice = 2.0 * (whole - 0.5 * ce_total / n);
  for (std::size_t v = 0; v < e.size(); ++v) map[v] = 0.5 * map[v] + 0.5 * dice;
  return map;
}

}  // namespace sdcl
