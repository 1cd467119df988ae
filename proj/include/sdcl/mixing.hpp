#pragma once

// Bidirectional copy-paste mixing of images and labels.
//   x_in  = x_l[j] * M + x_u[p] * (1 - M)
//   x_out = x_u[q] * M + x_l[i] * (1 - M)
// Labels mix with the same mask, using pseudo-labels for unlabeled sources.

#include <algorithm>
#include <array>
#include <cstddef>
#include <numeric>
#include <string>
#include <utility>
#include <vector>

#include "sdcl/error.hpp"
#include "sdcl/rng.hpp"
#include "sdcl/volume.hpp"

namespace sdcl {

namespace detail {

template <class Grid>
Grid select(const Grid& where_one, const Grid& where_zero, const BinaryMask& mask) {
  Grid out(mask.extent());
  for (std::size_t v = 0; v < mask.size(); ++v) out[v] = mask[v] ? where_one[v] : where_zero[v];
  return out;
}

template <class Grid>
std::pair<Grid, Grid> mix_pair(const char* op, const Grid& l_j, const Grid& u_p, const Grid& u_q, const Grid& l_i,
                               const BinaryMask& mask) {
  require_same_extent(op, l_j, mask);
  require_same_extent(op, u_p, mask);
  require_same_extent(op, u_q, mask);
  require_same_extent(op, l_i, mask);
  return {select(l_j, u_p, mask), select(u_q, l_i, mask)};
}

}  // namespace detail

inline std::pair<Image, Image> mix_images(const Image& x_l_j, const Image& x_u_p, const Image& x_u_q,
                                          const Image& x_l_i, const BinaryMask& mask) {
  return detail::mix_pair("mix_images", x_l_j, x_u_p, x_u_q, x_l_i, mask);
}

inline std::pair<LabelMap, LabelMap> mix_labels(const LabelMap& y_l_j, const LabelMap& y_u_p, const LabelMap& y_u_q,
                                                const LabelMap& y_l_i, const BinaryMask& mask) {
  return detail::mix_pair("mix_labels", y_l_j, y_u_p, y_u_q, y_l_i, mask);
}

/// Source indices of one bidirectional pair, into the batch's labeled and
/// unlabeled lists.
struct PairIndices {
  std::size_t i = 0, j = 0, p = 0, q = 0;
};

/// Pairs a batch of n_labeled labeled and n_unlabeled unlabeled items. Each
/// list is shuffled and split in halves: the first half supplies j (resp. p),
/// the second half i (resp. q), so i != j and p != q always hold. Returns
/// min(n_labeled, n_unlabeled) / 2 pairs.
inline std::vector<PairIndices> pair_batch(std::size_t n_labeled, std::size_t n_unlabeled, Rng& rng) {
  if (n_labeled < 2 || n_unlabeled < 2) {
    throw ConfigError("batch_size", "bidirectional pairing needs at least two labeled and two unlabeled items");
  }
  std::vector<std::size_t> l(n_labeled), u(n_unlabeled);
  std::iota(l.begin(), l.end(), 0);
  std::iota(u.begin(), u.end(), 0);
  std::shuffle(l.begin(), l.end(), rng);
  std::shuffle(u.begin(), u.end(), rng);
  const std::size_t n = std::min(n_labeled, n_unlabeled) / 2;
  std::vector<PairIndices> out(n);
  for (std::size_t k = 0; k < n; ++k) {
    out[k].j = l[k];
    out[k].i = l[k + n_labeled / 2];
    out[k].p = u[k];
    out[k].q = u[k + n_unlabeled / 2];
  }
  return out;
}

struct MixedPair {
  Image x_in, x_out;
  LabelMap y_in, y_out;
  BinaryMask mask;
  std::string id_l_i, id_l_j, id_u_p, id_u_q;
};

}  // namespace sdcl
