#pragma once

// Dense same-padding convolution kernels over (batch, channel, W, H, D) buffers
// with D contiguous. Loops run in a fixed order, so results are bitwise
// reproducible for a given build.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstddef>
#include <cstring>
#include <new>
#include <type_traits>
#include <vector>

#if defined(__AVX512F__)
#include <immintrin.h>
#endif

namespace sdcl::detail {

namespace simd {

using V8 = double __attribute__((vector_size(64)));

inline V8 load(const double* p) {
  V8 v;
  std::memcpy(&v, p, sizeof v);
  return v;
}

inline void store(double* p, V8 v) { std::memcpy(p, &v, sizeof v); }

inline V8 splat(double s) { return V8{s, s, s, s, s, s, s, s}; }

inline V8 fmadd(V8 a, V8 b, V8 c) {
#if defined(__AVX512F__)
  return reinterpret_cast<V8>(_mm512_fmadd_pd(reinterpret_cast<__m512d>(a),
                                              reinterpret_cast<__m512d>(b),
                                              reinterpret_cast<__m512d>(c)));
#else
  return a * b + c;
#endif
}

inline V8 relu(V8 v) {
  const V8 zero{};
  return v > zero ? v : zero;
}

// Lanes S..S+7 of the 16-lane concatenation lo:hi.
template <int S>
inline V8 window(V8 lo, V8 hi) {
#if defined(__AVX512F__)
  return reinterpret_cast<V8>(_mm512_alignr_epi64(reinterpret_cast<__m512i>(hi), reinterpret_cast<__m512i>(lo), S));
#else
  using I8 = long long __attribute__((vector_size(64)));
  return __builtin_shuffle(lo, hi, I8{S, S + 1, S + 2, S + 3, S + 4, S + 5, S + 6, S + 7});
#endif
}

inline double hsum(V8 v) {
  double s = 0.0;
  for (int l = 0; l < 8; ++l) s += v[l];
  return s;
}

}  // namespace simd

template <class T>
struct AlignedAllocator {
  using value_type = T;
  static constexpr std::align_val_t kAlign{64};
  AlignedAllocator() = default;
  template <class U>
  AlignedAllocator(const AlignedAllocator<U>&) {}
  T* allocate(std::size_t n) { return static_cast<T*>(::operator new(n * sizeof(T), kAlign)); }
  void deallocate(T* p, std::size_t) { ::operator delete(p, kAlign); }
  bool operator==(const AlignedAllocator&) const = default;
};

using PaddedBuffer = std::vector<double, AlignedAllocator<double>>;

struct ConvGeometry {
  std::size_t batch = 1;
  std::size_t in_channels = 1;
  std::size_t out_channels = 1;
  std::size_t w = 1, h = 1, d = 1;
  std::size_t kw = 1, kh = 1, kd = 1;

  std::size_t plane() const { return w * h * d; }
  std::size_t taps() const { return kw * kh * kd; }
  std::size_t pad_w() const { return w + kw - 1; }
  std::size_t pad_h() const { return h + kh - 1; }
  // Aligned layout: every padded row starts on 64 bytes with the data at
  // lane 8, so depth shifts become register shuffles of aligned loads. The
  // weight gradient uses it; the correlations read the compact layout.
  bool aligned = false;

  bool aligned_rows() const { return aligned && d % 8 == 0 && (kd == 1 || kd == 3); }
  std::size_t row_offset() const { return aligned_rows() ? 8 : kd / 2; }
  std::size_t row_len() const { return aligned_rows() ? d + 16 : d + kd - 1; }
  std::size_t padded_plane() const { return pad_w() * pad_h() * row_len(); }
};

/// Applied to each output value before it is stored: optional per-channel
/// bias, then optional relu.
struct Epilogue {
  const double* bias = nullptr;
  bool relu = false;
};

/// Copies `channels` planes of `src` into `out` with a zero border of
/// half-kernel width on every spatial side. Only the interior is written;
/// the border is zeroed when the buffer is (re)allocated.
inline void pad_planes(const ConvGeometry& g, std::size_t channels, const double* src, PaddedBuffer& out) {
  const std::size_t pw = g.kw / 2, ph = g.kh / 2, off = g.row_offset();
  const std::size_t PH = g.pad_h(), RL = g.row_len();
  const std::size_t n = g.batch * channels * g.padded_plane();
  if (out.size() != n) out.assign(n, 0.0);
  for (std::size_t bc = 0; bc < g.batch * channels; ++bc) {
    const double* s = src + bc * g.plane();
    double* o = out.data() + bc * g.padded_plane();
    for (std::size_t x = 0; x < g.w; ++x) {
      for (std::size_t y = 0; y < g.h; ++y) {
        std::copy_n(s + (x * g.h + y) * g.d, g.d, o + ((x + pw) * PH + (y + ph)) * RL + off);
      }
    }
  }
}

/// Per-thread padded buffers keyed by layout, so borders stay zero between
/// calls with the same geometry.
inline PaddedBuffer& padded_buffer(const ConvGeometry& g, std::size_t channels) {
  struct Entry {
    std::array<std::size_t, 8> key;
    PaddedBuffer data;
  };
  thread_local std::vector<Entry> cache;
  const std::array<std::size_t, 8> key{g.batch * channels, g.w, g.h, g.d, g.kw, g.kh, g.kd, g.aligned_rows()};
  for (auto& e : cache) {
    if (e.key == key) return e.data;
  }
  if (cache.size() >= 16) cache.erase(cache.begin());
  cache.push_back({key, {}});
  return cache.back().data;
}

/// The depth window of tap k for lane block q of an aligned padded row.
template <std::size_t KD>
inline simd::V8 depth_window(const double* row, std::size_t q, std::size_t k) {
  if constexpr (KD == 1) {
    return simd::load(row + 8 * q + 8);
  } else {
    if (k == 1) return simd::load(row + 8 * q + 8);
    if (k == 0) return simd::window<7>(simd::load(row + 8 * q), simd::load(row + 8 * q + 8));
    return simd::window<1>(simd::load(row + 8 * q + 8), simd::load(row + 8 * q + 16));
  }
}

// kBlock output channels share every input-row load; the D row of each
// accumulator is kLanes vectors held in registers. Weights for the block are
// gathered as [ci][tap][c] so the inner loop reads them sequentially.
template <std::size_t kLanes, std::size_t kBlock, std::size_t KW, std::size_t KH, std::size_t KD>
inline void correlate_block(const ConvGeometry& g, const double* padded, const double* weight,
                            double* out, std::size_t b, std::size_t co0, Epilogue ep) {
  using simd::V8;
  const std::size_t PH = g.pad_h(), RL = g.row_len(), skew = g.row_offset() - KD / 2;
  const std::size_t Ci = g.in_channels, Co = g.out_channels;
  constexpr std::size_t taps = KW * KH * KD;
  std::vector<double> wblk(Ci * taps * kBlock);
  for (std::size_t ci = 0; ci < Ci; ++ci) {
    for (std::size_t tap = 0; tap < taps; ++tap) {
      for (std::size_t c = 0; c < kBlock; ++c) {
        wblk[(ci * taps + tap) * kBlock + c] = weight[((co0 + c) * Ci + ci) * taps + tap];
      }
    }
  }
  for (std::size_t x = 0; x < g.w; ++x) {
    for (std::size_t y = 0; y < g.h; ++y) {
      V8 acc[kBlock][kLanes];
      for (std::size_t c = 0; c < kBlock; ++c) {
        for (std::size_t q = 0; q < kLanes; ++q) acc[c][q] = V8{};
      }
      const double* wp = wblk.data();
      for (std::size_t ci = 0; ci < Ci; ++ci) {
        const double* in_c = padded + (b * Ci + ci) * g.padded_plane();
#pragma GCC unroll 3
        for (std::size_t i = 0; i < KW; ++i) {
#pragma GCC unroll 3
          for (std::size_t j = 0; j < KH; ++j) {
            const double* row = in_c + ((x + i) * PH + (y + j)) * RL;
#pragma GCC unroll 3
            for (std::size_t k = 0; k < KD; ++k) {
              V8 src[kLanes];
#pragma GCC unroll 4
              for (std::size_t q = 0; q < kLanes; ++q) src[q] = simd::load(row + skew + k + 8 * q);
#pragma GCC unroll 8
              for (std::size_t c = 0; c < kBlock; ++c) {
                const V8 wv = simd::splat(wp[c]);
#pragma GCC unroll 4
                for (std::size_t q = 0; q < kLanes; ++q) acc[c][q] = simd::fmadd(wv, src[q], acc[c][q]);
              }
              wp += kBlock;
            }
          }
        }
      }
      for (std::size_t c = 0; c < kBlock; ++c) {
        double* dst = out + (b * Co + co0 + c) * g.plane() + (x * g.h + y) * g.d;
        const V8 bv = simd::splat(ep.bias ? ep.bias[co0 + c] : 0.0);
        for (std::size_t q = 0; q < kLanes; ++q) {
          V8 v = ep.bias ? acc[c][q] + bv : acc[c][q];
          if (ep.relu) v = simd::relu(v);
          simd::store(dst + 8 * q, v);
        }
      }
    }
  }
}

template <std::size_t kLanes, std::size_t KD>
inline void correlate_lanes(const ConvGeometry& g, const double* padded, const double* weight, double* out,
                            Epilogue ep) {
  constexpr std::size_t kBlock = kLanes >= 4 ? 4 : 8;
  for (std::size_t b = 0; b < g.batch; ++b) {
    std::size_t co = 0;
    for (; co + kBlock <= g.out_channels; co += kBlock) {
      correlate_block<kLanes, kBlock, 3, 3, KD>(g, padded, weight, out, b, co, ep);
    }
    for (; co + 2 <= g.out_channels; co += 2) {
      correlate_block<kLanes, 2, 3, 3, KD>(g, padded, weight, out, b, co, ep);
    }
    for (; co < g.out_channels; ++co) correlate_block<kLanes, 1, 3, 3, KD>(g, padded, weight, out, b, co, ep);
  }
}

// Vector path for 3x3x3 and 3x3x1 kernels with D a multiple of 8.
template <std::size_t KD>
inline bool correlate_vectorized(const ConvGeometry& g, const double* padded, const double* weight,
                                 double* out, Epilogue ep) {
  if (g.kw != 3 || g.kh != 3) return false;
  switch (g.d) {
    case 32: correlate_lanes<4, KD>(g, padded, weight, out, ep); return true;
    case 24: correlate_lanes<3, KD>(g, padded, weight, out, ep); return true;
    case 16: correlate_lanes<2, KD>(g, padded, weight, out, ep); return true;
    case 8: correlate_lanes<1, KD>(g, padded, weight, out, ep); return true;
    default: return false;
  }
}

inline void correlate_scalar(const ConvGeometry& g, const double* padded, const double* weight,
                             double* out, Epilogue ep) {
  const std::size_t D = g.d;
  const std::size_t PH = g.pad_h(), RL = g.row_len(), skew = g.row_offset() - g.kd / 2;
  const std::size_t Ci = g.in_channels, Co = g.out_channels;
  const std::size_t taps = g.taps();
  std::vector<double> acc(D);
  for (std::size_t b = 0; b < g.batch; ++b) {
    for (std::size_t co = 0; co < Co; ++co) {
      double* out_c = out + (b * Co + co) * g.plane();
      for (std::size_t x = 0; x < g.w; ++x) {
        for (std::size_t y = 0; y < g.h; ++y) {
          std::fill(acc.begin(), acc.end(), 0.0);
          for (std::size_t ci = 0; ci < Ci; ++ci) {
            const double* in_c = padded + (b * Ci + ci) * g.padded_plane();
            const double* wk = weight + (co * Ci + ci) * taps;
            for (std::size_t i = 0; i < g.kw; ++i) {
              for (std::size_t j = 0; j < g.kh; ++j) {
                const double* row = in_c + ((x + i) * PH + (y + j)) * RL + skew;
                for (std::size_t k = 0; k < g.kd; ++k) {
                  const double wv = wk[(i * g.kh + j) * g.kd + k];
                  for (std::size_t z = 0; z < D; ++z) acc[z] = std::fma(wv, row[k + z], acc[z]);
                }
              }
            }
          }
          double* dst = out_c + (x * g.h + y) * D;
          for (std::size_t z = 0; z < D; ++z) {
            double v = ep.bias ? acc[z] + ep.bias[co] : acc[z];
            if (ep.relu) v = v > 0.0 ? v : 0.0;
            dst[z] = v;
          }
        }
      }
    }
  }
}

/// out[b,co] = sum over ci and taps of weight[co,ci,tap] * in[b,ci,shifted].
/// `weight` is (out_channels, in_channels, kw, kh, kd); `padded` comes from pad_planes.
inline void correlate(const ConvGeometry& g, const double* padded, const double* weight, double* out,
                      Epilogue ep = {}) {
  const bool done = (g.kd == 3 && correlate_vectorized<3>(g, padded, weight, out, ep)) ||
                    (g.kd == 1 && correlate_vectorized<1>(g, padded, weight, out, ep));
  if (!done) correlate_scalar(g, padded, weight, out, ep);
}

inline void conv_forward(const ConvGeometry& g, const double* in, const double* weight, double* out,
                         Epilogue ep = {}) {
  auto& padded = padded_buffer(g, g.in_channels);
  pad_planes(g, g.in_channels, in, padded);
  correlate(g, padded.data(), weight, out, ep);
}

/// Gradient with respect to the input: correlation of the padded output
/// gradient with the channel-transposed, spatially flipped kernel.
inline void conv_backward_input(const ConvGeometry& g, const double* grad_out, const double* weight,
                                double* grad_in) {
  ConvGeometry t = g;
  t.in_channels = g.out_channels;
  t.out_channels = g.in_channels;
  const std::size_t taps = g.taps();
  std::vector<double> flipped(g.in_channels * g.out_channels * taps);
  for (std::size_t co = 0; co < g.out_channels; ++co) {
    for (std::size_t ci = 0; ci < g.in_channels; ++ci) {
      const double* src = weight + (co * g.in_channels + ci) * taps;
      double* dst = flipped.data() + (ci * g.out_channels + co) * taps;
      for (std::size_t tap = 0; tap < taps; ++tap) dst[taps - 1 - tap] = src[tap];
    }
  }
  auto& padded = padded_buffer(t, t.in_channels);
  pad_planes(t, t.in_channels, grad_out, padded);
  correlate(t, padded.data(), flipped.data(), grad_in);
}

// Vectorized weight gradient. The volume is walked in x slabs so the planes
// touched by one slab stay cache resident. Each pass covers kJ kernel rows of
// one (ci, i) and keeps kBlock x kJ x kd vector accumulators in registers, so
// every grad-output load feeds kJ x kd multiply-adds.
template <std::size_t kBlock, std::size_t kJ, std::size_t kDepthTaps, std::size_t kLanes>
inline void weight_grad_rows(const ConvGeometry& g, const double* in_c, const double* go_b, simd::V8* partial,
                             std::size_t x0, std::size_t x1, std::size_t co0, std::size_t ci, std::size_t i,
                             std::size_t j0) {
  using simd::V8;
  const std::size_t PH = g.pad_h(), RL = g.row_len();
  const std::size_t lanes = g.d / 8;
  const std::size_t Ci = g.in_channels, taps = g.taps();
  auto slot = [&](std::size_t c, std::size_t jj, std::size_t k) -> V8& {
    return partial[((co0 + c) * Ci + ci) * taps + (i * g.kh + j0 + jj) * g.kd + k];
  };
  V8 acc[kBlock][kJ][kDepthTaps];
  for (std::size_t c = 0; c < kBlock; ++c) {
    for (std::size_t jj = 0; jj < kJ; ++jj) {
      for (std::size_t k = 0; k < kDepthTaps; ++k) acc[c][jj][k] = slot(c, jj, k);
    }
  }
  for (std::size_t x = x0; x < x1; ++x) {
    for (std::size_t y = 0; y < g.h; ++y) {
      const double* row = in_c + ((x + i) * PH + (y + j0)) * RL;
      const double* go = go_b + (x * g.h + y) * g.d;
      if constexpr (kLanes > 0) {
        // Whole padded rows in registers; each depth window is built once.
        V8 a[kJ][kLanes + 2];
        for (std::size_t jj = 0; jj < kJ; ++jj) {
#pragma GCC unroll 6
          for (std::size_t t = 0; t < kLanes + 2; ++t) a[jj][t] = simd::load(row + jj * RL + 8 * t);
        }
#pragma GCC unroll 4
        for (std::size_t q = 0; q < kLanes; ++q) {
          V8 gv[kBlock];
#pragma GCC unroll 4
          for (std::size_t c = 0; c < kBlock; ++c) gv[c] = simd::load(go + c * g.plane() + 8 * q);
#pragma GCC unroll 2
          for (std::size_t jj = 0; jj < kJ; ++jj) {
#pragma GCC unroll 3
            for (std::size_t k = 0; k < kDepthTaps; ++k) {
              V8 src;
              if (kDepthTaps == 1 || k == 1) {
                src = a[jj][q + 1];
              } else if (k == 0) {
                src = simd::window<7>(a[jj][q], a[jj][q + 1]);
              } else {
                src = simd::window<1>(a[jj][q + 1], a[jj][q + 2]);
              }
#pragma GCC unroll 4
              for (std::size_t c = 0; c < kBlock; ++c) acc[c][jj][k] = simd::fmadd(gv[c], src, acc[c][jj][k]);
            }
          }
        }
      } else {
        for (std::size_t q = 0; q < lanes; ++q) {
          V8 gv[kBlock];
#pragma GCC unroll 4
          for (std::size_t c = 0; c < kBlock; ++c) gv[c] = simd::load(go + c * g.plane() + 8 * q);
#pragma GCC unroll 2
          for (std::size_t jj = 0; jj < kJ; ++jj) {
#pragma GCC unroll 3
            for (std::size_t k = 0; k < kDepthTaps; ++k) {
              const V8 src = depth_window<kDepthTaps>(row + jj * RL, q, k);
#pragma GCC unroll 4
              for (std::size_t c = 0; c < kBlock; ++c) acc[c][jj][k] = simd::fmadd(gv[c], src, acc[c][jj][k]);
            }
          }
        }
      }
    }
  }
  for (std::size_t c = 0; c < kBlock; ++c) {
    for (std::size_t jj = 0; jj < kJ; ++jj) {
      for (std::size_t k = 0; k < kDepthTaps; ++k) slot(c, jj, k) = acc[c][jj][k];
    }
  }
}

template <std::size_t kBlock, std::size_t kDepthTaps>
inline void weight_grad_block(const ConvGeometry& g, const double* padded_in, const double* grad_out,
                              simd::V8* partial, std::size_t b, std::size_t x0, std::size_t x1,
                              std::size_t co0) {
  // Register budget: kBlock * kJ * kd accumulators plus kBlock loads.
  constexpr std::size_t kJ = kBlock * 2 * kDepthTaps + kBlock <= 30 ? 2 : 1;
  const std::size_t Ci = g.in_channels, Co = g.out_channels;
  const double* go_b = grad_out + (b * Co + co0) * g.plane();
  auto rows = [&]<std::size_t kLanes>(std::integral_constant<std::size_t, kLanes>) {
    for (std::size_t ci = 0; ci < Ci; ++ci) {
      const double* in_c = padded_in + (b * Ci + ci) * g.padded_plane();
      for (std::size_t i = 0; i < g.kw; ++i) {
        std::size_t j = 0;
        for (; kLanes == 0 && j + kJ <= g.kh; j += kJ) {
          weight_grad_rows<kBlock, kJ, kDepthTaps, kLanes>(g, in_c, go_b, partial, x0, x1, co0, ci, i, j);
        }
        for (; j < g.kh; ++j) {
          weight_grad_rows<kBlock, 1, kDepthTaps, kLanes>(g, in_c, go_b, partial, x0, x1, co0, ci, i, j);
        }
      }
    }
  };
  switch (g.d) {
    case 32: rows(std::integral_constant<std::size_t, 4>{}); break;
    case 16: rows(std::integral_constant<std::size_t, 2>{}); break;
    default: rows(std::integral_constant<std::size_t, 0>{}); break;
  }
}

// Lane-wise partial sums live in `partial` across all slabs and are reduced
// once at the end. One-plane slabs keep the grad-output rows of a channel
// block in L1.
template <std::size_t kDepthTaps>
inline void weight_grad_lanes(const ConvGeometry& g, const double* padded_in, const double* grad_out,
                              double* grad_w) {
  constexpr std::size_t kSlab = 1;
  thread_local std::vector<simd::V8> partial;
  const std::size_t n = g.out_channels * g.in_channels * g.taps();
  partial.assign(n, simd::V8{});
  for (std::size_t b = 0; b < g.batch; ++b) {
    for (std::size_t x0 = 0; x0 < g.w; x0 += kSlab) {
      const std::size_t x1 = std::min(g.w, x0 + kSlab);
      std::size_t co = 0;
      for (; co + 4 <= g.out_channels; co += 4) {
        weight_grad_block<4, kDepthTaps>(g, padded_in, grad_out, partial.data(), b, x0, x1, co);
      }
      for (; co + 2 <= g.out_channels; co += 2) {
        weight_grad_block<2, kDepthTaps>(g, padded_in, grad_out, partial.data(), b, x0, x1, co);
      }
      for (; co < g.out_channels; ++co) {
        weight_grad_block<1, kDepthTaps>(g, padded_in, grad_out, partial.data(), b, x0, x1, co);
      }
    }
  }
  for (std::size_t t = 0; t < n; ++t) grad_w[t] += simd::hsum(partial[t]);
}

inline void weight_grad_scalar(const ConvGeometry& g, const double* padded_in, const double* grad_out,
                               double* grad_w) {
  const std::size_t D = g.d;
  const std::size_t PH = g.pad_h(), RL = g.row_len(), skew = g.row_offset() - g.kd / 2;
  const std::size_t Ci = g.in_channels, Co = g.out_channels;
  const std::size_t taps = g.taps();
  for (std::size_t co = 0; co < Co; ++co) {
    for (std::size_t ci = 0; ci < Ci; ++ci) {
      for (std::size_t tap = 0; tap < taps; ++tap) {
        const std::size_t i = tap / (g.kh * g.kd), j = (tap / g.kd) % g.kh, k = tap % g.kd;
        double s = 0.0;
        for (std::size_t b = 0; b < g.batch; ++b) {
          const double* in_c = padded_in + (b * Ci + ci) * g.padded_plane();
          const double* go_c = grad_out + (b * Co + co) * g.plane();
          for (std::size_t x = 0; x < g.w; ++x) {
            for (std::size_t y = 0; y < g.h; ++y) {
              const double* go = go_c + (x * g.h + y) * D;
              const double* row = in_c + ((x + i) * PH + (y + j)) * RL + skew + k;
              for (std::size_t z = 0; z < D; ++z) s = std::fma(go[z], row[z], s);
            }
          }
        }
        grad_w[(co * Ci + ci) * taps + tap] += s;
      }
    }
  }
}

/// Accumulates d(loss)/d(weight) into `grad_w`.
inline void conv_backward_weight(ConvGeometry g, const double* in, const double* grad_out, double* grad_w) {
  g.aligned = true;
  auto& padded = padded_buffer(g, g.in_channels);
  pad_planes(g, g.in_channels, in, padded);
  if (g.d % 8 == 0 && g.kd == 3) {
    weight_grad_lanes<3>(g, padded.data(), grad_out, grad_w);
  } else if (g.d % 8 == 0 && g.kd == 1) {
    weight_grad_lanes<1>(g, padded.data(), grad_out, grad_w);
  } else {
    weight_grad_scalar(g, padded.data(), grad_out, grad_w);
  }
}

}  // namespace sdcl::detail
