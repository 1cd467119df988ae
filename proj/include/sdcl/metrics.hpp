#pragma once

// Overlap and surface-distance metrics on label maps, unit isotropic spacing.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <optional>
#include <ostream>
#include <string>
#include <vector>

#include "sdcl/nets.hpp"
#include "sdcl/volume.hpp"

namespace sdcl {

struct Overlap {
  double dice = 1.0;
  double jaccard = 1.0;
};

/// Dice and Jaccard of class c; both are 1 when prediction and truth are empty.
inline Overlap overlap_metrics(const LabelMap& pred, const LabelMap& truth, std::size_t c) {
  require_same_extent("overlap_metrics", pred, truth);
  std::size_t np = 0, nt = 0, both = 0;
  for (std::size_t v = 0; v < pred.size(); ++v) {
    const bool p = pred[v] == c, t = truth[v] == c;
    np += p;
    nt += t;
    both += p && t;
  }
  if (np + nt == 0) return {1.0, 1.0};
  const double inter = static_cast<double>(both);
  return {2.0 * inter / static_cast<double>(np + nt), inter / static_cast<double>(np + nt - both)};
}

/// Foreground voxels of class c with at least one face neighbour outside the
/// class. Out-of-volume counts as background; axes of extent 1 are ignored.
inline BinaryMask class_surface(const LabelMap& labels, std::size_t c) {
  const Extent3 e = labels.extent();
  BinaryMask s(e);
  const long ext[] = {static_cast<long>(e.w), static_cast<long>(e.h), static_cast<long>(e.d)};
  for (std::size_t x = 0; x < e.w; ++x) {
    for (std::size_t y = 0; y < e.h; ++y) {
      for (std::size_t z = 0; z < e.d; ++z) {
        if (labels.at(x, y, z) != c) continue;
        const long pos[] = {static_cast<long>(x), static_cast<long>(y), static_cast<long>(z)};
        bool edge = false;
        for (int a = 0; a < 3 && !edge; ++a) {
          if (ext[a] == 1) continue;
          for (int step : {-1, 1}) {
            long n[] = {pos[0], pos[1], pos[2]};
            n[a] += step;
            if (n[a] < 0 || n[a] >= ext[a] ||
                labels.at(static_cast<std::size_t>(n[0]), static_cast<std::size_t>(n[1]), static_cast<std::size_t>(n[2])) != c) {
              edge = true;
              break;
            }
          }
        }
        s.at(x, y, z) = edge;
      }
    }
  }
  return s;
}

namespace detail {

// One-dimensional squared distance transform (lower envelope of parabolas).
inline void edt_1d(const double* f, std::size_t n, std::size_t stride, double* out, std::vector<double>& buf_f,
                   std::vector<std::size_t>& v, std::vector<double>& z) {
  constexpr double inf = std::numeric_limits<double>::infinity();
  buf_f.resize(n);
  v.assign(n, 0);
  z.assign(n + 1, 0.0);
  for (std::size_t i = 0; i < n; ++i) buf_f[i] = f[i * stride];
  std::size_t k = 0;
  std::size_t first = n;
  for (std::size_t q = 0; q < n; ++q) {
    if (buf_f[q] < inf) {
      first = q;
      break;
    }
  }
  if (first == n) {
    for (std::size_t i = 0; i < n; ++i) out[i * stride] = inf;
    return;
  }
  v[0] = first;
  z[0] = -inf;
  z[1] = inf;
  for (std::size_t q = first + 1; q < n; ++q) {
    if (buf_f[q] == inf) continue;
    const double fq = buf_f[q] + static_cast<double>(q * q);
    double s;
    while (true) {
      const std::size_t p = v[k];
      s = (fq - (buf_f[p] + static_cast<double>(p * p))) / (2.0 * (static_cast<double>(q) - static_cast<double>(p)));
      if (s <= z[k] && k > 0) {
        --k;
        continue;
      }
      break;
    }
    ++k;
    v[k] = q;
    z[k] = s;
    z[k + 1] = inf;
  }
  k = 0;
  for (std::size_t q = 0; q < n; ++q) {
    while (z[k + 1] < static_cast<double>(q)) ++k;
    const double d = static_cast<double>(q) - static_cast<double>(v[k]);
    out[q * stride] = d * d + buf_f[v[k]];
  }
}

}  // namespace detail

/// Exact squared Euclidean distance from every voxel to the nearest voxel set
/// in `target`; +inf everywhere when target is empty.
inline std::vector<double> squared_distance_to(const BinaryMask& target) {
  const Extent3 e = target.extent();
  constexpr double inf = std::numeric_limits<double>::infinity();
  std::vector<double> d(e.size());
  for (std::size_t i = 0; i < e.size(); ++i) d[i] = target[i] ? 0.0 : inf;
  std::vector<double> tmp, buf, z;
  std::vector<std::size_t> v;
  // z axis (stride 1), then y (stride d), then x (stride h*d).
  tmp.resize(std::max({e.w, e.h, e.d}));
  for (std::size_t x = 0; x < e.w; ++x) {
    for (std::size_t y = 0; y < e.h; ++y) {
      double* row = d.data() + e.index(x, y, 0);
      detail::edt_1d(row, e.d, 1, tmp.data(), buf, v, z);
      std::copy_n(tmp.data(), e.d, row);
    }
  }
  for (std::size_t x = 0; x < e.w; ++x) {
    for (std::size_t zz = 0; zz < e.d; ++zz) {
      double* col = d.data() + e.index(x, 0, zz);
      detail::edt_1d(col, e.h, e.d, col, buf, v, z);
    }
  }
  for (std::size_t y = 0; y < e.h; ++y) {
    for (std::size_t zz = 0; zz < e.d; ++zz) {
      double* col = d.data() + e.index(0, y, zz);
      detail::edt_1d(col, e.w, e.h * e.d, col, buf, v, z);
    }
  }
  return d;
}

/// Nearest-rank percentile of an unsorted sample (q in (0, 100]).
inline double nearest_rank_percentile(std::vector<double> values, double q) {
  if (values.empty()) throw ShapeError("percentile", "empty sample");
  std::sort(values.begin(), values.end());
  const auto rank = static_cast<std::size_t>(std::ceil(q / 100.0 * static_cast<double>(values.size())));
  return values[std::clamp<std::size_t>(rank, 1, values.size()) - 1];
}

struct SurfaceDistance {
  std::optional<double> hd95;  // empty when either surface is empty
  std::optional<double> asd;
};

/// Directed surface distances of class c: every surface voxel of `from` to
/// the nearest surface voxel of `to`.
inline std::vector<double> directed_surface_distances(const BinaryMask& from, const BinaryMask& to) {
  const auto d2 = squared_distance_to(to);
  std::vector<double> out;
  for (std::size_t v = 0; v < from.size(); ++v) {
    if (from[v]) out.push_back(std::sqrt(d2[v]));
  }
  return out;
}

inline SurfaceDistance surface_distances(const LabelMap& pred, const LabelMap& truth, std::size_t c) {
  require_same_extent("surface_distances", pred, truth);
  const BinaryMask sp = class_surface(pred, c), st = class_surface(truth, c);
  if (count_ones(sp) == 0 || count_ones(st) == 0) return {};
  const auto a = directed_surface_distances(sp, st);
  const auto b = directed_surface_distances(st, sp);
  SurfaceDistance r;
  r.hd95 = std::max(nearest_rank_percentile(a, 95.0), nearest_rank_percentile(b, 95.0));
  double sum = 0.0;
  for (double v : a) sum += v;
  for (double v : b) sum += v;
  r.asd = sum / static_cast<double>(a.size() + b.size());
  return r;
}

struct ClassMetrics {
  std::size_t cls = 1;
  double dice = 0.0;
  double jaccard = 0.0;
  std::optional<double> hd95;
  std::optional<double> asd;
};

/// Per-foreground-class metrics of one prediction.
struct MetricsReport {
  std::vector<ClassMetrics> classes;

  double mean_dice() const {
    double s = 0.0;
    for (const auto& c : classes) s += c.dice;
    return classes.empty() ? 0.0 : s / static_cast<double>(classes.size());
  }
};

inline MetricsReport evaluate_prediction(const LabelMap& pred, const LabelMap& truth, std::size_t K) {
  MetricsReport r;
  for (std::size_t c = 1; c < K; ++c) {
    const Overlap o = overlap_metrics(pred, truth, c);
    const SurfaceDistance s = surface_distances(pred, truth, c);
    r.classes.push_back({c, o.dice, o.jaccard, s.hd95, s.asd});
  }
  return r;
}

/// Averages reports (e.g. over test volumes) class by class; undefined
/// surface distances are excluded from their averages.
inline MetricsReport average_reports(const std::vector<MetricsReport>& reports) {
  MetricsReport out;
  if (reports.empty()) return out;
  const std::size_t nc = reports.front().classes.size();
  for (std::size_t k = 0; k < nc; ++k) {
    ClassMetrics m;
    m.cls = reports.front().classes[k].cls;
    double hd = 0.0, asd = 0.0;
    std::size_t nhd = 0;
    for (const auto& r : reports) {
      const auto& c = r.classes.at(k);
      m.dice += c.dice;
      m.jaccard += c.jaccard;
      if (c.hd95 && c.asd) {
        hd += *c.hd95;
        asd += *c.asd;
        ++nhd;
      }
    }
    m.dice /= static_cast<double>(reports.size());
    m.jaccard /= static_cast<double>(reports.size());
    if (nhd > 0) {
      m.hd95 = hd / static_cast<double>(nhd);
      m.asd = asd / static_cast<double>(nhd);
    }
    out.classes.push_back(m);
  }
  return out;
}

/// Argmax of the mean of both students' probabilities; ties go to the lower class.
inline LabelMap evaluate_students(const SegNet& a, const SegNet& b, const Image& image) {
  if (a.classes() != b.classes()) throw ShapeError("evaluate_students", "students disagree on K");
  NoGradGuard guard;
  const Tensor x = stack_images({&image});
  const Tensor mean_probs = scale(add(a.forward(x), b.forward(x)), 0.5);
  return argmax_channels(mean_probs, 0);
}

inline std::string format_optional(const std::optional<double>& v) {
  if (!v) return "undefined";
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.6f", *v);
  return buf;
}

inline void write_metrics_header(std::ostream& os) { os << "iteration,split,class,dice,jaccard,hd95,asd\n"; }

inline void write_metrics_rows(std::ostream& os, std::uint64_t iteration, const std::string& split,
                               const MetricsReport& r) {
  char buf[64];
  for (const auto& c : r.classes) {
    os << iteration << ',' << split << ',' << c.cls << ',';
    std::snprintf(buf, sizeof buf, "%.6f,%.6f", c.dice, c.jaccard);
    os << buf << ',' << format_optional(c.hd95) << ',' << format_optional(c.asd) << '\n';
  }
}

}  // namespace sdcl
