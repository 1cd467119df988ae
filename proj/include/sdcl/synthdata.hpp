#pragma once

// Procedural phantom volumes: soft-edged ellipsoids per foreground class on a
// noisy background, plus the on-disk volume format and dataset manifest.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <limits>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "sdcl/detail/binary_io.hpp"
#include "sdcl/error.hpp"
#include "sdcl/rng.hpp"
#include "sdcl/volume.hpp"

namespace sdcl {

enum class Split { kLabeled, kUnlabeled, kTest };

inline const char* split_name(Split s) {
  switch (s) {
    case Split::kLabeled: return "labeled";
    case Split::kUnlabeled: return "unlabeled";
    case Split::kTest: return "test";
  }
  return "?";
}

inline Split parse_split(const std::string& s) {
  if (s == "labeled") return Split::kLabeled;
  if (s == "unlabeled") return Split::kUnlabeled;
  if (s == "test") return Split::kTest;
  throw ConfigError("split", "unknown split '" + s + "'");
}

struct DatasetSpec {
  std::size_t n_labeled = 4;
  std::size_t n_unlabeled = 20;
  std::size_t n_test = 8;
  Extent3 shape{32, 32, 32};
  std::size_t classes = 2;
  std::size_t min_blobs = 1;  // per foreground class
  std::size_t max_blobs = 3;
  double min_radius = 3.0;    // semi-axis length in voxels
  double max_radius = 7.0;
  double background = 0.3;    // mean background intensity
  double contrast = 0.4;      // foreground minus background intensity
  double intensity_jitter = 0.0;  // per-volume uniform jitter of background and contrast
  double noise_sigma = 0.1;
  double edge_softness = 0.15;    // logistic width of the ellipsoid boundary, normalised radius units
  std::size_t clutter_blobs = 0;  // unlabeled distractor ellipsoids
  double clutter_contrast = 0.0;
  double min_foreground_fraction = 0.0;
  double max_foreground_fraction = 1.0;
  std::uint64_t seed = 0;
};

struct VolumeRecord {
  std::string id;
  Split split = Split::kLabeled;
  Image image;
  std::optional<LabelMap> label;

  bool operator==(const VolumeRecord&) const = default;
};

inline void validate(const DatasetSpec& s) {
  if (s.n_labeled < 2) throw ConfigError("n_labeled", "at least 2 labeled volumes are needed for pairing");
  if (s.n_unlabeled < 2) throw ConfigError("n_unlabeled", "at least 2 unlabeled volumes are needed for pairing");
  if (s.classes < 2 || s.classes > 255) throw ConfigError("classes", "K must lie in [2, 255]");
  if (s.shape.size() == 0) throw ConfigError("shape", "degenerate volume shape " + s.shape.str());
  if (s.min_blobs < 1 || s.max_blobs < s.min_blobs) throw ConfigError("min_blobs", "need 1 <= min_blobs <= max_blobs");
  if (!(s.min_radius > 0.0) || s.max_radius < s.min_radius) {
    throw ConfigError("min_radius", "need 0 < min_radius <= max_radius");
  }
  if (!(s.edge_softness > 0.0)) throw ConfigError("edge_softness", "must be positive");
  if (s.noise_sigma < 0.0) throw ConfigError("noise_sigma", "must be non-negative");
  // A blob must fit inside the volume along every axis that has depth.
  const std::size_t dims[] = {s.shape.w, s.shape.h, s.shape.d};
  for (std::size_t dim : dims) {
    if (dim == 1) continue;
    if (2.0 * s.max_radius > static_cast<double>(dim)) {
      throw ConfigError("max_radius", "radius " + std::to_string(s.max_radius) + " does not fit an extent of " +
                                          std::to_string(dim));
    }
  }
}

namespace detail {

struct Ellipsoid {
  double c[3];
  double r[3];
};

inline Ellipsoid random_ellipsoid(const DatasetSpec& s, Rng& rng) {
  Ellipsoid e{};
  const std::size_t dims[] = {s.shape.w, s.shape.h, s.shape.d};
  for (int a = 0; a < 3; ++a) {
    if (dims[a] == 1) {
      e.r[a] = 1.0;
      e.c[a] = 0.0;
      continue;
    }
    e.r[a] = uniform_real(rng, s.min_radius, s.max_radius);
    const double lo = e.r[a] - 0.5, hi = static_cast<double>(dims[a]) - 0.5 - e.r[a];
    e.c[a] = uniform_real(rng, lo, std::max(lo, hi));
  }
  return e;
}

// Normalised radius of voxel (x, y, z); < 1 inside.
inline double normalised_radius(const Ellipsoid& e, std::size_t x, std::size_t y, std::size_t z) {
  const double p[] = {static_cast<double>(x), static_cast<double>(y), static_cast<double>(z)};
  double s = 0.0;
  for (int a = 0; a < 3; ++a) {
    const double t = (p[a] - e.c[a]) / e.r[a];
    s += t * t;
  }
  return std::sqrt(s);
}

inline double logistic(double t) { return 1.0 / (1.0 + std::exp(-t)); }

}  // namespace detail

/// Volume number `index` of the dataset; depends only on (spec.seed, index).
inline VolumeRecord generate_volume(const DatasetSpec& spec, std::size_t index, Split split) {
  validate(spec);
  const Extent3 e = spec.shape;
  const std::size_t K = spec.classes;
  constexpr int kAttempts = 64;
  for (int attempt = 0; attempt < kAttempts; ++attempt) {
    Rng rng(mix_seed(spec.seed, (static_cast<std::uint64_t>(index) << 8) | static_cast<std::uint64_t>(attempt)));
    std::vector<std::vector<detail::Ellipsoid>> blobs(K);
    for (std::size_t c = 1; c < K; ++c) {
      const std::size_t n = spec.min_blobs + uniform_index(rng, spec.max_blobs - spec.min_blobs + 1);
      for (std::size_t k = 0; k < n; ++k) blobs[c].push_back(detail::random_ellipsoid(spec, rng));
    }
    std::vector<detail::Ellipsoid> clutter;
    for (std::size_t k = 0; k < spec.clutter_blobs; ++k) clutter.push_back(detail::random_ellipsoid(spec, rng));
    const double bg = spec.background + spec.intensity_jitter * uniform_real(rng, -1.0, 1.0);
    const double contrast = spec.contrast * (1.0 + spec.intensity_jitter * uniform_real(rng, -1.0, 1.0));

    VolumeRecord rec;
    rec.id = "vol-" + std::to_string(index);
    rec.split = split;
    rec.image = Image(e);
    LabelMap label(e);
    std::size_t foreground = 0;
    for (std::size_t x = 0; x < e.w; ++x) {
      for (std::size_t y = 0; y < e.h; ++y) {
        for (std::size_t z = 0; z < e.d; ++z) {
          double level = 0.0;
          std::uint8_t cls = 0;
          for (std::size_t c = 1; c < K; ++c) {
            double r = std::numeric_limits<double>::infinity();
            for (const auto& b : blobs[c]) r = std::min(r, detail::normalised_radius(b, x, y, z));
            if (r < 1.0) cls = static_cast<std::uint8_t>(c);
            const double class_level = static_cast<double>(c) / static_cast<double>(K - 1);
            level = std::max(level, class_level * detail::logistic((1.0 - r) / spec.edge_softness));
          }
          double clutter_level = 0.0;
          for (const auto& b : clutter) {
            const double r = detail::normalised_radius(b, x, y, z);
            clutter_level = std::max(clutter_level, detail::logistic((1.0 - r) / spec.edge_softness));
          }
          const std::size_t v = e.index(x, y, z);
          label[v] = cls;
          foreground += cls != 0;
          rec.image[v] = bg + contrast * level + spec.clutter_contrast * clutter_level;
        }
      }
    }
    if (spec.noise_sigma > 0.0) {
      for (auto& v : rec.image.data()) v += normal(rng, 0.0, spec.noise_sigma);
    }
    for (auto& v : rec.image.data()) v = std::clamp(v, 0.0, 1.0);
    const double frac = static_cast<double>(foreground) / static_cast<double>(e.size());
    if (frac < spec.min_foreground_fraction || frac > spec.max_foreground_fraction) continue;
    rec.label = std::move(label);
    return rec;
  }
  throw ConfigError("min_foreground_fraction", "could not meet the foreground fraction bounds for volume " +
                                                   std::to_string(index));
}

/// Labeled volumes first, then unlabeled, then test; labels are kept for all
/// of them (the training loaders strip unlabeled labels).
inline std::vector<VolumeRecord> generate(const DatasetSpec& spec) {
  validate(spec);
  std::vector<VolumeRecord> out;
  std::size_t index = 0;
  for (std::size_t i = 0; i < spec.n_labeled; ++i) out.push_back(generate_volume(spec, index++, Split::kLabeled));
  for (std::size_t i = 0; i < spec.n_unlabeled; ++i) out.push_back(generate_volume(spec, index++, Split::kUnlabeled));
  for (std::size_t i = 0; i < spec.n_test; ++i) out.push_back(generate_volume(spec, index++, Split::kTest));
  return out;
}

// ---------------------------------------------------------------------------
// Training views. Unlabeled volumes have no label member at all.

struct LabeledVolume {
  std::string id;
  Image image;
  LabelMap label;
};

struct UnlabeledVolume {
  std::string id;
  Image image;
};

struct TrainingData {
  std::vector<LabeledVolume> labeled;
  std::vector<UnlabeledVolume> unlabeled;
  std::vector<LabeledVolume> test;
  std::size_t classes = 2;

  Extent3 extent() const { return labeled.empty() ? Extent3{} : labeled.front().image.extent(); }
};

inline TrainingData make_training_data(const std::vector<VolumeRecord>& records, std::size_t K) {
  TrainingData d;
  d.classes = K;
  for (const auto& r : records) {
    if (r.split == Split::kUnlabeled) {
      d.unlabeled.push_back({r.id, r.image});
      continue;
    }
    if (!r.label) throw ConfigError("split", "volume " + r.id + " in split " + split_name(r.split) + " has no label");
    (r.split == Split::kLabeled ? d.labeled : d.test).push_back({r.id, r.image, *r.label});
  }
  return d;
}

// ---------------------------------------------------------------------------
// Volume file: magic line, JSON header line, little-endian float64 image, then
// uint8 label when present.

inline constexpr const char* kVolumeMagic = "SDCL-VOLUME";
inline constexpr int kVolumeVersion = 1;

inline void write_volume(std::ostream& os, const VolumeRecord& r, std::size_t K) {
  const Extent3 e = r.image.extent();
  nlohmann::json h;
  h["version"] = kVolumeVersion;
  h["id"] = r.id;
  h["split"] = split_name(r.split);
  h["shape"] = {e.w, e.h, e.d};
  h["classes"] = K;
  h["dtype"] = "float64-le";
  h["label_dtype"] = "uint8";
  h["has_label"] = r.label.has_value();
  os << kVolumeMagic << '\n' << h.dump() << '\n';
  detail::write_f64_le(os, r.image.data());
  if (r.label) {
    require_same_extent("write_volume", r.image, *r.label);
    os.write(reinterpret_cast<const char*>(r.label->data().data()), static_cast<std::streamsize>(r.label->size()));
  }
}

inline void write_volume(const std::string& path, const VolumeRecord& r, std::size_t K) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw Error("cannot open volume for writing: " + path);
  write_volume(os, r, K);
  if (!os) throw Error("failed writing volume: " + path);
}

struct LoadedVolume {
  VolumeRecord record;
  std::size_t classes = 2;
};

inline LoadedVolume read_volume(std::istream& is) {
  const auto bytes = detail::slurp(is);
  std::size_t pos = 0;
  const std::string magic = detail::take_line(bytes, pos, "volume");
  if (magic != kVolumeMagic) throw FormatError("volume: bad magic '" + magic + "'", 0);
  const std::size_t header_at = pos;
  nlohmann::json h;
  try {
    h = nlohmann::json::parse(detail::take_line(bytes, pos, "volume"));
  } catch (const nlohmann::json::exception& ex) {
    throw FormatError(std::string("volume: malformed header: ") + ex.what(), header_at);
  }
  LoadedVolume out;
  Extent3 e;
  bool has_label = false;
  try {
    const int version = h.at("version").get<int>();
    if (version != kVolumeVersion) throw FormatError("volume: unsupported version " + std::to_string(version), header_at);
    if (h.at("dtype").get<std::string>() != "float64-le") throw FormatError("volume: unsupported dtype", header_at);
    const auto shape = h.at("shape").get<std::vector<std::size_t>>();
    if (shape.size() != 3) throw FormatError("volume: shape must have three extents", header_at);
    e = {shape[0], shape[1], shape[2]};
    out.classes = h.at("classes").get<std::size_t>();
    has_label = h.at("has_label").get<bool>();
    out.record.id = h.at("id").get<std::string>();
    out.record.split = parse_split(h.at("split").get<std::string>());
  } catch (const nlohmann::json::exception& ex) {
    throw FormatError(std::string("volume: bad header field: ") + ex.what(), header_at);
  } catch (const ConfigError& ex) {
    throw FormatError(std::string("volume: ") + ex.what(), header_at);
  }
  const std::size_t expected = e.size() * 8 + (has_label ? e.size() : 0);
  const std::size_t actual = bytes.size() - pos;
  if (actual != expected) {
    throw FormatError("volume: expected " + std::to_string(expected) + " payload bytes, found " + std::to_string(actual),
                      std::min(bytes.size(), pos + expected));
  }
  out.record.image = Image(e);
  detail::decode_f64_le(bytes.data() + pos, out.record.image.data());
  pos += e.size() * 8;
  if (has_label) {
    LabelMap label(e);
    std::copy_n(bytes.data() + pos, e.size(), label.data().data());
    for (std::size_t v = 0; v < e.size(); ++v) {
      if (label[v] >= out.classes) {
        throw FormatError("volume: label value " + std::to_string(label[v]) + " >= K", pos + v);
      }
    }
    out.record.label = std::move(label);
  }
  return out;
}

inline LoadedVolume read_volume(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw Error("cannot open volume: " + path);
  return read_volume(is);
}

// ---------------------------------------------------------------------------
// Manifest: JSON index of ids, splits and relative paths.

inline nlohmann::json spec_to_json(const DatasetSpec& s) {
  return {{"n_labeled", s.n_labeled},
          {"n_unlabeled", s.n_unlabeled},
          {"n_test", s.n_test},
          {"shape", {s.shape.w, s.shape.h, s.shape.d}},
          {"classes", s.classes},
          {"min_blobs", s.min_blobs},
          {"max_blobs", s.max_blobs},
          {"min_radius", s.min_radius},
          {"max_radius", s.max_radius},
          {"background", s.background},
          {"contrast", s.contrast},
          {"intensity_jitter", s.intensity_jitter},
          {"noise_sigma", s.noise_sigma},
          {"edge_softness", s.edge_softness},
          {"clutter_blobs", s.clutter_blobs},
          {"clutter_contrast", s.clutter_contrast},
          {"min_foreground_fraction", s.min_foreground_fraction},
          {"max_foreground_fraction", s.max_foreground_fraction},
          {"seed", s.seed}};
}

/// Reads a spec from JSON, rejecting unknown keys; missing keys keep defaults.
inline DatasetSpec spec_from_json(const nlohmann::json& j, DatasetSpec s = {}) {
  if (!j.is_object()) throw ConfigError("dataset", "expected an object");
  const nlohmann::json known = spec_to_json(s);
  for (auto it = j.begin(); it != j.end(); ++it) {
    if (!known.contains(it.key())) throw ConfigError(it.key(), "unknown dataset key");
  }
  try {
    auto get = [&](const char* k, auto& dst) {
      if (j.contains(k)) dst = j.at(k).get<std::remove_reference_t<decltype(dst)>>();
    };
    get("n_labeled", s.n_labeled);
    get("n_unlabeled", s.n_unlabeled);
    get("n_test", s.n_test);
    if (j.contains("shape")) {
      const auto v = j.at("shape").get<std::vector<std::size_t>>();
      if (v.size() != 3) throw ConfigError("shape", "expected three extents");
      s.shape = {v[0], v[1], v[2]};
    }
    get("classes", s.classes);
    get("min_blobs", s.min_blobs);
    get("max_blobs", s.max_blobs);
    get("min_radius", s.min_radius);
    get("max_radius", s.max_radius);
    get("background", s.background);
    get("contrast", s.contrast);
    get("intensity_jitter", s.intensity_jitter);
    get("noise_sigma", s.noise_sigma);
    get("edge_softness", s.edge_softness);
    get("clutter_blobs", s.clutter_blobs);
    get("clutter_contrast", s.clutter_contrast);
    get("min_foreground_fraction", s.min_foreground_fraction);
    get("max_foreground_fraction", s.max_foreground_fraction);
    get("seed", s.seed);
  } catch (const nlohmann::json::exception& ex) {
    throw ConfigError("dataset", std::string("bad value: ") + ex.what());
  }
  return s;
}

inline constexpr const char* kManifestName = "manifest.json";

/// Writes every record plus manifest.json into `dir`.
inline void write_dataset(const std::string& dir, const DatasetSpec& spec, const std::vector<VolumeRecord>& records) {
  namespace fs = std::filesystem;
  fs::create_directories(dir);
  nlohmann::json m;
  m["format"] = "sdcl-dataset";
  m["version"] = 1;
  m["spec"] = spec_to_json(spec);
  m["volumes"] = nlohmann::json::array();
  for (const auto& r : records) {
    const std::string file = r.id + ".vol";
    write_volume((fs::path(dir) / file).string(), r, spec.classes);
    m["volumes"].push_back({{"id", r.id}, {"split", split_name(r.split)}, {"path", file}});
  }
  std::ofstream os(fs::path(dir) / kManifestName);
  os << m.dump(2) << '\n';
  if (!os) throw Error("failed writing manifest in " + dir);
}

struct Dataset {
  DatasetSpec spec;
  std::vector<VolumeRecord> records;
};

inline Dataset read_dataset(const std::string& dir) {
  namespace fs = std::filesystem;
  const fs::path mpath = fs::path(dir) / kManifestName;
  std::ifstream is(mpath);
  if (!is) throw Error("cannot open manifest: " + mpath.string());
  nlohmann::json m;
  try {
    m = nlohmann::json::parse(is);
  } catch (const nlohmann::json::parse_error& ex) {
    throw FormatError(std::string("manifest: ") + ex.what(), ex.byte);
  }
  Dataset d;
  d.spec = spec_from_json(m.at("spec"));
  for (const auto& v : m.at("volumes")) {
    auto loaded = read_volume((fs::path(dir) / v.at("path").get<std::string>()).string());
    if (loaded.record.id != v.at("id").get<std::string>()) {
      throw FormatError("manifest: id mismatch for " + v.at("path").get<std::string>(), 0);
    }
    d.records.push_back(std::move(loaded.record));
  }
  return d;
}

}  // namespace sdcl
