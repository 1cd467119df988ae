#pragma once

// Two tiny segmentation networks (plain and residual) plus the EMA teacher.
// Both variants have four conv layers in -> w -> w -> w -> K; the residual one
// adds identity skips around the two interior blocks.

#include <cmath>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "sdcl/detail/binary_io.hpp"
#include "sdcl/error.hpp"
#include "sdcl/rng.hpp"
#include "sdcl/tensor.hpp"

namespace sdcl {

enum class Arch { kPlain, kResidual };

inline const char* arch_name(Arch a) { return a == Arch::kPlain ? "plain" : "residual"; }

inline Arch parse_arch(const std::string& s) {
  if (s == "plain") return Arch::kPlain;
  if (s == "residual") return Arch::kResidual;
  throw ConfigError("arch", "unknown architecture '" + s + "'");
}

struct NetConfig {
  Arch arch = Arch::kPlain;
  std::size_t classes = 2;
  std::size_t in_channels = 1;
  std::size_t width = 8;
  std::size_t kernel_depth = 3;  // 1 for 2D slices

  bool operator==(const NetConfig&) const = default;
};

class SegNet {
 public:
  static constexpr std::size_t kLayers = 4;

  SegNet() = default;

  /// Fan-in scaled normal weights (He for hidden layers, LeCun for the
  /// output layer), zero biases. Deterministic in `seed`.
  static SegNet init(const NetConfig& cfg, std::uint64_t seed) {
    if (cfg.classes < 2) throw ConfigError("classes", "K must be at least 2");
    if (cfg.width == 0 || cfg.in_channels == 0) throw ConfigError("width", "channel widths must be positive");
    if (cfg.kernel_depth != 1 && cfg.kernel_depth != 3) throw ConfigError("kernel_depth", "must be 1 or 3");
    SegNet net;
    net.cfg_ = cfg;
    Rng rng(seed);
    const auto ladder = net.channel_ladder();
    for (std::size_t l = 0; l < kLayers; ++l) {
      const std::size_t ci = ladder[l], co = ladder[l + 1];
      const std::size_t fan_in = ci * 9 * cfg.kernel_depth;
      const double stddev = std::sqrt((l + 1 == kLayers ? 1.0 : 2.0) / static_cast<double>(fan_in));
      std::vector<double> w(co * fan_in);
      for (auto& v : w) v = normal(rng, 0.0, stddev);
      net.params_.push_back(Tensor::from_values({co, ci, 3, 3, cfg.kernel_depth}, std::move(w), true));
      net.params_.push_back(Tensor::zeros({co}, true));
    }
    return net;
  }

  const NetConfig& config() const { return cfg_; }
  Arch arch() const { return cfg_.arch; }
  std::size_t classes() const { return cfg_.classes; }

  /// in -> width -> width -> width -> K
  std::vector<std::size_t> channel_ladder() const {
    return {cfg_.in_channels, cfg_.width, cfg_.width, cfg_.width, cfg_.classes};
  }

  /// Parameters in checkpoint order: w0, b0, w1, b1, ...
  std::vector<Tensor>& parameters() { return params_; }
  const std::vector<Tensor>& parameters() const { return params_; }

  std::size_t parameter_count() const {
    std::size_t n = 0;
    for (const auto& p : params_) n += p.numel();
    return n;
  }

  void reset_grads() {
    for (auto& p : params_) p.reset_grad();
  }

  /// Channel-softmaxed class probabilities, shape (B, K, W, H, D).
  Tensor forward(const Tensor& x) const {
    if (x.rank() != 5 || x.dim(1) != cfg_.in_channels) {
      throw ShapeError("forward", "expected input (B, " + std::to_string(cfg_.in_channels) + ", W, H, D), got " +
                                      to_string(x.shape()));
    }
    if (cfg_.kernel_depth == 1 && x.dim(4) != 1) {
      throw ShapeError("forward", "2D network applied to input with depth " + std::to_string(x.dim(4)));
    }
    Tensor h = conv3d_relu(x, params_[0], params_[1]);
    for (std::size_t l = 1; l + 1 < kLayers; ++l) {
      Tensor next = conv3d_relu(h, params_[2 * l], params_[2 * l + 1]);
      h = cfg_.arch == Arch::kResidual ? add(next, h) : next;
    }
    return softmax_channels(conv3d(h, params_[2 * kLayers - 2], params_[2 * kLayers - 1]));
  }

 private:

  NetConfig cfg_;
  std::vector<Tensor> params_;
};

/// Non-trainable exponential moving average of a student's parameters.
class TeacherNet {
 public:
  TeacherNet() = default;

  /// Copies the student's parameters into gradient-free leaves.
  static TeacherNet from_student(const SegNet& student) {
    TeacherNet t;
    t.net_ = SegNet::init(student.config(), 0);
    for (std::size_t i = 0; i < student.parameters().size(); ++i) {
      t.net_.parameters()[i] = student.parameters()[i].clone(false);
    }
    return t;
  }

  const SegNet& net() const { return net_; }
  SegNet& net() { return net_; }

  /// Forward without recording a tape.
  Tensor forward(const Tensor& x) const {
    NoGradGuard guard;
    return net_.forward(x);
  }

 private:
  SegNet net_;
};

/// theta_t <- m * theta_t + (1 - m) * theta_s for every parameter.
inline void ema_update(TeacherNet& teacher, const SegNet& student, double m) {
  if (!(m > 0.0 && m < 1.0)) throw ConfigError("ema_momentum", "must lie in (0, 1)");
  if (!(teacher.net().config() == student.config())) {
    throw ShapeError("ema_update", "teacher does not mirror the student's architecture");
  }
  const double keep = m;
  const double take = 1.0 - m;
  auto& tp = teacher.net().parameters();
  for (std::size_t i = 0; i < tp.size(); ++i) {
    auto t = tp[i].mutable_values();
    auto s = student.parameters()[i].values();
    if (t.size() != s.size()) throw ShapeError("ema_update", "parameter " + std::to_string(i) + " size mismatch");
    for (std::size_t k = 0; k < t.size(); ++k) t[k] = keep * t[k] + take * s[k];
  }
}

// ---------------------------------------------------------------------------
// Checkpoints: a magic line, a JSON header line, then little-endian float64
// parameters in layer order.

inline constexpr const char* kCheckpointMagic = "SDCL-CHECKPOINT";
inline constexpr int kCheckpointVersion = 1;

struct Checkpoint {
  SegNet net;
  std::uint64_t iteration = 0;
};

inline void write_checkpoint(std::ostream& os, const SegNet& net, std::uint64_t iteration) {
  nlohmann::json header;
  header["version"] = kCheckpointVersion;
  header["arch"] = arch_name(net.arch());
  header["classes"] = net.classes();
  header["in_channels"] = net.config().in_channels;
  header["width"] = net.config().width;
  header["kernel_depth"] = net.config().kernel_depth;
  header["widths"] = net.channel_ladder();
  header["iteration"] = iteration;
  header["parameter_count"] = net.parameter_count();
  os << kCheckpointMagic << '\n' << header.dump() << '\n';
  for (const auto& p : net.parameters()) detail::write_f64_le(os, p.values());
}

inline void save_checkpoint(const std::string& path, const SegNet& net, std::uint64_t iteration) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw Error("cannot open checkpoint for writing: " + path);
  write_checkpoint(os, net, iteration);
  if (!os) throw Error("failed writing checkpoint: " + path);
}

inline Checkpoint read_checkpoint(std::istream& is) {
  const auto bytes = detail::slurp(is);
  std::size_t pos = 0;
  const std::string magic = detail::take_line(bytes, pos, "checkpoint");
  if (magic != kCheckpointMagic) throw FormatError("checkpoint: bad magic '" + magic + "'", 0);
  const std::size_t header_at = pos;
  nlohmann::json header;
  try {
    header = nlohmann::json::parse(detail::take_line(bytes, pos, "checkpoint"));
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("checkpoint: malformed header: ") + e.what(), header_at);
  }
  Checkpoint ck;
  try {
    if (header.at("version").get<int>() != kCheckpointVersion) {
      throw FormatError("checkpoint: unsupported version " + header.at("version").dump(), header_at);
    }
    NetConfig cfg;
    cfg.arch = parse_arch(header.at("arch").get<std::string>());
    cfg.classes = header.at("classes").get<std::size_t>();
    cfg.in_channels = header.at("in_channels").get<std::size_t>();
    cfg.width = header.at("width").get<std::size_t>();
    cfg.kernel_depth = header.at("kernel_depth").get<std::size_t>();
    ck.net = SegNet::init(cfg, 0);
    ck.iteration = header.at("iteration").get<std::uint64_t>();
    if (header.at("parameter_count").get<std::size_t>() != ck.net.parameter_count()) {
      throw FormatError("checkpoint: parameter_count disagrees with the architecture", header_at);
    }
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("checkpoint: bad header field: ") + e.what(), header_at);
  }
  const std::size_t expected = ck.net.parameter_count() * 8;
  if (bytes.size() - pos != expected) {
    throw FormatError("checkpoint: expected " + std::to_string(expected) + " payload bytes, found " +
                          std::to_string(bytes.size() - pos),
                      bytes.size() < pos + expected ? bytes.size() : pos + expected);
  }
  for (auto& p : ck.net.parameters()) {
    detail::decode_f64_le(bytes.data() + pos, p.mutable_values());
    pos += p.numel() * 8;
  }
  return ck;
}

inline Checkpoint load_checkpoint(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw Error("cannot open checkpoint: " + path);
  return read_checkpoint(is);
}

/// Bitwise parameter equality.
inline bool same_parameters(const SegNet& a, const SegNet& b) {
  if (!(a.config() == b.config())) return false;
  for (std::size_t i = 0; i < a.parameters().size(); ++i) {
    auto x = a.parameters()[i].values();
    auto y = b.parameters()[i].values();
    if (std::memcmp(x.data(), y.data(), x.size() * sizeof(double)) != 0) return false;
  }
  return true;
}

}  // namespace sdcl
