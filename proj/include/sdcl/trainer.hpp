#pragma once

// Two-phase training: copy-paste pretraining on labeled volumes, then the
// dual-student semi-supervised phase with an EMA teacher.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <functional>
#include <numeric>
#include <optional>
#include <ostream>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#if defined(__GLIBC__)
#include <malloc.h>
#endif

#include "sdcl/detail/binary_io.hpp"
#include "sdcl/error.hpp"
#include "sdcl/losses.hpp"
#include "sdcl/maskops.hpp"
#include "sdcl/metrics.hpp"
#include "sdcl/mixing.hpp"
#include "sdcl/nets.hpp"
#include "sdcl/optim.hpp"
#include "sdcl/rng.hpp"
#include "sdcl/synthdata.hpp"

namespace sdcl {

struct TrainConfig {
  double alpha = 0.5;
  double beta = 2.0 / 3.0;
  double gamma = 0.3;
  double mu = 0.1;
  double learning_rate = 1e-3;
  double ema_momentum = 0.99;
  std::uint64_t pretrain_iters = 300;
  std::uint64_t ssl_iters = 1500;
  std::size_t batch_size = 4;
  std::size_t classes = 2;
  std::uint64_t seed = 0;
  MaskMode mask_mode = MaskMode::kRandom;
  std::uint64_t log_every = 100;
  std::size_t width = 8;
  bool use_diff_gate = true;  // false replaces M_diff by all ones (ablation)

  bool operator==(const TrainConfig&) const = default;
};

inline void validate(const TrainConfig& c) {
  if (c.batch_size < 4 || c.batch_size % 2 != 0) {
    throw ConfigError("batch_size", "must be even and at least 4 (half labeled, half unlabeled)");
  }
  if (!(c.beta > 0.0 && c.beta < 1.0)) throw ConfigError("beta", "must lie in (0, 1)");
  if (!(c.ema_momentum > 0.0 && c.ema_momentum < 1.0)) throw ConfigError("ema_momentum", "must lie in (0, 1)");
  if (c.alpha < 0.0) throw ConfigError("alpha", "must be non-negative");
  if (c.gamma < 0.0) throw ConfigError("gamma", "must be non-negative");
  if (c.mu < 0.0) throw ConfigError("mu", "must be non-negative");
  if (!(c.learning_rate > 0.0)) throw ConfigError("learning_rate", "must be positive");
  if (c.classes < 2) throw ConfigError("classes", "K must be at least 2");
  if (c.log_every == 0) throw ConfigError("log_every", "must be positive");
  if (c.width == 0) throw ConfigError("width", "must be positive");
}

inline nlohmann::json to_json(const TrainConfig& c) {
  return {{"alpha", c.alpha},
          {"beta", c.beta},
          {"gamma", c.gamma},
          {"mu", c.mu},
          {"learning_rate", c.learning_rate},
          {"ema_momentum", c.ema_momentum},
          {"pretrain_iters", c.pretrain_iters},
          {"ssl_iters", c.ssl_iters},
          {"batch_size", c.batch_size},
          {"classes", c.classes},
          {"seed", c.seed},
          {"mask_mode", mask_mode_name(c.mask_mode)},
          {"log_every", c.log_every},
          {"width", c.width},
          {"use_diff_gate", c.use_diff_gate}};
}

/// Overlays the keys of `j` onto `base`. Unknown keys and ill-typed values
/// raise ConfigError naming the key.
inline TrainConfig config_from_json(const nlohmann::json& j, TrainConfig c = {}) {
  if (!j.is_object()) throw ConfigError("config", "expected a JSON object");
  const nlohmann::json known = to_json(c);
  for (auto it = j.begin(); it != j.end(); ++it) {
    const std::string& key = it.key();
    if (!known.contains(key)) throw ConfigError(key, "unknown configuration key");
    try {
      const auto& v = it.value();
      if (key == "alpha") c.alpha = v.get<double>();
      else if (key == "beta") c.beta = v.get<double>();
      else if (key == "gamma") c.gamma = v.get<double>();
      else if (key == "mu") c.mu = v.get<double>();
      else if (key == "learning_rate") c.learning_rate = v.get<double>();
      else if (key == "ema_momentum") c.ema_momentum = v.get<double>();
      else if (key == "pretrain_iters") c.pretrain_iters = v.get<std::uint64_t>();
      else if (key == "ssl_iters") c.ssl_iters = v.get<std::uint64_t>();
      else if (key == "batch_size") c.batch_size = v.get<std::size_t>();
      else if (key == "classes") c.classes = v.get<std::size_t>();
      else if (key == "seed") c.seed = v.get<std::uint64_t>();
      else if (key == "mask_mode") c.mask_mode = parse_mask_mode(v.get<std::string>());
      else if (key == "log_every") c.log_every = v.get<std::uint64_t>();
      else if (key == "width") c.width = v.get<std::size_t>();
      else if (key == "use_diff_gate") c.use_diff_gate = v.get<bool>();
    } catch (const nlohmann::json::exception& e) {
      throw ConfigError(key, std::string("bad value: ") + e.what());
    }
  }
  return c;
}

/// 64-bit FNV-1a of a string, as 16 hex digits.
inline std::string fnv1a_hex(const std::string& s) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char ch : s) {
    h ^= ch;
    h *= 0x100000001b3ULL;
  }
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

inline std::string run_id(const TrainConfig& c) { return fnv1a_hex(to_json(c).dump()); }

namespace detail {

/// Keeps freed activation buffers in the heap instead of returning them to
/// the OS; re-faulting fresh pages dominates small-net step time otherwise.
inline void tune_allocator() {
#if defined(__GLIBC__)
  static const bool done = [] {
    mallopt(M_MMAP_THRESHOLD, 32 * 1024 * 1024);
    mallopt(M_TRIM_THRESHOLD, 1 << 30);
    return true;
  }();
  (void)done;
#endif
}

inline NetConfig net_config(const TrainConfig& c, Arch arch, const Extent3& e) {
  NetConfig n;
  n.arch = arch;
  n.classes = c.classes;
  n.width = c.width;
  n.kernel_depth = e.d == 1 ? 1 : 3;
  return n;
}

/// `count` distinct indices in [0, n), in draw order.
inline std::vector<std::size_t> sample_distinct(std::size_t n, std::size_t count, Rng& rng) {
  if (count > n) throw ConfigError("batch_size", "batch needs more distinct volumes than available");
  std::vector<std::size_t> idx(n);
  std::iota(idx.begin(), idx.end(), 0);
  for (std::size_t k = 0; k < count; ++k) std::swap(idx[k], idx[k + uniform_index(rng, n - k)]);
  idx.resize(count);
  return idx;
}

inline void require_finite_loss(double v, std::uint64_t iteration, const char* student, const char* term,
                                std::size_t diff_voxels, std::size_t differr_voxels) {
  if (!std::isfinite(v)) {
    throw NumericError("non-finite loss at iteration " + std::to_string(iteration) + ", student " + student +
                       ", term " + term + " (|M_diff|=" + std::to_string(diff_voxels) +
                       ", |M_differr|=" + std::to_string(differr_voxels) + ")");
  }
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Pretraining

struct PretrainResult {
  SegNet student_a, student_b;
};

/// One copy-paste step on labeled data only (alpha = 1 in both directions).
inline double pretrain_step(SegNet& net, Adam& opt, const TrainConfig& cfg, const TrainingData& data, Rng& rng) {
  const std::size_t half = cfg.batch_size / 2;
  const auto l = detail::sample_distinct(data.labeled.size(), half, rng);
  const auto u = detail::sample_distinct(data.labeled.size(), half, rng);
  const auto pairs = pair_batch(half, half, rng);
  const BinaryMask mask = gen_copy_paste_mask(data.extent(), cfg.beta, rng, cfg.mask_mode);
  std::vector<Image> xs;
  std::vector<LabelMap> y_in, y_out;
  std::vector<Image> x_out;
  for (const auto& pr : pairs) {
    const auto& lj = data.labeled[l[pr.j]];
    const auto& li = data.labeled[l[pr.i]];
    const auto& up = data.labeled[u[pr.p]];
    const auto& uq = data.labeled[u[pr.q]];
    auto [xi, xo] = mix_images(lj.image, up.image, uq.image, li.image, mask);
    auto [yi, yo] = mix_labels(lj.label, up.label, uq.label, li.label, mask);
    xs.push_back(std::move(xi));
    x_out.push_back(std::move(xo));
    y_in.push_back(std::move(yi));
    y_out.push_back(std::move(yo));
  }
  const std::size_t P = pairs.size();
  std::vector<const Image*> batch;
  for (const auto& x : xs) batch.push_back(&x);
  for (const auto& x : x_out) batch.push_back(&x);
  std::vector<const LabelMap*> yin, yout;
  for (const auto& y : y_in) yin.push_back(&y);
  for (const auto& y : y_out) yout.push_back(&y);

  const Tensor probs = net.forward(stack_images(batch));
  const Tensor loss = add(bcp_seg_loss(slice_batch(probs, 0, P), yin, mask, 1.0, Direction::kIn),
                          bcp_seg_loss(slice_batch(probs, P, P), yout, mask, 1.0, Direction::kOut));
  const double value = loss.item();
  if (!std::isfinite(value)) throw NumericError("non-finite pretraining loss");
  backward(loss);
  opt.step(net.parameters());
  net.reset_grads();
  return value;
}

inline SegNet pretrain_one(Arch arch, const TrainConfig& cfg, const TrainingData& data,
                           const std::function<void(std::uint64_t, double)>& on_step = {}) {
  const std::uint64_t stream = arch == Arch::kPlain ? 1 : 2;
  SegNet net = SegNet::init(detail::net_config(cfg, arch, data.extent()), mix_seed(cfg.seed, stream));
  Adam opt(net.parameters(), AdamConfig{cfg.learning_rate});
  Rng rng(mix_seed(cfg.seed, 10 + stream));
  for (std::uint64_t it = 0; it < cfg.pretrain_iters; ++it) {
    const double loss = pretrain_step(net, opt, cfg, data, rng);
    if (on_step) on_step(it, loss);
  }
  return net;
}

/// Trains the plain and residual architectures independently.
inline PretrainResult pretrain(const TrainConfig& cfg, const TrainingData& data,
                               const std::function<void(Arch, std::uint64_t, double)>& on_step = {}) {
  validate(cfg);
  detail::tune_allocator();
  if (data.labeled.size() < 2) throw ConfigError("n_labeled", "pretraining needs at least 2 labeled volumes");
  if (data.classes != cfg.classes) throw ConfigError("classes", "config K differs from the dataset's K");
  auto cb = [&](Arch a) {
    return on_step ? std::function<void(std::uint64_t, double)>([&, a](std::uint64_t i, double l) { on_step(a, i, l); })
                   : std::function<void(std::uint64_t, double)>();
  };
  PretrainResult r;
  r.student_a = pretrain_one(Arch::kPlain, cfg, data, cb(Arch::kPlain));
  r.student_b = pretrain_one(Arch::kResidual, cfg, data, cb(Arch::kResidual));
  return r;
}

// ---------------------------------------------------------------------------
// Semi-supervised phase

struct TrainState {
  SegNet student_a, student_b;
  TeacherNet teacher;
  Adam opt_a, opt_b;
  std::uint64_t iteration = 0;
  Rng rng;
};

/// Teacher starts as a copy of student A; the data stream is seeded from cfg.seed.
inline TrainState init_state(const TrainConfig& cfg, const SegNet& a, const SegNet& b) {
  TrainState s;
  s.student_a = SegNet::init(a.config(), 0);
  s.student_b = SegNet::init(b.config(), 0);
  for (std::size_t i = 0; i < a.parameters().size(); ++i) {
    s.student_a.parameters()[i] = a.parameters()[i].clone(true);
  }
  for (std::size_t i = 0; i < b.parameters().size(); ++i) {
    s.student_b.parameters()[i] = b.parameters()[i].clone(true);
  }
  s.teacher = TeacherNet::from_student(s.student_a);
  s.opt_a = Adam(s.student_a.parameters(), AdamConfig{cfg.learning_rate});
  s.opt_b = Adam(s.student_b.parameters(), AdamConfig{cfg.learning_rate});
  s.rng = Rng(mix_seed(cfg.seed, 100));
  return s;
}

/// Everything one step feeds to the students.
struct MixedBatch {
  std::size_t pairs = 0;
  BinaryMask mask;
  std::vector<Image> x_in, x_out;
  std::vector<LabelMap> y_in, y_out;
  std::vector<LabelMap> pseudo_raw, pseudo;  // teacher argmax and its LCC refinement, per unlabeled item
  std::vector<PairIndices> indices;
  std::vector<std::size_t> labeled_ids, unlabeled_ids;

  /// x_in samples followed by x_out samples.
  Tensor inputs() const {
    std::vector<const Image*> b;
    for (const auto& x : x_in) b.push_back(&x);
    for (const auto& x : x_out) b.push_back(&x);
    return stack_images(b);
  }
};

/// Samples the batch, pseudo-labels the unlabeled half with the teacher
/// (argmax then LCC), draws the mask and mixes images and labels.
inline MixedBatch prepare_batch(TrainState& s, const TrainConfig& cfg, const TrainingData& data) {
  const std::size_t half = cfg.batch_size / 2;
  MixedBatch mb;
  mb.labeled_ids = detail::sample_distinct(data.labeled.size(), half, s.rng);
  mb.unlabeled_ids = detail::sample_distinct(data.unlabeled.size(), half, s.rng);
  mb.indices = pair_batch(half, half, s.rng);
  mb.pairs = mb.indices.size();

  std::vector<const Image*> u;
  for (std::size_t k : mb.unlabeled_ids) u.push_back(&data.unlabeled[k].image);
  const Tensor teacher_probs = s.teacher.forward(stack_images(u));
  for (std::size_t k = 0; k < u.size(); ++k) {
    mb.pseudo_raw.push_back(argmax_channels(teacher_probs, k));
    mb.pseudo.push_back(largest_connected_component(mb.pseudo_raw.back(), cfg.classes));
  }

  mb.mask = gen_copy_paste_mask(data.extent(), cfg.beta, s.rng, cfg.mask_mode);
  for (const auto& pr : mb.indices) {
    const auto& lj = data.labeled[mb.labeled_ids[pr.j]];
    const auto& li = data.labeled[mb.labeled_ids[pr.i]];
    const auto& up = data.unlabeled[mb.unlabeled_ids[pr.p]];
    const auto& uq = data.unlabeled[mb.unlabeled_ids[pr.q]];
    auto [xi, xo] = mix_images(lj.image, up.image, uq.image, li.image, mb.mask);
    auto [yi, yo] = mix_labels(lj.label, mb.pseudo[pr.p], mb.pseudo[pr.q], li.label, mb.mask);
    mb.x_in.push_back(std::move(xi));
    mb.x_out.push_back(std::move(xo));
    mb.y_in.push_back(std::move(yi));
    mb.y_out.push_back(std::move(yo));
  }
  return mb;
}

struct StudentTerms {
  double seg_in = 0, seg_out = 0, mse_in = 0, mse_out = 0, kl_in = 0, kl_out = 0, total = 0;
};

/// Masks derived from the students' hard predictions, one entry per sample
/// (x_in samples first, then x_out).
struct StepMasks {
  std::vector<LabelMap> pred_a, pred_b;
  std::vector<BinaryMask> diff, err_a, err_b, differr_a, differr_b;
};

struct StepRecord {
  std::uint64_t iteration = 0;
  StudentTerms a, b;
  std::size_t diff_voxels = 0;
  std::size_t differr_voxels_a = 0, differr_voxels_b = 0;
};

struct StepOutput {
  StepRecord record;
  MixedBatch batch;
  StepMasks masks;
};

namespace detail {

inline std::vector<const LabelMap*> ptrs(const std::vector<LabelMap>& v, std::size_t begin, std::size_t n) {
  std::vector<const LabelMap*> out;
  for (std::size_t k = begin; k < begin + n; ++k) out.push_back(&v[k]);
  return out;
}

inline std::vector<const BinaryMask*> ptrs(const std::vector<BinaryMask>& v, std::size_t begin, std::size_t n) {
  std::vector<const BinaryMask*> out;
  for (std::size_t k = begin; k < begin + n; ++k) out.push_back(&v[k]);
  return out;
}

/// Builds the six loss terms of one student.
inline LossTerms student_terms(const Tensor& probs, const MixedBatch& mb, const std::vector<BinaryMask>& diff,
                               const std::vector<BinaryMask>& differr, double alpha) {
  const std::size_t P = mb.pairs;
  const Tensor pin = slice_batch(probs, 0, P);
  const Tensor pout = slice_batch(probs, P, P);
  const auto yin = ptrs(mb.y_in, 0, P);
  const auto yout = ptrs(mb.y_out, 0, P);
  LossTerms t;
  t.seg_in = bcp_seg_loss(pin, yin, mb.mask, alpha, Direction::kIn);
  t.seg_out = bcp_seg_loss(pout, yout, mb.mask, alpha, Direction::kOut);
  t.mse_in = masked_mse_loss(pin, yin, mb.mask, ptrs(diff, 0, P), alpha, Direction::kIn);
  t.mse_out = masked_mse_loss(pout, yout, mb.mask, ptrs(diff, P, P), alpha, Direction::kOut);
  t.kl_in = masked_kl_uniform_loss(pin, mb.mask, ptrs(differr, 0, P), alpha, Direction::kIn);
  t.kl_out = masked_kl_uniform_loss(pout, mb.mask, ptrs(differr, P, P), alpha, Direction::kOut);
  return t;
}

inline StudentTerms values_of(const LossTerms& t, const Tensor& total) {
  return {t.seg_in.item(), t.seg_out.item(), t.mse_in.item(), t.mse_out.item(),
          t.kl_in.item(),  t.kl_out.item(),  total.item()};
}

}  // namespace detail

/// Hard predictions and the discrepancy/error masks for both students.
inline StepMasks compute_masks(const Tensor& probs_a, const Tensor& probs_b, const MixedBatch& mb,
                               bool use_diff_gate) {
  StepMasks m;
  const std::size_t n = 2 * mb.pairs;
  for (std::size_t k = 0; k < n; ++k) {
    const LabelMap& y = k < mb.pairs ? mb.y_in[k] : mb.y_out[k - mb.pairs];
    m.pred_a.push_back(argmax_channels(probs_a, k));
    m.pred_b.push_back(argmax_channels(probs_b, k));
    m.diff.push_back(use_diff_gate ? diff_mask(m.pred_a[k], m.pred_b[k]) : BinaryMask(y.extent(), 1));
    m.err_a.push_back(err_mask(m.pred_a[k], y));
    m.err_b.push_back(err_mask(m.pred_b[k], y));
    m.differr_a.push_back(differr_mask(m.diff[k], m.err_a[k]));
    m.differr_b.push_back(differr_mask(m.diff[k], m.err_b[k]));
  }
  return m;
}

/// One semi-supervised iteration. With dry_run the students, optimizers and
/// teacher are left untouched (used for mask inspection).
inline StepOutput ssl_step(TrainState& s, const TrainConfig& cfg, const TrainingData& data, bool dry_run = false) {
  StepOutput out;
  out.batch = prepare_batch(s, cfg, data);
  const MixedBatch& mb = out.batch;
  const Tensor x = mb.inputs();
  const Tensor probs_a = s.student_a.forward(x);
  const Tensor probs_b = s.student_b.forward(x);
  out.masks = compute_masks(probs_a, probs_b, mb, cfg.use_diff_gate);
  const StepMasks& m = out.masks;

  auto& rec = out.record;
  rec.iteration = s.iteration;
  for (std::size_t k = 0; k < m.diff.size(); ++k) {
    rec.diff_voxels += count_ones(m.diff[k]);
    rec.differr_voxels_a += count_ones(m.differr_a[k]);
    rec.differr_voxels_b += count_ones(m.differr_b[k]);
  }

  const LossTerms ta = detail::student_terms(probs_a, mb, m.diff, m.differr_a, cfg.alpha);
  const LossTerms tb = detail::student_terms(probs_b, mb, m.diff, m.differr_b, cfg.alpha);
  const Tensor total_a = total_loss(ta, cfg.gamma, cfg.mu);
  const Tensor total_b = total_loss(tb, cfg.gamma, cfg.mu);
  rec.a = detail::values_of(ta, total_a);
  rec.b = detail::values_of(tb, total_b);
  for (const auto* st : {&rec.a, &rec.b}) {
    const char* name = st == &rec.a ? "A" : "B";
    const std::size_t de = st == &rec.a ? rec.differr_voxels_a : rec.differr_voxels_b;
    const std::pair<const char*, double> terms[] = {{"seg_in", st->seg_in}, {"seg_out", st->seg_out},
                                                    {"mse_in", st->mse_in}, {"mse_out", st->mse_out},
                                                    {"kl_in", st->kl_in},   {"kl_out", st->kl_out},
                                                    {"total", st->total}};
    for (const auto& [term, v] : terms) detail::require_finite_loss(v, s.iteration, name, term, rec.diff_voxels, de);
  }
  if (dry_run) return out;

  backward(total_a);
  s.opt_a.step(s.student_a.parameters());
  s.student_a.reset_grads();
  backward(total_b);
  s.opt_b.step(s.student_b.parameters());
  s.student_b.reset_grads();
  ema_update(s.teacher, s.student_a, cfg.ema_momentum);
  ++s.iteration;
  return out;
}

/// Reference step of the copy-paste baseline: identical sampling, teacher
/// pseudo-labels, mask and mixing, but only the two segmentation terms.
inline StepRecord bcp_step(TrainState& s, const TrainConfig& cfg, const TrainingData& data) {
  const MixedBatch mb = prepare_batch(s, cfg, data);
  const Tensor x = mb.inputs();
  const std::size_t P = mb.pairs;
  StepRecord rec;
  rec.iteration = s.iteration;
  for (auto [net, opt, terms] : {std::tuple{&s.student_a, &s.opt_a, &rec.a}, std::tuple{&s.student_b, &s.opt_b, &rec.b}}) {
    const Tensor probs = net->forward(x);
    const Tensor seg_in = bcp_seg_loss(slice_batch(probs, 0, P), detail::ptrs(mb.y_in, 0, P), mb.mask, cfg.alpha,
                                       Direction::kIn);
    const Tensor seg_out = bcp_seg_loss(slice_batch(probs, P, P), detail::ptrs(mb.y_out, 0, P), mb.mask, cfg.alpha,
                                        Direction::kOut);
    const Tensor total = add(seg_in, seg_out);
    terms->seg_in = seg_in.item();
    terms->seg_out = seg_out.item();
    terms->total = total.item();
    backward(total);
    opt->step(net->parameters());
    net->reset_grads();
  }
  ema_update(s.teacher, s.student_a, cfg.ema_momentum);
  ++s.iteration;
  return rec;
}

// ---------------------------------------------------------------------------
// Evaluation and logging

/// Mean metrics over a labeled split using the averaged students.
inline MetricsReport evaluate_split(const SegNet& a, const SegNet& b, const std::vector<LabeledVolume>& vols,
                                    std::size_t K) {
  std::vector<MetricsReport> reports;
  for (const auto& v : vols) reports.push_back(evaluate_prediction(evaluate_students(a, b, v.image), v.label, K));
  return average_reports(reports);
}

inline void write_loss_header(std::ostream& os) {
  os << "iteration,student,seg_in,seg_out,mse_in,mse_out,kl_in,kl_out,total,diff_voxels,differr_voxels\n";
}

inline void write_loss_rows(std::ostream& os, const StepRecord& r) {
  char buf[512];
  for (int k = 0; k < 2; ++k) {
    const StudentTerms& t = k == 0 ? r.a : r.b;
    std::snprintf(buf, sizeof buf, "%llu,%s,%.17g,%.17g,%.17g,%.17g,%.17g,%.17g,%.17g,%zu,%zu\n",
                  static_cast<unsigned long long>(r.iteration), k == 0 ? "A" : "B", t.seg_in, t.seg_out, t.mse_in,
                  t.mse_out, t.kl_in, t.kl_out, t.total, r.diff_voxels,
                  k == 0 ? r.differr_voxels_a : r.differr_voxels_b);
    os << buf;
  }
}

// ---------------------------------------------------------------------------
// Persistence: a state directory holding the three nets (checkpoint format),
// optimizer sidecars and a JSON file with the iteration and rng state.

inline constexpr const char* kOptimMagic = "SDCL-OPTIM";

inline void save_optimizer(const std::string& path, const Adam& opt) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw Error("cannot open optimizer state for writing: " + path);
  nlohmann::json h;
  h["version"] = 1;
  h["steps"] = opt.steps();
  std::vector<std::size_t> sizes;
  for (const auto& m : opt.first_moments()) sizes.push_back(m.size());
  h["sizes"] = sizes;
  os << kOptimMagic << '\n' << h.dump() << '\n';
  for (const auto& m : opt.first_moments()) detail::write_f64_le(os, m);
  for (const auto& v : opt.second_moments()) detail::write_f64_le(os, v);
  if (!os) throw Error("failed writing optimizer state: " + path);
}

inline void load_optimizer(const std::string& path, Adam& opt) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw Error("cannot open optimizer state: " + path);
  const auto bytes = detail::slurp(is);
  std::size_t pos = 0;
  if (detail::take_line(bytes, pos, "optimizer") != kOptimMagic) throw FormatError("optimizer: bad magic", 0);
  const std::size_t header_at = pos;
  nlohmann::json h;
  std::vector<std::size_t> sizes;
  std::uint64_t steps = 0;
  try {
    h = nlohmann::json::parse(detail::take_line(bytes, pos, "optimizer"));
    if (h.at("version").get<int>() != 1) throw FormatError("optimizer: unsupported version", header_at);
    sizes = h.at("sizes").get<std::vector<std::size_t>>();
    steps = h.at("steps").get<std::uint64_t>();
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("optimizer: bad header: ") + e.what(), header_at);
  }
  const std::size_t total = std::accumulate(sizes.begin(), sizes.end(), std::size_t{0});
  if (bytes.size() - pos != 2 * total * 8) {
    throw FormatError("optimizer: expected " + std::to_string(2 * total * 8) + " payload bytes, found " +
                          std::to_string(bytes.size() - pos),
                      pos);
  }
  std::vector<std::vector<double>> m, v;
  for (auto n : sizes) {
    m.emplace_back(n);
    detail::decode_f64_le(bytes.data() + pos, m.back());
    pos += n * 8;
  }
  for (auto n : sizes) {
    v.emplace_back(n);
    detail::decode_f64_le(bytes.data() + pos, v.back());
    pos += n * 8;
  }
  opt.restore(steps, std::move(m), std::move(v));
}

inline void save_state(const std::string& dir, const TrainState& s) {
  namespace fs = std::filesystem;
  fs::create_directories(dir);
  save_checkpoint((fs::path(dir) / "student_a.ckpt").string(), s.student_a, s.iteration);
  save_checkpoint((fs::path(dir) / "student_b.ckpt").string(), s.student_b, s.iteration);
  save_checkpoint((fs::path(dir) / "teacher.ckpt").string(), s.teacher.net(), s.iteration);
  save_optimizer((fs::path(dir) / "optim_a.bin").string(), s.opt_a);
  save_optimizer((fs::path(dir) / "optim_b.bin").string(), s.opt_b);
  nlohmann::json j;
  j["iteration"] = s.iteration;
  j["rng"] = rng_state(s.rng);
  std::ofstream os(fs::path(dir) / "state.json");
  os << j.dump(2) << '\n';
  if (!os) throw Error("failed writing state in " + dir);
}

inline TrainState load_state(const std::string& dir, const TrainConfig& cfg) {
  namespace fs = std::filesystem;
  for (const char* f : {"student_a.ckpt", "student_b.ckpt", "teacher.ckpt", "optim_a.bin", "optim_b.bin", "state.json"}) {
    if (!fs::exists(fs::path(dir) / f)) throw Error("missing state file: " + (fs::path(dir) / f).string());
  }
  TrainState s;
  const auto a = load_checkpoint((fs::path(dir) / "student_a.ckpt").string());
  const auto b = load_checkpoint((fs::path(dir) / "student_b.ckpt").string());
  const auto t = load_checkpoint((fs::path(dir) / "teacher.ckpt").string());
  s = init_state(cfg, a.net, b.net);
  for (std::size_t i = 0; i < t.net.parameters().size(); ++i) {
    s.teacher.net().parameters()[i] = t.net.parameters()[i].clone(false);
  }
  load_optimizer((fs::path(dir) / "optim_a.bin").string(), s.opt_a);
  load_optimizer((fs::path(dir) / "optim_b.bin").string(), s.opt_b);
  std::ifstream is(fs::path(dir) / "state.json");
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(is);
    s.iteration = j.at("iteration").get<std::uint64_t>();
    restore_rng_state(s.rng, j.at("rng").get<std::string>());
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("state.json: ") + e.what(), 0);
  }
  return s;
}

// ---------------------------------------------------------------------------
// Full semi-supervised run

struct SslOptions {
  std::ostream* loss_csv = nullptr;     // one row per student per step
  std::ostream* metrics_csv = nullptr;  // test metrics every log_every steps
  std::uint64_t stop_after = 0;         // stop early at this iteration (0: run to ssl_iters)
  std::function<void(const StepRecord&)> on_step;
};

/// Runs SSL iterations from s.iteration up to cfg.ssl_iters (or stop_after).
inline void train_ssl(TrainState& s, const TrainConfig& cfg, const TrainingData& data, const SslOptions& opt = {}) {
  validate(cfg);
  detail::tune_allocator();
  if (data.classes != cfg.classes) throw ConfigError("classes", "config K differs from the dataset's K");
  const std::uint64_t end = opt.stop_after ? std::min(opt.stop_after, cfg.ssl_iters) : cfg.ssl_iters;
  while (s.iteration < end) {
    const StepOutput step = ssl_step(s, cfg, data);
    if (opt.loss_csv) write_loss_rows(*opt.loss_csv, step.record);
    if (opt.on_step) opt.on_step(step.record);
    if (opt.metrics_csv && !data.test.empty() && (s.iteration % cfg.log_every == 0 || s.iteration == cfg.ssl_iters)) {
      write_metrics_rows(*opt.metrics_csv, s.iteration, "test",
                         evaluate_split(s.student_a, s.student_b, data.test, cfg.classes));
    }
  }
}

}  // namespace sdcl
