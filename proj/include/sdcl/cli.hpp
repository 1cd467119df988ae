#pragma once

// Command-line front end: gen-data, pretrain, train, eval, inspect-masks,
// oracle-check. Exit codes: 0 success, 1 usage or configuration error,
// 2 runtime failure.
//
// Training configuration precedence: built-in defaults < --config file <
// individual flags (--alpha, --learning-rate, ...) < --seed.

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "sdcl/error.hpp"
#include "sdcl/synthdata.hpp"
#include "sdcl/testing/oracle_suite.hpp"
#include "sdcl/trainer.hpp"

namespace sdcl::cli {

namespace fs = std::filesystem;

inline constexpr int kExitOk = 0;
inline constexpr int kExitUsage = 1;
inline constexpr int kExitRuntime = 2;

/// A missing or unusable input named by the flag that supplied it.
inline ConfigError missing(const std::string& flag, const std::string& path) {
  return ConfigError(flag, "no such file or directory: " + path);
}

inline void require_file(const std::string& flag, const fs::path& p) {
  if (!fs::exists(p)) throw missing(flag, p.string());
}

inline nlohmann::json read_json_file(const std::string& flag, const std::string& path) {
  require_file(flag, path);
  std::ifstream is(path);
  try {
    return nlohmann::json::parse(is);
  } catch (const nlohmann::json::parse_error& e) {
    throw ConfigError(flag, "malformed JSON in " + path + " at byte " + std::to_string(e.byte));
  }
}

/// Flag text to a JSON scalar: numbers and booleans parse as such, anything
/// else is kept as a string.
inline nlohmann::json flag_value(const std::string& text) {
  try {
    auto j = nlohmann::json::parse(text);
    if (j.is_number() || j.is_boolean()) return j;
  } catch (const nlohmann::json::parse_error&) {
  }
  return text;
}

inline std::string flag_name(const std::string& key) {
  std::string f = "--" + key;
  for (auto& ch : f) {
    if (ch == '_') ch = '-';
  }
  return f;
}

/// Registers one override flag per TrainConfig field plus --config and --seed.
struct ConfigFlags {
  std::string config_path;
  std::optional<std::uint64_t> seed;
  std::map<std::string, std::string> values;

  void attach(CLI::App* app) {
    app->add_option("--config", config_path, "Training configuration (JSON)");
    app->add_option("--seed", seed, "Seed for every random stream");
    const nlohmann::json defaults = to_json(TrainConfig{});
    for (auto it = defaults.begin(); it != defaults.end(); ++it) {
      const std::string key = it.key();
      if (key == "seed") continue;
      app->add_option_function<std::string>(
          flag_name(key), [this, key](const std::string& v) { values[key] = v; }, "Override " + key);
    }
  }

  TrainConfig resolve() const {
    TrainConfig c;
    if (!config_path.empty()) c = config_from_json(read_json_file("--config", config_path), c);
    nlohmann::json overlay = nlohmann::json::object();
    for (const auto& [k, v] : values) overlay[k] = flag_value(v);
    c = config_from_json(overlay, c);
    if (seed) c.seed = *seed;
    validate(c);
    return c;
  }
};

inline TrainingData load_training_data(const std::string& dir, std::size_t K) {
  require_file("--data", fs::path(dir) / kManifestName);
  const Dataset ds = read_dataset(dir);
  if (ds.spec.classes != K) {
    throw ConfigError("classes", "config K=" + std::to_string(K) + " but dataset has K=" + std::to_string(ds.spec.classes));
  }
  return make_training_data(ds.records, K);
}

inline void write_text(const fs::path& p, const std::string& text) {
  std::ofstream os(p);
  os << text;
  if (!os) throw Error("cannot write " + p.string());
}

/// Resolved config echo plus a run manifest identifying the run.
inline void write_run_files(const fs::path& out, const TrainConfig& cfg, const std::string& phase,
                            const std::string& data_dir) {
  fs::create_directories(out);
  write_text(out / "config.json", to_json(cfg).dump(2) + "\n");
  nlohmann::json run;
  run["run_id"] = run_id(cfg);
  run["phase"] = phase;
  run["data"] = data_dir;
  run["config"] = to_json(cfg);
  write_text(out / ("run_" + phase + ".json"), run.dump(2) + "\n");
}

inline void print_report(std::ostream& os, const std::string& title, const MetricsReport& r) {
  os << title << "\n";
  char line[160];
  std::snprintf(line, sizeof line, "  %-6s %-9s %-9s %-11s %-11s\n", "class", "dice", "jaccard", "hd95", "asd");
  os << line;
  for (const auto& c : r.classes) {
    std::snprintf(line, sizeof line, "  %-6zu %-9.4f %-9.4f %-11s %-11s\n", c.cls, c.dice, c.jaccard,
                  format_optional(c.hd95).c_str(), format_optional(c.asd).c_str());
    os << line;
  }
  std::snprintf(line, sizeof line, "  mean dice %.4f\n", r.mean_dice());
  os << line;
}

/// Keeps CSV rows whose leading iteration field satisfies `keep`.
template <class Keep>
void truncate_csv(const fs::path& p, Keep keep) {
  if (!fs::exists(p)) return;
  std::ifstream is(p);
  std::string header, line, out;
  std::getline(is, header);
  out = header + "\n";
  while (std::getline(is, line)) {
    if (line.empty()) continue;
    if (keep(std::stoull(line.substr(0, line.find(','))))) out += line + "\n";
  }
  is.close();
  write_text(p, out);
}

// ---------------------------------------------------------------------------
// Subcommands

inline int gen_data(const std::string& out_dir, const std::string& spec_path, std::optional<std::uint64_t> seed,
                    const std::map<std::string, std::string>& overrides, bool force, std::ostream& out) {
  DatasetSpec spec;
  if (!spec_path.empty()) spec = spec_from_json(read_json_file("--spec", spec_path), spec);
  nlohmann::json overlay = nlohmann::json::object();
  for (const auto& [k, v] : overrides) {
    if (k != "shape") {
      overlay[k] = flag_value(v);
      continue;
    }
    try {
      overlay[k] = nlohmann::json::parse(v);
    } catch (const nlohmann::json::parse_error&) {
      throw ConfigError("--shape", "expected [W,H,D], got " + v);
    }
  }
  spec = spec_from_json(overlay, spec);
  if (seed) spec.seed = *seed;
  validate(spec);
  if (fs::exists(fs::path(out_dir) / kManifestName) && !force) {
    throw ConfigError("--out-dir", "a dataset already exists in " + out_dir + " (pass --force to replace it)");
  }
  write_dataset(out_dir, spec, generate(spec));
  out << spec_to_json(spec).dump(2) << "\n";
  out << "wrote " << spec.n_labeled + spec.n_unlabeled + spec.n_test << " volumes to " << out_dir << "\n";
  return kExitOk;
}

inline int pretrain_cmd(const ConfigFlags& flags, const std::string& data_dir, const std::string& out_dir,
                        std::ostream& out) {
  const TrainConfig cfg = flags.resolve();
  const TrainingData data = load_training_data(data_dir, cfg.classes);
  const fs::path o(out_dir);
  write_run_files(o, cfg, "pretrain", data_dir);
  out << to_json(cfg).dump(2) << "\n";
  std::ofstream csv(o / "pretrain_loss.csv");
  csv << "iteration,arch,loss\n";
  const PretrainResult r = pretrain(cfg, data, [&](Arch a, std::uint64_t it, double loss) {
    char buf[96];
    std::snprintf(buf, sizeof buf, "%llu,%s,%.17g\n", static_cast<unsigned long long>(it), arch_name(a), loss);
    csv << buf;
  });
  save_checkpoint((o / "pretrain_a.ckpt").string(), r.student_a, cfg.pretrain_iters);
  save_checkpoint((o / "pretrain_b.ckpt").string(), r.student_b, cfg.pretrain_iters);
  print_report(out, "labeled split", evaluate_split(r.student_a, r.student_b, data.labeled, cfg.classes));
  if (!data.test.empty()) {
    print_report(out, "test split", evaluate_split(r.student_a, r.student_b, data.test, cfg.classes));
  }
  return kExitOk;
}

inline int train_cmd(const ConfigFlags& flags, const std::string& data_dir, const std::string& out_dir,
                     std::string pretrained_dir, bool resume, std::uint64_t stop_after, std::ostream& out) {
  const TrainConfig cfg = flags.resolve();
  const fs::path o(out_dir);
  if (pretrained_dir.empty()) pretrained_dir = out_dir;
  const fs::path ck_a = fs::path(pretrained_dir) / "pretrain_a.ckpt", ck_b = fs::path(pretrained_dir) / "pretrain_b.ckpt";
  const fs::path state_dir = o / "state";
  if (resume) {
    require_file("--out-dir", state_dir / "state.json");
    const auto prev = read_json_file("--out-dir", (o / "run_train.json").string());
    if (prev.at("run_id").get<std::string>() != run_id(cfg)) {
      throw ConfigError("--resume", "configuration differs from the interrupted run " + prev.at("run_id").get<std::string>());
    }
  } else {
    require_file("--pretrained", ck_a);
    require_file("--pretrained", ck_b);
  }
  const TrainingData data = load_training_data(data_dir, cfg.classes);
  write_run_files(o, cfg, "train", data_dir);
  out << to_json(cfg).dump(2) << "\n";

  TrainState s;
  const fs::path loss_path = o / "loss.csv", metrics_path = o / "metrics.csv";
  if (resume) {
    s = load_state(state_dir.string(), cfg);
    truncate_csv(loss_path, [&](std::uint64_t it) { return it < s.iteration; });
    truncate_csv(metrics_path, [&](std::uint64_t it) { return it <= s.iteration; });
    out << "resuming at iteration " << s.iteration << "\n";
  } else {
    s = init_state(cfg, load_checkpoint(ck_a.string()).net, load_checkpoint(ck_b.string()).net);
    std::ofstream l(loss_path), m(metrics_path);
    write_loss_header(l);
    write_metrics_header(m);
  }
  std::ofstream loss_csv(loss_path, std::ios::app), metrics_csv(metrics_path, std::ios::app);
  const std::uint64_t end = stop_after ? std::min(stop_after, cfg.ssl_iters) : cfg.ssl_iters;
  while (s.iteration < end) {
    const std::uint64_t next = std::min(end, (s.iteration / cfg.log_every + 1) * cfg.log_every);
    SslOptions opt;
    opt.loss_csv = &loss_csv;
    opt.metrics_csv = &metrics_csv;
    opt.stop_after = next;
    train_ssl(s, cfg, data, opt);
    loss_csv.flush();
    metrics_csv.flush();
    save_state(state_dir.string(), s);
    out << "iteration " << s.iteration << "/" << cfg.ssl_iters << "\n";
  }
  if (!data.test.empty()) {
    print_report(out, "test split", evaluate_split(s.student_a, s.student_b, data.test, cfg.classes));
  }
  return kExitOk;
}

inline int eval_cmd(const std::string& data_dir, const std::string& run_dir, std::string ck_a, std::string ck_b,
                    const std::string& split, const std::string& out_dir, std::ostream& out) {
  if (ck_a.empty() != ck_b.empty()) throw ConfigError("--checkpoint-a", "give both student checkpoints or neither");
  if (ck_a.empty()) {
    if (run_dir.empty()) throw ConfigError("--run-dir", "either --run-dir or both checkpoints are required");
    ck_a = (fs::path(run_dir) / "state" / "student_a.ckpt").string();
    ck_b = (fs::path(run_dir) / "state" / "student_b.ckpt").string();
    if (!fs::exists(ck_a)) {
      ck_a = (fs::path(run_dir) / "pretrain_a.ckpt").string();
      ck_b = (fs::path(run_dir) / "pretrain_b.ckpt").string();
    }
  }
  require_file("--checkpoint-a", ck_a);
  require_file("--checkpoint-b", ck_b);
  const Split which = parse_split(split);
  if (which == Split::kUnlabeled) throw ConfigError("--split", "the unlabeled split has no labels to score against");
  const Checkpoint a = load_checkpoint(ck_a), b = load_checkpoint(ck_b);
  const TrainingData data = load_training_data(data_dir, a.net.classes());
  const auto& vols = which == Split::kLabeled ? data.labeled : data.test;
  const MetricsReport r = evaluate_split(a.net, b.net, vols, a.net.classes());
  print_report(out, std::string(split_name(which)) + " split, iteration " + std::to_string(a.iteration), r);
  if (!out_dir.empty()) {
    fs::create_directories(out_dir);
    std::ofstream csv(fs::path(out_dir) / "eval_metrics.csv");
    write_metrics_header(csv);
    write_metrics_rows(csv, a.iteration, split_name(which), r);
  }
  return kExitOk;
}

inline void dump_mask(const fs::path& p, const std::string& id, const BinaryMask& m) {
  VolumeRecord r;
  r.id = id;
  r.split = Split::kTest;
  r.image = Image(m.extent());
  LabelMap l(m.extent());
  for (std::size_t v = 0; v < m.size(); ++v) {
    r.image[v] = m[v];
    l[v] = m[v];
  }
  r.label = l;
  write_volume(p.string(), r, 2);
}

inline int inspect_masks_cmd(const ConfigFlags& flags, const std::string& data_dir, const std::string& run_dir,
                             const std::string& out_dir, std::ostream& out) {
  const TrainConfig cfg = flags.resolve();
  const fs::path r(run_dir);
  const bool has_state = fs::exists(r / "state" / "state.json");
  if (!has_state) {
    require_file("--run-dir", r / "pretrain_a.ckpt");
    require_file("--run-dir", r / "pretrain_b.ckpt");
  }
  const TrainingData data = load_training_data(data_dir, cfg.classes);
  TrainState s = has_state ? load_state((r / "state").string(), cfg)
                           : init_state(cfg, load_checkpoint((r / "pretrain_a.ckpt").string()).net,
                                        load_checkpoint((r / "pretrain_b.ckpt").string()).net);
  const StepOutput step = ssl_step(s, cfg, data, /*dry_run=*/true);
  const fs::path o(out_dir);
  fs::create_directories(o);
  write_text(o / "config.json", to_json(cfg).dump(2) + "\n");
  const BinaryMask& M = step.batch.mask;
  dump_mask(o / "M.vol", "M", M);
  const Extent3 zb = zero_block_extent(M.extent(), cfg.beta);
  out << "M: " << M.size() - count_ones(M) << " zeros (expected " << zb.size() << "), " << count_ones(M) << " ones\n";
  const auto& m = step.masks;
  for (std::size_t k = 0; k < m.diff.size(); ++k) {
    const std::string tag = (k < step.batch.pairs ? "in" : "out") + std::to_string(k % step.batch.pairs);
    const std::pair<const char*, const BinaryMask*> items[] = {{"M_diff", &m.diff[k]},        {"M_err_a", &m.err_a[k]},
                                                               {"M_err_b", &m.err_b[k]},      {"M_differr_a", &m.differr_a[k]},
                                                               {"M_differr_b", &m.differr_b[k]}};
    for (const auto& [name, mask] : items) {
      dump_mask(o / (std::string(name) + "_" + tag + ".vol"), std::string(name) + "_" + tag, *mask);
      out << name << "_" << tag << ": " << count_ones(*mask) << " ones\n";
    }
  }
  return kExitOk;
}

inline int oracle_check_cmd(std::uint64_t seed, std::ostream& out) {
  std::size_t failures = 0, cases = 0;
  for (const auto& r : testing::run_oracle_suite(seed)) {
    char line[200];
    std::snprintf(line, sizeof line, "%-4s %-22s cases=%-5zu failures=%-3zu worst=%.3g", r.ok() ? "PASS" : "FAIL",
                  r.name.c_str(), r.cases, r.failures, r.worst);
    out << line;
    if (!r.ok()) out << "  first: " << r.note;
    out << "\n";
    failures += r.failures;
    cases += r.cases;
  }
  out << cases << " cases, " << failures << " failures\n";
  return failures == 0 ? kExitOk : kExitRuntime;
}

// ---------------------------------------------------------------------------

inline int run(int argc, char** argv, std::ostream& out = std::cout, std::ostream& err = std::cerr) {
  CLI::App app{"Dual-student semi-supervised segmentation on synthetic volumes"};
  app.require_subcommand(1, 1);

  auto* gen = app.add_subcommand("gen-data", "Generate a synthetic dataset");
  std::string gen_out, gen_spec;
  std::optional<std::uint64_t> gen_seed;
  bool gen_force = false;
  std::map<std::string, std::string> gen_overrides;
  gen->add_option("--out-dir", gen_out, "Dataset directory")->required();
  gen->add_option("--spec", gen_spec, "Dataset specification (JSON)");
  gen->add_option("--seed", gen_seed, "Generator seed");
  gen->add_flag("--force", gen_force, "Replace an existing dataset");
  for (const char* key : {"n_labeled", "n_unlabeled", "n_test", "classes", "noise_sigma", "contrast", "shape"}) {
    const std::string k = key;
    gen->add_option_function<std::string>(flag_name(k), [&gen_overrides, k](const std::string& v) { gen_overrides[k] = v; },
                                           k == "shape" ? "Volume shape as [W,H,D]" : "Override " + k);
  }

  auto* pre = app.add_subcommand("pretrain", "Copy-paste pretraining of both students");
  ConfigFlags pre_flags;
  std::string pre_data, pre_out;
  pre_flags.attach(pre);
  pre->add_option("--data", pre_data, "Dataset directory")->required();
  pre->add_option("--out-dir", pre_out, "Output directory")->required();

  auto* train = app.add_subcommand("train", "Semi-supervised training from pretrained students");
  ConfigFlags train_flags;
  std::string train_data, train_out, train_pre;
  bool train_resume = false;
  std::uint64_t train_stop = 0;
  train_flags.attach(train);
  train->add_option("--data", train_data, "Dataset directory")->required();
  train->add_option("--out-dir", train_out, "Output directory")->required();
  train->add_option("--pretrained", train_pre, "Directory with pretrain_a.ckpt and pretrain_b.ckpt (default: --out-dir)");
  train->add_flag("--resume", train_resume, "Continue from the saved state in --out-dir");
  train->add_option("--stop-after", train_stop, "Stop at this iteration (state is saved)");

  auto* ev = app.add_subcommand("eval", "Evaluate a pair of student checkpoints");
  std::string ev_data, ev_run, ev_a, ev_b, ev_split = "test", ev_out;
  ev->add_option("--data", ev_data, "Dataset directory")->required();
  ev->add_option("--run-dir", ev_run, "Run directory (final state, else pretrain checkpoints)");
  ev->add_option("--checkpoint-a", ev_a, "Student A checkpoint");
  ev->add_option("--checkpoint-b", ev_b, "Student B checkpoint");
  ev->add_option("--split", ev_split, "labeled or test");
  ev->add_option("--out-dir", ev_out, "Write eval_metrics.csv here");

  auto* ins = app.add_subcommand("inspect-masks", "Dry-run one step and dump its masks");
  ConfigFlags ins_flags;
  std::string ins_data, ins_run, ins_out;
  ins_flags.attach(ins);
  ins->add_option("--data", ins_data, "Dataset directory")->required();
  ins->add_option("--run-dir", ins_run, "Run directory with a saved state or pretrain checkpoints")->required();
  ins->add_option("--out-dir", ins_out, "Mask dump directory")->required();

  auto* orc = app.add_subcommand("oracle-check", "Run the brute-force oracle suites");
  std::uint64_t orc_seed = 0;
  orc->add_option("--seed", orc_seed, "Seed for the random instances");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e, out, err);
    return code == 0 ? kExitOk : kExitUsage;
  }

  try {
    if (*gen) return gen_data(gen_out, gen_spec, gen_seed, gen_overrides, gen_force, out);
    if (*pre) return pretrain_cmd(pre_flags, pre_data, pre_out, out);
    if (*train) return train_cmd(train_flags, train_data, train_out, train_pre, train_resume, train_stop, out);
    if (*ev) return eval_cmd(ev_data, ev_run, ev_a, ev_b, ev_split, ev_out, out);
    if (*ins) return inspect_masks_cmd(ins_flags, ins_data, ins_run, ins_out, out);
    if (*orc) return oracle_check_cmd(orc_seed, out);
  } catch (const ConfigError& e) {
    err << "error: " << e.what() << "\n";
    return kExitUsage;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << "\n";
    return kExitRuntime;
  }
  return kExitUsage;
}

}  // namespace sdcl::cli
