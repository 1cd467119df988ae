#include <unistd.h>

#include <gtest/gtest.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>

#include "sdcl/cli.hpp"

namespace {

namespace fs = std::filesystem;

struct Result {
  int code;
  std::string out, err;
};

Result run(std::vector<std::string> args) {
  args.insert(args.begin(), "sdcl");
  std::vector<char*> argv;
  for (auto& a : args) argv.push_back(a.data());
  std::ostringstream out, err;
  const int code = sdcl::cli::run(static_cast<int>(argv.size()), argv.data(), out, err);
  return {code, out.str(), err.str()};
}

std::string slurp(const fs::path& p) {
  std::ifstream is(p, std::ios::binary);
  std::ostringstream ss;
  ss << is.rdbuf();
  return ss.str();
}

std::map<std::string, std::string> snapshot(const fs::path& dir) {
  std::map<std::string, std::string> m;
  for (const auto& e : fs::directory_iterator(dir)) m[e.path().filename().string()] = slurp(e.path());
  return m;
}

class Cli : public ::testing::Test {
 protected:
  // One directory per process: ctest runs each test case in its own process, possibly in parallel.
  static fs::path root() { return fs::temp_directory_path() / ("sdcl_cli_test_" + std::to_string(::getpid())); }
  static fs::path data() { return root() / "data"; }

  static void SetUpTestSuite() {
    fs::remove_all(root());
    fs::create_directories(root());
    std::ofstream(root() / "spec.json") << R"({"min_radius": 2.0, "max_radius": 4.0})";
    std::ofstream(root() / "config.json") << R"({"width": 2, "pretrain_iters": 2, "ssl_iters": 4, "log_every": 2})";
    const auto r = run({"gen-data", "--out-dir", data().string(), "--spec", (root() / "spec.json").string(), "--seed",
                        "4", "--n-labeled", "2", "--n-unlabeled", "3", "--n-test", "1", "--shape", "[10,10,10]"});
    ASSERT_EQ(r.code, 0) << r.err;
  }
  static void TearDownTestSuite() { fs::remove_all(root()); }

  static std::vector<std::string> train_args(const fs::path& out) {
    return {"--data", data().string(), "--out-dir", out.string(), "--config", (root() / "config.json").string(),
            "--seed", "2"};
  }

  static void pretrain_into(const fs::path& out) {
    auto args = train_args(out);
    args.insert(args.begin(), "pretrain");
    const auto r = run(args);
    ASSERT_EQ(r.code, 0) << r.err;
  }
};

TEST_F(Cli, ExitCodeConstants) {
  EXPECT_EQ(sdcl::cli::kExitOk, 0);
  EXPECT_EQ(sdcl::cli::kExitUsage, 1);
  EXPECT_EQ(sdcl::cli::kExitRuntime, 2);
}

TEST_F(Cli, UsageErrors) {
  EXPECT_EQ(run({}).code, 1);
  EXPECT_EQ(run({"frobnicate"}).code, 1);
  EXPECT_EQ(run({"oracle-check", "--no-such-flag"}).code, 1);
  EXPECT_EQ(run({"--help"}).code, 0);
}

TEST_F(Cli, GenDataWritesManifestAndRefusesToOverwrite) {
  EXPECT_TRUE(fs::exists(data() / "manifest.json"));
  const auto ds = sdcl::read_dataset(data().string());
  EXPECT_EQ(ds.records.size(), 6u);
  EXPECT_EQ(ds.spec.seed, 4u);
  EXPECT_EQ(ds.spec.shape, (sdcl::Extent3{10, 10, 10}));
  const auto r = run({"gen-data", "--out-dir", data().string()});
  EXPECT_EQ(r.code, 1);
  EXPECT_NE(r.err.find("--force"), std::string::npos);
}

TEST_F(Cli, MalformedShapeIsUsageError) {
  const auto r = run({"gen-data", "--out-dir", (root() / "bad").string(), "--shape", "[10,10"});
  EXPECT_EQ(r.code, 1);
  EXPECT_NE(r.err.find("--shape"), std::string::npos);
}

TEST_F(Cli, UnknownConfigKeyIsNamed) {
  const fs::path cfg = root() / "typo.json";
  std::ofstream(cfg) << R"({"gama": 0.3})";
  const auto r = run({"pretrain", "--data", data().string(), "--out-dir", (root() / "typo").string(), "--config",
                      cfg.string()});
  EXPECT_EQ(r.code, 1);
  EXPECT_NE(r.err.find("gama"), std::string::npos) << r.err;
}

TEST_F(Cli, MalformedConfigIsUsageError) {
  const fs::path cfg = root() / "broken.json";
  std::ofstream(cfg) << R"({"gamma": )";
  const auto r = run({"pretrain", "--data", data().string(), "--out-dir", (root() / "broken").string(), "--config",
                      cfg.string()});
  EXPECT_EQ(r.code, 1);
  EXPECT_NE(r.err.find("--config"), std::string::npos) << r.err;
}

TEST_F(Cli, InvalidValueIsNamed) {
  const auto r = run({"pretrain", "--data", data().string(), "--out-dir", (root() / "odd").string(), "--batch-size", "3"});
  EXPECT_EQ(r.code, 1);
  EXPECT_NE(r.err.find("batch_size"), std::string::npos) << r.err;
}

TEST_F(Cli, MissingDatasetNamesFlag) {
  const auto r = run({"pretrain", "--data", (root() / "nowhere").string(), "--out-dir", (root() / "x").string()});
  EXPECT_EQ(r.code, 1);
  EXPECT_NE(r.err.find("--data"), std::string::npos) << r.err;
}

TEST_F(Cli, TrainWithoutPretrainedCheckpointsFails) {
  auto args = train_args(root() / "no_pretrain");
  args.insert(args.begin(), "train");
  const auto r = run(args);
  EXPECT_EQ(r.code, 1);
  EXPECT_NE(r.err.find("pretrain_a.ckpt"), std::string::npos) << r.err;
}

TEST_F(Cli, FlagsOverrideConfigFileAndConfigIsEchoed) {
  const fs::path out = root() / "echo";
  auto args = train_args(out);
  args.insert(args.begin(), "pretrain");
  args.insert(args.end(), {"--gamma", "0.25", "--mask-mode", "centered"});
  const auto r = run(args);
  ASSERT_EQ(r.code, 0) << r.err;
  const auto echo = nlohmann::json::parse(slurp(out / "config.json"));
  EXPECT_EQ(echo.at("gamma").get<double>(), 0.25);
  EXPECT_EQ(echo.at("width").get<int>(), 2);
  EXPECT_EQ(echo.at("seed").get<int>(), 2);
  EXPECT_EQ(echo.at("mask_mode").get<std::string>(), "centered");
  EXPECT_EQ(echo.size(), sdcl::to_json(sdcl::TrainConfig{}).size());
  const auto cfg = sdcl::config_from_json(echo);
  EXPECT_EQ(nlohmann::json::parse(slurp(out / "run_pretrain.json")).at("run_id").get<std::string>(), sdcl::run_id(cfg));
}

TEST_F(Cli, FullPipelineLeavesDatasetUntouched) {
  const auto before = snapshot(data());
  const fs::path out = root() / "pipeline";
  pretrain_into(out);
  auto args = train_args(out);
  args.insert(args.begin(), "train");
  const auto t = run(args);
  ASSERT_EQ(t.code, 0) << t.err;
  for (const char* f : {"loss.csv", "metrics.csv", "config.json", "run_train.json", "state/student_a.ckpt",
                        "state/teacher.ckpt", "state/optim_b.bin"}) {
    EXPECT_TRUE(fs::exists(out / f)) << f;
  }
  const auto e = run({"eval", "--data", data().string(), "--run-dir", out.string(), "--out-dir", (out / "eval").string()});
  ASSERT_EQ(e.code, 0) << e.err;
  EXPECT_NE(e.out.find("mean dice"), std::string::npos);
  // The final logged test row and a fresh evaluation of the saved students agree.
  const std::string metrics = slurp(out / "metrics.csv");
  const std::string last = metrics.substr(metrics.rfind("\n4,test"));
  const std::string evaluated = slurp(out / "eval" / "eval_metrics.csv");
  EXPECT_NE(evaluated.find(last.substr(1)), std::string::npos) << evaluated << " vs " << last;
  const auto m = run({"inspect-masks", "--data", data().string(), "--run-dir", out.string(), "--out-dir",
                      (out / "masks").string(), "--config", (root() / "config.json").string()});
  ASSERT_EQ(m.code, 0) << m.err;
  // round(2/3 * 10) = 7 per axis.
  EXPECT_NE(m.out.find("M: 343 zeros (expected 343)"), std::string::npos) << m.out;
  EXPECT_TRUE(fs::exists(out / "masks" / "M_differr_a_in0.vol"));
  EXPECT_EQ(snapshot(data()), before);
}

TEST_F(Cli, ResumeMatchesUninterruptedRun) {
  const fs::path whole = root() / "whole", split = root() / "split";
  pretrain_into(whole);
  pretrain_into(split);
  auto args = train_args(whole);
  args.insert(args.begin(), "train");
  ASSERT_EQ(run(args).code, 0);
  args = train_args(split);
  args.insert(args.begin(), "train");
  args.insert(args.end(), {"--stop-after", "2"});
  ASSERT_EQ(run(args).code, 0);
  args = train_args(split);
  args.insert(args.begin(), "train");
  args.push_back("--resume");
  const auto r = run(args);
  ASSERT_EQ(r.code, 0) << r.err;
  EXPECT_NE(r.out.find("resuming at iteration 2"), std::string::npos);
  for (const char* f : {"loss.csv", "metrics.csv", "state/student_a.ckpt", "state/student_b.ckpt", "state/teacher.ckpt"}) {
    EXPECT_EQ(slurp(whole / f), slurp(split / f)) << f;
  }
}

TEST_F(Cli, ResumeWithChangedConfigIsRejected) {
  const fs::path out = root() / "changed";
  pretrain_into(out);
  auto args = train_args(out);
  args.insert(args.begin(), "train");
  args.insert(args.end(), {"--stop-after", "2"});
  ASSERT_EQ(run(args).code, 0);
  args = train_args(out);
  args.insert(args.begin(), "train");
  args.insert(args.end(), {"--resume", "--mu", "0.5"});
  const auto r = run(args);
  EXPECT_EQ(r.code, 1);
  EXPECT_NE(r.err.find("--resume"), std::string::npos);
}

TEST_F(Cli, EvalRejectsUnlabeledSplit) {
  const fs::path out = root() / "evalsplit";
  pretrain_into(out);
  const auto r = run({"eval", "--data", data().string(), "--run-dir", out.string(), "--split", "unlabeled"});
  EXPECT_EQ(r.code, 1);
}

TEST_F(Cli, CorruptCheckpointIsRuntimeFailure) {
  const fs::path out = root() / "corrupt";
  pretrain_into(out);
  std::ofstream(out / "pretrain_a.ckpt", std::ios::trunc) << "SDCL-CHECKPOINT\n{}\n";
  const auto r = run({"eval", "--data", data().string(), "--run-dir", out.string()});
  EXPECT_EQ(r.code, 2);
}

TEST_F(Cli, OracleCheckPasses) {
  const auto r = run({"oracle-check", "--seed", "3"});
  EXPECT_EQ(r.code, 0) << r.out;
  EXPECT_NE(r.out.find(" 0 failures"), std::string::npos);
}

TEST_F(Cli, InstalledBinaryReportsExitCodes) {
  const std::string bin = SDCL_CLI_PATH;
  EXPECT_EQ(WEXITSTATUS(std::system((bin + " oracle-check > /dev/null").c_str())), 0);
  EXPECT_EQ(WEXITSTATUS(std::system((bin + " > /dev/null 2>&1").c_str())), 1);
  EXPECT_EQ(WEXITSTATUS(std::system((bin + " eval --data /nonexistent --checkpoint-a /x --checkpoint-b /y > /dev/null 2>&1").c_str())), 1);
}

}  // namespace
