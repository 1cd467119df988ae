#include <gtest/gtest.h>

#include <filesystem>
#include <sstream>

#include "sdcl/synthdata.hpp"

namespace {

namespace fs = std::filesystem;
using sdcl::DatasetSpec;
using sdcl::Split;

DatasetSpec small_spec() {
  DatasetSpec s;
  s.n_labeled = 2;
  s.n_unlabeled = 3;
  s.n_test = 2;
  s.shape = {16, 16, 16};
  s.min_radius = 2.0;
  s.max_radius = 5.0;
  s.seed = 5;
  return s;
}

TEST(Synthdata, SameSpecIsBitwiseIdentical) {
  EXPECT_EQ(sdcl::generate(small_spec()), sdcl::generate(small_spec()));
}

TEST(Synthdata, DistinctIdsHaveDistinctGeometry) {
  const auto recs = sdcl::generate(small_spec());
  for (std::size_t a = 0; a < recs.size(); ++a) {
    for (std::size_t b = a + 1; b < recs.size(); ++b) {
      EXPECT_NE(recs[a].id, recs[b].id);
      EXPECT_NE(*recs[a].label, *recs[b].label);
    }
  }
}

TEST(Synthdata, DefaultSplitsAndShape) {
  DatasetSpec s;
  s.n_unlabeled = 20;
  const auto recs = sdcl::generate(s);
  ASSERT_EQ(recs.size(), 32u);
  std::size_t counts[3] = {0, 0, 0};
  for (const auto& r : recs) {
    ++counts[static_cast<int>(r.split)];
    EXPECT_EQ(r.image.extent(), (sdcl::Extent3{32, 32, 32}));
  }
  EXPECT_EQ(counts[static_cast<int>(Split::kLabeled)], 4u);
  EXPECT_EQ(counts[static_cast<int>(Split::kUnlabeled)], 20u);
  EXPECT_EQ(counts[static_cast<int>(Split::kTest)], 8u);
  const auto data = sdcl::make_training_data(recs, 2);
  EXPECT_EQ(data.labeled.size() + data.unlabeled.size(), 24u);
  EXPECT_EQ(data.test.size(), 8u);
}

TEST(Synthdata, NoiselessImageThresholdsToLabel) {
  DatasetSpec s = small_spec();
  s.noise_sigma = 0.0;
  s.contrast = 1.0;
  s.background = 0.0;
  for (const auto& r : sdcl::generate(s)) {
    for (std::size_t v = 0; v < r.image.size(); ++v) {
      EXPECT_EQ(r.image[v] > 0.5 ? 1 : 0, (*r.label)[v]) << r.id << " voxel " << v;
    }
  }
}

TEST(Synthdata, LabelsStayBelowKAndFractionBoundsHold) {
  DatasetSpec s = small_spec();
  s.classes = 4;
  s.min_foreground_fraction = 0.01;
  s.max_foreground_fraction = 0.3;
  for (const auto& r : sdcl::generate(s)) {
    std::size_t fg = 0;
    for (auto c : r.label->data()) {
      EXPECT_LT(c, 4);
      fg += c != 0;
    }
    const double frac = static_cast<double>(fg) / static_cast<double>(r.label->size());
    EXPECT_GE(frac, 0.01);
    EXPECT_LE(frac, 0.3);
  }
}

template <class T>
concept HasLabel = requires(T v) { v.label; };

TEST(Synthdata, UnlabeledViewCarriesNoLabel) {
  const auto data = sdcl::make_training_data(sdcl::generate(small_spec()), 2);
  static_assert(!HasLabel<sdcl::UnlabeledVolume>);
  static_assert(HasLabel<sdcl::LabeledVolume>);
  EXPECT_EQ(data.unlabeled.size(), 3u);
}

TEST(Synthdata, VolumeRoundTrip) {
  for (const auto& r : sdcl::generate(small_spec())) {
    std::stringstream ss;
    sdcl::write_volume(ss, r, 2);
    const auto back = sdcl::read_volume(ss);
    EXPECT_EQ(back.record, r);
    EXPECT_EQ(back.classes, 2u);
  }
}

TEST(Synthdata, UnlabeledRecordRoundTripsWithoutLabel) {
  auto r = sdcl::generate(small_spec()).front();
  r.label.reset();
  std::stringstream ss;
  sdcl::write_volume(ss, r, 2);
  EXPECT_FALSE(sdcl::read_volume(ss).record.label.has_value());
}

TEST(Synthdata, TruncatedVolumeNamesLengths) {
  std::stringstream ss;
  sdcl::write_volume(ss, sdcl::generate(small_spec()).front(), 2);
  std::string bytes = ss.str();
  bytes.resize(bytes.size() - 100);
  std::stringstream cut(bytes);
  try {
    sdcl::read_volume(cut);
    FAIL();
  } catch (const sdcl::FormatError& e) {
    const std::string msg = e.what();
    EXPECT_NE(msg.find("expected 36864"), std::string::npos) << msg;
    EXPECT_NE(msg.find("found 36764"), std::string::npos) << msg;
  }
}

TEST(Synthdata, DatasetDirectoryRoundTrip) {
  const fs::path dir = fs::temp_directory_path() / "sdcl_synthdata_test";
  fs::remove_all(dir);
  const auto spec = small_spec();
  const auto recs = sdcl::generate(spec);
  sdcl::write_dataset(dir.string(), spec, recs);
  const auto back = sdcl::read_dataset(dir.string());
  EXPECT_EQ(back.records, recs);
  EXPECT_EQ(sdcl::spec_to_json(back.spec), sdcl::spec_to_json(spec));
  fs::remove_all(dir);
}

TEST(Synthdata, SpecJsonRejectsUnknownKeys) {
  try {
    sdcl::spec_from_json(nlohmann::json{{"n_labled", 3}});
    FAIL();
  } catch (const sdcl::ConfigError& e) {
    EXPECT_NE(std::string(e.what()).find("n_labled"), std::string::npos);
  }
}

TEST(Synthdata, InvalidSpecsAreRejected) {
  DatasetSpec s = small_spec();
  s.n_labeled = 1;
  EXPECT_THROW(sdcl::generate(s), sdcl::ConfigError);
  s = small_spec();
  s.max_radius = 9.0;
  EXPECT_THROW(sdcl::generate(s), sdcl::ConfigError);
}

TEST(Synthdata, TwoDimensionalVolumes) {
  DatasetSpec s = small_spec();
  s.shape = {24, 24, 1};
  const auto recs = sdcl::generate(s);
  std::size_t fg = 0;
  for (const auto& r : recs) {
    for (auto c : r.label->data()) fg += c;
  }
  EXPECT_GT(fg, 0u);
}

}  // namespace
