#include <gtest/gtest.h>

#include <array>

#include "sdcl/maskops.hpp"
#include "sdcl/testing/oracles.hpp"

namespace {

using sdcl::BinaryMask;
using sdcl::Extent3;
using sdcl::LabelMap;

LabelMap labels(Extent3 e, std::vector<std::uint8_t> v) { return LabelMap(e, std::move(v)); }
BinaryMask mask(Extent3 e, std::vector<std::uint8_t> v) { return BinaryMask(e, std::move(v)); }

TEST(Maskops, TwelveCubeWithTwoThirdsBeta) {
  sdcl::Rng rng(1);
  const BinaryMask m = sdcl::gen_copy_paste_mask({12, 12, 12}, 2.0 / 3.0, rng);
  EXPECT_EQ(sdcl::zero_block_extent({12, 12, 12}, 2.0 / 3.0), (Extent3{8, 8, 8}));
  EXPECT_EQ(m.size() - sdcl::count_ones(m), 512u);
  EXPECT_EQ(sdcl::count_ones(m), 1216u);
}

TEST(Maskops, FullExtentBlockZeroesEverything) {
  sdcl::Rng rng(1);
  const BinaryMask m = sdcl::gen_copy_paste_mask({4, 6, 2}, 0.95, rng);
  EXPECT_EQ(sdcl::count_ones(m), 0u);
}

TEST(Maskops, HalfRoundsAwayFromZero) {
  // 0.5 * 5 = 2.5 and 0.5 * 1 = 0.5 both round up.
  EXPECT_EQ(sdcl::zero_block_extent({5, 3, 1}, 0.5), (Extent3{3, 2, 1}));
}

TEST(Maskops, ZeroCountMatchesRoundedProductForRandomShapes) {
  sdcl::Rng rng(17);
  for (int t = 0; t < 200; ++t) {
    const Extent3 e = sdcl::testing::random_extent(rng, 1, 20);
    const double beta = sdcl::uniform_real(rng, 0.05, 0.95);
    const std::size_t expected = sdcl::testing::oracle_block_extent(beta, e.w) *
                                 sdcl::testing::oracle_block_extent(beta, e.h) *
                                 sdcl::testing::oracle_block_extent(beta, e.d);
    if (expected == 0) {
      EXPECT_THROW(sdcl::gen_copy_paste_mask(e, beta, rng), sdcl::ShapeError);
      continue;
    }
    const BinaryMask m = sdcl::gen_copy_paste_mask(e, beta, rng);
    EXPECT_EQ(m.size() - sdcl::count_ones(m), expected) << e.str() << " beta " << beta;
  }
}

TEST(Maskops, CornerIsUniformOverValidGrid) {
  sdcl::Rng rng(2024);
  std::array<int, 25> counts{};
  for (int t = 0; t < 1000; ++t) {
    const auto p = sdcl::place_zero_block({8, 8, 1}, 0.5, rng);
    ASSERT_EQ(p.block, (Extent3{4, 4, 1}));
    ASSERT_EQ(p.corner[2], 0u);
    ++counts[p.corner[0] * 5 + p.corner[1]];
  }
  double chi2 = 0.0;
  for (int c : counts) chi2 += (c - 40.0) * (c - 40.0) / 40.0;
  // Upper 1% point of chi-square with 24 degrees of freedom.
  EXPECT_LT(chi2, 42.98);
}

TEST(Maskops, CenteredModeIsDeterministic) {
  sdcl::Rng a(1), b(2);
  const auto pa = sdcl::place_zero_block({12, 10, 7}, 2.0 / 3.0, a, sdcl::MaskMode::kCentered);
  const auto pb = sdcl::place_zero_block({12, 10, 7}, 2.0 / 3.0, b, sdcl::MaskMode::kCentered);
  EXPECT_EQ(pa.corner, pb.corner);
  EXPECT_EQ(pa.corner, (std::array<std::size_t, 3>{2, 1, 1}));
}

TEST(Maskops, InvalidBetaIsRejected) {
  sdcl::Rng rng(0);
  EXPECT_THROW(sdcl::gen_copy_paste_mask({4, 4, 4}, 0.0, rng), sdcl::ConfigError);
  EXPECT_THROW(sdcl::gen_copy_paste_mask({4, 4, 4}, 1.5, rng), sdcl::ConfigError);
}

TEST(Maskops, DiffExamples) {
  const Extent3 e{4, 1, 1};
  EXPECT_EQ(sdcl::diff_mask(labels(e, {0, 1, 1, 0}), labels(e, {0, 1, 0, 1})), mask(e, {0, 0, 1, 1}));
  EXPECT_EQ(sdcl::diff_mask(labels(e, {0, 1, 2, 3}), labels(e, {0, 2, 2, 0})), mask(e, {0, 1, 0, 1}));
  EXPECT_EQ(sdcl::count_ones(sdcl::diff_mask(labels(e, {3, 1, 2, 0}), labels(e, {3, 1, 2, 0}))), 0u);
}

TEST(Maskops, ErrExamples) {
  const Extent3 e{2, 1, 1};
  EXPECT_EQ(sdcl::err_mask(labels(e, {1, 0}), labels(e, {0, 0})), mask(e, {1, 0}));
  EXPECT_EQ(sdcl::count_ones(sdcl::err_mask(labels(e, {1, 1}), labels(e, {1, 1}))), 0u);
}

TEST(Maskops, ErrMatchesVoxelLoop) {
  sdcl::Rng rng(6);
  for (int t = 0; t < 50; ++t) {
    const LabelMap a = sdcl::testing::random_labels(rng, {4, 4, 4}, 3);
    const LabelMap b = sdcl::testing::random_labels(rng, {4, 4, 4}, 3);
    EXPECT_EQ(sdcl::err_mask(a, b), sdcl::testing::oracle_diff(a, b));
  }
}

TEST(Maskops, DiffErrExamples) {
  const Extent3 e{3, 1, 1};
  EXPECT_EQ(sdcl::differr_mask(mask(e, {1, 1, 0}), mask(e, {1, 0, 1})), mask(e, {1, 0, 0}));
  EXPECT_EQ(sdcl::differr_mask(mask(e, {1, 0, 1}), mask(e, {1, 1, 1})), mask(e, {1, 0, 1}));
  EXPECT_EQ(sdcl::differr_mask(mask(e, {0, 0, 0}), mask(e, {1, 0, 1})), mask(e, {0, 0, 0}));
}

TEST(Maskops, MaskAlgebraProperties) {
  sdcl::Rng rng(8);
  for (int t = 0; t < 100; ++t) {
    const Extent3 e = sdcl::testing::random_extent(rng, 1, 6);
    const std::size_t K = 2 + t % 3;
    const LabelMap a = sdcl::testing::random_labels(rng, e, K);
    const LabelMap b = sdcl::testing::random_labels(rng, e, K);
    const LabelMap y = sdcl::testing::random_labels(rng, e, K);
    const BinaryMask d = sdcl::diff_mask(a, b);
    EXPECT_EQ(d, sdcl::diff_mask(b, a));
    const BinaryMask err = sdcl::err_mask(a, y);
    const BinaryMask de = sdcl::differr_mask(d, err);
    for (std::size_t v = 0; v < de.size(); ++v) {
      EXPECT_LE(de[v], d[v]);
      EXPECT_LE(de[v], err[v]);
    }
  }
}

TEST(Maskops, ExtentMismatchNamesAxis) {
  try {
    sdcl::diff_mask(LabelMap({2, 2, 2}), LabelMap({2, 3, 2}));
    FAIL();
  } catch (const sdcl::ShapeError& e) {
    EXPECT_NE(std::string(e.what()).find("H"), std::string::npos) << e.what();
  }
}

TEST(Maskops, LccKeepsLargerComponent) {
  LabelMap raw({6, 6, 6});
  for (std::size_t x = 0; x < 5; ++x) raw.at(x, 0, 0) = 1;
  for (std::size_t z = 0; z < 3; ++z) raw.at(5, 5, 3 + z) = 1;
  const LabelMap out = sdcl::largest_connected_component(raw, 2);
  std::size_t ones = 0;
  for (auto v : out.data()) ones += v;
  EXPECT_EQ(ones, 5u);
  for (std::size_t x = 0; x < 5; ++x) EXPECT_EQ(out.at(x, 0, 0), 1);
  for (std::size_t z = 0; z < 3; ++z) EXPECT_EQ(out.at(5, 5, 3 + z), 0);
}

TEST(Maskops, LccUsesCornerConnectivity) {
  LabelMap raw({3, 3, 3});
  raw.at(0, 0, 0) = 1;
  raw.at(1, 1, 1) = 1;
  raw.at(2, 2, 2) = 1;
  EXPECT_EQ(sdcl::largest_connected_component(raw, 2), raw);
  LabelMap flat({3, 3, 1});
  flat.at(0, 0, 0) = 1;
  flat.at(1, 1, 0) = 1;
  EXPECT_EQ(sdcl::largest_connected_component(flat, 2), flat);
}

TEST(Maskops, LccTieGoesToLowestIndex) {
  LabelMap raw({5, 1, 1}, std::vector<std::uint8_t>{1, 0, 0, 0, 1});
  EXPECT_EQ(sdcl::largest_connected_component(raw, 2), LabelMap({5, 1, 1}, std::vector<std::uint8_t>{1, 0, 0, 0, 0}));
}

TEST(Maskops, LccTreatsClassesIndependently) {
  LabelMap raw({7, 1, 1}, std::vector<std::uint8_t>{1, 1, 0, 2, 0, 2, 2});
  EXPECT_EQ(sdcl::largest_connected_component(raw, 3),
            LabelMap({7, 1, 1}, std::vector<std::uint8_t>{1, 1, 0, 0, 0, 2, 2}));
}

TEST(Maskops, LccEmptyAndSingleComponentUnchanged) {
  const LabelMap empty({4, 4, 4});
  EXPECT_EQ(sdcl::largest_connected_component(empty, 2), empty);
  LabelMap one({4, 4, 4});
  for (std::size_t i = 0; i < 8; ++i) one[i] = 1;
  EXPECT_EQ(sdcl::largest_connected_component(one, 2), one);
}

TEST(Maskops, LccMatchesFloodFillAndIsIdempotent) {
  sdcl::Rng rng(31);
  for (int t = 0; t < 100; ++t) {
    const Extent3 e = sdcl::testing::random_extent(rng, 1, 9);
    const std::size_t K = 2 + t % 3;
    const LabelMap raw = sdcl::testing::random_labels(rng, e, K);
    const LabelMap once = sdcl::largest_connected_component(raw, K);
    EXPECT_EQ(once, sdcl::testing::oracle_lcc(raw, K));
    EXPECT_EQ(sdcl::largest_connected_component(once, K), once);
    std::vector<std::size_t> before(K, 0), after(K, 0);
    for (std::size_t v = 0; v < raw.size(); ++v) {
      ++before[raw[v]];
      ++after[once[v]];
      if (raw[v] == 0) {
        EXPECT_EQ(once[v], 0);
      }
    }
    for (std::size_t c = 1; c < K; ++c) EXPECT_LE(after[c], before[c]);
  }
}

TEST(Maskops, LccRejectsOutOfRangeLabels) {
  EXPECT_THROW(sdcl::largest_connected_component(LabelMap({2, 1, 1}, std::vector<std::uint8_t>{0, 3}), 2),
               sdcl::ShapeError);
}

}  // namespace
