#include <gtest/gtest.h>

#include <cmath>

#include "sdcl/losses.hpp"
#include "sdcl/testing/oracle_suite.hpp"
#include "sdcl/testing/oracles.hpp"

namespace {

using sdcl::BinaryMask;
using sdcl::Direction;
using sdcl::Extent3;
using sdcl::LabelMap;
using sdcl::Tensor;
namespace t = sdcl::testing;

// Fixed 2x2x1 case, K = 2; reference values were computed independently in
// double precision with numpy.
struct Fixed {
  Tensor probs = Tensor::from_values({1, 2, 2, 2, 1}, {0.8, 0.3, 0.6, 0.1, 0.2, 0.7, 0.4, 0.9});
  LabelMap label{{2, 2, 1}, std::vector<std::uint8_t>{0, 1, 0, 0}};
  BinaryMask mask{{2, 2, 1}, std::vector<std::uint8_t>{1, 1, 0, 0}};
  BinaryMask gate{{2, 2, 1}, std::vector<std::uint8_t>{1, 0, 1, 1}};
};

TEST(Losses, FixedCaseSegIn) {
  Fixed f;
  EXPECT_NEAR(sdcl::bcp_seg_loss(f.probs, {&f.label}, f.mask, 0.5, Direction::kIn).item(), 0.712817506257685, 1e-12);
}

TEST(Losses, FixedCaseSegOut) {
  Fixed f;
  EXPECT_NEAR(sdcl::bcp_seg_loss(f.probs, {&f.label}, f.mask, 0.5, Direction::kOut).item(), 1.1481615120824615,
              1e-12);
}

TEST(Losses, FixedCaseGatedTerms) {
  Fixed f;
  EXPECT_NEAR(sdcl::masked_mse_loss(f.probs, {&f.label}, f.mask, {&f.gate}, 0.5, Direction::kIn).item(),
              0.3499999988333334, 1e-12);
  EXPECT_NEAR(sdcl::masked_kl_uniform_loss(f.probs, f.mask, {&f.gate}, 0.5, Direction::kIn).item(),
              0.16292062006602093, 1e-12);
}

TEST(Losses, PerfectPredictionIsNearZero) {
  const Extent3 e{3, 3, 2};
  sdcl::Rng rng(1);
  const LabelMap y = t::random_labels(rng, e, 3);
  const Tensor probs = sdcl::one_hot({&y}, 3);
  EXPECT_LE(sdcl::bcp_seg_loss(probs, {&y}, BinaryMask(e, 1), 0.5, Direction::kIn).item(), 1e-9);
}

TEST(Losses, CrossEntropyAtHalfIsLogTwo) {
  const LabelMap y({1, 1, 1}, std::vector<std::uint8_t>{0});
  const Tensor probs = Tensor::from_values({1, 2, 1, 1, 1}, {0.5, 0.5});
  const double s = sdcl::kDiceSmooth;
  const double dice = 0.5 * ((1.0 - (1.0 + s) / (1.25 + s)) + (1.0 - s / (0.25 + s)));
  const double loss = sdcl::bcp_seg_loss(probs, {&y}, BinaryMask({1, 1, 1}, 1), 0.5, Direction::kIn).item();
  EXPECT_NEAR(2.0 * (loss - 0.5 * dice), std::log(2.0), 1e-12);
  EXPECT_NEAR(std::log(2.0), 0.6931, 1e-4);
}

TEST(Losses, ZeroAlphaIgnoresSecondaryRegion) {
  sdcl::Rng rng(2);
  const Extent3 e{4, 4, 4};
  const LabelMap y = t::random_labels(rng, e, 2);
  BinaryMask m(e, 0);
  for (std::size_t v = 0; v < 20; ++v) m[v] = 1;
  Tensor probs = sdcl::one_hot({&y}, 2);
  // Scramble the mask-0 region only.
  std::vector<double> v(probs.values().begin(), probs.values().end());
  for (std::size_t s = 20; s < e.size(); ++s) {
    const double p = sdcl::uniform_real(rng, 0.01, 0.99);
    v[s] = p;
    v[e.size() + s] = 1.0 - p;
  }
  probs = Tensor::from_values(probs.shape(), v);
  EXPECT_LE(sdcl::bcp_seg_loss(probs, {&y}, m, 0.0, Direction::kIn).item(), 1e-9);
  EXPECT_GT(sdcl::bcp_seg_loss(probs, {&y}, m, 0.5, Direction::kIn).item(), 1e-3);
}

TEST(Losses, AllOnesMaskReducesToWholeVolume) {
  sdcl::Rng rng(3);
  const Extent3 e{4, 4, 4};
  const Tensor probs = t::random_probs(rng, 2, 3, e);
  const LabelMap a = t::random_labels(rng, e, 3), b = t::random_labels(rng, e, 3);
  const double whole = t::oracle_region_loss(probs, {&a, &b}, [](auto, auto, auto) { return true; });
  EXPECT_NEAR(sdcl::bcp_seg_loss(probs, {&a, &b}, BinaryMask(e, 1), 0.5, Direction::kIn).item(), whole, 1e-12);
  EXPECT_NEAR(sdcl::bcp_seg_loss(probs, {&a, &b}, BinaryMask(e, 0), 0.5, Direction::kOut).item(), whole, 1e-12);
}

TEST(Losses, SegLossMatchesBruteForce) {
  sdcl::Rng rng(4);
  for (int k = 0; k < 100; ++k) {
    const std::size_t K = k % 2 ? 4 : 2;
    const Extent3 e{4, 4, 4};
    const Tensor probs = t::random_probs(rng, 2, K, e);
    const LabelMap a = t::random_labels(rng, e, K), b = t::random_labels(rng, e, K);
    const BinaryMask m = t::random_mask(rng, e);
    for (Direction d : {Direction::kIn, Direction::kOut}) {
      EXPECT_NEAR(sdcl::bcp_seg_loss(probs, {&a, &b}, m, 0.5, d).item(), t::oracle_bcp_seg_loss(probs, {&a, &b}, m, 0.5, d),
                  1e-9);
    }
  }
}

TEST(Losses, MseExamples) {
  const Extent3 e{2, 1, 1};
  const LabelMap y(e, std::vector<std::uint8_t>{0, 1});
  const Tensor probs = Tensor::from_values({1, 2, 2, 1, 1}, {0.9, 0.3, 0.1, 0.7});
  const BinaryMask none(e, 0);
  EXPECT_EQ(sdcl::masked_mse_loss(probs, {&y}, BinaryMask(e, 1), {&none}, 0.5, Direction::kIn).item(), 0.0);
  const BinaryMask gate(e, std::vector<std::uint8_t>{1, 0});
  const double v = sdcl::masked_mse_loss(probs, {&y}, BinaryMask(e, 1), {&gate}, 0.5, Direction::kIn).item();
  EXPECT_NEAR(v * (1.0 + sdcl::kGateEps), 0.02, 1e-15);
}

TEST(Losses, KlExamples) {
  const Extent3 e{2, 1, 1};
  const BinaryMask gate(e, std::vector<std::uint8_t>{1, 0});
  const Tensor uniform = Tensor::from_values({1, 2, 2, 1, 1}, {0.5, 0.2, 0.5, 0.8});
  EXPECT_EQ(sdcl::masked_kl_uniform_loss(uniform, BinaryMask(e, 1), {&gate}, 0.5, Direction::kIn).item(), 0.0);
  const Tensor skew = Tensor::from_values({1, 2, 2, 1, 1}, {0.9, 0.2, 0.1, 0.8});
  const double v = sdcl::masked_kl_uniform_loss(skew, BinaryMask(e, 1), {&gate}, 0.5, Direction::kIn).item();
  EXPECT_NEAR(v * (1.0 + sdcl::kGateEps), 0.5108256237659907, 1e-12);
}

TEST(Losses, EmptyGateGivesZeroLossAndGradient) {
  sdcl::Rng rng(5);
  const Extent3 e{3, 3, 3};
  Tensor logits = Tensor::from_values({1, 2, 3, 3, 3}, std::vector<double>(54, 0.3), true);
  const Tensor probs = sdcl::softmax_channels(logits);
  const BinaryMask empty(e, 0);
  const Tensor kl = sdcl::masked_kl_uniform_loss(probs, t::random_mask(rng, e), {&empty}, 0.5, Direction::kIn);
  EXPECT_EQ(kl.item(), 0.0);
  sdcl::backward(kl);
  for (double g : logits.grad()) EXPECT_EQ(g, 0.0);
}

TEST(Losses, GatedLossesMatchBruteForce) {
  sdcl::Rng rng(6);
  for (int k = 0; k < 100; ++k) {
    const std::size_t K = k % 2 ? 4 : 2;
    const Extent3 e{4, 4, 4};
    const Tensor probs = t::random_probs(rng, 2, K, e);
    const LabelMap a = t::random_labels(rng, e, K), b = t::random_labels(rng, e, K);
    const BinaryMask m = t::random_mask(rng, e), ga = t::random_mask(rng, e, 0.3), gb = t::random_mask(rng, e, 0.3);
    const double alpha = sdcl::uniform_real(rng, 0.0, 1.0);
    for (Direction d : {Direction::kIn, Direction::kOut}) {
      EXPECT_NEAR(sdcl::masked_mse_loss(probs, {&a, &b}, m, {&ga, &gb}, alpha, d).item(),
                  t::oracle_masked_mse(probs, {&a, &b}, m, {&ga, &gb}, alpha, d), 1e-9);
      EXPECT_NEAR(sdcl::masked_kl_uniform_loss(probs, m, {&ga, &gb}, alpha, d).item(),
                  t::oracle_masked_kl(probs, m, {&ga, &gb}, alpha, d), 1e-9);
    }
  }
}

TEST(Losses, OracleSuiteAgrees) {
  const auto r = t::check_losses(7, 200);
  EXPECT_TRUE(r.ok()) << r.note;
}

sdcl::LossTerms scalar_terms(double seg_in, double seg_out, double mse_in, double mse_out, double kl_in, double kl_out) {
  return {Tensor::scalar(seg_in), Tensor::scalar(seg_out), Tensor::scalar(mse_in),
          Tensor::scalar(mse_out), Tensor::scalar(kl_in), Tensor::scalar(kl_out)};
}

TEST(Losses, TotalCombination) {
  EXPECT_NEAR(sdcl::total_loss(scalar_terms(1, 1, 1, 1, 1, 1), 0.3, 0.1).item(), 2.8, 1e-15);
  EXPECT_EQ(sdcl::total_loss(scalar_terms(0.25, 0.5, 7, 7, 9, 9), 0.0, 0.0).item(), 0.75);
  EXPECT_EQ(sdcl::total_loss_value(1, 1, 1, 1, 1, 1, 0.3, 0.1), sdcl::total_loss(scalar_terms(1, 1, 1, 1, 1, 1), 0.3, 0.1).item());
}

TEST(Losses, TotalGradientMatchesFiniteDifferences) {
  const auto r = t::check_total_loss_gradients(8, 20);
  EXPECT_TRUE(r.ok()) << r.note;
}

TEST(Losses, KlEntropyDuality) {
  sdcl::Rng rng(9);
  for (int k = 0; k < 500; ++k) {
    const std::size_t K = 2 + k % 4;
    std::vector<double> p(K);
    double s = 0.0;
    for (auto& v : p) s += (v = std::exp(sdcl::normal(rng, 0.0, 2.0)));
    for (auto& v : p) v /= s;
    double log_sum = 0.0;
    for (double v : p) log_sum += std::log(v);
    const double dual = -std::log(static_cast<double>(K)) - log_sum / static_cast<double>(K);
    EXPECT_NEAR(t::oracle_kl_uniform_voxel(p), dual, 1e-9);
    const Extent3 e{1, 1, 1};
    const BinaryMask gate(e, 1);
    const double lib =
        sdcl::masked_kl_uniform_loss(Tensor::from_values({1, K, 1, 1, 1}, p), gate, {&gate}, 1.0, Direction::kIn).item();
    EXPECT_NEAR(lib * (1.0 + sdcl::kGateEps), dual, 1e-9);
  }
}

TEST(Losses, KlStepIncreasesEntropy) {
  sdcl::Rng rng(10);
  const Extent3 e{1, 1, 1};
  const BinaryMask gate(e, 1);
  for (int k = 0; k < 200; ++k) {
    const std::size_t K = 2 + k % 3;
    std::vector<double> z(K);
    for (auto& v : z) v = sdcl::normal(rng, 0.0, 1.5);
    Tensor logits = Tensor::from_values({1, K, 1, 1, 1}, z, true);
    const Tensor p = sdcl::softmax_channels(logits);
    const double h0 = t::entropy({p.values().begin(), p.values().end()});
    sdcl::backward(sdcl::masked_kl_uniform_loss(p, gate, {&gate}, 1.0, Direction::kIn));
    const double lr = (k % 2) ? 1e-2 : 1e-3;
    for (std::size_t c = 0; c < K; ++c) z[c] -= lr * logits.grad()[c];
    const Tensor p1 = sdcl::softmax_channels(Tensor::from_values({1, K, 1, 1, 1}, z));
    EXPECT_GT(t::entropy({p1.values().begin(), p1.values().end()}), h0);
  }
}

TEST(Losses, SegLossIsMonotoneInCorrectClassProbability) {
  sdcl::Rng rng(11);
  for (int k = 0; k < 200; ++k) {
    const std::size_t K = k % 2 ? 4 : 2;
    const Extent3 e{3, 3, 3};
    const Tensor probs = t::random_probs(rng, 1, K, e);
    const LabelMap y = t::random_labels(rng, e, K);
    const BinaryMask m = t::random_mask(rng, e);
    const auto dir = k % 3 ? Direction::kIn : Direction::kOut;
    const double before = sdcl::bcp_seg_loss(probs, {&y}, m, 0.5, dir).item();
    // Move a fraction of the wrong-class mass at one voxel to the true class.
    std::vector<double> v(probs.values().begin(), probs.values().end());
    const std::size_t s = sdcl::uniform_index(rng, e.size());
    const double frac = sdcl::uniform_real(rng, 0.01, 1.0);
    for (std::size_t c = 0; c < K; ++c) {
      if (c == y[s]) continue;
      const double moved = frac * v[c * e.size() + s];
      v[c * e.size() + s] -= moved;
      v[y[s] * e.size() + s] += moved;
    }
    const double after = sdcl::bcp_seg_loss(Tensor::from_values(probs.shape(), v), {&y}, m, 0.5, dir).item();
    EXPECT_LE(after, before + 1e-15);
  }
}

TEST(Losses, LossesAreNonNegativeAndFinite) {
  sdcl::Rng rng(12);
  for (int k = 0; k < 100; ++k) {
    const std::size_t K = 2 + k % 3;
    const Extent3 e = t::random_extent(rng, 1, 5);
    const Tensor probs = t::random_probs(rng, 2, K, e, 8.0);
    const LabelMap a = t::random_labels(rng, e, K), b = t::random_labels(rng, e, K);
    const BinaryMask m = t::random_mask(rng, e), g = t::random_mask(rng, e);
    const double vals[] = {sdcl::bcp_seg_loss(probs, {&a, &b}, m, 0.5, Direction::kIn).item(),
                           sdcl::masked_mse_loss(probs, {&a, &b}, m, {&g, &g}, 0.5, Direction::kOut).item(),
                           sdcl::masked_kl_uniform_loss(probs, m, {&g, &g}, 0.5, Direction::kIn).item()};
    for (double v : vals) {
      EXPECT_TRUE(std::isfinite(v));
      EXPECT_GE(v, 0.0);
    }
  }
}

TEST(Losses, GatedLossesLeaveUngatedVoxelsAlone) {
  sdcl::Rng rng(13);
  for (int k = 0; k < 50; ++k) {
    const std::size_t K = 2 + k % 3;
    const Extent3 e{3, 4, 2};
    Tensor probs = t::random_probs(rng, 2, K, e).clone(true);
    const LabelMap a = t::random_labels(rng, e, K), b = t::random_labels(rng, e, K);
    const BinaryMask m = t::random_mask(rng, e), ga = t::random_mask(rng, e), gb = t::random_mask(rng, e);
    const BinaryMask* gates[] = {&ga, &gb};
    for (int which = 0; which < 2; ++which) {
      probs.reset_grad();
      const Tensor loss = which == 0 ? sdcl::masked_mse_loss(probs, {&a, &b}, m, {&ga, &gb}, 0.5, Direction::kIn)
                                     : sdcl::masked_kl_uniform_loss(probs, m, {&ga, &gb}, 0.5, Direction::kOut);
      sdcl::backward(loss);
      for (std::size_t bb = 0; bb < 2; ++bb) {
        for (std::size_t c = 0; c < K; ++c) {
          for (std::size_t v = 0; v < e.size(); ++v) {
            if ((*gates[bb])[v]) continue;
            EXPECT_EQ(probs.grad()[(bb * K + c) * e.size() + v], 0.0);
          }
        }
      }
    }
  }
}

TEST(Losses, LossMapAveragesToWholeVolumeLoss) {
  sdcl::Rng rng(14);
  const Extent3 e{4, 3, 2};
  const Tensor probs = t::random_probs(rng, 2, 3, e);
  const LabelMap y = t::random_labels(rng, e, 3);
  const sdcl::Image map = sdcl::seg_loss_map(probs, y, 1);
  double mean = 0.0;
  for (double v : map.data()) mean += v;
  mean /= static_cast<double>(e.size());
  const Tensor one = sdcl::slice_batch(probs, 1, 1);
  EXPECT_NEAR(mean, t::oracle_region_loss(one, {&y}, [](auto, auto, auto) { return true; }), 1e-12);
}

TEST(Losses, LabelAboveKIsRejected) {
  const Extent3 e{1, 1, 1};
  const LabelMap y(e, std::vector<std::uint8_t>{2});
  EXPECT_THROW(sdcl::bcp_seg_loss(Tensor::from_values({1, 2, 1, 1, 1}, {0.5, 0.5}), {&y}, BinaryMask(e, 1), 0.5,
                                  Direction::kIn),
               sdcl::ShapeError);
}

}  // namespace
