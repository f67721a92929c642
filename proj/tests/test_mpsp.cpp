#include <gtest/gtest.h>

#include <algorithm>
#include <numeric>

#include "lmdepth/meter.hpp"
#include "lmdepth/mpsp.hpp"
#include "test_helpers.hpp"

using namespace th;

namespace {

MPSPConfig small_cfg(std::vector<std::size_t> scales, std::size_t branch = 8) {
  MPSPConfig c;
  c.scales = std::move(scales);
  c.branch_channels = branch;
  c.n_bins = 16;
  c.n_classes = 5;
  return c;
}

void zero_all(MPSPHead<D>& head) {
  struct Z {
    void param(const std::string&, Var<D>& p, QuantState*) { p.mutable_value().fill(0.0); }
  } z;
  head.visit(z, "");
}

// Dyadic values: every partial sum is exact, so summation order cannot matter.
Tensor<D> dyadic(Shape s, Rng& rng) {
  Tensor<D> t(std::move(s));
  for (auto& v : t.storage()) v = static_cast<double>(static_cast<int>(rng.uniform_int(512)) - 256) / 256.0;
  return t;
}

}  // namespace

TEST(PyramidFuse, UnitScaleIdentityDuplicatesInput) {
  Rng rng(1);
  MPSPHead<D> head(small_cfg({1}), 8, 8, rng);
  auto& br = head.branches()[0];
  br.weight.mutable_value().fill(0.0);
  for (std::size_t c = 0; c < 8; ++c) br.weight.mutable_value()[c * 8 + c] = 1.0;
  br.bias.mutable_value().fill(0.0);
  auto x = rand(Shape{8, 4, 6}, rng);
  auto f = head.pyramid_fuse(constant(x)).value();
  ASSERT_EQ(f.shape(), (Shape{16, 4, 6}));
  for (std::size_t i = 0; i < x.size(); ++i) {
    ASSERT_EQ(f[i], x[i]);
    ASSERT_EQ(f[x.size() + i], x[i]);
  }
}

TEST(PyramidFuse, ConstantInputStaysConstant) {
  Rng rng(2);
  MPSPHead<D> head(small_cfg({1, 2, 3, 6}), 4, 8, rng);
  Tensor<D> x(Shape{4, 6, 12});
  for (std::size_t c = 0; c < 4; ++c)
    for (std::size_t p = 0; p < 72; ++p) x[c * 72 + p] = 0.3 * static_cast<double>(c) - 0.2;
  auto f = head.pyramid_fuse(constant(x)).value();
  ASSERT_EQ(f.shape()[0], 4u + 4u * 8u);
  for (std::size_t c = 0; c < f.shape()[0]; ++c)
    for (std::size_t p = 1; p < 72; ++p) EXPECT_NEAR(f[c * 72 + p], f[c * 72], 1e-14);
}

TEST(PyramidFuse, ChannelCountAndDivisibility) {
  Rng rng(3);
  MPSPConfig c;
  c.branch_channels = 24;
  EXPECT_EQ(c.fused_channels(96), 192u);
  MPSPHead<D> head(c, 96, 24, rng);
  EXPECT_EQ(head.pyramid_fuse(constant(rand(Shape{96, 6, 6}, rng))).shape(), (Shape{192, 6, 6}));
  EXPECT_THROW(head.pyramid_fuse(constant(rand(Shape{96, 4, 6}, rng))), ShapeError);
}

TEST(PyramidFuse, SmallPresetScalesCostFewerMacs) {
  Rng rng(4);
  auto x = constant(rand(Shape{96, 6, 6}, rng));
  MPSPHead<D> full(small_cfg({1, 2, 3, 6}, 24), 96, 24, rng);
  MPSPHead<D> small(small_cfg({1, 6}, 24), 96, 24, rng);
  NoGradGuard ng;
  MacMeter m_full;
  full.pyramid_fuse(x);
  const auto full_macs = m_full.count();
  MacMeter m_small;
  small.pyramid_fuse(x);
  const auto small_macs = m_small.count();
  EXPECT_GT(small_macs, 0u);
  EXPECT_LT(small_macs, full_macs);
}

TEST(Classify, ZeroWeightsGiveUniform) {
  Rng rng(5);
  MPSPHead<D> head(small_cfg({1, 2}), 4, 8, rng);
  zero_all(head);
  auto logits = head.classify(constant(rand(Shape{20, 4, 4}, rng)));
  ASSERT_EQ(logits.shape(), (Shape{5}));
  for (D v : logits.data()) EXPECT_EQ(v, 0.0);
  for (auto y = ops::softmax(logits, 0); D p : y.data()) EXPECT_NEAR(p, 0.2, 1e-15);
}

TEST(Classify, DefaultClassCount) {
  Rng rng(6);
  MPSPHead<D> head(MPSPConfig{}, 96, 24, rng);
  EXPECT_EQ(head.forward(constant(rand(Shape{96, 2, 2}, rng))).class_logits.shape(), (Shape{25}));
}

TEST(Classify, SpatialPermutationInvariant) {
  Rng rng(7);
  MPSPHead<D> head(small_cfg({1, 2}), 4, 8, rng);
  const std::size_t C = head.fused_channels(), H = 4, W = 6, HW = H * W;
  auto f = dyadic(Shape{C, H, W}, rng);
  for (int trial = 0; trial < 10; ++trial) {
    std::vector<std::size_t> perm(HW);
    std::iota(perm.begin(), perm.end(), 0);
    for (std::size_t i = HW - 1; i > 0; --i) std::swap(perm[i], perm[rng.uniform_int(i + 1)]);
    Tensor<D> g(Shape{C, H, W});
    for (std::size_t c = 0; c < C; ++c)
      for (std::size_t p = 0; p < HW; ++p) g[c * HW + p] = f[c * HW + perm[p]];
    auto a = head.classify(constant(f)).value(), b = head.classify(constant(g)).value();
    EXPECT_EQ(a.storage(), b.storage());
  }
}

TEST(Bins, FormulaExamples) {
  auto c = ops::bin_centers(constant(Tensor<D>::from(Shape{2}, {0.5, 0.5})), 0.0, 10.0).value();
  EXPECT_DOUBLE_EQ(c[0], 2.5);
  EXPECT_DOUBLE_EQ(c[1], 7.5);

  Rng rng(8);
  MPSPConfig cfg = small_cfg({1});
  cfg.d_min = 0.5;
  cfg.d_max = 4.5;
  MPSPHead<D> head(cfg, 4, 8, rng);
  auto bins = head.bins_from_scores(constant(Tensor<D>(Shape{16})));
  for (std::size_t i = 0; i < 16; ++i) {
    EXPECT_NEAR(bins.widths.data()[i], 1.0 / 16, 1e-15);
    EXPECT_NEAR(bins.centers.data()[i], 0.5 + 4.0 * (i + 0.5) / 16, 1e-12);
  }
}

TEST(Bins, RandomScoresKeepInvariants) {
  Rng rng(9);
  MPSPHead<D> head(MPSPConfig{}, 96, 24, rng);
  const auto& cfg = head.config();
  for (int trial = 0; trial < 100; ++trial) {
    auto scores = rand(Shape{cfg.n_bins}, rng, -8, 8);
    auto bins = head.bins_from_scores(constant(scores));
    const auto w = bins.widths.data();
    const auto c = bins.centers.data();
    double sum = 0, cum = 0;
    for (D v : w) {
      ASSERT_GT(v, 0.0);
      sum += v;
    }
    EXPECT_NEAR(sum, 1.0, 1e-6);
    EXPECT_GT(c[0], cfg.d_min);
    EXPECT_LT(c[cfg.n_bins - 1], cfg.d_max);
    for (std::size_t i = 0; i < cfg.n_bins; ++i) {
      cum += w[i];
      EXPECT_NEAR(c[i], cfg.d_min + (cfg.d_max - cfg.d_min) * (cum - w[i] / 2), 1e-12);
      if (i > 0) {
        ASSERT_GT(c[i], c[i - 1]);
      }
    }
  }
}

TEST(Bins, ExtremeScoresStayStrictlyIncreasing) {
  Rng rng(19);
  MPSPHead<D> head(MPSPConfig{}, 96, 24, rng);
  MPSPHead<float> headf(MPSPConfig{}, 96, 24, rng);
  const auto& cfg = head.config();
  for (int trial = 0; trial < 50; ++trial) {
    auto scores = rand(Shape{cfg.n_bins}, rng, -60, 60);
    auto c = head.bins_from_scores(constant(scores)).centers.value();
    auto cf = headf.bins_from_scores(constant(scores.cast<float>())).centers.value();
    EXPECT_GT(c[0], cfg.d_min);
    EXPECT_LT(c[cfg.n_bins - 1], cfg.d_max);
    for (std::size_t i = 1; i < cfg.n_bins; ++i) {
      ASSERT_GT(c[i], c[i - 1]);
      ASSERT_GT(cf[i], cf[i - 1]);
    }
  }
}

TEST(GlobalFeats, ZeroLinearAndShape) {
  Rng rng(10);
  MPSPHead<D> head(small_cfg({1, 2}), 4, 12, rng);
  const std::size_t C = head.fused_channels();
  auto a = rand(Shape{C, 4, 6}, rng), b = rand(Shape{C, 4, 6}, rng);
  EXPECT_EQ(head.global_feats(constant(a)).shape(), (Shape{12, 4, 6}));
  head.global_conv().bias.mutable_value().fill(0.0);
  auto lhs = head.global_feats(ops::add(constant(a), constant(b))).value();
  auto rhs = ops::add(head.global_feats(constant(a)), head.global_feats(constant(b))).value();
  EXPECT_LT(max_abs_diff(lhs, rhs), 1e-10);
  head.global_conv().weight.mutable_value().fill(0.0);
  for (auto y = head.global_feats(constant(a)); D v : y.data()) EXPECT_EQ(v, 0.0);
}

TEST(MpspForward, PadsBottleneckAndCropsBack) {
  Rng rng(11);
  MPSPHead<D> head(MPSPConfig{}, 16, 24, rng);
  for (auto [h, w] : std::vector<std::pair<std::size_t, std::size_t>>{{2, 2}, {3, 5}, {6, 6}, {7, 12}}) {
    auto out = head.forward(constant(rand(Shape{16, h, w}, rng)));
    EXPECT_EQ(out.global_features.shape(), (Shape{24, h, w}));
    EXPECT_EQ(out.bins.centers.shape(), (Shape{64}));
  }
}

TEST(MpspConfig, Validation) {
  MPSPConfig c;
  c.scales = {1, 3, 2};
  EXPECT_THROW(c.validate(), ConfigError);
  c = MPSPConfig{};
  c.scales.clear();
  EXPECT_THROW(c.validate(), ConfigError);
  c = MPSPConfig{};
  c.d_min = 5;
  c.d_max = 5;
  EXPECT_THROW(c.validate(), ConfigError);
  c = MPSPConfig{};
  c.n_bins = 1;
  EXPECT_THROW(c.validate(), ConfigError);
  EXPECT_EQ(MPSPConfig{}.spatial_multiple(), 6u);
}
