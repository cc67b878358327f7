#include <gtest/gtest.h>

#include <algorithm>
#include <vector>

#include "oracles.hpp"
#include "poifusion/fusion.hpp"

using namespace poifusion;

namespace {

ModelConfig model(FusionMode mode = FusionMode::dynamic, AnchorSet anchors = AnchorSet::center_and_corners) {
  ModelConfig cfg;
  cfg.channels = 8;
  cfg.groups = 2;
  cfg.heads = 2;
  cfg.fusion = mode;
  cfg.anchors = anchors;
  cfg.init_std = 0.3;
  return cfg;
}

Tensor probe(Tape& t, const Tensor& y, unsigned seed) {
  return ops::sum(t, ops::mul(t, y, Tensor(y.shape(), oracle::normal_values(y.numel(), seed))));
}

std::vector<double> grad_of(const Tensor& t) { return {t.grad().begin(), t.grad().end()}; }

/// Per query q, group g, row i: y = W[q,g]·x + b[q,g] with W stored row-major
/// Cout×Cin, by explicit loops.
std::vector<double> dynamic_linear_oracle(const Tensor& x, const Tensor& w, const Tensor& b, std::size_t groups) {
  const std::size_t q = x.dim(0), m = x.dim(1), cin = x.dim(2), cout = b.dim(1) / groups, p = m / groups;
  std::vector<double> out(q * m * cout, 0.0);
  for (std::size_t qi = 0; qi < q; ++qi) {
    const std::size_t wq = w.dim(0) == 1 ? 0 : qi;
    for (std::size_t r = 0; r < m; ++r) {
      const std::size_t g = r / p;
      for (std::size_t o = 0; o < cout; ++o) {
        double acc = b[wq * groups * cout + g * cout + o];
        for (std::size_t i = 0; i < cin; ++i)
          acc += w[wq * groups * cout * cin + (g * cout + o) * cin + i] * x[(qi * m + r) * cin + i];
        out[(qi * m + r) * cout + o] = acc;
      }
    }
  }
  return out;
}

}  // namespace

TEST(DynamicLinear, MatchesLoopOracleForPerQueryAndSharedParameters) {
  Tensor x(Shape{3, 6, 4}, oracle::normal_values(72, 1));
  for (std::size_t qw : {3u, 1u}) {
    Tensor w(Shape{qw, 2 * 5 * 4}, oracle::normal_values(qw * 40, 2));
    Tensor b(Shape{qw, 2 * 5}, oracle::normal_values(qw * 10, 3));
    Tape t;
    const Tensor y = ops::dynamic_linear(t, x, w, b, 2);
    ASSERT_EQ(y.shape(), (Shape{3, 6, 5}));
    const auto ref = dynamic_linear_oracle(x, w, b, 2);
    for (std::size_t i = 0; i < ref.size(); ++i) EXPECT_NEAR(y[i], ref[i], 1e-12);
  }
}

TEST(DynamicLinear, GradientsMatchFiniteDifferences) {
  for (std::size_t qw : {2u, 1u}) {
    Tensor x(Shape{2, 4, 3}, oracle::normal_values(24, 4), true);
    Tensor w(Shape{qw, 2 * 2 * 3}, oracle::normal_values(qw * 12, 5), true);
    Tensor b(Shape{qw, 2 * 2}, oracle::normal_values(qw * 4, 6), true);
    auto f = [&](Tape& t) { return probe(t, ops::dynamic_linear(t, x, w, b, 2), 7); };
    Tape t;
    t.backward(f(t));
    auto scalar = [&] {
      Tape u;
      return f(u).item();
    };
    EXPECT_LT(oracle::worst_rel(grad_of(x), oracle::fd_gradient(scalar, x)), 1e-6);
    EXPECT_LT(oracle::worst_rel(grad_of(w), oracle::fd_gradient(scalar, w)), 1e-6);
    EXPECT_LT(oracle::worst_rel(grad_of(b), oracle::fd_gradient(scalar, b)), 1e-6);
  }
}

TEST(DynamicLinear, ShapeMismatchIsDimensionError) {
  Tape t;
  Tensor x(Shape{2, 4, 3});
  EXPECT_THROW(ops::dynamic_linear(t, x, Tensor(Shape{2, 11}), Tensor(Shape{2, 4}), 2), DimensionError);
  EXPECT_THROW(ops::dynamic_linear(t, x, Tensor(Shape{3, 12}), Tensor(Shape{3, 4}), 2), DimensionError);
  EXPECT_THROW(ops::dynamic_linear(t, x, Tensor(Shape{2, 12}), Tensor(Shape{2, 4}), 3), DimensionError);
}

TEST(FusionParams, ChannelBookkeepingHalvesThenRestores) {
  ModelConfig cfg;  // C = 256, G = 4, Cg = 64
  Rng rng(1);
  const FusionParams fp = FusionParams::init(cfg, rng);
  EXPECT_EQ(fp.l1_w_head.shape(), (Shape{256, 4 * 64 * 128}));
  EXPECT_EQ(fp.l1_b_head.shape(), (Shape{256, 4 * 64}));
  EXPECT_EQ(fp.l2_w_head.shape(), (Shape{256, 4 * 64 * 64}));
  EXPECT_EQ(fp.agg_w.shape(), (Shape{36 * 64, 256}));
  // Per query: 4·(128·64 + 64) + 4·(64·64 + 64) generated values.
  EXPECT_EQ(fp.l1_w_head.dim(1) + fp.l1_b_head.dim(1) + fp.l2_w_head.dim(1) + fp.l2_b_head.dim(1), 49664u);
  cfg.anchors = AnchorSet::center_only;
  Rng rng2(1);
  EXPECT_EQ(FusionParams::init(cfg, rng2).agg_w.dim(0), 256u);
}

TEST(FusePois, ZeroHeadsGiveZeroOutput) {
  const ModelConfig cfg = model();
  Rng rng(2);
  FusionParams fp = FusionParams::init(cfg, rng);
  for (Tensor* t : {&fp.l1_w_head, &fp.l1_b_head, &fp.l2_w_head, &fp.l2_b_head})
    std::fill(t->data().begin(), t->data().end(), 0.0);
  Tensor feats(Shape{2, 8}, oracle::normal_values(16, 3));
  Tensor pairs(Shape{2, 18, 8}, oracle::normal_values(288, 4));
  Tape t;
  const Tensor y = fuse_pois(t, pairs, dynamic_params(t, feats, fp), fp, 2);
  ASSERT_EQ(y.shape(), (Shape{2, 18, 4}));
  for (double v : y.data()) EXPECT_EQ(v, 0.0);
}

TEST(FusePois, StaticAblationSharesOneParameterSetAcrossQueries) {
  const ModelConfig cfg = model(FusionMode::static_weights);
  Rng rng(3);
  const FusionParams fp = FusionParams::init(cfg, rng);
  EXPECT_FALSE(fp.is_dynamic());
  Tensor pairs(Shape{2, 18, 8}, oracle::normal_values(288, 5));
  std::copy(pairs.data().begin(), pairs.data().begin() + 144, pairs.data().begin() + 144);  // identical queries
  Tape t;
  const DynamicParams dp = dynamic_params(t, Tensor(Shape{2, 8}, oracle::normal_values(16, 6)), fp);
  EXPECT_EQ(dp.l1_w.dim(0), 1u);
  const Tensor y = fuse_pois(t, pairs, dp, fp, 2);
  for (std::size_t i = 0; i < 72; ++i) EXPECT_EQ(y[i], y[72 + i]);
  std::size_t names = 0;
  FusionParams copy = fp;
  copy.visit([&](const std::string&, Tensor&) { ++names; });
  EXPECT_EQ(names, 12u);
}

TEST(FusePois, SwappingModalitiesNeedsSwappedFirstLayerColumns) {
  const ModelConfig cfg = model();
  Rng rng(4);
  const FusionParams fp = FusionParams::init(cfg, rng);
  Tensor feats(Shape{1, 8}, oracle::normal_values(8, 7));
  Tensor pairs(Shape{1, 18, 8}, oracle::normal_values(144, 8));
  Tensor swapped(pairs.shape(), std::vector<double>(pairs.data().begin(), pairs.data().end()));
  for (std::size_t r = 0; r < 18; ++r)
    std::swap_ranges(swapped.data().begin() + r * 8, swapped.data().begin() + r * 8 + 4, swapped.data().begin() + r * 8 + 4);
  Tape t;
  DynamicParams dp = dynamic_params(t, feats, fp);
  const Tensor y = fuse_pois(t, pairs, dp, fp, 2);
  const Tensor y_swapped = fuse_pois(t, swapped, dp, fp, 2);
  double diff = 0;
  for (std::size_t i = 0; i < y.numel(); ++i) diff = std::max(diff, std::abs(y[i] - y_swapped[i]));
  EXPECT_GT(diff, 1e-6);
  // Swap the [f_P | f_I] column blocks of every generated 4×8 L1 matrix.
  Tensor l1(dp.l1_w.shape(), std::vector<double>(dp.l1_w.data().begin(), dp.l1_w.data().end()));
  for (std::size_t row = 0; row < 2 * 4; ++row)
    std::swap_ranges(l1.data().begin() + row * 8, l1.data().begin() + row * 8 + 4, l1.data().begin() + row * 8 + 4);
  dp.l1_w = l1;
  const Tensor y_both = fuse_pois(t, swapped, dp, fp, 2);
  for (std::size_t i = 0; i < y.numel(); ++i) EXPECT_NEAR(y[i], y_both[i], 1e-12);
}

TEST(AggregatePois, ZeroLayerIsResidualIdentity) {
  const ModelConfig cfg = model();
  Rng rng(5);
  FusionParams fp = FusionParams::init(cfg, rng);
  std::fill(fp.agg_w.data().begin(), fp.agg_w.data().end(), 0.0);
  Tensor feats(Shape{3, 8}, oracle::normal_values(24, 9));
  Tape t;
  const Tensor out = aggregate_pois(t, Tensor(Shape{3, 18, 4}, oracle::normal_values(216, 10)), feats, fp);
  for (std::size_t i = 0; i < 24; ++i) EXPECT_EQ(out[i], feats[i]);
}

TEST(AggregatePois, CanonicalOrderMatters) {
  const ModelConfig cfg = model();
  Rng rng(6);
  const FusionParams fp = FusionParams::init(cfg, rng);
  Tensor feats(Shape{1, 8}, oracle::normal_values(8, 11));
  const auto v = oracle::normal_values(72, 12);
  std::vector<double> rev;
  for (int r = 17; r >= 0; --r) rev.insert(rev.end(), v.begin() + r * 4, v.begin() + r * 4 + 4);
  Tape t;
  const Tensor a = aggregate_pois(t, Tensor(Shape{1, 18, 4}, v), feats, fp);
  const Tensor b = aggregate_pois(t, Tensor(Shape{1, 18, 4}, rev), feats, fp);
  double diff = 0;
  for (std::size_t i = 0; i < 8; ++i) diff = std::max(diff, std::abs(a[i] - b[i]));
  EXPECT_GT(diff, 1e-6);
}

TEST(AggregatePois, WrongPoiCountIsDimensionError) {
  const ModelConfig cfg = model();
  Rng rng(7);
  const FusionParams fp = FusionParams::init(cfg, rng);
  Tape t;
  EXPECT_THROW(aggregate_pois(t, Tensor(Shape{1, 17, 4}), Tensor(Shape{1, 8}), fp), DimensionError);
}

TEST(AggregatePois, CenterOnlyConcatenatesGroupsTimesOneTimesCg) {
  const ModelConfig cfg = model(FusionMode::dynamic, AnchorSet::center_only);
  Rng rng(8);
  const FusionParams fp = FusionParams::init(cfg, rng);
  EXPECT_EQ(fp.agg_w.dim(0), 2u * 1u * 4u);
  Tape t;
  EXPECT_EQ(aggregate_pois(t, Tensor(Shape{2, 2, 4}), Tensor(Shape{2, 8}), fp).shape(), (Shape{2, 8}));
}

TEST(FusionBlock, GradientsMatchFiniteDifferences) {
  for (FusionMode mode : {FusionMode::dynamic, FusionMode::static_weights}) {
    const ModelConfig cfg = model(mode);
    Rng rng(9);
    FusionParams fp = FusionParams::init(cfg, rng);
    fp.visit([s = 40u](const std::string&, Tensor& p) mutable {
      const auto v = oracle::normal_values(p.numel(), s++, 0.2);
      for (std::size_t i = 0; i < v.size(); ++i) p.data()[i] += v[i];
    });
    Tensor feats(Shape{2, 8}, oracle::normal_values(16, 13), true);
    Tensor pairs(Shape{2, 18, 8}, oracle::normal_values(288, 14), true);
    auto f = [&](Tape& t) {
      const Tensor fused = fuse_pois(t, pairs, dynamic_params(t, feats, fp), fp, 2);
      return probe(t, aggregate_pois(t, fused, feats, fp), 15);
    };
    Tape t;
    t.backward(f(t));
    auto scalar = [&] {
      Tape u;
      return f(u).item();
    };
    EXPECT_LT(oracle::worst_rel(grad_of(feats), oracle::fd_gradient(scalar, feats)), 1e-4);
    EXPECT_LT(oracle::worst_rel(grad_of(pairs), oracle::fd_gradient(scalar, pairs)), 1e-4);
    fp.visit([&](const std::string& name, Tensor& p) {
      EXPECT_LT(oracle::worst_rel(grad_of(p), oracle::fd_gradient(scalar, p)), 1e-4) << name;
    });
  }
}
