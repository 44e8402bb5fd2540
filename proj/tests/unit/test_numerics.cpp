#include <gtest/gtest.h>

#include <cmath>

#include "sdst/geometry.hpp"
#include "sdst/grad_check.hpp"
#include "sdst/numerics/layers.hpp"

using namespace sdst;
using Md = Matrix<double>;

namespace {

Md row(std::initializer_list<double> v) {
  Md m(1, static_cast<Index>(v.size()));
  Index i = 0;
  for (double x : v) m(0, i++) = x;
  return m;
}

Var<double> cst(const Md& m) { return constant<double>(m); }

}  // namespace

TEST(Softmax, UniformInput) {
  const Md p = softmax<double>(row({1, 1, 1}));
  for (Index i = 0; i < 3; ++i) EXPECT_NEAR(p(0, i), 1.0 / 3.0, 1e-12);
}

TEST(Softmax, LogTwo) {
  const Md p = softmax<double>(row({0, std::log(2.0)}));
  EXPECT_NEAR(p(0, 0), 1.0 / 3.0, 1e-12);
  EXPECT_NEAR(p(0, 1), 2.0 / 3.0, 1e-12);
}

TEST(Softmax, ShiftInvariant) {
  const Md base = softmax<double>(row({0, 0, 0}));
  for (double c : {-1e3, -2.5, 0.0, 7.0, 1e3}) {
    const Md p = softmax<double>(row({5 + c, 5 + c, 5 + c}));
    EXPECT_NEAR((p - base).cwiseAbs().maxCoeff(), 0.0, 1e-12);
    EXPECT_NEAR(p.sum(), 1.0, 1e-9);
  }
}

TEST(Softmax, EmptyThrows) {
  EXPECT_THROW(softmax<double>(Md(1, 0)), Error);
}

TEST(LayerNorm, ConstantInputGivesZeros) {
  const Md x = Md::Constant(1, 5, 3.7);
  const Md y = layer_norm(cst(x), cst(Md::Ones(1, 5)), cst(Md::Zero(1, 5))).value();
  EXPECT_NEAR(y.cwiseAbs().maxCoeff(), 0.0, 1e-12);
}

TEST(LayerNorm, AlreadyNormalized) {
  const Md y = layer_norm(cst(row({1, -1})), cst(Md::Ones(1, 2)), cst(Md::Zero(1, 2)), 1e-12).value();
  EXPECT_NEAR(y(0, 0), 1.0, 1e-9);
  EXPECT_NEAR(y(0, 1), -1.0, 1e-9);
}

TEST(LayerNorm, RandomVectorStatistics) {
  Rng rng(3);
  const Md x = init::normal<double>(1, 8, 2.0, rng).array() + 5.0;
  const Md y = layer_norm(cst(x), cst(Md::Ones(1, 8)), cst(Md::Zero(1, 8))).value();
  const double mean = y.mean();
  const double var = (y.array() - mean).square().mean();
  EXPECT_NEAR(mean, 0.0, 1e-9);
  // Variance falls short of 1 by eps relative to the input variance.
  const double in_var = (x.array() - x.mean()).square().mean();
  EXPECT_NEAR(var, in_var / (in_var + 1e-5), 1e-9);
}

TEST(Sample1d, IntegerCoordinateGivesRow) {
  Rng rng(1);
  const Md seq = init::normal<double>(5, 3, 1.0, rng);
  const Md out = sample_1d(cst(seq), cst(Md::Constant(1, 1, 3.0)), 1).value();
  EXPECT_NEAR((out - seq.row(3)).cwiseAbs().maxCoeff(), 0.0, 1e-15);
}

TEST(Sample1d, Midpoint) {
  Md seq(2, 2);
  seq << 1, 2, 3, 6;
  const Md out = sample_1d(cst(seq), cst(Md::Constant(1, 1, 0.5)), 1).value();
  EXPECT_DOUBLE_EQ(out(0, 0), 2.0);
  EXPECT_DOUBLE_EQ(out(0, 1), 4.0);
}

TEST(Sample1d, ClampsBelowZero) {
  Md seq(3, 1);
  seq << 4, 5, 6;
  const Md out = sample_1d(cst(seq), cst(Md::Constant(1, 1, -0.7)), 1).value();
  EXPECT_DOUBLE_EQ(out(0, 0), 4.0);
  const Md hi = sample_1d(cst(seq), cst(Md::Constant(1, 1, 9.2)), 1).value();
  EXPECT_DOUBLE_EQ(hi(0, 0), 6.0);
}

TEST(Sample1d, WithinNeighbourRange) {
  Rng rng(9);
  const Md seq = init::normal<double>(6, 4, 1.0, rng);
  for (int k = 0; k < 50; ++k) {
    const double c = rng.uniform(0.0, 5.0);
    const Md out = sample_1d(cst(seq), cst(Md::Constant(1, 1, c)), 1).value();
    const Index lo = static_cast<Index>(std::floor(c));
    const Index hi = std::min<Index>(lo + 1, 5);
    for (Index j = 0; j < 4; ++j) {
      EXPECT_GE(out(0, j), std::min(seq(lo, j), seq(hi, j)) - 1e-12);
      EXPECT_LE(out(0, j), std::max(seq(lo, j), seq(hi, j)) + 1e-12);
    }
  }
}

TEST(Sample1d, EmptySequenceThrows) {
  EXPECT_THROW(sample_1d(cst(Md(0, 3)), cst(Md::Zero(1, 1)), 1), Error);
}

TEST(DropPath, EvalIsIdentity) {
  Rng rng(0);
  const Md x = init::normal<double>(4, 3, 1.0, rng);
  EXPECT_EQ(drop_path(cst(x), 0.5, false, rng, 4).value(), x);
  EXPECT_EQ(drop_path(cst(x), 0.0, true, rng, 4).value(), x);
}

TEST(DropPath, KeepRate) {
  Rng rng(42);
  const Index n = 100000;
  const Md x = Md::Ones(n, 1);
  const Md y = drop_path(cst(x), 0.25, true, rng, n).value();
  const double kept = static_cast<double>((y.array() > 0.0).count()) / static_cast<double>(n);
  EXPECT_NEAR(kept, 0.75, 0.01);
  EXPECT_NEAR(y.maxCoeff(), 1.0 / 0.75, 1e-12);
}

TEST(DropPath, ProbabilityOneThrows) {
  Rng rng(0);
  EXPECT_THROW(drop_path(cst(Md::Ones(2, 2)), 1.0, true, rng, 2), Error);
}

TEST(Geometry, CenterWidthToMoment) {
  auto m = cw_to_moment(CenterWidth{0.5, 1.0});
  EXPECT_DOUBLE_EQ(m.start, 0.0);
  EXPECT_DOUBLE_EQ(m.end, 1.0);
  m = cw_to_moment(CenterWidth{0.1, 0.4});
  EXPECT_DOUBLE_EQ(m.start, 0.0);
  EXPECT_NEAR(m.end, 0.3, 1e-15);
  m = cw_to_moment(CenterWidth{0.6, 0.2});
  EXPECT_NEAR(m.start, 0.5, 1e-15);
  EXPECT_NEAR(m.end, 0.7, 1e-15);
}

TEST(Geometry, CenterWidthRoundTrip) {
  const CenterWidth r{0.42, 0.3};
  const CenterWidth back = moment_to_cw(cw_to_moment(r));
  EXPECT_NEAR(back.center, r.center, 1e-15);
  EXPECT_NEAR(back.width, r.width, 1e-15);
}

TEST(Geometry, IouBasics) {
  EXPECT_DOUBLE_EQ(iou_1d({0.2, 0.6}, {0.2, 0.6}), 1.0);
  EXPECT_DOUBLE_EQ(iou_1d({0.0, 0.2}, {0.5, 0.9}), 0.0);
  EXPECT_DOUBLE_EQ(iou_1d({0.3, 0.3}, {0.3, 0.3}), 0.0);
}

TEST(Geometry, IouMatchesDiscretization) {
  const Moment a{0.0, 0.2}, b{0.1, 0.3};
  const int bins = 1000000;
  long inter = 0, uni = 0;
  for (int i = 0; i < bins; ++i) {
    const double t = (i + 0.5) / bins;
    const bool in_a = t >= a.start && t < a.end;
    const bool in_b = t >= b.start && t < b.end;
    inter += in_a && in_b;
    uni += in_a || in_b;
  }
  EXPECT_NEAR(iou_1d(a, b), static_cast<double>(inter) / static_cast<double>(uni), 1e-5);
  EXPECT_NEAR(iou_1d(a, b), 1.0 / 3.0, 1e-12);
}

TEST(Geometry, IouSymmetricAndMonotone) {
  Rng rng(5);
  for (int k = 0; k < 100; ++k) {
    const double s = rng.uniform(0, 0.5), e = s + rng.uniform(0.01, 0.4);
    const double s2 = rng.uniform(0, 0.5), e2 = s2 + rng.uniform(0.01, 0.4);
    EXPECT_DOUBLE_EQ(iou_1d({s, e}, {s2, e2}), iou_1d({s2, e2}, {s, e}));
  }
  double prev = 1.0;
  for (double shift = 0.0; shift < 0.5; shift += 0.01) {
    const double v = iou_1d({0.2, 0.4}, {0.2 + shift, 0.4 + shift});
    EXPECT_LE(v, prev + 1e-15);
    prev = v;
  }
}

TEST(GradCheck, EveryPrimitive) {
  const auto rep = grad_check(grad_check_config(), "primitives", 1);
  EXPECT_GE(rep.entries.size(), 39u);
  for (const auto& e : rep.entries) EXPECT_GT(e.checked, 0) << e.target;
  for (const auto& e : rep.entries) EXPECT_LT(e.max_rel_error, 1e-3) << e.target << " " << e.worst_param;
}

TEST(GradCheck, LinearLayer) {
  const auto rep = grad_check(grad_check_config(), "linear", 0);
  EXPECT_LT(rep.max_rel_error, 1e-6);
}

TEST(GradCheck, RefusesLargeConfigs) {
  ModelConfig c = grad_check_config();
  c.width = 64;
  EXPECT_THROW(grad_check(c, "linear", 0), Error);
  GradCheckOptions o;
  o.frames = 32;
  EXPECT_THROW(grad_check(grad_check_config(), "linear", 0, o), Error);
}
