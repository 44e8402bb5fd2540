#include <gtest/gtest.h>

#include <cmath>

#include "../oracles.hpp"
#include "sdst/grad_check.hpp"
#include "sdst/losses.hpp"

using namespace sdst;
using Md = Matrix<double>;

namespace {

Var<double> cst(const Md& m) { return constant<double>(m); }

Md col(std::initializer_list<double> v) {
  Md m(static_cast<Index>(v.size()), 1);
  Index i = 0;
  for (double x : v) m(i++, 0) = x;
  return m;
}

std::vector<std::vector<double>> to_nested(const Md& c) {
  std::vector<std::vector<double>> out(static_cast<std::size_t>(c.rows()));
  for (Index r = 0; r < c.rows(); ++r)
    for (Index k = 0; k < c.cols(); ++k) out[static_cast<std::size_t>(r)].push_back(c(r, k));
  return out;
}

double cos_sim(const Md& a, const Md& b) {
  const double na = std::max(a.norm(), 1e-8), nb = std::max(b.norm(), 1e-8);
  return a.cwiseProduct(b).sum() / (na * nb);
}

// -log(exp(pos/t) / sum exp(all/t))
double nce(double pos, const std::vector<double>& negs, double t) {
  double z = std::exp(pos / t);
  for (double n : negs) z += std::exp(n / t);
  return -pos / t + std::log(z);
}

}  // namespace

TEST(MatchingCost, Examples) {
  LossWeights w;
  Md c = matching_cost({1.0}, {{0.2, 0.5}}, {{0.2, 0.5}}, w);
  EXPECT_NEAR(c(0, 0), -w.cls, 1e-12);
  c = matching_cost({0.0}, {{0.0, 0.1}}, {{0.5, 0.7}}, w);
  EXPECT_NEAR(c(0, 0), w.l1 * (0.5 + 0.6) + w.iou, 1e-12);
  EXPECT_THROW(matching_cost({0.5}, {{0, 1}}, {{0, 1}, {0, 0.5}}, w), Error);
}

TEST(MatchingCost, RandomMatchesFormula) {
  Rng rng(8);
  LossWeights w;
  w.cls = 2.0;
  w.l1 = 5.0;
  w.iou = 2.0;
  std::vector<double> p;
  std::vector<Moment> preds, gts;
  for (int i = 0; i < 4; ++i) {
    p.push_back(rng.uniform());
    const double s = rng.uniform(0, 0.5);
    preds.push_back({s, s + rng.uniform(0, 0.5)});
  }
  for (int i = 0; i < 2; ++i) {
    const double s = rng.uniform(0, 0.5);
    gts.push_back({s, s + rng.uniform(0, 0.5)});
  }
  const Md c = matching_cost(p, preds, gts, w);
  for (int m = 0; m < 4; ++m)
    for (int g = 0; g < 2; ++g) {
      const double l1 = std::abs(preds[m].start - gts[g].start) + std::abs(preds[m].end - gts[g].end);
      EXPECT_NEAR(c(m, g), -2.0 * p[m] + 5.0 * l1 + 2.0 * (1 - oracle::overlap(preds[m], gts[g])), 1e-12);
    }
}

TEST(Hungarian, Examples) {
  auto r = hungarian_match(Md::Constant(1, 1, 3.0));
  ASSERT_EQ(r.pairs.size(), 1u);
  EXPECT_EQ(r.pairs[0], std::make_pair(Index(0), Index(0)));
  Md c = Md::Ones(4, 4);
  c.diagonal().setZero();
  r = hungarian_match(c);
  for (Index i = 0; i < 4; ++i) EXPECT_EQ(r.pairs[static_cast<std::size_t>(i)], std::make_pair(i, i));
  EXPECT_TRUE(r.unmatched.empty());
}

TEST(Hungarian, RandomSixByFourMatchesBruteForce) {
  Rng rng(6);
  for (int k = 0; k < 50; ++k) {
    const Md c = init::uniform<double>(6, 4, 1.0, rng);
    const auto r = hungarian_match(c);
    EXPECT_EQ(r.pairs.size(), 4u);
    EXPECT_EQ(r.unmatched.size(), 2u);
    EXPECT_NEAR(assignment_cost(c, r), oracle::best_assignment_cost(to_nested(c)), 1e-12);
  }
}

TEST(Hungarian, MoreTargetsThanQueries) {
  Rng rng(7);
  const Md c = init::uniform<double>(2, 5, 1.0, rng);
  const auto r = hungarian_match(c);
  EXPECT_EQ(r.pairs.size(), 2u);
  EXPECT_NEAR(assignment_cost(c, r), oracle::best_assignment_cost(to_nested(c)), 1e-12);
}

TEST(Hungarian, PermutedTargetsGiveSamePairs) {
  Rng rng(12);
  const Md c = init::uniform<double>(5, 3, 1.0, rng);
  Md perm(5, 3);
  perm << c.col(2), c.col(0), c.col(1);
  const auto a = hungarian_match(c);
  const auto b = hungarian_match(perm);
  const Index back[3] = {2, 0, 1};
  ASSERT_EQ(a.pairs.size(), b.pairs.size());
  for (std::size_t i = 0; i < a.pairs.size(); ++i) {
    EXPECT_EQ(a.pairs[i].first, b.pairs[i].first);
    EXPECT_EQ(a.pairs[i].second, back[b.pairs[i].second]);
  }
}

TEST(Focal, Examples) {
  const double near_one = focal_loss(cst(col({1 - 1e-9})), {true}, 0.25, 2.0).item();
  EXPECT_LT(near_one, 1e-12);
  const double near_zero = focal_loss(cst(col({1e-9})), {false}, 0.25, 2.0).item();
  EXPECT_LT(near_zero, 1e-12);
  EXPECT_NEAR(focal_loss(cst(col({0.5})), {true}, 0.25, 2.0).item(), 0.25 * 0.25 * std::log(2.0), 1e-12);
}

TEST(Focal, MeanOverQueries) {
  const double a = focal_loss(cst(col({0.3, 0.8})), {true, false}, 0.25, 2.0).item();
  const double want = (-0.25 * 0.7 * 0.7 * std::log(0.3) - 0.75 * 0.64 * std::log(0.2)) / 2.0;
  EXPECT_NEAR(a, want, 1e-12);
}

TEST(Regression, Examples) {
  Md m(2, 2);
  m << 0.1, 0.3, 0.5, 0.9;
  auto r = mr_regression_losses(cst(m), m);
  EXPECT_NEAR(r.l1.item(), 0.0, 1e-15);
  EXPECT_NEAR(r.iou.item(), 0.0, 1e-12);
  Md far(2, 2);
  far << 0.5, 0.6, 0.0, 0.2;
  r = mr_regression_losses(cst(m), far);
  EXPECT_NEAR(r.iou.item(), 1.0, 1e-12);
  EXPECT_NEAR(r.l1.item(), ((0.4 + 0.3) + (0.5 + 0.7)) / 2.0, 1e-12);
  r = mr_regression_losses(cst(Md(0, 2)), Md(0, 2));
  EXPECT_TRUE(r.empty);
  EXPECT_DOUBLE_EQ(r.l1.item(), 0.0);
}

TEST(Actionness, Examples) {
  const std::vector<Moment> moments = {{0.1, 0.3}, {0.5, 0.9}, {0.0, 0.05}};
  const std::vector<Moment> gts = {{0.2, 0.4}, {0.6, 0.9}};
  const auto t = max_iou_targets(moments, gts);
  EXPECT_NEAR(t[0], 1.0 / 3.0, 1e-12);
  EXPECT_NEAR(t[1], 0.75, 1e-12);
  EXPECT_DOUBLE_EQ(t[2], 0.0);
  Md tm(3, 1);
  tm << t[0], t[1], t[2];
  EXPECT_NEAR(actionness_loss(cst(tm), tm).item(), 0.0, 1e-15);
  const auto disjoint = max_iou_targets({{0.0, 0.1}, {0.8, 0.9}}, {{0.3, 0.5}});
  Md d(2, 1);
  d << disjoint[0], disjoint[1];
  EXPECT_DOUBLE_EQ(actionness_loss(cst(Md::Ones(2, 1)), d).item(), 1.0);
}

TEST(Saliency, Examples) {
  // Dominant positive.
  EXPECT_LT(saliency_infonce(cst(col({1.0, -1.0, -1.0})), {{true, false, false}}, 0.07).item(), 1e-9);
  // All equal: ln(N + 1) with N negatives.
  EXPECT_NEAR(saliency_infonce(cst(col({0.3, 0.3, 0.3, 0.3})), {{true, false, false, false}}, 0.07).item(),
              std::log(4.0), 1e-12);
  bool flag = false;
  EXPECT_DOUBLE_EQ(saliency_infonce(cst(col({0.3, 0.1})), {{false, false}}, 0.07, &flag).item(), 0.0);
  EXPECT_TRUE(flag);
}

TEST(Saliency, RandomMatchesFormula) {
  Rng rng(10);
  const Md s = init::uniform<double>(2 * 5, 1, 1.0, rng);
  const std::vector<std::vector<bool>> pos = {{true, false, true, false, false},
                                              {false, true, true, true, false}};
  double want = 0.0;
  for (int b = 0; b < 2; ++b) {
    std::vector<double> negs;
    for (int t = 0; t < 5; ++t)
      if (!pos[b][t]) negs.push_back(s(b * 5 + t, 0));
    double sum = 0.0;
    int n = 0;
    for (int t = 0; t < 5; ++t)
      if (pos[b][t]) {
        sum += nce(s(b * 5 + t, 0), negs, 0.5);
        ++n;
      }
    want += sum / n / 2.0;
  }
  EXPECT_NEAR(saliency_infonce(cst(s), pos, 0.5).item(), want, 1e-12);
}

TEST(Alignment, SingleLevelHasNoLayerTerm) {
  Rng rng(1);
  const auto a = alignment_losses<double>({cst(init::normal<double>(2 * 3, 4, 1.0, rng))},
                                          {cst(init::normal<double>(2, 4, 1.0, rng))},
                                          {{true, false, true}, {false, true, false}}, 0.1);
  EXPECT_TRUE(a.layer_degenerate);
  EXPECT_DOUBLE_EQ(a.layer.item(), 0.0);
}

TEST(Alignment, TwoSamplesTwoLevelsMatchFormula) {
  Rng rng(2);
  const Index G = 2, T = 3, F = 4;
  const double tau = 0.2;
  std::vector<Md> v = {init::normal<double>(G * T, F, 1.0, rng), init::normal<double>(G * T, F, 1.0, rng)};
  std::vector<Md> p = {init::normal<double>(G, F, 1.0, rng), init::normal<double>(G, F, 1.0, rng)};
  const std::vector<std::vector<bool>> pos = {{true, false, true}, {false, true, false}};
  const auto a = alignment_losses<double>({cst(v[0]), cst(v[1])}, {cst(p[0]), cst(p[1])}, pos, tau);

  double video = 0.0;
  for (int l = 0; l < 2; ++l) {
    double lvl = 0.0;
    for (int b = 0; b < G; ++b) {
      double sum = 0.0;
      int n = 0;
      for (int t = 0; t < T; ++t) {
        if (!pos[b][t]) continue;
        const double s = cos_sim(v[l].row(b * T + t), p[l].row(b));
        const double neg = cos_sim(v[l].row((1 - b) * T + t), p[l].row(b));
        sum += nce(s, {neg}, tau);
        ++n;
      }
      lvl += sum / n / G;
    }
    video += lvl / 2.0;
  }
  EXPECT_NEAR(a.video.item(), video, 1e-12);

  double layer = 0.0;
  for (int l = 0; l < 2; ++l) {
    const int k = 1 - l;
    double pair = 0.0;
    for (int b = 0; b < G; ++b) {
      double sum = 0.0;
      int n = 0;
      for (int t = 0; t < T; ++t) {
        if (!pos[b][t]) continue;
        sum += nce(cos_sim(v[l].row(b * T + t), p[l].row(b)), {cos_sim(v[k].row(b * T + t), p[l].row(b))}, tau);
        ++n;
      }
      pair += sum / n / G;
    }
    layer += pair / 2.0;
  }
  EXPECT_NEAR(a.layer.item(), layer, 1e-12);
}

TEST(Alignment, IdenticalSamplesGiveSymmetricGradients) {
  Rng rng(3);
  const Md one = init::normal<double>(3, 4, 1.0, rng);
  Md v(6, 4);
  v << one, one;
  const Md pool_row = init::normal<double>(1, 4, 1.0, rng);
  Md pool(2, 4);
  pool << pool_row, pool_row;
  Var<double> vv = parameter<double>(v);
  Tape<double> tape;
  {
    TapeScope<double> scope(tape);
    const auto a = alignment_losses<double>({vv}, {cst(pool)}, {{true, false, true}, {true, false, true}}, 0.1);
    tape.backward(a.video);
  }
  EXPECT_NEAR((vv.grad().topRows(3) - vv.grad().bottomRows(3)).cwiseAbs().maxCoeff(), 0.0, 1e-14);
}

namespace {

struct TinyBatch {
  SdstModel<double> model;
  Predictions<double> preds;
  std::vector<SampleTargets> targets;
};

TinyBatch tiny_batch() {
  const ModelConfig cfg = grad_check_config();
  TinyBatch tb{SdstModel<double>(cfg, 3), {}, {}};
  Rng rng(5);
  ModelInput<double> in;
  in.groups = 2;
  in.frames = 8;
  in.tokens = 4;
  for (Index l = 0; l < cfg.levels; ++l)
    in.levels.push_back({init::normal<double>(16, cfg.video_dim, 1.0, rng),
                         init::normal<double>(8, cfg.text_dim, 1.0, rng)});
  tb.preds = tb.model.forward(in);
  tb.targets = {{{{2 / 7.0, 4 / 7.0}}, {false, false, true, true, true, false, false, false}},
                {{{0.0, 1 / 7.0}, {5 / 7.0, 1.0}}, {true, true, false, false, false, true, true, true}}};
  return tb;
}

}  // namespace

TEST(TotalLoss, ZeroWeightsGiveZero) {
  const auto tb = tiny_batch();
  LossSettings s;
  s.weights = LossWeights{0, 0, 0, 0, 0, 0, 0};
  EXPECT_DOUBLE_EQ(compute_losses(tb.preds, tb.targets, s).total.item(), 0.0);
}

TEST(TotalLoss, LinearInWeights) {
  const auto tb = tiny_batch();
  LossSettings s;
  s.weights = LossWeights{0.3, 1.7, 0.2, 0.4, 0.9, 1.1, 2.5};
  const auto r = compute_losses(tb.preds, tb.targets, s);
  const auto& c = r.components;
  const auto& w = s.weights;
  const double want = w.saliency * c.at("saliency") + w.actionness * c.at("actionness") +
                      w.cls * c.at("cls") + w.l1 * c.at("l1") + w.iou * c.at("iou") +
                      w.align_video * c.at("align_video") + w.align_layer * c.at("align_layer");
  EXPECT_NEAR(r.total.item(), want, 1e-10);
  EXPECT_NEAR(c.at("cls"), c.at("cls_l0") + c.at("cls_l1"), 1e-12);
  for (const auto& [k, v] : c) EXPECT_GE(v, 0.0) << k;
}

TEST(TotalLoss, SingleWeightIsolatesComponent) {
  const auto tb = tiny_batch();
  LossSettings s;
  s.weights = LossWeights{0, 0, 0, 0, 0, 0, 0};
  s.weights.saliency = 2.0;
  const auto r = compute_losses(tb.preds, tb.targets, s);
  EXPECT_NEAR(r.total.item(), 2.0 * r.components.at("saliency"), 1e-12);
}
