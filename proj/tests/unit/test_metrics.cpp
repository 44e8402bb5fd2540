#include <gtest/gtest.h>

#include "../oracles.hpp"
#include "sdst/metrics.hpp"
#include "sdst/numerics/rng.hpp"

using namespace sdst;

namespace {

Moment frame_moment(Rng& rng, int frames) {
  const int a = static_cast<int>(rng.integer(0, frames - 1));
  const int b = static_cast<int>(rng.integer(0, frames - 1));
  const double t = frames - 1;
  return {std::min(a, b) / t, std::max(a, b) / t};
}

struct Instance {
  RankedPredictions preds;
  GroundTruth gts;
};

Instance random_instance(Rng& rng, int samples) {
  Instance in;
  for (int s = 0; s < samples; ++s) {
    const int frames = static_cast<int>(rng.integer(2, 16));
    std::vector<ScoredMoment> p;
    const int np = static_cast<int>(rng.integer(0, 5));
    for (int i = 0; i < np; ++i) p.push_back({frame_moment(rng, frames), rng.uniform(0, 1)});
    std::vector<Moment> g;
    const int ng = static_cast<int>(rng.integer(s == 0 ? 1 : 0, 3));
    for (int i = 0; i < ng; ++i) g.push_back(frame_moment(rng, frames));
    in.preds.push_back(p);
    in.gts.push_back(g);
  }
  return in;
}

}  // namespace

TEST(Confidence, Examples) {
  EXPECT_DOUBLE_EQ(confidence(1, 1), 1.0);
  EXPECT_DOUBLE_EQ(confidence(0, 0.7), 0.0);
  EXPECT_NEAR(confidence(0.64, 0.25), 0.4, 1e-15);
}

TEST(SoftNms, SingleCandidateUnchanged) {
  const auto out = soft_nms({{{0.1, 0.4}, 0.8}});
  ASSERT_EQ(out.size(), 1u);
  EXPECT_DOUBLE_EQ(out[0].score, 0.8);
}

TEST(SoftNms, DisjointCandidatesUnchanged) {
  const auto out = soft_nms({{{0.1, 0.3}, 0.5}, {{0.6, 0.9}, 0.7}});
  ASSERT_EQ(out.size(), 2u);
  EXPECT_DOUBLE_EQ(out[0].score, 0.7);
  EXPECT_DOUBLE_EQ(out[1].score, 0.5);
}

TEST(SoftNms, MatchesReferenceLoop) {
  Rng rng(11);
  for (int k = 0; k < 200; ++k) {
    std::vector<ScoredMoment> c;
    for (int i = 0; i < 5; ++i) c.push_back({frame_moment(rng, 12), rng.uniform(0, 1)});
    const auto got = soft_nms(c);
    const auto want = oracle::soft_nms(c, 0.5, 1e-3, 10);
    ASSERT_EQ(got.size(), want.size());
    for (std::size_t i = 0; i < got.size(); ++i) {
      EXPECT_NEAR(got[i].score, want[i].score, 1e-12);
      EXPECT_DOUBLE_EQ(got[i].moment.start, want[i].moment.start);
    }
  }
}

TEST(SoftNms, SmallSigmaSuppressesOverlaps) {
  SoftNmsSettings s;
  s.sigma = 1e-4;
  const auto out = soft_nms({{{0.1, 0.5}, 0.9}, {{0.15, 0.5}, 0.8}, {{0.7, 0.9}, 0.3}}, s);
  ASSERT_EQ(out.size(), 2u);
  EXPECT_DOUBLE_EQ(out[1].moment.start, 0.7);
}

TEST(Recall, Examples) {
  const GroundTruth gts = {{{0.2, 0.6}}};
  auto r = recall_at_1({{{{0.2, 0.6}, 1.0}}}, gts);
  EXPECT_DOUBLE_EQ(r.values[0], 1.0);
  EXPECT_DOUBLE_EQ(r.values[1], 1.0);
  // IoU 0.6: [0.2, 0.6] vs [0.2, 0.44] -> 0.24 / 0.4.
  r = recall_at_1({{{{0.2, 0.44}, 1.0}}}, gts);
  EXPECT_DOUBLE_EQ(r.values[0], 1.0);
  EXPECT_DOUBLE_EQ(r.values[1], 0.0);
}

TEST(Recall, ExcludesSamplesWithoutGroundTruth) {
  const auto r = recall_at_1({{{{0.2, 0.6}, 1.0}}, {}}, {{{0.2, 0.6}}, {}});
  EXPECT_EQ(r.excluded, 1);
  EXPECT_DOUBLE_EQ(r.values[0], 1.0);
}

TEST(Map, Examples) {
  const auto r = mean_average_precision({{{{0.2, 0.6}, 0.9}}}, {{{0.2, 0.6}}});
  for (double v : r.ap) EXPECT_DOUBLE_EQ(v, 1.0);
  EXPECT_DOUBLE_EQ(r.mean, 1.0);
  EXPECT_DOUBLE_EQ(mean_average_precision({{}}, {{{0.2, 0.6}}}).mean, 0.0);
  EXPECT_THROW(mean_average_precision({{}}, {{}}), Error);
}

TEST(Map, MonotoneInThreshold) {
  Rng rng(4);
  for (int k = 0; k < 50; ++k) {
    const auto in = random_instance(rng, 4);
    const auto r = mean_average_precision(in.preds, in.gts);
    for (std::size_t i = 1; i < r.ap.size(); ++i) EXPECT_LE(r.ap[i], r.ap[i - 1] + 1e-12);
  }
}

TEST(Highlight, Examples) {
  auto h = highlight_metrics({0.9, 0.8, 0.1, 0.2}, {true, true, false, false});
  EXPECT_DOUBLE_EQ(h.ap, 1.0);
  EXPECT_EQ(h.hit_at_1, 1);
  h = highlight_metrics({0.1, 0.8, 0.9}, {true, true, false});
  EXPECT_EQ(h.hit_at_1, 0);
  EXPECT_FALSE(highlight_metrics({0.1, 0.2}, {false, false}).valid);
}

TEST(MeanIou, Examples) {
  EXPECT_DOUBLE_EQ(mean_iou({{{{0.2, 0.6}, 1.0}}}, {{{0.2, 0.6}}}), 1.0);
  EXPECT_DOUBLE_EQ(mean_iou({{{{0.0, 0.1}, 1.0}}}, {{{0.2, 0.6}}}), 0.0);
}

TEST(MetricOracles, RandomTinyInstances) {
  Rng rng(2024);
  for (int k = 0; k < 100; ++k) {
    const auto in = random_instance(rng, 3);
    const auto r = recall_at_1(in.preds, in.gts);
    EXPECT_NEAR(r.values[0], oracle::recall_at_1(in.preds, in.gts, 0.5), 1e-9);
    EXPECT_NEAR(r.values[1], oracle::recall_at_1(in.preds, in.gts, 0.7), 1e-9);
    EXPECT_NEAR(mean_average_precision(in.preds, in.gts).mean, oracle::mean_ap(in.preds, in.gts), 1e-9);
    EXPECT_NEAR(mean_iou(in.preds, in.gts), oracle::mean_iou(in.preds, in.gts), 1e-9);

    const int frames = static_cast<int>(rng.integer(1, 16));
    std::vector<double> sal;
    std::vector<bool> pos;
    for (int t = 0; t < frames; ++t) {
      sal.push_back(static_cast<double>(rng.integer(0, 4)));  // coarse values force ties
      pos.push_back(rng.bernoulli(0.4));
    }
    pos[0] = true;
    const auto h = highlight_metrics(sal, pos);
    const auto o = oracle::highlight(sal, pos);
    EXPECT_NEAR(h.ap, o.ap, 1e-9);
    EXPECT_EQ(h.hit_at_1, o.hit);
  }
}
