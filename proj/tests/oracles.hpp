#pragma once

// Brute-force reference implementations used by the unit tests and the acceptance
// binary. Written from the metric definitions only; none of them calls into the
// library code they check (apart from plain data types and iou_1d).

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <vector>

#include "sdst/metrics.hpp"

namespace oracle {

using sdst::Moment;
using sdst::ScoredMoment;

inline double overlap(const Moment& a, const Moment& b) {
  const double lo = std::max(a.start, b.start), hi = std::min(a.end, b.end);
  const double inter = hi > lo ? hi - lo : 0.0;
  const double uni = (a.end - a.start) + (b.end - b.start) - inter;
  return uni > 0.0 ? inter / uni : 0.0;
}

/// Minimum total cost over every injection of the smaller side into the larger.
inline double best_assignment_cost(const std::vector<std::vector<double>>& cost) {
  const std::size_t rows = cost.size();
  const std::size_t cols = rows ? cost[0].size() : 0;
  if (rows == 0 || cols == 0) return 0.0;
  const bool flip = rows > cols;
  const std::size_t small = flip ? cols : rows, large = flip ? rows : cols;
  std::vector<std::size_t> perm(large);
  std::iota(perm.begin(), perm.end(), 0);
  double best = std::numeric_limits<double>::infinity();
  // Enumerate all permutations of the larger side; the first `small` entries pick
  // the partners. Duplicates are harmless for a minimum.
  do {
    double total = 0.0;
    for (std::size_t i = 0; i < small; ++i)
      total += flip ? cost[perm[i]][i] : cost[i][perm[i]];
    best = std::min(best, total);
  } while (std::next_permutation(perm.begin(), perm.end()));
  return best;
}

/// Index order by descending score; equal scores keep the lower index first.
inline std::vector<std::size_t> by_score(const std::vector<double>& scores) {
  std::vector<std::size_t> out;
  std::vector<bool> taken(scores.size(), false);
  for (std::size_t k = 0; k < scores.size(); ++k) {
    std::size_t pick = scores.size();
    for (std::size_t i = 0; i < scores.size(); ++i)
      if (!taken[i] && (pick == scores.size() || scores[i] > scores[pick])) pick = i;
    taken[pick] = true;
    out.push_back(pick);
  }
  return out;
}

/// Fraction of samples with ground truth whose first prediction overlaps some GT by
/// at least `thr`.
inline double recall_at_1(const std::vector<std::vector<ScoredMoment>>& preds,
                          const std::vector<std::vector<Moment>>& gts, double thr) {
  int n = 0, hit = 0;
  for (std::size_t s = 0; s < gts.size(); ++s) {
    if (gts[s].empty()) continue;
    ++n;
    if (preds[s].empty()) continue;
    bool ok = false;
    for (const auto& g : gts[s]) ok = ok || overlap(preds[s][0].moment, g) >= thr;
    hit += ok;
  }
  return n ? static_cast<double>(hit) / n : 0.0;
}

/// AP for one sample: walk predictions by score; a prediction is a true positive if
/// some still-free GT reaches `thr`, taking the GT of highest overlap (lowest index
/// on ties). AP = (1/#GT) * sum over true positives of the best precision achieved
/// at that rank or any later rank.
inline double sample_ap(const std::vector<ScoredMoment>& preds, const std::vector<Moment>& gts,
                        double thr) {
  if (gts.empty() || preds.empty()) return 0.0;
  std::vector<double> scores;
  for (const auto& p : preds) scores.push_back(p.score);
  const auto order = by_score(scores);
  std::vector<bool> free(gts.size(), true);
  std::vector<bool> tp(order.size(), false);
  for (std::size_t r = 0; r < order.size(); ++r) {
    double best = -1.0;
    std::size_t pick = gts.size();
    for (std::size_t g = 0; g < gts.size(); ++g) {
      const double o = overlap(preds[order[r]].moment, gts[g]);
      if (free[g] && o >= thr && o > best) {
        best = o;
        pick = g;
      }
    }
    if (pick < gts.size()) {
      free[pick] = false;
      tp[r] = true;
    }
  }
  double sum = 0.0;
  for (std::size_t r = 0; r < order.size(); ++r) {
    if (!tp[r]) continue;
    double best_prec = 0.0;
    for (std::size_t q = r; q < order.size(); ++q) {
      int hits = 0;
      for (std::size_t z = 0; z <= q; ++z) hits += tp[z];
      best_prec = std::max(best_prec, static_cast<double>(hits) / static_cast<double>(q + 1));
    }
    sum += best_prec;
  }
  return sum / static_cast<double>(gts.size());
}

inline double mean_ap(const std::vector<std::vector<ScoredMoment>>& preds,
                      const std::vector<std::vector<Moment>>& gts) {
  double total = 0.0;
  int thresholds = 0;
  for (int k = 0; k <= 9; ++k) {
    const double thr = 0.5 + 0.05 * k;
    double sum = 0.0;
    int n = 0;
    for (std::size_t s = 0; s < gts.size(); ++s) {
      if (gts[s].empty()) continue;
      sum += sample_ap(preds[s], gts[s], thr);
      ++n;
    }
    total += sum / n;
    ++thresholds;
  }
  return total / thresholds;
}

struct Highlight {
  double ap = 0.0;
  int hit = 0;
};

/// Frame ranking AP: mean over positive frames of precision at that frame's rank,
/// where rank counts frames with strictly higher saliency or equal saliency and a
/// lower index.
inline Highlight highlight(const std::vector<double>& sal, const std::vector<bool>& pos) {
  Highlight h;
  auto rank = [&](std::size_t i) {
    std::size_t r = 1;
    for (std::size_t j = 0; j < sal.size(); ++j)
      if (sal[j] > sal[i] || (sal[j] == sal[i] && j < i)) ++r;
    return r;
  };
  int npos = 0;
  for (std::size_t i = 0; i < sal.size(); ++i) {
    if (!pos[i]) continue;
    ++npos;
    const std::size_t ri = rank(i);
    int above = 0;
    for (std::size_t j = 0; j < sal.size(); ++j)
      if (pos[j] && rank(j) <= ri) ++above;
    h.ap += static_cast<double>(above) / static_cast<double>(ri);
  }
  if (npos) h.ap /= npos;
  for (std::size_t i = 0; i < sal.size(); ++i)
    if (rank(i) == 1) h.hit = pos[i] ? 1 : 0;
  return h;
}

inline double mean_iou(const std::vector<std::vector<ScoredMoment>>& preds,
                       const std::vector<std::vector<Moment>>& gts) {
  double sum = 0.0;
  int n = 0;
  for (std::size_t s = 0; s < gts.size(); ++s) {
    if (gts[s].empty()) continue;
    ++n;
    double best = 0.0;
    if (!preds[s].empty())
      for (const auto& g : gts[s]) best = std::max(best, overlap(preds[s][0].moment, g));
    sum += best;
  }
  return n ? sum / n : 0.0;
}

/// Soft-NMS by direct simulation of the selection rule.
inline std::vector<ScoredMoment> soft_nms(std::vector<ScoredMoment> c, double sigma,
                                          double min_score, int top_k) {
  std::vector<ScoredMoment> out;
  std::vector<bool> gone(c.size(), false);
  while (static_cast<int>(out.size()) < top_k) {
    int pick = -1;
    for (std::size_t i = 0; i < c.size(); ++i) {
      if (gone[i] || c[i].score < min_score) continue;
      if (pick < 0 || c[i].score > c[static_cast<std::size_t>(pick)].score) pick = static_cast<int>(i);
    }
    if (pick < 0) break;
    gone[static_cast<std::size_t>(pick)] = true;
    out.push_back(c[static_cast<std::size_t>(pick)]);
    for (std::size_t i = 0; i < c.size(); ++i) {
      if (gone[i]) continue;
      const double o = overlap(out.back().moment, c[i].moment);
      c[i].score = c[i].score * std::exp(-(o * o) / sigma);
    }
  }
  return out;
}

}  // namespace oracle
