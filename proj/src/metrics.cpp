#include "sdst/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

namespace sdst {

double confidence(double prob, double actionness) {
  return std::sqrt(std::max(prob, 0.0) * std::max(actionness, 0.0));
}

std::vector<ScoredMoment> soft_nms(const std::vector<ScoredMoment>& candidates,
                                   const SoftNmsSettings& settings) {
  if (!(settings.sigma > 0.0)) throw Error("invalid-sigma");
  std::vector<ScoredMoment> pool = candidates;
  std::vector<bool> alive(pool.size(), true);
  std::vector<ScoredMoment> kept;
  while (static_cast<int>(kept.size()) < settings.top_k) {
    std::size_t best = pool.size();
    for (std::size_t i = 0; i < pool.size(); ++i)
      if (alive[i] && pool[i].score >= settings.min_score &&
          (best == pool.size() || pool[i].score > pool[best].score))
        best = i;
    if (best == pool.size()) break;
    alive[best] = false;
    kept.push_back(pool[best]);
    for (std::size_t i = 0; i < pool.size(); ++i) {
      if (!alive[i]) continue;
      const double iou = iou_1d(pool[best].moment, pool[i].moment);
      pool[i].score *= std::exp(-iou * iou / settings.sigma);
    }
  }
  return kept;
}

RecallReport recall_at_1(const RankedPredictions& preds, const GroundTruth& gts,
                         const std::vector<double>& thresholds) {
  if (preds.size() != gts.size() || preds.empty()) throw Error("empty-dataset");
  RecallReport r;
  r.thresholds = thresholds;
  r.values.assign(thresholds.size(), 0.0);
  int counted = 0;
  for (std::size_t s = 0; s < preds.size(); ++s) {
    if (gts[s].empty()) {
      ++r.excluded;
      continue;
    }
    ++counted;
    if (preds[s].empty()) continue;
    double best = 0.0;
    for (const auto& g : gts[s]) best = std::max(best, iou_1d(preds[s].front().moment, g));
    for (std::size_t k = 0; k < thresholds.size(); ++k)
      if (best >= thresholds[k]) r.values[k] += 1.0;
  }
  if (counted > 0)
    for (double& v : r.values) v /= counted;
  return r;
}

std::vector<double> map_thresholds() {
  std::vector<double> t;
  for (int i = 0; i < 10; ++i) t.push_back(0.5 + 0.05 * i);
  return t;
}

double average_precision(const std::vector<ScoredMoment>& preds, const std::vector<Moment>& gts,
                         double threshold) {
  if (gts.empty() || preds.empty()) return 0.0;
  std::vector<std::size_t> order(preds.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t a, std::size_t b) { return preds[a].score > preds[b].score; });
  std::vector<bool> used(gts.size(), false);
  std::vector<double> precision, recall;
  int tp = 0;
  for (std::size_t rank = 0; rank < order.size(); ++rank) {
    const Moment& m = preds[order[rank]].moment;
    int best = -1;
    double best_iou = threshold;
    for (std::size_t g = 0; g < gts.size(); ++g) {
      if (used[g]) continue;
      const double iou = iou_1d(m, gts[g]);
      if (iou >= best_iou && (best < 0 || iou > best_iou)) {
        best = static_cast<int>(g);
        best_iou = iou;
      }
    }
    if (best >= 0) {
      used[static_cast<std::size_t>(best)] = true;
      ++tp;
    }
    precision.push_back(static_cast<double>(tp) / static_cast<double>(rank + 1));
    recall.push_back(static_cast<double>(tp) / static_cast<double>(gts.size()));
  }
  // Precision envelope, then area under the step function.
  for (std::size_t i = precision.size() - 1; i > 0; --i)
    precision[i - 1] = std::max(precision[i - 1], precision[i]);
  double ap = 0.0, prev_recall = 0.0;
  for (std::size_t i = 0; i < precision.size(); ++i) {
    ap += (recall[i] - prev_recall) * precision[i];
    prev_recall = recall[i];
  }
  return ap;
}

MapReport mean_average_precision(const RankedPredictions& preds, const GroundTruth& gts,
                                 const std::vector<double>& thresholds) {
  if (preds.size() != gts.size()) throw Error("shape-mismatch: mean_average_precision");
  MapReport r;
  r.thresholds = thresholds;
  r.ap.assign(thresholds.size(), 0.0);
  int counted = 0;
  for (std::size_t s = 0; s < preds.size(); ++s) {
    if (gts[s].empty()) {
      ++r.excluded;
      continue;
    }
    ++counted;
    for (std::size_t k = 0; k < thresholds.size(); ++k)
      r.ap[k] += average_precision(preds[s], gts[s], thresholds[k]);
  }
  if (counted == 0) throw Error("no-ground-truth");
  for (double& v : r.ap) v /= counted;
  r.mean = std::accumulate(r.ap.begin(), r.ap.end(), 0.0) / static_cast<double>(r.ap.size());
  return r;
}

HighlightResult highlight_metrics(const std::vector<double>& saliency,
                                  const std::vector<bool>& positives) {
  if (saliency.size() != positives.size()) throw Error("shape-mismatch: highlight_metrics");
  HighlightResult r;
  const auto n_pos = std::count(positives.begin(), positives.end(), true);
  if (n_pos == 0) return r;
  r.valid = true;
  std::vector<std::size_t> order(saliency.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t a, std::size_t b) { return saliency[a] > saliency[b]; });
  r.hit_at_1 = positives[order.front()] ? 1 : 0;
  int hits = 0;
  for (std::size_t rank = 0; rank < order.size(); ++rank) {
    if (!positives[order[rank]]) continue;
    ++hits;
    r.ap += static_cast<double>(hits) / static_cast<double>(rank + 1);
  }
  r.ap /= static_cast<double>(n_pos);
  return r;
}

double mean_iou(const RankedPredictions& preds, const GroundTruth& gts) {
  if (preds.size() != gts.size() || preds.empty()) throw Error("empty-dataset");
  double total = 0.0;
  int counted = 0;
  for (std::size_t s = 0; s < preds.size(); ++s) {
    if (gts[s].empty()) continue;
    ++counted;
    if (preds[s].empty()) continue;
    double best = 0.0;
    for (const auto& g : gts[s]) best = std::max(best, iou_1d(preds[s].front().moment, g));
    total += best;
  }
  return counted > 0 ? total / counted : 0.0;
}

}  // namespace sdst
