#pragma once

// Post-processing and evaluation metrics for moment retrieval and highlight detection.

#include <vector>

#include "sdst/geometry.hpp"

namespace sdst {

struct ScoredMoment {
  Moment moment;
  double score = 0.0;
};

/// sqrt(p * a).
double confidence(double prob, double actionness);

struct SoftNmsSettings {
  double sigma = 0.5;
  double min_score = 1e-3;
  int top_k = 10;
};

/// Gaussian soft-NMS: repeatedly keep the highest-scoring candidate (lowest index on
/// ties) and decay the rest by exp(-IoU^2 / sigma). Candidates falling below
/// min_score are dropped; at most top_k are returned in selection order.
std::vector<ScoredMoment> soft_nms(const std::vector<ScoredMoment>& candidates,
                                   const SoftNmsSettings& settings = {});

using RankedPredictions = std::vector<std::vector<ScoredMoment>>;  // per sample, best first
using GroundTruth = std::vector<std::vector<Moment>>;               // per sample

struct RecallReport {
  std::vector<double> thresholds;
  std::vector<double> values;
  int excluded = 0;  // samples without ground truth
};

/// Fraction of samples whose top-1 prediction reaches IoU >= threshold with any GT.
RecallReport recall_at_1(const RankedPredictions& preds, const GroundTruth& gts,
                         const std::vector<double>& thresholds = {0.5, 0.7});

std::vector<double> map_thresholds();  // 0.50, 0.55, ..., 0.95

struct MapReport {
  std::vector<double> thresholds;
  std::vector<double> ap;  // per threshold, averaged over samples
  double mean = 0.0;
  int excluded = 0;
};

/// Average precision of one sample at one threshold: score-descending greedy
/// matching against the best unmatched GT, all-point interpolation.
double average_precision(const std::vector<ScoredMoment>& preds, const std::vector<Moment>& gts,
                         double threshold);

MapReport mean_average_precision(const RankedPredictions& preds, const GroundTruth& gts,
                                 const std::vector<double>& thresholds = map_thresholds());

struct HighlightResult {
  double ap = 0.0;
  int hit_at_1 = 0;
  bool valid = false;  // false when there are no positive frames
};

HighlightResult highlight_metrics(const std::vector<double>& saliency,
                                  const std::vector<bool>& positives);

/// Mean over samples with GT of the top-1 prediction's best IoU (0 without predictions).
double mean_iou(const RankedPredictions& preds, const GroundTruth& gts);

}  // namespace sdst
