#pragma once

// Set matching and the training objective.

#include <map>
#include <string>
#include <utility>
#include <vector>

#include "sdst/geometry.hpp"
#include "sdst/model.hpp"

namespace sdst {

struct LossWeights {
  double l1 = 1.0;
  double iou = 1.0;
  double saliency = 0.1;
  double align_video = 0.1;
  double align_layer = 0.1;
  double actionness = 1.0;
  double cls = 1.0;

  void validate() const;
};

struct LossSettings {
  LossWeights weights;
  double focal_alpha = 0.25;
  double focal_gamma = 2.0;
  double temperature = 0.07;
};

struct MatchResult {
  std::vector<std::pair<Index, Index>> pairs;  // (query, target), sorted by query
  std::vector<Index> unmatched;                // queries without a target
};

/// cost(m, g) = w_cls * (-p_m) + w_l1 * |moment_m - gt_g|_1 + w_iou * (1 - IoU).
Matrix<double> matching_cost(const std::vector<double>& probs, const std::vector<Moment>& preds,
                             const std::vector<Moment>& targets, const LossWeights& w);

/// Minimum-cost one-to-one assignment; min(M, M*) pairs.
MatchResult hungarian_match(const Matrix<double>& cost);

double assignment_cost(const Matrix<double>& cost, const MatchResult& match);

struct SampleTargets {
  std::vector<Moment> moments;
  std::vector<bool> positives;  // length T
};

/// Flags raised when a term's preconditions do not hold (the term is then 0).
struct LossFlags {
  bool no_matches = false;
  bool saliency_degenerate = false;
  bool video_align_degenerate = false;
  bool layer_align_degenerate = false;
};

template <typename S>
struct RegressionLosses {
  Var<S> l1;
  Var<S> iou;
  bool empty = false;
};

/// Mean |start| + |end| error and 1 - mean IoU over matched rows.
template <typename S>
RegressionLosses<S> mr_regression_losses(const Var<S>& matched_moments,
                                         const Matrix<S>& matched_targets);

/// Max IoU of every moment with any target of its sample (targets empty -> 0).
std::vector<double> max_iou_targets(const std::vector<Moment>& moments,
                                    const std::vector<Moment>& targets);

/// Mean over rows of |a - target|.
template <typename S>
Var<S> actionness_loss(const Var<S>& actionness, const Matrix<S>& targets);

/// Per-sample mean over positive frames of InfoNCE against that sample's negatives,
/// averaged over samples with at least one positive and one negative frame.
/// scores: (G*T) x 1.
template <typename S>
Var<S> saliency_infonce(const Var<S>& scores, const std::vector<std::vector<bool>>& positives,
                        S temperature, bool* degenerate = nullptr);

template <typename S>
struct AlignmentLosses {
  Var<S> video;
  Var<S> layer;
  bool video_degenerate = false;
  bool layer_degenerate = false;
};

/// Video term: for each level and positive frame t of sample b, the text of b is
/// contrasted against frame t of every other sample. Layer term: for each ordered
/// level pair (l, l'), frame t at level l against the same frame at level l'.
template <typename S>
AlignmentLosses<S> alignment_losses(const std::vector<Var<S>>& videos,
                                    const std::vector<Var<S>>& text_pools,
                                    const std::vector<std::vector<bool>>& positives,
                                    S temperature);

/// Non-differentiable decisions of a loss evaluation, recorded once and replayed
/// so that finite differences see a smooth objective.
struct LossDecisions {
  bool recorded = false;
  std::vector<std::vector<MatchResult>> matches;  // [level][sample]
  Matrix<double> actionness_targets;
};

template <typename S>
struct LossResult {
  Var<S> total;
  std::map<std::string, double> components;
  LossFlags flags;
  std::vector<std::vector<MatchResult>> matches;
};

template <typename S>
LossResult<S> compute_losses(const Predictions<S>& preds, const std::vector<SampleTargets>& targets,
                             const LossSettings& settings, LossDecisions* decisions = nullptr);

#define SDST_LOSS_EXTERN(S)                                                                      \
  extern template RegressionLosses<S> mr_regression_losses(const Var<S>&, const Matrix<S>&);     \
  extern template Var<S> actionness_loss(const Var<S>&, const Matrix<S>&);                       \
  extern template Var<S> saliency_infonce(const Var<S>&, const std::vector<std::vector<bool>>&,  \
                                          S, bool*);                                             \
  extern template AlignmentLosses<S> alignment_losses(                                           \
      const std::vector<Var<S>>&, const std::vector<Var<S>>&,                                    \
      const std::vector<std::vector<bool>>&, S);                                                 \
  extern template LossResult<S> compute_losses(const Predictions<S>&,                            \
                                               const std::vector<SampleTargets>&,                \
                                               const LossSettings&, LossDecisions*);
SDST_LOSS_EXTERN(float)
SDST_LOSS_EXTERN(double)
#undef SDST_LOSS_EXTERN

}  // namespace sdst
