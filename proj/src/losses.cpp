#include "sdst/losses.hpp"

#include <algorithm>
#include <limits>

namespace sdst {

void LossWeights::validate() const {
  for (double w : {l1, iou, saliency, align_video, align_layer, actionness, cls})
    if (!(w >= 0.0)) throw Error("negative-loss-weight");
}

Matrix<double> matching_cost(const std::vector<double>& probs, const std::vector<Moment>& preds,
                             const std::vector<Moment>& targets, const LossWeights& w) {
  if (probs.size() != preds.size()) throw Error("shape-mismatch: matching_cost");
  if (targets.size() > preds.size()) throw Error("too-many-targets");
  Matrix<double> cost(static_cast<Index>(preds.size()), static_cast<Index>(targets.size()));
  for (std::size_t m = 0; m < preds.size(); ++m)
    for (std::size_t g = 0; g < targets.size(); ++g) {
      const double l1 = std::abs(preds[m].start - targets[g].start) +
                        std::abs(preds[m].end - targets[g].end);
      cost(static_cast<Index>(m), static_cast<Index>(g)) =
          -w.cls * probs[m] + w.l1 * l1 + w.iou * (1.0 - iou_1d(preds[m], targets[g]));
    }
  return cost;
}

namespace {

// Potentials method for an n x m cost matrix with n <= m. Returns the column
// assigned to every row.
std::vector<Index> assign_rows(const Matrix<double>& a) {
  const std::size_t n = static_cast<std::size_t>(a.rows());
  const std::size_t m = static_cast<std::size_t>(a.cols());
  const double inf = std::numeric_limits<double>::infinity();
  std::vector<double> u(n + 1, 0.0), v(m + 1, 0.0);
  std::vector<std::size_t> p(m + 1, 0), way(m + 1, 0);
  for (std::size_t i = 1; i <= n; ++i) {
    p[0] = i;
    std::size_t j0 = 0;
    std::vector<double> minv(m + 1, inf);
    std::vector<bool> used(m + 1, false);
    do {
      used[j0] = true;
      const std::size_t i0 = p[j0];
      double delta = inf;
      std::size_t j1 = 0;
      for (std::size_t j = 1; j <= m; ++j) {
        if (used[j]) continue;
        const double cur = a(static_cast<Index>(i0 - 1), static_cast<Index>(j - 1)) - u[i0] - v[j];
        if (cur < minv[j]) {
          minv[j] = cur;
          way[j] = j0;
        }
        if (minv[j] < delta) {
          delta = minv[j];
          j1 = j;
        }
      }
      for (std::size_t j = 0; j <= m; ++j) {
        if (used[j]) {
          u[p[j]] += delta;
          v[j] -= delta;
        } else {
          minv[j] -= delta;
        }
      }
      j0 = j1;
    } while (p[j0] != 0);
    do {
      const std::size_t j1 = way[j0];
      p[j0] = p[j1];
      j0 = j1;
    } while (j0 != 0);
  }
  std::vector<Index> col_of_row(n, -1);
  for (std::size_t j = 1; j <= m; ++j)
    if (p[j] != 0) col_of_row[p[j] - 1] = static_cast<Index>(j - 1);
  return col_of_row;
}

}  // namespace

MatchResult hungarian_match(const Matrix<double>& cost) {
  const Index queries = cost.rows();
  const Index targets = cost.cols();
  std::vector<Index> owner(static_cast<std::size_t>(queries), -1);
  if (targets > 0 && queries > 0) {
    if (targets <= queries) {
      // Targets as rows so every target is assigned.
      const Matrix<double> t = cost.transpose();
      const auto q_of_target = assign_rows(t);
      for (std::size_t g = 0; g < q_of_target.size(); ++g)
        owner[static_cast<std::size_t>(q_of_target[g])] = static_cast<Index>(g);
    } else {
      owner = assign_rows(cost);
    }
  }
  MatchResult result;
  for (Index q = 0; q < queries; ++q) {
    if (owner[static_cast<std::size_t>(q)] >= 0)
      result.pairs.emplace_back(q, owner[static_cast<std::size_t>(q)]);
    else
      result.unmatched.push_back(q);
  }
  return result;
}

double assignment_cost(const Matrix<double>& cost, const MatchResult& match) {
  double total = 0.0;
  for (const auto& [q, g] : match.pairs) total += cost(q, g);
  return total;
}

template <typename S>
RegressionLosses<S> mr_regression_losses(const Var<S>& matched_moments,
                                         const Matrix<S>& matched_targets) {
  RegressionLosses<S> r;
  if (matched_moments.rows() == 0) {
    r.l1 = constant<S>(Matrix<S>::Zero(1, 1));
    r.iou = constant<S>(Matrix<S>::Zero(1, 1));
    r.empty = true;
    return r;
  }
  r.l1 = l1_rows_mean(matched_moments, matched_targets);
  r.iou = iou_loss(matched_moments, matched_targets);
  return r;
}

std::vector<double> max_iou_targets(const std::vector<Moment>& moments,
                                    const std::vector<Moment>& targets) {
  std::vector<double> out(moments.size(), 0.0);
  for (std::size_t m = 0; m < moments.size(); ++m)
    for (const auto& g : targets) out[m] = std::max(out[m], iou_1d(moments[m], g));
  return out;
}

template <typename S>
Var<S> actionness_loss(const Var<S>& actionness, const Matrix<S>& targets) {
  return l1_rows_mean(actionness, targets);
}

namespace {

using BoolGrid = Eigen::Array<bool, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

/// Builds (index, valid, weight) for rows of an InfoNCE whose logits are gathered
/// from a flat source. `rows[b]` lists the rows of sample b; each row is a list of
/// flat indices with the positive first.
template <typename S>
Var<S> grouped_infonce(const Var<S>& source, const std::vector<std::vector<std::vector<Index>>>& rows,
                       S temperature, bool* degenerate) {
  Index total_rows = 0, width = 0, samples = 0;
  for (const auto& sample : rows) {
    if (sample.empty()) continue;
    ++samples;
    total_rows += static_cast<Index>(sample.size());
    for (const auto& r : sample) width = std::max<Index>(width, static_cast<Index>(r.size()));
  }
  if (samples == 0) {
    if (degenerate) *degenerate = true;
    return constant<S>(Matrix<S>::Zero(1, 1));
  }
  IndexMatrix index = IndexMatrix::Constant(total_rows, width, -1);
  BoolGrid valid = BoolGrid::Constant(total_rows, width, false);
  Matrix<S> weight(total_rows, 1);
  Index r = 0;
  for (const auto& sample : rows) {
    for (const auto& row : sample) {
      for (std::size_t j = 0; j < row.size(); ++j) {
        index(r, static_cast<Index>(j)) = row[j];
        valid(r, static_cast<Index>(j)) = true;
      }
      weight(r, 0) = S(1) / (static_cast<S>(sample.size()) * static_cast<S>(samples));
      ++r;
    }
  }
  const Var<S> logits = gather_elements(source, index);
  return weighted_sum(info_nce_rows(logits, valid, temperature), weight);
}

}  // namespace

template <typename S>
Var<S> saliency_infonce(const Var<S>& scores, const std::vector<std::vector<bool>>& positives,
                        S temperature, bool* degenerate) {
  if (degenerate) *degenerate = false;
  const Index groups = static_cast<Index>(positives.size());
  if (groups == 0 || scores.cols() != 1) throw Error("shape-mismatch: saliency_infonce");
  const Index frames = scores.rows() / groups;
  std::vector<std::vector<std::vector<Index>>> rows(static_cast<std::size_t>(groups));
  bool any_skipped = false;
  for (Index b = 0; b < groups; ++b) {
    const auto& pos = positives[static_cast<std::size_t>(b)];
    if (static_cast<Index>(pos.size()) != frames) throw Error("shape-mismatch: positives");
    std::vector<Index> neg;
    for (Index t = 0; t < frames; ++t)
      if (!pos[static_cast<std::size_t>(t)]) neg.push_back(b * frames + t);
    const bool has_pos = static_cast<Index>(neg.size()) < frames;
    if (neg.empty() || !has_pos) {
      any_skipped = true;
      continue;
    }
    for (Index t = 0; t < frames; ++t) {
      if (!pos[static_cast<std::size_t>(t)]) continue;
      std::vector<Index> row{b * frames + t};
      row.insert(row.end(), neg.begin(), neg.end());
      rows[static_cast<std::size_t>(b)].push_back(std::move(row));
    }
  }
  bool none = false;
  Var<S> out = grouped_infonce(scores, rows, temperature, &none);
  if (degenerate) *degenerate = none || any_skipped;
  return out;
}

template <typename S>
AlignmentLosses<S> alignment_losses(const std::vector<Var<S>>& videos,
                                    const std::vector<Var<S>>& text_pools,
                                    const std::vector<std::vector<bool>>& positives,
                                    S temperature) {
  AlignmentLosses<S> out;
  const Index levels = static_cast<Index>(videos.size());
  const Index groups = static_cast<Index>(positives.size());
  if (levels == 0 || text_pools.size() != videos.size() || groups == 0)
    throw Error("shape-mismatch: alignment_losses");
  const Index frames = videos.front().rows() / groups;

  // Video term.
  if (groups < 2) {
    out.video = constant<S>(Matrix<S>::Zero(1, 1));
    out.video_degenerate = true;
  } else {
    std::vector<std::vector<std::vector<Index>>> rows(static_cast<std::size_t>(groups));
    for (Index b = 0; b < groups; ++b)
      for (Index t = 0; t < frames; ++t) {
        if (!positives[static_cast<std::size_t>(b)][static_cast<std::size_t>(t)]) continue;
        // sim is (G*T) x G: entry (frame row, text column), flattened row-major.
        std::vector<Index> row{(b * frames + t) * groups + b};
        for (Index o = 0; o < groups; ++o)
          if (o != b) row.push_back((o * frames + t) * groups + b);
        rows[static_cast<std::size_t>(b)].push_back(std::move(row));
      }
    std::vector<Var<S>> per_level;
    bool none = false;
    for (Index l = 0; l < levels; ++l) {
      const Var<S> sim = matmul(normalize_rows(videos[static_cast<std::size_t>(l)], S(1e-8)),
                                transpose(normalize_rows(text_pools[static_cast<std::size_t>(l)], S(1e-8))));
      per_level.push_back(grouped_infonce(sim, rows, temperature, &none));
    }
    if (none) {
      out.video = constant<S>(Matrix<S>::Zero(1, 1));
      out.video_degenerate = true;
    } else {
      out.video = linear_combination(per_level,
                                     std::vector<S>(per_level.size(), S(1) / static_cast<S>(levels)));
    }
  }

  // Layer term.
  if (levels < 2) {
    out.layer = constant<S>(Matrix<S>::Zero(1, 1));
    out.layer_degenerate = true;
    return out;
  }
  std::vector<std::vector<std::vector<Index>>> rows(static_cast<std::size_t>(groups));
  for (Index b = 0; b < groups; ++b)
    for (Index t = 0; t < frames; ++t)
      if (positives[static_cast<std::size_t>(b)][static_cast<std::size_t>(t)])
        rows[static_cast<std::size_t>(b)].push_back({2 * (b * frames + t), 2 * (b * frames + t) + 1});
  std::vector<Var<S>> cos_same(static_cast<std::size_t>(levels));
  for (Index l = 0; l < levels; ++l)
    cos_same[static_cast<std::size_t>(l)] =
        cosine_rows(videos[static_cast<std::size_t>(l)], text_pools[static_cast<std::size_t>(l)], S(1e-8));
  std::vector<Var<S>> per_pair;
  bool none = false;
  for (Index l = 0; l < levels; ++l)
    for (Index k = 0; k < levels; ++k) {
      if (k == l) continue;
      const Var<S> other =
          cosine_rows(videos[static_cast<std::size_t>(k)], text_pools[static_cast<std::size_t>(l)], S(1e-8));
      const Var<S> logits = concat_cols<S>({cos_same[static_cast<std::size_t>(l)], other});
      per_pair.push_back(grouped_infonce(logits, rows, temperature, &none));
    }
  if (none) {
    out.layer = constant<S>(Matrix<S>::Zero(1, 1));
    out.layer_degenerate = true;
  } else {
    out.layer =
        linear_combination(per_pair, std::vector<S>(per_pair.size(), S(1) / static_cast<S>(per_pair.size())));
  }
  return out;
}

namespace {

template <typename S>
std::vector<Moment> moments_of(const Matrix<S>& m, Index begin, Index count) {
  std::vector<Moment> out;
  for (Index i = begin; i < begin + count; ++i)
    out.push_back({static_cast<double>(m(i, 0)), static_cast<double>(m(i, 1))});
  return out;
}

}  // namespace

template <typename S>
LossResult<S> compute_losses(const Predictions<S>& preds, const std::vector<SampleTargets>& targets,
                             const LossSettings& settings, LossDecisions* decisions) {
  const LossWeights& w = settings.weights;
  w.validate();
  const Index groups = preds.groups;
  const Index queries = preds.queries;
  const Index levels = static_cast<Index>(preds.levels.size());
  if (static_cast<Index>(targets.size()) != groups) throw Error("shape-mismatch: targets");
  const bool replay = decisions != nullptr && decisions->recorded;

  LossResult<S> res;
  std::vector<Var<S>> terms;
  std::vector<S> coeffs;
  std::vector<std::vector<bool>> positives;
  for (const auto& t : targets) positives.push_back(t.positives);

  double cls_sum = 0, l1_sum = 0, iou_sum = 0;
  bool any_match = false;
  for (Index l = 0; l < levels; ++l) {
    const auto& lv = preds.levels[static_cast<std::size_t>(l)];
    std::vector<MatchResult> level_matches;
    std::vector<bool> matched(static_cast<std::size_t>(groups * queries), false);
    std::vector<Index> rows;
    std::vector<Moment> gts;
    for (Index b = 0; b < groups; ++b) {
      const auto& tgt = targets[static_cast<std::size_t>(b)].moments;
      MatchResult match;
      if (replay) {
        match = decisions->matches[static_cast<std::size_t>(l)][static_cast<std::size_t>(b)];
      } else if (tgt.empty()) {
        for (Index q = 0; q < queries; ++q) match.unmatched.push_back(q);
      } else {
        std::vector<double> p;
        for (Index q = 0; q < queries; ++q) p.push_back(static_cast<double>(lv.probs.value()(b * queries + q, 0)));
        match = hungarian_match(matching_cost(p, moments_of(lv.moments.value(), b * queries, queries), tgt, w));
      }
      for (const auto& [q, g] : match.pairs) {
        matched[static_cast<std::size_t>(b * queries + q)] = true;
        rows.push_back(b * queries + q);
        gts.push_back(tgt[static_cast<std::size_t>(g)]);
      }
      level_matches.push_back(std::move(match));
    }
    Matrix<S> gt_mat(static_cast<Index>(gts.size()), 2);
    for (std::size_t i = 0; i < gts.size(); ++i) {
      gt_mat(static_cast<Index>(i), 0) = static_cast<S>(gts[i].start);
      gt_mat(static_cast<Index>(i), 1) = static_cast<S>(gts[i].end);
    }
    const Var<S> cls = focal_loss(lv.probs, matched, static_cast<S>(settings.focal_alpha),
                                  static_cast<S>(settings.focal_gamma));
    const auto reg = mr_regression_losses(gather_rows(lv.moments, rows), gt_mat);
    any_match = any_match || !reg.empty;
    terms.insert(terms.end(), {cls, reg.l1, reg.iou});
    coeffs.insert(coeffs.end(), {static_cast<S>(w.cls), static_cast<S>(w.l1), static_cast<S>(w.iou)});
    const std::string suffix = "_l" + std::to_string(l);
    res.components["cls" + suffix] = static_cast<double>(cls.item());
    res.components["l1" + suffix] = static_cast<double>(reg.l1.item());
    res.components["iou" + suffix] = static_cast<double>(reg.iou.item());
    cls_sum += static_cast<double>(cls.item());
    l1_sum += static_cast<double>(reg.l1.item());
    iou_sum += static_cast<double>(reg.iou.item());
    res.matches.push_back(std::move(level_matches));
  }
  res.flags.no_matches = !any_match;

  Matrix<double> act_targets;
  if (replay) {
    act_targets = decisions->actionness_targets;
  } else {
    act_targets.resize(groups * queries, 1);
    const auto& last = preds.levels.back();
    for (Index b = 0; b < groups; ++b) {
      const auto t = max_iou_targets(moments_of(last.moments.value(), b * queries, queries),
                                     targets[static_cast<std::size_t>(b)].moments);
      for (Index q = 0; q < queries; ++q) act_targets(b * queries + q, 0) = t[static_cast<std::size_t>(q)];
    }
  }
  const Var<S> act = actionness_loss(preds.actionness, Matrix<S>(act_targets.cast<S>()));
  bool sal_degenerate = false;
  const Var<S> sal = saliency_infonce(preds.saliency, positives, static_cast<S>(settings.temperature),
                                      &sal_degenerate);
  res.flags.saliency_degenerate = sal_degenerate;

  std::vector<Var<S>> videos, pools;
  for (const auto& lv : preds.levels) {
    videos.push_back(lv.video);
    pools.push_back(lv.text_pool);
  }
  const auto align = alignment_losses(videos, pools, positives, static_cast<S>(settings.temperature));
  res.flags.video_align_degenerate = align.video_degenerate;
  res.flags.layer_align_degenerate = align.layer_degenerate;

  terms.insert(terms.end(), {sal, act, align.video, align.layer});
  coeffs.insert(coeffs.end(), {static_cast<S>(w.saliency), static_cast<S>(w.actionness),
                               static_cast<S>(w.align_video), static_cast<S>(w.align_layer)});
  res.total = linear_combination(terms, coeffs);

  res.components["cls"] = cls_sum;
  res.components["l1"] = l1_sum;
  res.components["iou"] = iou_sum;
  res.components["saliency"] = static_cast<double>(sal.item());
  res.components["actionness"] = static_cast<double>(act.item());
  res.components["align_video"] = static_cast<double>(align.video.item());
  res.components["align_layer"] = static_cast<double>(align.layer.item());
  res.components["total"] = static_cast<double>(res.total.item());

  if (decisions != nullptr && !replay) {
    decisions->matches = res.matches;
    decisions->actionness_targets = act_targets;
    decisions->recorded = true;
  }
  return res;
}

#define SDST_LOSS_INSTANTIATE(S)                                                                \
  template RegressionLosses<S> mr_regression_losses(const Var<S>&, const Matrix<S>&);           \
  template Var<S> actionness_loss(const Var<S>&, const Matrix<S>&);                             \
  template Var<S> saliency_infonce(const Var<S>&, const std::vector<std::vector<bool>>&, S,     \
                                   bool*);                                                      \
  template AlignmentLosses<S> alignment_losses(const std::vector<Var<S>>&,                      \
                                               const std::vector<Var<S>>&,                      \
                                               const std::vector<std::vector<bool>>&, S);       \
  template LossResult<S> compute_losses(const Predictions<S>&, const std::vector<SampleTargets>&, \
                                        const LossSettings&, LossDecisions*);
SDST_LOSS_INSTANTIATE(float)
SDST_LOSS_INSTANTIATE(double)

}  // namespace sdst
