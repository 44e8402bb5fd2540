#pragma once

// Temporal segments. All model-internal coordinates are normalized to [0, 1];
// frame units (x (T - 1)) are used only at sampling sites.

#include <algorithm>

#include "sdst/numerics/ops.hpp"

namespace sdst {

struct Moment {
  double start = 0.0;
  double end = 0.0;
  double length() const { return end - start; }
};

struct CenterWidth {
  double center = 0.5;
  double width = 0.1;
};

inline Moment cw_to_moment(const CenterWidth& r) {
  return {std::clamp(r.center - 0.5 * r.width, 0.0, 1.0),
          std::clamp(r.center + 0.5 * r.width, 0.0, 1.0)};
}

inline CenterWidth moment_to_cw(const Moment& m) {
  return {0.5 * (m.start + m.end), m.end - m.start};
}

/// |a n b| / |a u b|; 0 when the union is empty.
inline double iou_1d(const Moment& a, const Moment& b) {
  const double inter = std::max(0.0, std::min(a.end, b.end) - std::max(a.start, b.start));
  const double uni = a.length() + b.length() - inter;
  return uni > 0.0 ? inter / uni : 0.0;
}

inline double to_frames(double normalized, Index frames) {
  return normalized * static_cast<double>(frames - 1);
}

/// Differentiable cw_to_moment over an N x 2 (center, width) matrix.
template <typename S>
Var<S> cw_to_moment(const Var<S>& refs) {
  const Var<S> c = slice_cols(refs, 0, 1);
  const Var<S> half = scale(slice_cols(refs, 1, 1), S(0.5));
  return concat_cols<S>({clamp(sub(c, half), S(0), S(1)), clamp(add(c, half), S(0), S(1))});
}

}  // namespace sdst
