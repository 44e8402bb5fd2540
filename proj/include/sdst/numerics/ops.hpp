#pragma once

// Differentiable primitives over row-major dense matrices.
//
// Batched tensors are stacked along rows: a "grouped" matrix with G groups holds
// G equally sized row blocks, one per batch element. Operations that must not mix
// batch elements (attention, temporal sampling, convolution windows) take the
// group count explicitly.

#include <algorithm>
#include <cmath>
#include <limits>
#include <vector>

#include "sdst/numerics/rng.hpp"
#include "sdst/numerics/tensor.hpp"

namespace sdst {

using IndexMatrix = Eigen::Matrix<Index, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

namespace detail {

inline void require(bool condition, const char* tag) {
  if (!condition) throw Error(tag);
}

inline Index group_size(Index rows, Index groups, const char* tag) {
  if (groups <= 0 || rows % groups != 0) throw Error(tag);
  return rows / groups;
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Elementwise and linear algebra

template <typename S>
Var<S> add(const Var<S>& a, const Var<S>& b) {
  detail::require(a.rows() == b.rows() && a.cols() == b.cols(), "shape-mismatch: add");
  return detail::result<S>(a.value() + b.value(), detail::any_requires_grad<S>({&a, &b}),
                           [a, b](Node<S>* o) {
                             return [a, b, o]() {
                               if (a.requires_grad()) detail::grad_of(a) += o->grad;
                               if (b.requires_grad()) detail::grad_of(b) += o->grad;
                             };
                           });
}

template <typename S>
Var<S> sub(const Var<S>& a, const Var<S>& b) {
  detail::require(a.rows() == b.rows() && a.cols() == b.cols(), "shape-mismatch: sub");
  return detail::result<S>(a.value() - b.value(), detail::any_requires_grad<S>({&a, &b}),
                           [a, b](Node<S>* o) {
                             return [a, b, o]() {
                               if (a.requires_grad()) detail::grad_of(a) += o->grad;
                               if (b.requires_grad()) detail::grad_of(b) -= o->grad;
                             };
                           });
}

/// Hadamard product.
template <typename S>
Var<S> mul(const Var<S>& a, const Var<S>& b) {
  detail::require(a.rows() == b.rows() && a.cols() == b.cols(), "shape-mismatch: mul");
  return detail::result<S>(a.value().cwiseProduct(b.value()),
                           detail::any_requires_grad<S>({&a, &b}), [a, b](Node<S>* o) {
                             return [a, b, o]() {
                               if (a.requires_grad())
                                 detail::grad_of(a) += o->grad.cwiseProduct(b.value());
                               if (b.requires_grad())
                                 detail::grad_of(b) += o->grad.cwiseProduct(a.value());
                             };
                           });
}

template <typename S>
Var<S> scale(const Var<S>& a, S factor) {
  return detail::result<S>(a.value() * factor, detail::any_requires_grad<S>({&a}),
                           [a, factor](Node<S>* o) {
                             return [a, factor, o]() { detail::grad_of(a) += o->grad * factor; };
                           });
}

/// s * a for a 1x1 variable s.
template <typename S>
Var<S> mul_scalar(const Var<S>& a, const Var<S>& s) {
  detail::require(s.rows() == 1 && s.cols() == 1, "shape-mismatch: mul_scalar");
  return detail::result<S>(a.value() * s.item(), detail::any_requires_grad<S>({&a, &s}),
                           [a, s](Node<S>* o) {
                             return [a, s, o]() {
                               if (a.requires_grad()) detail::grad_of(a) += o->grad * s.item();
                               if (s.requires_grad())
                                 detail::grad_of(s)(0, 0) += o->grad.cwiseProduct(a.value()).sum();
                             };
                           });
}

/// a + c for a constant matrix c of the same shape.
template <typename S>
Var<S> add_const(const Var<S>& a, const Matrix<S>& c) {
  detail::require(a.rows() == c.rows() && a.cols() == c.cols(), "shape-mismatch: add_const");
  return detail::result<S>(a.value() + c, detail::any_requires_grad<S>({&a}), [a](Node<S>* o) {
    return [a, o]() { detail::grad_of(a) += o->grad; };
  });
}

template <typename S>
Var<S> matmul(const Var<S>& a, const Var<S>& b) {
  detail::require(a.cols() == b.rows(), "shape-mismatch: matmul");
  Matrix<S> v;
  v.noalias() = a.value() * b.value();
  return detail::result<S>(std::move(v), detail::any_requires_grad<S>({&a, &b}),
                           [a, b](Node<S>* o) {
                             return [a, b, o]() {
                               if (a.requires_grad())
                                 detail::grad_of(a).noalias() += o->grad * b.value().transpose();
                               if (b.requires_grad())
                                 detail::grad_of(b).noalias() += a.value().transpose() * o->grad;
                             };
                           });
}

template <typename S>
Var<S> transpose(const Var<S>& a) {
  return detail::result<S>(a.value().transpose(), detail::any_requires_grad<S>({&a}),
                           [a](Node<S>* o) {
                             return [a, o]() { detail::grad_of(a) += o->grad.transpose(); };
                           });
}

/// x W + b, with x (N x in), W (in x out), b (1 x out) or undefined for no bias.
template <typename S>
Var<S> linear(const Var<S>& x, const Var<S>& weight, const Var<S>& bias) {
  detail::require(x.cols() == weight.rows(), "shape-mismatch: linear");
  const bool has_bias = bias.defined();
  Matrix<S> v;
  v.noalias() = x.value() * weight.value();
  if (has_bias) {
    detail::require(bias.rows() == 1 && bias.cols() == weight.cols(), "shape-mismatch: bias");
    v.rowwise() += bias.value().row(0);
  }
  const bool track = has_bias ? detail::any_requires_grad<S>({&x, &weight, &bias})
                              : detail::any_requires_grad<S>({&x, &weight});
  return detail::result<S>(std::move(v), track, [x, weight, bias, has_bias](Node<S>* o) {
    return [x, weight, bias, has_bias, o]() {
      if (x.requires_grad()) detail::grad_of(x).noalias() += o->grad * weight.value().transpose();
      if (weight.requires_grad())
        detail::grad_of(weight).noalias() += x.value().transpose() * o->grad;
      if (has_bias && bias.requires_grad()) detail::grad_of(bias) += o->grad.colwise().sum();
    };
  });
}

template <typename S>
Var<S> relu(const Var<S>& a) {
  return detail::result<S>(a.value().cwiseMax(S(0)), detail::any_requires_grad<S>({&a}),
                           [a](Node<S>* o) {
                             return [a, o]() {
                               detail::grad_of(a) +=
                                   (a.value().array() > S(0)).select(o->grad, S(0)).matrix();
                             };
                           });
}

template <typename S>
Var<S> sigmoid(const Var<S>& a) {
  Matrix<S> v = (S(1) + (-a.value().array()).exp()).inverse().matrix();
  return detail::result<S>(std::move(v), detail::any_requires_grad<S>({&a}), [a](Node<S>* o) {
    return [a, o]() {
      const auto& y = o->value.array();
      detail::grad_of(a) += (o->grad.array() * y * (S(1) - y)).matrix();
    };
  });
}

/// Inverse sigmoid; inputs are clamped to [eps, 1 - eps] (zero gradient outside).
template <typename S>
Var<S> logit(const Var<S>& a, S eps = S(1e-5)) {
  const auto clamped = a.value().array().max(eps).min(S(1) - eps);
  Matrix<S> v = (clamped / (S(1) - clamped)).log().matrix();
  return detail::result<S>(std::move(v), detail::any_requires_grad<S>({&a}), [a, eps](Node<S>* o) {
    return [a, eps, o]() {
      const auto x = a.value().array();
      const auto inside = (x > eps) && (x < S(1) - eps);
      detail::grad_of(a) +=
          inside.select(o->grad.array() / (x * (S(1) - x)), S(0)).matrix();
    };
  });
}

/// Clamp to [lo, hi]; gradient is zero where clamping is active.
template <typename S>
Var<S> clamp(const Var<S>& a, S lo, S hi) {
  return detail::result<S>(a.value().cwiseMax(lo).cwiseMin(hi),
                           detail::any_requires_grad<S>({&a}), [a, lo, hi](Node<S>* o) {
                             return [a, lo, hi, o]() {
                               const auto x = a.value().array();
                               detail::grad_of(a) +=
                                   ((x >= lo) && (x <= hi)).select(o->grad.array(), S(0)).matrix();
                             };
                           });
}

// ---------------------------------------------------------------------------
// Shape manipulation

template <typename S>
Var<S> concat_cols(const std::vector<Var<S>>& parts) {
  detail::require(!parts.empty(), "empty-concat");
  const Index rows = parts.front().rows();
  Index cols = 0;
  for (const auto& p : parts) {
    detail::require(p.rows() == rows, "shape-mismatch: concat_cols");
    cols += p.cols();
  }
  Matrix<S> v(rows, cols);
  Index offset = 0;
  for (const auto& p : parts) {
    v.middleCols(offset, p.cols()) = p.value();
    offset += p.cols();
  }
  return detail::result<S>(std::move(v), detail::any_requires_grad<S>(parts), [parts](Node<S>* o) {
    return [parts, o]() {
      Index off = 0;
      for (const auto& p : parts) {
        if (p.requires_grad()) detail::grad_of(p) += o->grad.middleCols(off, p.cols());
        off += p.cols();
      }
    };
  });
}

template <typename S>
Var<S> concat_rows(const std::vector<Var<S>>& parts) {
  detail::require(!parts.empty(), "empty-concat");
  const Index cols = parts.front().cols();
  Index rows = 0;
  for (const auto& p : parts) {
    detail::require(p.cols() == cols, "shape-mismatch: concat_rows");
    rows += p.rows();
  }
  Matrix<S> v(rows, cols);
  Index offset = 0;
  for (const auto& p : parts) {
    v.middleRows(offset, p.rows()) = p.value();
    offset += p.rows();
  }
  return detail::result<S>(std::move(v), detail::any_requires_grad<S>(parts), [parts](Node<S>* o) {
    return [parts, o]() {
      Index off = 0;
      for (const auto& p : parts) {
        if (p.requires_grad()) detail::grad_of(p) += o->grad.middleRows(off, p.rows());
        off += p.rows();
      }
    };
  });
}

template <typename S>
Var<S> slice_cols(const Var<S>& a, Index start, Index count) {
  detail::require(start >= 0 && count >= 0 && start + count <= a.cols(), "slice-out-of-range");
  return detail::result<S>(a.value().middleCols(start, count), detail::any_requires_grad<S>({&a}),
                           [a, start, count](Node<S>* o) {
                             return [a, start, count, o]() {
                               detail::grad_of(a).middleCols(start, count) += o->grad;
                             };
                           });
}

template <typename S>
Var<S> gather_rows(const Var<S>& a, const std::vector<Index>& index) {
  Matrix<S> v(static_cast<Index>(index.size()), a.cols());
  for (std::size_t i = 0; i < index.size(); ++i) {
    detail::require(index[i] >= 0 && index[i] < a.rows(), "gather-out-of-range");
    v.row(static_cast<Index>(i)) = a.value().row(index[i]);
  }
  return detail::result<S>(std::move(v), detail::any_requires_grad<S>({&a}), [a, index](Node<S>* o) {
    return [a, index, o]() {
      auto& g = detail::grad_of(a);
      for (std::size_t i = 0; i < index.size(); ++i) g.row(index[i]) += o->grad.row(static_cast<Index>(i));
    };
  });
}

/// Gathers scalars by flat (row-major) index; negative indices yield 0 with no gradient.
template <typename S>
Var<S> gather_elements(const Var<S>& a, const IndexMatrix& index) {
  const Index n = a.value().size();
  Matrix<S> v(index.rows(), index.cols());
  for (Index r = 0; r < index.rows(); ++r)
    for (Index c = 0; c < index.cols(); ++c) {
      const Index k = index(r, c);
      detail::require(k < n, "gather-out-of-range");
      v(r, c) = k >= 0 ? a.value().data()[k] : S(0);
    }
  return detail::result<S>(std::move(v), detail::any_requires_grad<S>({&a}), [a, index](Node<S>* o) {
    return [a, index, o]() {
      S* g = detail::grad_of(a).data();
      for (Index r = 0; r < index.rows(); ++r)
        for (Index c = 0; c < index.cols(); ++c)
          if (index(r, c) >= 0) g[index(r, c)] += o->grad(r, c);
    };
  });
}

/// Repeats each row of a (G x C) `rows_per_group` times, giving (G*rows_per_group) x C.
template <typename S>
Var<S> broadcast_groups(const Var<S>& a, Index rows_per_group) {
  const Index groups = a.rows();
  Matrix<S> v(groups * rows_per_group, a.cols());
  for (Index g = 0; g < groups; ++g)
    v.middleRows(g * rows_per_group, rows_per_group).rowwise() = a.value().row(g);
  return detail::result<S>(std::move(v), detail::any_requires_grad<S>({&a}),
                           [a, rows_per_group](Node<S>* o) {
                             return [a, rows_per_group, o]() {
                               auto& g = detail::grad_of(a);
                               for (Index k = 0; k < g.rows(); ++k)
                                 g.row(k) += o->grad.middleRows(k * rows_per_group, rows_per_group)
                                                 .colwise()
                                                 .sum();
                             };
                           });
}

// ---------------------------------------------------------------------------
// Reductions

template <typename S>
Var<S> sum_all(const Var<S>& a) {
  Matrix<S> v(1, 1);
  v(0, 0) = a.value().sum();
  return detail::result<S>(std::move(v), detail::any_requires_grad<S>({&a}), [a](Node<S>* o) {
    return [a, o]() { detail::grad_of(a).array() += o->grad(0, 0); };
  });
}

template <typename S>
Var<S> mean_all(const Var<S>& a) {
  detail::require(a.value().size() > 0, "empty-mean");
  return scale(sum_all(a), S(1) / static_cast<S>(a.value().size()));
}

/// sum(a .* w) for a constant weight matrix w.
template <typename S>
Var<S> weighted_sum(const Var<S>& a, const Matrix<S>& w) {
  detail::require(a.rows() == w.rows() && a.cols() == w.cols(), "shape-mismatch: weighted_sum");
  Matrix<S> v(1, 1);
  v(0, 0) = a.value().cwiseProduct(w).sum();
  return detail::result<S>(std::move(v), detail::any_requires_grad<S>({&a}), [a, w](Node<S>* o) {
    return [a, w, o]() { detail::grad_of(a) += w * o->grad(0, 0); };
  });
}

/// sum_i coeff[i] * terms[i] over 1x1 terms.
template <typename S>
Var<S> linear_combination(const std::vector<Var<S>>& terms, const std::vector<S>& coeff) {
  detail::require(terms.size() == coeff.size(), "shape-mismatch: linear_combination");
  Matrix<S> v = Matrix<S>::Zero(1, 1);
  for (std::size_t i = 0; i < terms.size(); ++i) {
    detail::require(terms[i].rows() == 1 && terms[i].cols() == 1, "non-scalar-term");
    v(0, 0) += coeff[i] * terms[i].item();
  }
  return detail::result<S>(std::move(v), detail::any_requires_grad<S>(terms),
                           [terms, coeff](Node<S>* o) {
                             return [terms, coeff, o]() {
                               for (std::size_t i = 0; i < terms.size(); ++i)
                                 if (terms[i].requires_grad())
                                   detail::grad_of(terms[i])(0, 0) += coeff[i] * o->grad(0, 0);
                             };
                           });
}

// ---------------------------------------------------------------------------
// Normalization and softmax

/// Softmax of a single vector. Shift invariant.
template <typename S>
Matrix<S> softmax(const Matrix<S>& v) {
  if (v.size() == 0) throw Error("empty-softmax");
  const S mx = v.maxCoeff();
  Matrix<S> e = (v.array() - mx).exp().matrix();
  return e / e.sum();
}

/// Row-wise softmax over consecutive blocks of `block` columns.
template <typename S>
Var<S> softmax_blocks(const Var<S>& x, Index block) {
  if (block <= 0 || x.cols() == 0) throw Error("empty-softmax");
  detail::require(x.cols() % block == 0, "shape-mismatch: softmax_blocks");
  Matrix<S> v(x.rows(), x.cols());
  for (Index r = 0; r < x.rows(); ++r)
    for (Index c = 0; c < x.cols(); c += block) {
      auto in = x.value().row(r).segment(c, block);
      auto out = v.row(r).segment(c, block);
      const S mx = in.maxCoeff();
      out = (in.array() - mx).exp().matrix();
      out /= out.sum();
    }
  return detail::result<S>(std::move(v), detail::any_requires_grad<S>({&x}), [x, block](Node<S>* o) {
    return [x, block, o]() {
      auto& g = detail::grad_of(x);
      for (Index r = 0; r < o->value.rows(); ++r)
        for (Index c = 0; c < o->value.cols(); c += block) {
          auto y = o->value.row(r).segment(c, block);
          auto gy = o->grad.row(r).segment(c, block);
          const S dot = y.dot(gy);
          g.row(r).segment(c, block) += (y.array() * (gy.array() - dot)).matrix();
        }
    };
  });
}

/// Row-wise layer normalization with learnable gain and bias (both 1 x C).
template <typename S>
Var<S> layer_norm(const Var<S>& x, const Var<S>& gain, const Var<S>& bias, S eps = S(1e-5)) {
  const Index c = x.cols();
  detail::require(c >= 1 && gain.cols() == c && bias.cols() == c, "shape-mismatch: layer_norm");
  Matrix<S> xhat(x.rows(), c);
  Matrix<S> inv_std(x.rows(), 1);
  for (Index r = 0; r < x.rows(); ++r) {
    const auto row = x.value().row(r);
    const S mu = row.mean();
    const S var = (row.array() - mu).square().mean();
    inv_std(r, 0) = S(1) / std::sqrt(var + eps);
    xhat.row(r) = (row.array() - mu) * inv_std(r, 0);
  }
  Matrix<S> v = xhat;
  v.array().rowwise() *= gain.value().row(0).array();
  v.rowwise() += bias.value().row(0);
  const bool track = detail::any_requires_grad<S>({&x, &gain, &bias});
  return detail::result<S>(std::move(v), track, [x, gain, bias, xhat, inv_std, c](Node<S>* o) {
    return [x, gain, bias, xhat, inv_std, c, o]() {
      if (gain.requires_grad())
        detail::grad_of(gain) += o->grad.cwiseProduct(xhat).colwise().sum();
      if (bias.requires_grad()) detail::grad_of(bias) += o->grad.colwise().sum();
      if (x.requires_grad()) {
        auto& gx = detail::grad_of(x);
        for (Index r = 0; r < o->grad.rows(); ++r) {
          const auto gxhat = (o->grad.row(r).array() * gain.value().row(0).array()).matrix();
          const S mean_g = gxhat.sum() / static_cast<S>(c);
          const S mean_gx = gxhat.dot(xhat.row(r)) / static_cast<S>(c);
          gx.row(r) +=
              ((gxhat.array() - mean_g - xhat.row(r).array() * mean_gx) * inv_std(r, 0)).matrix();
        }
      }
    };
  });
}

/// Rows scaled to unit norm; rows with norm below eps are divided by eps instead.
template <typename S>
Var<S> normalize_rows(const Var<S>& a, S eps = S(1e-8)) {
  Matrix<S> norms = a.value().rowwise().norm();
  Matrix<S> denom = norms.cwiseMax(eps);
  Matrix<S> v = a.value();
  for (Index r = 0; r < v.rows(); ++r) v.row(r) /= denom(r, 0);
  return detail::result<S>(std::move(v), detail::any_requires_grad<S>({&a}),
                           [a, norms, denom, eps](Node<S>* o) {
                             return [a, norms, denom, eps, o]() {
                               auto& g = detail::grad_of(a);
                               for (Index r = 0; r < g.rows(); ++r) {
                                 const auto gy = o->grad.row(r);
                                 if (norms(r, 0) > eps) {
                                   const auto y = o->value.row(r);
                                   g.row(r) += (gy - y * y.dot(gy)) / denom(r, 0);
                                 } else {
                                   g.row(r) += gy / denom(r, 0);
                                 }
                               }
                             };
                           });
}

// ---------------------------------------------------------------------------
// Attention kernels

/// Scaled dot-product attention, batched over `groups` independent row blocks.
/// Q: (G*N) x C, K and V: (G*L) x C; C is split into `heads` equal slices.
template <typename S>
Var<S> attention(const Var<S>& q, const Var<S>& k, const Var<S>& v, Index heads, Index groups) {
  const Index c = q.cols();
  if (k.rows() == 0) throw Error("empty-memory");
  detail::require(heads > 0 && c % heads == 0, "heads-must-divide-width");
  detail::require(k.cols() == c && v.cols() == c && v.rows() == k.rows(),
                  "shape-mismatch: attention");
  const Index n = detail::group_size(q.rows(), groups, "shape-mismatch: attention groups");
  const Index l = detail::group_size(k.rows(), groups, "shape-mismatch: attention groups");
  const Index d = c / heads;
  const S inv_sqrt_d = S(1) / std::sqrt(static_cast<S>(d));

  Matrix<S> probs(groups * heads * n, l);
  Matrix<S> out(q.rows(), c);
  for (Index g = 0; g < groups; ++g)
    for (Index h = 0; h < heads; ++h) {
      auto qh = q.value().block(g * n, h * d, n, d);
      auto kh = k.value().block(g * l, h * d, l, d);
      auto vh = v.value().block(g * l, h * d, l, d);
      auto p = probs.middleRows((g * heads + h) * n, n);
      p.noalias() = qh * kh.transpose();
      p *= inv_sqrt_d;
      for (Index r = 0; r < n; ++r) {
        const S mx = p.row(r).maxCoeff();
        p.row(r) = (p.row(r).array() - mx).exp().matrix();
        p.row(r) /= p.row(r).sum();
      }
      out.block(g * n, h * d, n, d).noalias() = p * vh;
    }

  const bool track = detail::any_requires_grad<S>({&q, &k, &v});
  return detail::result<S>(
      std::move(out), track, [q, k, v, probs, heads, groups, n, l, d, inv_sqrt_d](Node<S>* o) {
        return [q, k, v, probs, heads, groups, n, l, d, inv_sqrt_d, o]() {
          Matrix<S> dp(n, l);
          for (Index g = 0; g < groups; ++g)
            for (Index h = 0; h < heads; ++h) {
              auto p = probs.middleRows((g * heads + h) * n, n);
              auto go = o->grad.block(g * n, h * d, n, d);
              auto vh = v.value().block(g * l, h * d, l, d);
              if (v.requires_grad())
                detail::grad_of(v).block(g * l, h * d, l, d).noalias() += p.transpose() * go;
              if (!q.requires_grad() && !k.requires_grad()) continue;
              dp.noalias() = go * vh.transpose();
              for (Index r = 0; r < n; ++r) {
                const S dot = dp.row(r).dot(p.row(r));
                dp.row(r) = (p.row(r).array() * (dp.row(r).array() - dot)).matrix();
              }
              dp *= inv_sqrt_d;
              if (q.requires_grad())
                detail::grad_of(q).block(g * n, h * d, n, d).noalias() +=
                    dp * k.value().block(g * l, h * d, l, d);
              if (k.requires_grad())
                detail::grad_of(k).block(g * l, h * d, l, d).noalias() +=
                    dp.transpose() * q.value().block(g * n, h * d, n, d);
            }
        };
      });
}

/// Softmax-weighted pooling of each group's rows: out_g = sum_i softmax(logits_g)_i x_i.
/// x: (G*L) x C, logits: (G*L) x 1.
template <typename S>
Var<S> attention_pool(const Var<S>& x, const Var<S>& logits, Index groups) {
  const Index l = detail::group_size(x.rows(), groups, "shape-mismatch: attention_pool");
  detail::require(l >= 1, "empty-query");
  detail::require(logits.rows() == x.rows() && logits.cols() == 1,
                  "shape-mismatch: attention_pool");
  Matrix<S> alpha(x.rows(), 1);
  Matrix<S> out(groups, x.cols());
  for (Index g = 0; g < groups; ++g) {
    alpha.middleRows(g * l, l) = softmax<S>(logits.value().middleRows(g * l, l));
    out.row(g).noalias() =
        alpha.middleRows(g * l, l).transpose() * x.value().middleRows(g * l, l);
  }
  const bool track = detail::any_requires_grad<S>({&x, &logits});
  return detail::result<S>(std::move(out), track, [x, logits, alpha, groups, l](Node<S>* o) {
    return [x, logits, alpha, groups, l, o]() {
      for (Index g = 0; g < groups; ++g) {
        const auto go = o->grad.row(g);
        const auto a = alpha.middleRows(g * l, l);
        if (x.requires_grad()) detail::grad_of(x).middleRows(g * l, l).noalias() += a * go;
        if (logits.requires_grad()) {
          Matrix<S> da = x.value().middleRows(g * l, l) * go.transpose();
          const S dot = da.col(0).dot(a.col(0));
          detail::grad_of(logits).middleRows(g * l, l) +=
              (a.array() * (da.array() - dot)).matrix();
        }
      }
    };
  });
}

// ---------------------------------------------------------------------------
// Temporal sampling

namespace detail {

template <typename S>
struct LerpCoord {
  Index i0;
  Index i1;
  S frac;
  bool interior;  // coordinate strictly inside the clamp range: gradient flows
};

template <typename S>
LerpCoord<S> lerp_coord(S c, Index frames) {
  const S hi = static_cast<S>(frames - 1);
  LerpCoord<S> out{0, 0, S(0), false};
  if (frames == 1) return out;
  if (!(c > S(0))) return out;
  if (!(c < hi)) {
    out.i0 = out.i1 = frames - 1;
    return out;
  }
  out.i0 = std::min<Index>(static_cast<Index>(std::floor(c)), frames - 2);
  out.i1 = out.i0 + 1;
  out.frac = c - static_cast<S>(out.i0);
  out.interior = true;
  return out;
}

}  // namespace detail

/// Linear interpolation along the frame axis (1-D bilinear sampling).
/// seq: (G*T) x C; coords: (G*N) x S in frame units, clamped to [0, T-1].
/// Output: (G*N) x (S*C); column block s holds the sample at coords(:, s).
template <typename S>
Var<S> sample_1d(const Var<S>& seq, const Var<S>& coords, Index groups) {
  if (seq.rows() == 0) throw Error("empty-sequence");
  const Index t = detail::group_size(seq.rows(), groups, "shape-mismatch: sample_1d groups");
  const Index n = detail::group_size(coords.rows(), groups, "shape-mismatch: sample_1d groups");
  const Index c = seq.cols();
  const Index samples = coords.cols();
  Matrix<S> out(coords.rows(), samples * c);
  for (Index i = 0; i < coords.rows(); ++i) {
    const Index base = (i / n) * t;
    for (Index s = 0; s < samples; ++s) {
      const auto lc = detail::lerp_coord<S>(coords.value()(i, s), t);
      out.row(i).segment(s * c, c) = (S(1) - lc.frac) * seq.value().row(base + lc.i0) +
                                     lc.frac * seq.value().row(base + lc.i1);
    }
  }
  const bool track = detail::any_requires_grad<S>({&seq, &coords});
  return detail::result<S>(std::move(out), track, [seq, coords, t, n, c, samples](Node<S>* o) {
    return [seq, coords, t, n, c, samples, o]() {
      for (Index i = 0; i < coords.rows(); ++i) {
        const Index base = (i / n) * t;
        for (Index s = 0; s < samples; ++s) {
          const auto lc = detail::lerp_coord<S>(coords.value()(i, s), t);
          const auto go = o->grad.row(i).segment(s * c, c);
          if (seq.requires_grad()) {
            auto& gs = detail::grad_of(seq);
            gs.row(base + lc.i0) += (S(1) - lc.frac) * go;
            gs.row(base + lc.i1) += lc.frac * go;
          }
          if (coords.requires_grad() && lc.interior)
            detail::grad_of(coords)(i, s) +=
                go.dot(seq.value().row(base + lc.i1) - seq.value().row(base + lc.i0));
        }
      }
    };
  });
}

/// Deformable aggregation: for each row i and head h,
///   out[i, slice_h] = sum_p weights[i, h*P+p] * values[loc[i, h*P+p], slice_h]
/// where values are linearly interpolated along frames and slice_h is the h-th
/// channel slice of width C/heads.
template <typename S>
Var<S> deformable_aggregate(const Var<S>& values, const Var<S>& locations, const Var<S>& weights,
                            Index heads, Index points, Index groups) {
  if (values.rows() == 0) throw Error("empty-sequence");
  const Index c = values.cols();
  detail::require(heads > 0 && points > 0 && c % heads == 0, "heads-must-divide-width");
  detail::require(locations.cols() == heads * points && weights.cols() == heads * points &&
                      weights.rows() == locations.rows(),
                  "shape-mismatch: deformable_aggregate");
  const Index t = detail::group_size(values.rows(), groups, "shape-mismatch: deformable groups");
  const Index n = detail::group_size(locations.rows(), groups, "shape-mismatch: deformable groups");
  const Index d = c / heads;
  Matrix<S> out = Matrix<S>::Zero(locations.rows(), c);
  for (Index i = 0; i < locations.rows(); ++i) {
    const Index base = (i / n) * t;
    for (Index h = 0; h < heads; ++h)
      for (Index p = 0; p < points; ++p) {
        const Index j = h * points + p;
        const auto lc = detail::lerp_coord<S>(locations.value()(i, j), t);
        const S w = weights.value()(i, j);
        out.row(i).segment(h * d, d) +=
            w * ((S(1) - lc.frac) * values.value().row(base + lc.i0).segment(h * d, d) +
                 lc.frac * values.value().row(base + lc.i1).segment(h * d, d));
      }
  }
  const bool track = detail::any_requires_grad<S>({&values, &locations, &weights});
  return detail::result<S>(
      std::move(out), track, [values, locations, weights, heads, points, t, n, d](Node<S>* o) {
        return [values, locations, weights, heads, points, t, n, d, o]() {
          for (Index i = 0; i < locations.rows(); ++i) {
            const Index base = (i / n) * t;
            for (Index h = 0; h < heads; ++h) {
              const auto go = o->grad.row(i).segment(h * d, d);
              for (Index p = 0; p < points; ++p) {
                const Index j = h * points + p;
                const auto lc = detail::lerp_coord<S>(locations.value()(i, j), t);
                const S w = weights.value()(i, j);
                const auto v0 = values.value().row(base + lc.i0).segment(h * d, d);
                const auto v1 = values.value().row(base + lc.i1).segment(h * d, d);
                if (weights.requires_grad())
                  detail::grad_of(weights)(i, j) +=
                      go.dot((S(1) - lc.frac) * v0 + lc.frac * v1);
                if (values.requires_grad()) {
                  auto& gv = detail::grad_of(values);
                  gv.row(base + lc.i0).segment(h * d, d) += (w * (S(1) - lc.frac)) * go;
                  gv.row(base + lc.i1).segment(h * d, d) += (w * lc.frac) * go;
                }
                if (locations.requires_grad() && lc.interior)
                  detail::grad_of(locations)(i, j) += w * go.dot(v1 - v0);
              }
            }
          }
        };
      });
}

/// Sliding temporal window: row t of each group becomes [x[t-k/2], ..., x[t+k/2]]
/// with zero padding at group borders ("same" convolution via a following linear map).
template <typename S>
Var<S> temporal_unfold(const Var<S>& x, Index kernel, Index groups) {
  detail::require(kernel >= 1 && kernel % 2 == 1, "kernel-must-be-odd");
  const Index t = detail::group_size(x.rows(), groups, "shape-mismatch: temporal_unfold");
  const Index c = x.cols();
  const Index half = kernel / 2;
  Matrix<S> out = Matrix<S>::Zero(x.rows(), kernel * c);
  for (Index g = 0; g < groups; ++g)
    for (Index r = 0; r < t; ++r)
      for (Index j = 0; j < kernel; ++j) {
        const Index src = r + j - half;
        if (src >= 0 && src < t) out.row(g * t + r).segment(j * c, c) = x.value().row(g * t + src);
      }
  return detail::result<S>(std::move(out), detail::any_requires_grad<S>({&x}),
                           [x, kernel, groups, t, c, half](Node<S>* o) {
                             return [x, kernel, groups, t, c, half, o]() {
                               auto& gx = detail::grad_of(x);
                               for (Index g = 0; g < groups; ++g)
                                 for (Index r = 0; r < t; ++r)
                                   for (Index j = 0; j < kernel; ++j) {
                                     const Index src = r + j - half;
                                     if (src >= 0 && src < t)
                                       gx.row(g * t + src) +=
                                           o->grad.row(g * t + r).segment(j * c, c);
                                   }
                             };
                           });
}

// ---------------------------------------------------------------------------
// Regularization

/// Inverted dropout. Identity when not training or p == 0.
template <typename S>
Var<S> dropout(const Var<S>& x, double p, bool training, Rng& rng) {
  if (p < 0.0 || p >= 1.0) throw Error("invalid-drop-probability");
  if (!training || p == 0.0) return x;
  Matrix<S> mask(x.rows(), x.cols());
  const S keep_scale = static_cast<S>(1.0 / (1.0 - p));
  for (Index i = 0; i < mask.size(); ++i) mask.data()[i] = rng.bernoulli(p) ? S(0) : keep_scale;
  return mul(x, constant<S>(std::move(mask)));
}

/// Stochastic depth on a residual branch: each group (sample) is zeroed with
/// probability p and scaled by 1/(1-p) otherwise. Identity when not training.
template <typename S>
Var<S> drop_path(const Var<S>& x, double p, bool training, Rng& rng, Index groups) {
  if (p < 0.0 || p >= 1.0) throw Error("invalid-drop-probability");
  if (!training || p == 0.0) return x;
  const Index rows = detail::group_size(x.rows(), groups, "shape-mismatch: drop_path");
  Matrix<S> mask(x.rows(), x.cols());
  const S keep_scale = static_cast<S>(1.0 / (1.0 - p));
  for (Index g = 0; g < groups; ++g)
    mask.middleRows(g * rows, rows).setConstant(rng.bernoulli(p) ? S(0) : keep_scale);
  return mul(x, constant<S>(std::move(mask)));
}

// ---------------------------------------------------------------------------
// Similarity

/// Cosine similarity of each row of a ((G*N) x C) with its group's row of b (G x C).
/// Norms are floored at eps, so zero vectors score 0.
template <typename S>
Var<S> cosine_rows(const Var<S>& a, const Var<S>& b, S eps = S(1e-8)) {
  const Index groups = b.rows();
  const Index n = detail::group_size(a.rows(), groups, "shape-mismatch: cosine_rows");
  detail::require(a.cols() == b.cols(), "shape-mismatch: cosine_rows");
  Matrix<S> na = a.value().rowwise().norm();
  Matrix<S> nb = b.value().rowwise().norm();
  Matrix<S> out(a.rows(), 1);
  for (Index i = 0; i < a.rows(); ++i) {
    const Index g = i / n;
    out(i, 0) = a.value().row(i).dot(b.value().row(g)) /
                (std::max(na(i, 0), eps) * std::max(nb(g, 0), eps));
  }
  const bool track = detail::any_requires_grad<S>({&a, &b});
  return detail::result<S>(std::move(out), track, [a, b, na, nb, n, eps](Node<S>* o) {
    return [a, b, na, nb, n, eps, o]() {
      for (Index i = 0; i < a.rows(); ++i) {
        const Index g = i / n;
        const S da = std::max(na(i, 0), eps);
        const S db = std::max(nb(g, 0), eps);
        const S go = o->grad(i, 0);
        const S cosv = o->value(i, 0);
        if (a.requires_grad()) {
          auto row = detail::grad_of(a).row(i);
          row += go * b.value().row(g) / (da * db);
          if (na(i, 0) > eps) row -= go * cosv * a.value().row(i) / (da * da);
        }
        if (b.requires_grad()) {
          auto row = detail::grad_of(b).row(g);
          row += go * a.value().row(i) / (da * db);
          if (nb(g, 0) > eps) row -= go * cosv * b.value().row(g) / (db * db);
        }
      }
    };
  });
}

// ---------------------------------------------------------------------------
// Loss kernels

/// Per-row InfoNCE: row r holds logits with the positive in column 0 and
/// candidates enabled by `valid` (column 0 must be valid). Returns R x 1 losses
///   -s0/tau + log sum_{valid j} exp(s_j/tau).
template <typename S>
Var<S> info_nce_rows(const Var<S>& logits, const Eigen::Array<bool, Eigen::Dynamic, Eigen::Dynamic,
                                                              Eigen::RowMajor>& valid,
                     S temperature) {
  detail::require(temperature > S(0), "invalid-temperature");
  detail::require(valid.rows() == logits.rows() && valid.cols() == logits.cols(),
                  "shape-mismatch: info_nce");
  const Index rows = logits.rows();
  const Index cols = logits.cols();
  Matrix<S> probs = Matrix<S>::Zero(rows, cols);
  Matrix<S> out(rows, 1);
  for (Index r = 0; r < rows; ++r) {
    detail::require(valid(r, 0), "info-nce-missing-positive");
    S mx = -std::numeric_limits<S>::infinity();
    for (Index j = 0; j < cols; ++j)
      if (valid(r, j)) mx = std::max(mx, logits.value()(r, j) / temperature);
    S z = 0;
    for (Index j = 0; j < cols; ++j)
      if (valid(r, j)) {
        probs(r, j) = std::exp(logits.value()(r, j) / temperature - mx);
        z += probs(r, j);
      }
    probs.row(r) /= z;
    out(r, 0) = -logits.value()(r, 0) / temperature + mx + std::log(z);
  }
  return detail::result<S>(std::move(out), detail::any_requires_grad<S>({&logits}),
                           [logits, probs, temperature](Node<S>* o) {
                             return [logits, probs, temperature, o]() {
                               auto& g = detail::grad_of(logits);
                               for (Index r = 0; r < probs.rows(); ++r) {
                                 const S go = o->grad(r, 0) / temperature;
                                 g.row(r) += go * probs.row(r);
                                 g(r, 0) -= go;
                               }
                             };
                           });
}

/// Mean binary focal loss over N x 1 probabilities; inputs clamped to [1e-7, 1-1e-7].
template <typename S>
Var<S> focal_loss(const Var<S>& p, const std::vector<bool>& matched, S alpha, S gamma) {
  detail::require(p.cols() == 1 && p.rows() == static_cast<Index>(matched.size()) && p.rows() > 0,
                  "shape-mismatch: focal_loss");
  const S eps = S(1e-7);
  const Index n = p.rows();
  Matrix<S> dloss(n, 1);
  S total = 0;
  for (Index i = 0; i < n; ++i) {
    const S raw = p.value()(i, 0);
    const S x = std::min(std::max(raw, eps), S(1) - eps);
    const bool inside = raw > eps && raw < S(1) - eps;
    if (matched[static_cast<std::size_t>(i)]) {
      const S q = S(1) - x;
      total += -alpha * std::pow(q, gamma) * std::log(x);
      const S dq = gamma == S(0) ? S(0) : gamma * std::pow(q, gamma - S(1));
      dloss(i, 0) = inside ? alpha * (dq * std::log(x) - std::pow(q, gamma) / x) : S(0);
    } else {
      total += -(S(1) - alpha) * std::pow(x, gamma) * std::log(S(1) - x);
      const S dx = gamma == S(0) ? S(0) : gamma * std::pow(x, gamma - S(1));
      dloss(i, 0) = inside ? -(S(1) - alpha) *
                                 (dx * std::log(S(1) - x) - std::pow(x, gamma) / (S(1) - x))
                           : S(0);
    }
  }
  Matrix<S> v(1, 1);
  v(0, 0) = total / static_cast<S>(n);
  return detail::result<S>(std::move(v), detail::any_requires_grad<S>({&p}), [p, dloss, n](Node<S>* o) {
    return [p, dloss, n, o]() { detail::grad_of(p) += dloss * (o->grad(0, 0) / static_cast<S>(n)); };
  });
}

/// sum |a - target| / rows (row-wise L1 distance averaged over rows).
template <typename S>
Var<S> l1_rows_mean(const Var<S>& a, const Matrix<S>& target) {
  detail::require(a.rows() == target.rows() && a.cols() == target.cols() && a.rows() > 0,
                  "shape-mismatch: l1");
  Matrix<S> diff = a.value() - target;
  Matrix<S> v(1, 1);
  v(0, 0) = diff.cwiseAbs().sum() / static_cast<S>(a.rows());
  return detail::result<S>(std::move(v), detail::any_requires_grad<S>({&a}), [a, diff](Node<S>* o) {
    return [a, diff, o]() {
      const S k = o->grad(0, 0) / static_cast<S>(diff.rows());
      detail::grad_of(a) += (diff.array().sign() * k).matrix();
    };
  });
}

/// 1 - mean IoU between predicted (N x 2, start/end) and target segments.
template <typename S>
Var<S> iou_loss(const Var<S>& pred, const Matrix<S>& target) {
  detail::require(pred.rows() == target.rows() && pred.cols() == 2 && target.cols() == 2 &&
                      pred.rows() > 0,
                  "shape-mismatch: iou_loss");
  const Index n = pred.rows();
  Matrix<S> dpred = Matrix<S>::Zero(n, 2);
  S sum_iou = 0;
  for (Index i = 0; i < n; ++i) {
    const S s = pred.value()(i, 0), e = pred.value()(i, 1);
    const S gs = target(i, 0), ge = target(i, 1);
    const S lo = std::max(s, gs), hi = std::min(e, ge);
    const S inter = std::max(hi - lo, S(0));
    const S uni = (e - s) + (ge - gs) - inter;
    if (!(uni > S(0))) continue;
    const S iou = inter / uni;
    sum_iou += iou;
    const S dinter_ds = (inter > S(0) && s > gs) ? S(-1) : S(0);
    const S dinter_de = (inter > S(0) && e < ge) ? S(1) : S(0);
    // d iou = (d inter * uni - inter * d uni) / uni^2, d uni = d(e - s) - d inter
    dpred(i, 0) = (dinter_ds * uni - inter * (S(-1) - dinter_ds)) / (uni * uni);
    dpred(i, 1) = (dinter_de * uni - inter * (S(1) - dinter_de)) / (uni * uni);
  }
  Matrix<S> v(1, 1);
  v(0, 0) = S(1) - sum_iou / static_cast<S>(n);
  return detail::result<S>(std::move(v), detail::any_requires_grad<S>({&pred}),
                           [pred, dpred, n](Node<S>* o) {
                             return [pred, dpred, n, o]() {
                               detail::grad_of(pred) -= dpred * (o->grad(0, 0) / static_cast<S>(n));
                             };
                           });
}

}  // namespace sdst
