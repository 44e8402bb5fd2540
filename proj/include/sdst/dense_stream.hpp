#pragma once

// Frame-level refinement of the dense embedding D for one level.

#include <string>
#include <utility>

#include "sdst/numerics/layers.hpp"

namespace sdst {

/// Training-time stochasticity shared by all blocks of a forward pass.
struct ForwardContext {
  bool training = false;
  Rng* rng = nullptr;
  double dropout = 0.0;    // on projected embeddings
  double drop_path = 0.0;  // on residual branches
};

/// ln(x + drop_path(branch)).
template <typename S>
Var<S> residual_post_norm(const LayerNorm<S>& ln, const Var<S>& x, const Var<S>& branch,
                          const ForwardContext& ctx, Index groups);

struct StreamDims {
  Index width = 256;
  Index heads = 8;
  Index ffn_ratio = 4;
  Index video_dim = 768;
  Index text_dim = 768;
};

/// beta * D + (1 - beta) * V with beta = clamp(beta_raw, 0, 1) (beta_raw is 1x1).
template <typename S>
Var<S> fuse_video(const Var<S>& dense, const Var<S>& video, const Var<S>& beta_raw);

/// Drops token 0 (CLS) of every group of `tokens` text rows.
template <typename S>
Var<S> drop_cls(const Var<S>& text, Index tokens);

template <typename S>
class DenseStream {
 public:
  DenseStream() = default;
  DenseStream(ParamSet<S>& params, const std::string& name, const StreamDims& dims, Rng& rng);

  /// Row-wise modality projections to the shared width.
  std::pair<Var<S>, Var<S>> project_inputs(const Var<S>& video_raw, const Var<S>& text_raw) const;

  /// CA over text (no CLS), SA with frame positional encoding on queries/keys, FFN;
  /// each with residual, drop path and post-normalization.
  Var<S> refine(const Var<S>& dense, const Var<S>& text_no_cls, Index groups,
                const ForwardContext& ctx) const;

  Linear<S> video_proj, text_proj;
  MultiHeadAttention<S> cross, self;
  FeedForward<S> ffn;
  LayerNorm<S> norm_cross, norm_self, norm_ffn;

 private:
  StreamDims dims_;
};

extern template Var<float> residual_post_norm(const LayerNorm<float>&, const Var<float>&,
                                              const Var<float>&, const ForwardContext&, Index);
extern template Var<double> residual_post_norm(const LayerNorm<double>&, const Var<double>&,
                                               const Var<double>&, const ForwardContext&, Index);
extern template Var<float> fuse_video(const Var<float>&, const Var<float>&, const Var<float>&);
extern template Var<double> fuse_video(const Var<double>&, const Var<double>&, const Var<double>&);
extern template Var<float> drop_cls(const Var<float>&, Index);
extern template Var<double> drop_cls(const Var<double>&, Index);
extern template class DenseStream<float>;
extern template class DenseStream<double>;

}  // namespace sdst
