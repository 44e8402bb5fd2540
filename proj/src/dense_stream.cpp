#include "sdst/dense_stream.hpp"

namespace sdst {

template <typename S>
Var<S> residual_post_norm(const LayerNorm<S>& ln, const Var<S>& x, const Var<S>& branch,
                          const ForwardContext& ctx, Index groups) {
  Var<S> b = branch;
  if (ctx.training && ctx.drop_path > 0.0) {
    if (ctx.rng == nullptr) throw Error("missing-rng");
    b = drop_path(branch, ctx.drop_path, true, *ctx.rng, groups);
  }
  return ln(add(x, b));
}

template <typename S>
Var<S> fuse_video(const Var<S>& dense, const Var<S>& video, const Var<S>& beta_raw) {
  const Var<S> beta = clamp(beta_raw, S(0), S(1));
  const Var<S> rest = add_const<S>(scale(beta, S(-1)), Matrix<S>::Ones(1, 1));
  return add(mul_scalar(dense, beta), mul_scalar(video, rest));
}

template <typename S>
Var<S> drop_cls(const Var<S>& text, Index tokens) {
  if (tokens < 2) throw Error("empty-query");
  const Index groups = text.rows() / tokens;
  std::vector<Index> keep;
  keep.reserve(static_cast<std::size_t>(groups * (tokens - 1)));
  for (Index g = 0; g < groups; ++g)
    for (Index j = 1; j < tokens; ++j) keep.push_back(g * tokens + j);
  return gather_rows(text, keep);
}

template <typename S>
DenseStream<S>::DenseStream(ParamSet<S>& params, const std::string& name, const StreamDims& dims,
                            Rng& rng)
    : dims_(dims) {
  video_proj = Linear<S>(params, name + ".video_proj", dims.video_dim, dims.width, Init::Xavier, rng);
  text_proj = Linear<S>(params, name + ".text_proj", dims.text_dim, dims.width, Init::Xavier, rng);
  cross = MultiHeadAttention<S>(params, name + ".cross", dims.width, dims.heads, rng);
  norm_cross = LayerNorm<S>(params, name + ".norm_cross", dims.width);
  self = MultiHeadAttention<S>(params, name + ".self", dims.width, dims.heads, rng);
  norm_self = LayerNorm<S>(params, name + ".norm_self", dims.width);
  ffn = FeedForward<S>(params, name + ".ffn", dims.width, dims.ffn_ratio, rng);
  norm_ffn = LayerNorm<S>(params, name + ".norm_ffn", dims.width);
}

template <typename S>
std::pair<Var<S>, Var<S>> DenseStream<S>::project_inputs(const Var<S>& video_raw,
                                                         const Var<S>& text_raw) const {
  if (video_raw.cols() != dims_.video_dim || text_raw.cols() != dims_.text_dim)
    throw Error("shape-mismatch: feature width");
  return {video_proj(video_raw), text_proj(text_raw)};
}

template <typename S>
Var<S> DenseStream<S>::refine(const Var<S>& dense, const Var<S>& text_no_cls, Index groups,
                              const ForwardContext& ctx) const {
  if (text_no_cls.rows() == 0) throw Error("empty-query");
  Var<S> d = residual_post_norm(norm_cross, dense, cross(dense, text_no_cls, text_no_cls, groups),
                                ctx, groups);
  const Index frames = d.rows() / groups;
  const Var<S> pos = add_const(d, positional_encoding<S>(frames, d.cols(), groups));
  d = residual_post_norm(norm_self, d, self(pos, pos, d, groups), ctx, groups);
  return residual_post_norm(norm_ffn, d, ffn(d), ctx, groups);
}

template Var<float> residual_post_norm(const LayerNorm<float>&, const Var<float>&,
                                       const Var<float>&, const ForwardContext&, Index);
template Var<double> residual_post_norm(const LayerNorm<double>&, const Var<double>&,
                                        const Var<double>&, const ForwardContext&, Index);
template Var<float> fuse_video(const Var<float>&, const Var<float>&, const Var<float>&);
template Var<double> fuse_video(const Var<double>&, const Var<double>&, const Var<double>&);
template Var<float> drop_cls(const Var<float>&, Index);
template Var<double> drop_cls(const Var<double>&, Index);
template class DenseStream<float>;
template class DenseStream<double>;

}  // namespace sdst
