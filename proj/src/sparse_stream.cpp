#include "sdst/sparse_stream.hpp"

namespace sdst {

template <typename S>
Var<S> update_references(const Var<S>& refs, const Var<S>& delta) {
  return sigmoid(add(logit(refs, S(1e-6)), delta));
}

template <typename S>
SparseStream<S>::SparseStream(ParamSet<S>& params, const std::string& name,
                              const StreamDims& dims, AttentionStrategy strategy,
                              const DeformableConfig& deform, Rng& rng)
    : strategy_(strategy) {
  cross = MultiHeadAttention<S>(params, name + ".cross", dims.width, dims.heads, rng);
  norm_cross = LayerNorm<S>(params, name + ".norm_cross", dims.width);
  self = MultiHeadAttention<S>(params, name + ".self", dims.width, dims.heads, rng);
  norm_self = LayerNorm<S>(params, name + ".norm_self", dims.width);
  DeformableConfig dc = deform;
  dc.width = dims.width;
  switch (strategy) {
    case AttentionStrategy::StandardCa:
      standard = StandardCrossAttention<S>(params, name + ".memory", dims.width, dims.heads, rng);
      break;
    case AttentionStrategy::DeformableCa:
      deformable = DeformableAttention<S>(params, name + ".memory", dc, false, rng);
      break;
    case AttentionStrategy::Rdsa:
      deformable = DeformableAttention<S>(params, name + ".memory", dc, true, rng);
      break;
  }
  norm_memory = LayerNorm<S>(params, name + ".norm_memory", dims.width);
  ffn = FeedForward<S>(params, name + ".ffn", dims.width, dims.ffn_ratio, rng);
  norm_ffn = LayerNorm<S>(params, name + ".norm_ffn", dims.width);
}

template <typename S>
Var<S> SparseStream<S>::inject_text(const Var<S>& queries, const Var<S>& text_no_cls,
                                    Index groups, const ForwardContext& ctx) const {
  if (text_no_cls.rows() == 0) throw Error("empty-query");
  Var<S> h = residual_post_norm(norm_cross, queries,
                                cross(queries, text_no_cls, text_no_cls, groups), ctx, groups);
  return residual_post_norm(norm_self, h, self(h, h, h, groups), ctx, groups);
}

template <typename S>
SparseRefineResult<S> SparseStream<S>::refine(const Var<S>& queries, const Var<S>& refs,
                                              const Var<S>& memory, Index groups,
                                              const ForwardContext& ctx) const {
  SparseRefineResult<S> r;
  Var<S> attended;
  if (strategy_ == AttentionStrategy::StandardCa) {
    attended = standard(queries, refs, memory, groups);
  } else {
    auto d = deformable(queries, refs, memory, groups);
    attended = d.output;
    r.offsets = d.offsets;
    r.scores = d.scores;
  }
  Var<S> h = residual_post_norm(norm_memory, queries, attended, ctx, groups);
  r.queries = residual_post_norm(norm_ffn, h, ffn(h), ctx, groups);
  return r;
}

template Var<float> update_references(const Var<float>&, const Var<float>&);
template Var<double> update_references(const Var<double>&, const Var<double>&);
template class SparseStream<float>;
template class SparseStream<double>;

}  // namespace sdst
