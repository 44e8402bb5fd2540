#pragma once

// Refinement of the recurrent decoder queries (latent embeddings H and
// center-width references R) for one level.

#include <string>

#include "sdst/attention.hpp"
#include "sdst/dense_stream.hpp"

namespace sdst {

template <typename S>
struct SparseRefineResult {
  Var<S> queries;  // H'
  Var<S> offsets;  // undefined for standard_ca
  Var<S> scores;   // undefined for standard_ca
};

/// R' = sigmoid(logit(R) + delta), element-wise on (center, width).
template <typename S>
Var<S> update_references(const Var<S>& refs, const Var<S>& delta);

template <typename S>
class SparseStream {
 public:
  SparseStream() = default;
  SparseStream(ParamSet<S>& params, const std::string& name, const StreamDims& dims,
               AttentionStrategy strategy, const DeformableConfig& deform, Rng& rng);

  /// CA over text (no CLS) then SA among the queries.
  Var<S> inject_text(const Var<S>& queries, const Var<S>& text_no_cls, Index groups,
                     const ForwardContext& ctx) const;

  /// Attention over the refined dense memory followed by the FFN.
  SparseRefineResult<S> refine(const Var<S>& queries, const Var<S>& refs, const Var<S>& memory,
                               Index groups, const ForwardContext& ctx) const;

  AttentionStrategy strategy() const { return strategy_; }

  MultiHeadAttention<S> cross, self;
  DeformableAttention<S> deformable;
  StandardCrossAttention<S> standard;
  FeedForward<S> ffn;
  LayerNorm<S> norm_cross, norm_self, norm_memory, norm_ffn;

 private:
  AttentionStrategy strategy_ = AttentionStrategy::Rdsa;
};

extern template Var<float> update_references(const Var<float>&, const Var<float>&);
extern template Var<double> update_references(const Var<double>&, const Var<double>&);
extern template class SparseStream<float>;
extern template class SparseStream<double>;

}  // namespace sdst
