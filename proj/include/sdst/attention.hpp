#pragma once

// Attention over the dense memory for the sparse queries: standard cross-attention,
// deformable cross-attention, and reference-based deformable self-attention (rdsa).

#include <string>
#include <vector>

#include "sdst/geometry.hpp"
#include "sdst/numerics/layers.hpp"

namespace sdst {

enum class AttentionStrategy { StandardCa, DeformableCa, Rdsa };

std::string to_string(AttentionStrategy s);
AttentionStrategy parse_attention_strategy(const std::string& name);

struct DeformableConfig {
  Index width = 256;
  Index heads = 2;     // boundary heads with offset biases -1, +1
  bool center_head = false;  // adds a head with offset bias 0
  Index points = 4;
  Index latent = 64;
  Index context_hidden = 256;

  Index total_heads() const { return heads + (center_head ? 1 : 0); }
  /// Channels per head; heads*head_dim may be smaller than width.
  Index head_dim() const { return width / total_heads(); }
};

/// Initial offset bias of each head, in half-width units (-1 left boundary, +1 right).
std::vector<double> offset_head_biases(const DeformableConfig& cfg);

template <typename S>
struct DeformableResult {
  Var<S> output;     // (G*M) x width
  Var<S> offsets;    // (G*M) x (heads*points), half-width units
  Var<S> scores;     // (G*M) x (heads*points), softmax over points per head
  Var<S> locations;  // (G*M) x (heads*points), frame units before clamping
};

/// Sampling locations in frame units: (center + width/2 * offset) * (frames - 1).
template <typename S>
Var<S> offset_locations(const Var<S>& refs, const Var<S>& offsets, Index frames);

/// Two-layer temporal convolution (kernel 3, same padding) with LayerNorm and ReLU
/// between the layers.
template <typename S>
struct ContextCnn {
  Linear<S> conv1, conv2;
  LayerNorm<S> norm;

  ContextCnn() = default;
  ContextCnn(ParamSet<S>& params, const std::string& name, Index width, Index hidden, Rng& rng);
  Var<S> operator()(const Var<S>& memory, Index groups) const;
};

/// Deformable attention over a frame memory. With `reference_queries` set (rdsa),
/// the offset/score predictor reads embeddings sampled at the left boundary, center
/// and right boundary of each reference from a context-enhanced memory; otherwise
/// (deformable cross-attention) it reads the query embeddings H.
template <typename S>
class DeformableAttention {
 public:
  DeformableAttention() = default;
  DeformableAttention(ParamSet<S>& params, const std::string& name, const DeformableConfig& cfg,
                      bool reference_queries, Rng& rng);

  /// queries: (G*M) x width, refs: (G*M) x 2 (center, width), memory: (G*T) x width.
  DeformableResult<S> operator()(const Var<S>& queries, const Var<S>& refs, const Var<S>& memory,
                                 Index groups) const;

  /// rdsa query features: [ctx(l), ctx(c), ctx(r)], (G*M) x 3*width.
  Var<S> reference_features(const Var<S>& refs, const Var<S>& memory, Index groups) const;

  /// Shared aggregation kernel given explicit offsets and (already normalized) scores.
  Var<S> aggregate(const Var<S>& refs, const Var<S>& memory, const Var<S>& offsets,
                   const Var<S>& scores, Index groups) const;

  const DeformableConfig& config() const { return cfg_; }
  bool reference_queries() const { return reference_queries_; }

  Linear<S> query_proj;   // width -> latent, or 3*width -> latent for rdsa
  Linear<S> offset_head;  // latent -> heads*points
  Linear<S> score_head;   // latent -> heads*points
  Linear<S> value_proj;   // width -> heads*head_dim
  Linear<S> output_proj;  // heads*head_dim -> width
  ContextCnn<S> context;  // rdsa only

 private:
  DeformableConfig cfg_;
  bool reference_queries_ = false;
};

/// Multi-head cross-attention from queries to the frame memory, with sinusoidal
/// embeddings of the reference centers (queries) and frame indices (keys).
template <typename S>
class StandardCrossAttention {
 public:
  StandardCrossAttention() = default;
  StandardCrossAttention(ParamSet<S>& params, const std::string& name, Index width, Index heads,
                         Rng& rng);
  Var<S> operator()(const Var<S>& queries, const Var<S>& refs, const Var<S>& memory,
                    Index groups) const;

  MultiHeadAttention<S> mha;
};

/// d_q = sum_p A_{q,p} Delta_{q,p} per query and head: N x heads.
Matrix<double> weighted_offsets(const Matrix<double>& offsets, const Matrix<double>& scores,
                                Index heads, Index points);

/// Per-head mean of weighted_offsets over queries.
std::vector<double> weighted_offset_means(const Matrix<double>& offsets,
                                          const Matrix<double>& scores, Index heads,
                                          Index points);

extern template Var<float> offset_locations(const Var<float>&, const Var<float>&, Index);
extern template Var<double> offset_locations(const Var<double>&, const Var<double>&, Index);
extern template struct ContextCnn<float>;
extern template struct ContextCnn<double>;
extern template class DeformableAttention<float>;
extern template class DeformableAttention<double>;
extern template class StandardCrossAttention<float>;
extern template class StandardCrossAttention<double>;

}  // namespace sdst
