#include "sdst/attention.hpp"

namespace sdst {

std::string to_string(AttentionStrategy s) {
  switch (s) {
    case AttentionStrategy::StandardCa: return "standard_ca";
    case AttentionStrategy::DeformableCa: return "deformable_ca";
    case AttentionStrategy::Rdsa: return "rdsa";
  }
  return "unknown";
}

AttentionStrategy parse_attention_strategy(const std::string& name) {
  if (name == "standard_ca") return AttentionStrategy::StandardCa;
  if (name == "deformable_ca") return AttentionStrategy::DeformableCa;
  if (name == "rdsa") return AttentionStrategy::Rdsa;
  throw Error("unknown-attention-strategy: " + name);
}

std::vector<double> offset_head_biases(const DeformableConfig& cfg) {
  std::vector<double> out;
  for (Index h = 0; h < cfg.heads; ++h) out.push_back(h % 2 == 0 ? -1.0 : 1.0);
  if (cfg.center_head) out.push_back(0.0);
  return out;
}

template <typename S>
Var<S> offset_locations(const Var<S>& refs, const Var<S>& offsets, Index frames) {
  const Index hp = offsets.cols();
  const Var<S> spread = constant<S>(Matrix<S>::Ones(1, hp));
  const Var<S> center = matmul(slice_cols(refs, 0, 1), spread);
  const Var<S> width = matmul(slice_cols(refs, 1, 1), spread);
  const Var<S> normalized = add(center, scale(mul(width, offsets), S(0.5)));
  return scale(normalized, static_cast<S>(frames - 1));
}

template <typename S>
ContextCnn<S>::ContextCnn(ParamSet<S>& params, const std::string& name, Index width, Index hidden,
                          Rng& rng) {
  conv1 = Linear<S>(params, name + ".conv1", 3 * width, hidden, Init::Kaiming, rng);
  norm = LayerNorm<S>(params, name + ".norm", hidden);
  conv2 = Linear<S>(params, name + ".conv2", 3 * hidden, width, Init::Kaiming, rng);
}

template <typename S>
Var<S> ContextCnn<S>::operator()(const Var<S>& memory, Index groups) const {
  Var<S> h = conv1(temporal_unfold(memory, 3, groups));
  h = relu(norm(h));
  return conv2(temporal_unfold(h, 3, groups));
}

template <typename S>
DeformableAttention<S>::DeformableAttention(ParamSet<S>& params, const std::string& name,
                                            const DeformableConfig& cfg, bool reference_queries,
                                            Rng& rng)
    : cfg_(cfg), reference_queries_(reference_queries) {
  const Index heads = cfg.total_heads();
  if (cfg.points < 1 || heads < 1 || cfg.head_dim() < 1) throw Error("invalid-deformable-config");
  const Index hp = heads * cfg.points;
  if (reference_queries) context = ContextCnn<S>(params, name + ".context", cfg.width,
                                                 cfg.context_hidden, rng);
  const Index query_in = reference_queries ? 3 * cfg.width : cfg.width;
  query_proj = Linear<S>(params, name + ".query", query_in, cfg.latent, Init::Xavier, rng);
  offset_head = Linear<S>(params, name + ".offset", cfg.latent, hp, Init::Zero, rng);
  score_head = Linear<S>(params, name + ".score", cfg.latent, hp, Init::Zero, rng);
  const auto biases = offset_head_biases(cfg);
  Matrix<S>& b = offset_head.bias.mutable_value();
  for (Index h = 0; h < heads; ++h)
    b.middleCols(h * cfg.points, cfg.points).setConstant(static_cast<S>(biases[h]));
  value_proj =
      Linear<S>(params, name + ".value", cfg.width, heads * cfg.head_dim(), Init::Xavier, rng);
  output_proj =
      Linear<S>(params, name + ".output", heads * cfg.head_dim(), cfg.width, Init::Xavier, rng);
}

template <typename S>
Var<S> DeformableAttention<S>::reference_features(const Var<S>& refs, const Var<S>& memory,
                                                  Index groups) const {
  const Index frames = memory.rows() / groups;
  const Var<S> ctx = context(memory, groups);
  const Var<S> bounds = cw_to_moment(refs);
  const Var<S> coords = scale(
      concat_cols<S>({slice_cols(bounds, 0, 1), slice_cols(refs, 0, 1), slice_cols(bounds, 1, 1)}),
      static_cast<S>(frames - 1));
  return sample_1d(ctx, coords, groups);
}

template <typename S>
Var<S> DeformableAttention<S>::aggregate(const Var<S>& refs, const Var<S>& memory,
                                         const Var<S>& offsets, const Var<S>& scores,
                                         Index groups) const {
  if (memory.rows() == 0) throw Error("empty-sequence");
  const Index frames = memory.rows() / groups;
  const Var<S> locations = offset_locations(refs, offsets, frames);
  const Var<S> values = value_proj(memory);
  return output_proj(
      deformable_aggregate(values, locations, scores, cfg_.total_heads(), cfg_.points, groups));
}

template <typename S>
DeformableResult<S> DeformableAttention<S>::operator()(const Var<S>& queries, const Var<S>& refs,
                                                       const Var<S>& memory, Index groups) const {
  if (memory.rows() == 0) throw Error("empty-sequence");
  const Index frames = memory.rows() / groups;
  const Var<S> features =
      reference_queries_ ? reference_features(refs, memory, groups) : queries;
  const Var<S> latent = query_proj(features);
  DeformableResult<S> r;
  r.offsets = offset_head(latent);
  r.scores = softmax_blocks(score_head(latent), cfg_.points);
  r.locations = offset_locations(refs, r.offsets, frames);
  const Var<S> values = value_proj(memory);
  r.output = output_proj(deformable_aggregate(values, r.locations, r.scores, cfg_.total_heads(),
                                              cfg_.points, groups));
  return r;
}

template <typename S>
StandardCrossAttention<S>::StandardCrossAttention(ParamSet<S>& params, const std::string& name,
                                                  Index width, Index heads, Rng& rng)
    : mha(params, name, width, heads, rng) {}

template <typename S>
Var<S> StandardCrossAttention<S>::operator()(const Var<S>& queries, const Var<S>& refs,
                                             const Var<S>& memory, Index groups) const {
  if (memory.rows() == 0) throw Error("empty-memory");
  const Index frames = memory.rows() / groups;
  const Index width = memory.cols();
  std::vector<double> centers(static_cast<std::size_t>(refs.rows()));
  for (Index i = 0; i < refs.rows(); ++i)
    centers[static_cast<std::size_t>(i)] = to_frames(static_cast<double>(refs.value()(i, 0)), frames);
  const Var<S> q = add_const(queries, sinusoidal_embedding<S>(centers, width));
  const Var<S> k = add_const(memory, positional_encoding<S>(frames, width, groups));
  return mha(q, k, memory, groups);
}

Matrix<double> weighted_offsets(const Matrix<double>& offsets, const Matrix<double>& scores,
                                Index heads, Index points) {
  if (offsets.cols() != heads * points || scores.cols() != heads * points ||
      offsets.rows() != scores.rows())
    throw Error("shape-mismatch: weighted_offsets");
  Matrix<double> d(offsets.rows(), heads);
  for (Index i = 0; i < offsets.rows(); ++i)
    for (Index h = 0; h < heads; ++h)
      d(i, h) = offsets.row(i).segment(h * points, points).dot(
          scores.row(i).segment(h * points, points));
  return d;
}

std::vector<double> weighted_offset_means(const Matrix<double>& offsets,
                                          const Matrix<double>& scores, Index heads,
                                          Index points) {
  const Matrix<double> d = weighted_offsets(offsets, scores, heads, points);
  std::vector<double> out(static_cast<std::size_t>(heads), 0.0);
  if (d.rows() == 0) return out;
  for (Index h = 0; h < heads; ++h) out[static_cast<std::size_t>(h)] = d.col(h).mean();
  return out;
}

template Var<float> offset_locations(const Var<float>&, const Var<float>&, Index);
template Var<double> offset_locations(const Var<double>&, const Var<double>&, Index);
template struct ContextCnn<float>;
template struct ContextCnn<double>;
template class DeformableAttention<float>;
template class DeformableAttention<double>;
template class StandardCrossAttention<float>;
template class StandardCrossAttention<double>;

}  // namespace sdst
