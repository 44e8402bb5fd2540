#include "sdst/model.hpp"

#include <cmath>

namespace sdst {

StreamDims ModelConfig::stream_dims() const {
  return {width, heads, ffn_ratio, video_dim, text_dim};
}

DeformableConfig ModelConfig::deformable() const {
  DeformableConfig d;
  d.width = width;
  d.heads = deform_heads;
  d.center_head = center_head;
  d.points = points;
  d.latent = latent;
  d.context_hidden = context_hidden;
  return d;
}

void ModelConfig::validate() const {
  if (width < 1 || levels < 1 || queries < 1 || heads < 1 || ffn_ratio < 1 || video_dim < 1 ||
      text_dim < 1 || points < 1 || latent < 1 || context_hidden < 1 || roi_size < 2 ||
      regression_depth < 1 || actionness_depth < 1 || deform_heads < 0)
    throw Error("invalid-model-config");
  if (width % heads != 0) throw Error("heads-must-divide-width");
  if (strategy != AttentionStrategy::StandardCa && deformable().head_dim() < 1)
    throw Error("invalid-model-config: deformable heads");
  if (dropout < 0.0 || dropout >= 1.0 || drop_path < 0.0 || drop_path >= 1.0)
    throw Error("invalid-drop-probability");
  if (!(ref_init_width > 0.0 && ref_init_width < 1.0)) throw Error("invalid-model-config");
}

namespace {

std::vector<Index> mlp_dims(Index in, Index hidden, Index out, Index depth) {
  std::vector<Index> dims{in};
  for (Index i = 1; i < depth; ++i) dims.push_back(hidden);
  dims.push_back(out);
  return dims;
}

template <typename S>
Var<S> tile_rows(const Var<S>& x, Index copies) {
  if (copies == 1) return x;
  return concat_rows<S>(std::vector<Var<S>>(static_cast<std::size_t>(copies), x));
}

}  // namespace

template <typename S>
SdstModel<S>::SdstModel(const ModelConfig& cfg, std::uint64_t seed) : cfg_(cfg) {
  cfg_.validate();
  Rng rng(seed);
  const StreamDims dims = cfg_.stream_dims();
  const DeformableConfig deform = cfg_.deformable();
  const Index copies = cfg_.shared ? 1 : cfg_.levels;
  for (Index l = 0; l < copies; ++l) {
    const std::string suffix = cfg_.shared ? "" : ".l" + std::to_string(l);
    dense_.emplace_back(params_, "dense" + suffix, dims, rng);
    sparse_.emplace_back(params_, "sparse" + suffix, dims, cfg_.strategy, deform, rng);
  }
  // One gate per distinct dense layer: a single scalar when levels share weights.
  beta_raw = params_.add("dense.beta", init::zeros<S>(1, cfg_.shared ? 1 : cfg_.levels));

  query_init = params_.add("queries.embedding",
                           init::normal<S>(cfg_.queries, cfg_.width, cfg_.query_init_std, rng));
  Matrix<S> refs(cfg_.queries, 2);
  const double w = cfg_.ref_init_width;
  for (Index m = 0; m < cfg_.queries; ++m) {
    const double c = (static_cast<double>(m) + 0.5) / static_cast<double>(cfg_.queries);
    refs(m, 0) = static_cast<S>(std::log(c / (1.0 - c)));
    refs(m, 1) = static_cast<S>(std::log(w / (1.0 - w)));
  }
  ref_init = params_.add("queries.reference_logit", std::move(refs));

  cls_head = Linear<S>(params_, "heads.cls", cfg_.width, 1, Init::Xavier, rng);
  delta_head = Mlp<S>(params_, "heads.regression",
                      mlp_dims(cfg_.width, cfg_.width, 2, cfg_.regression_depth), rng, true);
  actionness_head =
      Mlp<S>(params_, "heads.actionness",
             mlp_dims(cfg_.roi_size * cfg_.width, cfg_.width, 1, cfg_.actionness_depth), rng);
  text_pool_score = Linear<S>(params_, "heads.text_pool", cfg_.width, 1, Init::Xavier, rng);
}

template <typename S>
const DenseStream<S>& SdstModel<S>::dense_stream(Index level) const {
  return dense_[cfg_.shared ? 0 : static_cast<std::size_t>(level)];
}

template <typename S>
const SparseStream<S>& SdstModel<S>::sparse_stream(Index level) const {
  return sparse_[cfg_.shared ? 0 : static_cast<std::size_t>(level)];
}

template <typename S>
Var<S> SdstModel<S>::pool_text(const Var<S>& text, Index groups) const {
  return attention_pool(text, text_pool_score(text), groups);
}

template <typename S>
Var<S> SdstModel<S>::saliency_scores(const Var<S>& dense, const Var<S>& text_pool) const {
  return cosine_rows(dense, text_pool, S(1e-8));
}

template <typename S>
Var<S> SdstModel<S>::actionness(const Var<S>& dense, const Var<S>& moments, Index groups) const {
  const Index frames = dense.rows() / groups;
  const Index n = cfg_.roi_size;
  Matrix<S> spread(2, n);
  for (Index k = 0; k < n; ++k) {
    const S t = static_cast<S>(k) / static_cast<S>(n - 1);
    spread(0, k) = S(1) - t;
    spread(1, k) = t;
  }
  const Var<S> coords =
      scale(matmul(moments, constant<S>(std::move(spread))), static_cast<S>(frames - 1));
  return sigmoid(actionness_head(sample_1d(dense, coords, groups)));
}

template <typename S>
Predictions<S> SdstModel<S>::forward(const ModelInput<S>& input, const ForwardContext& ctx) const {
  if (static_cast<Index>(input.levels.size()) != cfg_.levels) throw Error("level-count-mismatch");
  const Index g = input.groups;
  const Index frames = input.frames;
  if (g < 1 || frames < 1) throw Error("empty-sequence");
  if (input.tokens < 2) throw Error("empty-query");
  if (ctx.training && (ctx.dropout > 0.0 || ctx.drop_path > 0.0) && ctx.rng == nullptr)
    throw Error("missing-rng");

  Predictions<S> out;
  out.groups = g;
  out.frames = frames;
  out.queries = cfg_.queries;

  Var<S> dense = constant<S>(Matrix<S>::Zero(g * frames, cfg_.width));
  Var<S> queries = tile_rows(query_init, g);
  Var<S> ref_logit = tile_rows(ref_init, g);
  Var<S> refs = sigmoid(ref_logit);

  for (Index l = 0; l < cfg_.levels; ++l) {
    const auto& feats = input.levels[static_cast<std::size_t>(l)];
    if (feats.video.rows() != g * frames || feats.text.rows() != g * input.tokens)
      throw Error("shape-mismatch: level features");
    const DenseStream<S>& ds = dense_stream(l);
    const SparseStream<S>& ss = sparse_stream(l);
    LevelOutput<S> lo;

    auto [video, text] = ds.project_inputs(constant<S>(feats.video), constant<S>(feats.text));
    lo.video = video;
    lo.text = text;
    if (ctx.training && ctx.dropout > 0.0) {
      video = dropout(video, ctx.dropout, true, *ctx.rng);
      text = dropout(text, ctx.dropout, true, *ctx.rng);
    }
    dense = fuse_video(dense, video, slice_cols(beta_raw, cfg_.shared ? 0 : l, 1));
    const Var<S> text_no_cls = drop_cls(text, input.tokens);
    dense = ds.refine(dense, text_no_cls, g, ctx);

    queries = ss.inject_text(queries, text_no_cls, g, ctx);
    auto sr = ss.refine(queries, refs, dense, g, ctx);
    queries = sr.queries;
    // References move in logit space: sigmoid(logit(R) + delta) without re-clamping.
    ref_logit = add(ref_logit, delta_head(queries));
    refs = sigmoid(ref_logit);

    lo.dense = dense;
    lo.text_pool = pool_text(lo.text, g);
    lo.queries = queries;
    lo.refs = refs;
    lo.probs = sigmoid(cls_head(queries));
    lo.moments = cw_to_moment(refs);
    lo.offsets = sr.offsets;
    lo.scores = sr.scores;
    out.levels.push_back(std::move(lo));
  }

  const LevelOutput<S>& last = out.levels.back();
  out.saliency = saliency_scores(last.dense, last.text_pool);
  out.actionness = actionness(last.dense, last.moments, g);
  return out;
}

ParamCount count_parameters(const ModelConfig& cfg) {
  SdstModel<float> model(cfg, 0);
  ParamCount pc;
  pc.total = model.params().count();
  pc.by_module = model.params().breakdown(2);
  return pc;
}

template class SdstModel<float>;
template class SdstModel<double>;

}  // namespace sdst
