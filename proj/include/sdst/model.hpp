#pragma once

// The K-level recurrence over both streams plus the prediction heads.

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "sdst/sparse_stream.hpp"

namespace sdst {

struct ModelConfig {
  Index width = 256;  // F
  Index levels = 4;   // K
  Index queries = 30; // M
  Index heads = 8;
  Index ffn_ratio = 4;
  Index video_dim = 768;
  Index text_dim = 768;
  AttentionStrategy strategy = AttentionStrategy::Rdsa;
  Index deform_heads = 2;
  bool center_head = false;
  Index points = 4;
  Index latent = 64;
  Index context_hidden = 256;
  Index roi_size = 16;
  Index regression_depth = 3;
  Index actionness_depth = 3;
  bool shared = true;
  double dropout = 0.5;
  double drop_path = 0.25;
  double query_init_std = 0.02;
  double ref_init_width = 0.1;

  StreamDims stream_dims() const;
  DeformableConfig deformable() const;
  void validate() const;
};

/// Per-level backbone features for a batch, stacked by sample.
template <typename S>
struct LevelFeatures {
  Matrix<S> video;  // (G*T) x video_dim, pooled over spatial tokens
  Matrix<S> text;   // (G*L) x text_dim, token 0 of each sample is CLS
};

template <typename S>
struct ModelInput {
  Index groups = 1;
  Index frames = 0;
  Index tokens = 0;
  std::vector<LevelFeatures<S>> levels;  // shallowest first
};

template <typename S>
struct LevelOutput {
  Var<S> dense;      // D^{l+1}, (G*T) x F
  Var<S> video;      // projected video V^l, (G*T) x F
  Var<S> text;       // projected text T^l, (G*L) x F
  Var<S> text_pool;  // G x F
  Var<S> queries;    // H^{l+1}, (G*M) x F
  Var<S> refs;       // R^{l+1}, (G*M) x 2
  Var<S> probs;      // (G*M) x 1
  Var<S> moments;    // (G*M) x 2
  Var<S> offsets;    // deformable strategies only
  Var<S> scores;
};

template <typename S>
struct Predictions {
  std::vector<LevelOutput<S>> levels;
  Var<S> saliency;    // (G*T) x 1, from the last level
  Var<S> actionness;  // (G*M) x 1, from the last level
  Index groups = 1;
  Index frames = 0;
  Index queries = 0;
};

template <typename S>
class SdstModel {
 public:
  SdstModel(const ModelConfig& cfg, std::uint64_t seed);

  Predictions<S> forward(const ModelInput<S>& input, const ForwardContext& ctx = {}) const;

  /// Cosine between each frame of D and its sample's pooled text: (G*T) x 1.
  Var<S> saliency_scores(const Var<S>& dense, const Var<S>& text_pool) const;
  /// Learnable attention pooling of each sample's text tokens: G x F.
  Var<S> pool_text(const Var<S>& text, Index groups) const;
  /// RoI features (roi_size equally spaced samples, inclusive) -> MLP -> sigmoid: (G*M) x 1.
  Var<S> actionness(const Var<S>& dense, const Var<S>& moments, Index groups) const;

  const ModelConfig& config() const { return cfg_; }
  ParamSet<S>& params() { return params_; }
  const ParamSet<S>& params() const { return params_; }

  const DenseStream<S>& dense_stream(Index level) const;
  const SparseStream<S>& sparse_stream(Index level) const;

  Var<S> beta_raw;      // 1 x 1 when shared, else 1 x K
  Var<S> query_init;    // H^0, M x F
  Var<S> ref_init;      // logit(R^0), M x 2
  Linear<S> cls_head;
  Mlp<S> delta_head;
  Mlp<S> actionness_head;
  Linear<S> text_pool_score;

 private:
  ModelConfig cfg_;
  ParamSet<S> params_;
  std::vector<DenseStream<S>> dense_;
  std::vector<SparseStream<S>> sparse_;
};

/// Exact trainable parameter count with a breakdown by top-level module.
struct ParamCount {
  Index total = 0;
  std::map<std::string, Index> by_module;
};
ParamCount count_parameters(const ModelConfig& cfg);

extern template class SdstModel<float>;
extern template class SdstModel<double>;

}  // namespace sdst
