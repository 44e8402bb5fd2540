#pragma once

// Backbone feature containers, pooling of spatial tokens, on-disk formats and the
// synthetic feature generator.

#include <cstdint>
#include <string>
#include <vector>

#include "sdst/geometry.hpp"

namespace sdst {

using MatrixF = Matrix<float>;

/// Raw features of one sample across K backbone levels.
struct RawLevelFeatures {
  std::uint32_t levels = 0;   // K
  std::uint32_t frames = 0;   // T
  std::uint32_t tokens_v = 0; // L_v spatial tokens per frame
  std::uint32_t video_dim = 0;
  std::uint32_t tokens = 0;   // L text tokens, token 0 is CLS
  std::uint32_t text_dim = 0;
  std::vector<MatrixF> video;  // per level: (T*L_v) x F_v, frame-major
  std::vector<MatrixF> text;   // per level: L x F_t

  void validate() const;
};

enum class PoolStrategy { Cls, Avg, Adaptive };
std::string to_string(PoolStrategy p);
PoolStrategy parse_pool_strategy(const std::string& name);

/// Fixed attention pooling over spatial tokens: weights = softmax(tokens . query).
/// Created once and reused unchanged for every level.
class FrozenPooler {
 public:
  FrozenPooler() = default;
  explicit FrozenPooler(std::vector<float> query) : query_(std::move(query)) {}

  const std::vector<float>& query() const { return query_; }
  Index dim() const { return static_cast<Index>(query_.size()); }
  /// Pooling weights of one frame's tokens (L_v x F_v).
  Eigen::VectorXd weights(const MatrixF& tokens) const;
  std::uint64_t fingerprint() const;

  void save(const std::string& path) const;
  static FrozenPooler load(const std::string& path);

 private:
  std::vector<float> query_;
};

/// Pools (T*L_v) x F_v tokens of one level to T x F_v.
MatrixF pool_level(const MatrixF& raw, Index tokens_v, PoolStrategy strategy,
                   const FrozenPooler& pooler);

inline constexpr std::uint32_t kFeatureVersion = 1;

void write_features(const std::string& path, const RawLevelFeatures& f);
RawLevelFeatures read_features(const std::string& path);

struct Annotation {
  std::string id;
  double duration = 0.0;
  std::vector<Moment> moments;
  std::vector<bool> positives;  // per frame
  std::string query_id;
};

void write_annotations(const std::string& path, const std::vector<Annotation>& anns);
std::vector<Annotation> read_annotations(const std::string& path);

/// Frames whose normalized time lies inside any moment.
std::vector<bool> rasterize_moments(const std::vector<Moment>& moments, Index frames);

struct SynthConfig {
  int num_samples = 32;
  int frames = 32;
  int tokens_v = 4;
  int video_dim = 64;
  int text_dim = 64;
  int tokens = 8;
  int levels = 4;
  int concept_dim = 16;
  int min_moments = 1;
  int max_moments = 3;
  int min_length = 3;   // frames, at least 2 so moments have positive width
  int max_length = 10;  // frames
  double noise = 0.1;
  double marker = 2.0;       // marker amplitude on the signal token
  double pooler_gain = 4.0;  // frozen pooler query = gain * marker direction
  std::uint64_t world_seed = 7;  // shared projections, marker and pooler
};

struct SynthDataset {
  std::vector<RawLevelFeatures> features;
  std::vector<Annotation> annotations;
  FrozenPooler pooler;
};

/// Deterministic in (config, seed). Samples draw 1..3 disjoint frame-aligned moments
/// and a query concept; inside moments the signal token (index 1) carries the
/// concept through a level-dependent map, outside it carries unrelated content.
/// The CLS token (index 0) carries only noise.
SynthDataset synth_generate(const SynthConfig& cfg, std::uint64_t seed);

/// Dataset directory layout: annotations.jsonl, pooler.bin, features/<id>.sdf.
void write_dataset(const std::string& dir, const SynthDataset& ds);

/// Features pooled per level, ready for the model.
struct PooledSample {
  std::string id;
  std::vector<MatrixF> video;  // per level: T x F_v
  std::vector<MatrixF> text;   // per level: L x F_t
  std::vector<Moment> moments;
  std::vector<bool> positives;
};

struct Dataset {
  std::vector<PooledSample> samples;
  Index levels = 0, frames = 0, tokens = 0, video_dim = 0, text_dim = 0;
};

Dataset load_dataset(const std::string& dir, PoolStrategy strategy);
Dataset pool_dataset(const SynthDataset& ds, PoolStrategy strategy);

}  // namespace sdst
