#pragma once

// Checkpoints, the optimization loop, evaluation and offset inspection.

#include <iosfwd>
#include <limits>
#include <string>
#include <vector>

#include "sdst/config.hpp"

namespace sdst {

struct CheckpointEntry {
  std::string name;
  MatrixF value;
};

struct Checkpoint {
  std::string config_text;
  std::vector<CheckpointEntry> entries;
};

inline constexpr std::uint32_t kCheckpointVersion = 1;

void save_checkpoint(const std::string& path, const Checkpoint& ckpt);
Checkpoint load_checkpoint(const std::string& path);
Checkpoint snapshot(const SdstModel<float>& model, const RunConfig& cfg);
/// Copies checkpoint values into the model; names and shapes must match exactly.
void restore(SdstModel<float>& model, const Checkpoint& ckpt);

ModelInput<float> make_input(const Dataset& data, const std::vector<std::size_t>& indices);
std::vector<SampleTargets> make_targets(const Dataset& data, const std::vector<std::size_t>& indices);

/// Decoupled-weight-decay Adam over a parameter set.
class AdamW {
 public:
  AdamW(const ParamSet<float>& params, const OptimConfig& cfg);
  /// Global L2 norm of the current gradients (missing gradients count as zero).
  double grad_norm() const;
  /// Clips to cfg.clip_norm, then updates with learning rate lr. Returns the pre-clip norm.
  double step(double lr);

 private:
  const ParamSet<float>& params_;
  OptimConfig cfg_;
  std::vector<MatrixF> m_, v_;
  long t_ = 0;
};

struct MetricEntry {
  std::string name;
  double value = 0.0;
  double threshold = std::numeric_limits<double>::quiet_NaN();
};

struct MetricReport {
  std::vector<MetricEntry> entries;
  int excluded_mr = 0;
  int excluded_hd = 0;

  double get(const std::string& name) const;
  std::string to_text() const;
  std::string to_json() const;
  void write(const std::string& dir, const std::string& stem) const;
};

struct SamplePrediction {
  std::vector<ScoredMoment> ranked;  // after soft-NMS
  std::vector<double> saliency;
};

std::vector<SamplePrediction> predict(const SdstModel<float>& model, const Dataset& data,
                                      int batch_size, const SoftNmsSettings& nms);

MetricReport score_predictions(const std::vector<SamplePrediction>& preds, const Dataset& data);

MetricReport evaluate(const SdstModel<float>& model, const Dataset& data, int batch_size,
                      const SoftNmsSettings& nms);

struct OffsetSummary {
  std::vector<std::vector<double>> means;  // [level][head], half-width units
  bool beyond_boundaries = false;          // some head mean outside [-1, 1]
};

/// Batch-mean weighted offsets per level and head over every query of the dataset.
OffsetSummary inspect_offsets(const SdstModel<float>& model, const Dataset& data, int batch_size);
void write_offset_trace(const std::string& path, const OffsetSummary& summary);

struct TrainSummary {
  std::string final_checkpoint;
  std::string best_checkpoint;
  long steps = 0;
  int epochs = 0;
  double best_score = -1.0;
};

/// Runs the optimization loop. Writes into out_dir: config.ini (resolved),
/// loss_log.csv, metric_log.csv, offsets.csv (deformable strategies),
/// checkpoint_final.bin, checkpoint_best.bin. Model selection uses held-out mAP when
/// an eval set is given, otherwise training-set mAP.
TrainSummary train(const RunConfig& cfg, const Dataset& train_set, const Dataset* eval_set,
                   const std::string& out_dir, std::ostream* progress = nullptr);

/// Builds the model a checkpoint was saved from, with its values restored.
SdstModel<float> model_from_checkpoint(const Checkpoint& ckpt, RunConfig* cfg_out = nullptr);

}  // namespace sdst
