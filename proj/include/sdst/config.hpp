#pragma once

// Run configuration: a nested key-value text file
//
//   [section]
//   key = value   # comment
//
// with dotted overrides ("optim.lr=3e-4") applied on top.

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "sdst/feature_io.hpp"
#include "sdst/losses.hpp"
#include "sdst/metrics.hpp"
#include "sdst/model.hpp"

namespace sdst {

/// Flat "section.key" -> value map.
class KeyValues {
 public:
  static KeyValues parse(const std::string& text);
  static KeyValues load(const std::string& path);

  void set(const std::string& dotted_key, const std::string& value);
  /// Applies "section.key=value".
  void apply_override(const std::string& assignment);
  bool has(const std::string& key) const { return values_.count(key) > 0; }
  const std::string& get(const std::string& key) const;
  const std::map<std::string, std::string>& values() const { return values_; }

 private:
  std::map<std::string, std::string> values_;
};

struct OptimConfig {
  double lr = 1e-4;
  double weight_decay = 1e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  int warmup_iters = 2000;
  double warmup_ratio = 0.001;
  int decay_epochs = 20;
  double decay_factor = 0.1;
  double clip_norm = 35.0;
  int batch_size = 32;
  int epochs = 60;
  int max_steps = 0;  // 0: no cap
};

struct RunConfig {
  ModelConfig model;
  LossSettings loss;
  OptimConfig optim;
  SoftNmsSettings nms;
  PoolStrategy pooling = PoolStrategy::Adaptive;
  std::string train_dir;
  std::string eval_dir;
  std::string output_dir;
  std::uint64_t seed = 0;
  int eval_every = 0;  // epochs; 0: only at the end

  /// Applies kv on top of base; unknown keys throw.
  static RunConfig from(const KeyValues& kv, const RunConfig& base);
  static RunConfig from(const KeyValues& kv) { return from(kv, RunConfig{}); }
  KeyValues to_key_values() const;
  /// Canonical text form; parse(to_text()) reproduces the config.
  std::string to_text() const;
  void validate() const;
};

/// Synthetic-data settings from "synth.*" keys ("synth.seed" is the sample seed).
struct SynthRun {
  SynthConfig config;
  std::uint64_t seed = 0;
  std::string output_dir;

  static SynthRun from(const KeyValues& kv);
  std::string to_text() const;
};

/// Learning-rate multiplier: linear warmup from warmup_ratio to 1 over warmup_iters
/// iterations, then x decay_factor every decay_epochs epochs.
double lr_multiplier(const OptimConfig& cfg, long iteration, int epoch);

/// Root for relative output paths: $SDST_OUTPUT_ROOT or the current directory.
std::string output_root();
std::string resolve_output(const std::string& path);

}  // namespace sdst
