#pragma once

// Analytic versus finite-difference gradients at 64-bit.

#include <cstdint>
#include <string>
#include <vector>

#include "sdst/model.hpp"

namespace sdst {

struct GradCheckOptions {
  // Five-point stencils at each step; the estimate whose neighbour agrees best wins,
  // which keeps roundoff off exact-zero gradients and kinks away from wide steps.
  std::vector<double> steps = {1e-2, 1e-3, 1e-4, 1e-5, 1e-6};
  // Elements checked per parameter tensor in module and loss checks; primitives check all.
  int samples_per_param = 5;
  Index frames = 8;
  Index tokens = 4;
  Index groups = 2;
  double perturb_std = 0.05;
  double floor = 1e-8;  // denominator floor of the relative error
};

struct GradCheckEntry {
  std::string target;
  double max_rel_error = 0.0;
  std::string worst_param;
  Index worst_index = -1;
  double analytic = 0.0;
  double numeric = 0.0;
  Index checked = 0;
};

struct GradCheckReport {
  std::vector<GradCheckEntry> entries;
  double max_rel_error = 0.0;
  std::string worst;  // "target/param[index]"
  double seconds = 0.0;
};

/// Primitive names accepted as "primitive:<name>".
std::vector<std::string> grad_check_primitives();
/// Module names: linear, mha, deformable_ca, rdsa, standard_ca, dense_stream,
/// sparse_stream, total_loss.
std::vector<std::string> grad_check_modules();

/// selector: "all", "primitives", "primitive:<name>", or a module name.
/// Throws "grad-check-too-large" for width > 32 or frames > 16.
GradCheckReport grad_check(const ModelConfig& cfg, const std::string& selector, std::uint64_t seed,
                           const GradCheckOptions& opts = {});

/// The small configuration used for gradient checks.
ModelConfig grad_check_config();

}  // namespace sdst
