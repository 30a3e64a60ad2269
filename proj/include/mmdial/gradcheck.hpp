#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "mmdial/decoder.hpp"

namespace mmdial {

struct GradCheckEntry {
  std::string parameter;
  std::size_t index = 0;
  double analytic = 0.0;
  double numeric = 0.0;
  double rel_error = 0.0;
};

struct GradCheckReport {
  double tolerance = 1e-4;
  double max_rel_error = 0.0;
  GradCheckEntry worst;
  std::size_t checked = 0;
  std::vector<std::pair<std::string, double>> per_parameter;  // max error per tensor
  bool passed = false;
};

/// |a - n| / max(|a|, |n|, floor). The floor keeps entries whose true
/// gradient is ~0 from being judged on pure rounding noise.
double relative_error(double analytic, double numeric, double floor = 1e-6);

/// Compares backward() of `loss_fn` against central differences with step h
/// for every scalar of every listed parameter.
GradCheckReport check_gradients(const std::function<Tensor()>& loss_fn, const ParameterSet& params,
                                double h = 1e-5, double tolerance = 1e-4);

/// d=8, two layers, two heads, p_net=0, small vocabulary and images.
ModelConfig gradcheck_config();

/// A few short dialogues covering context hand-off, images, image-only and
/// text-only turns.
std::vector<DialogueSample> gradcheck_samples(const ModelConfig& config, std::uint64_t seed);

/// Whole-model check of the summed response NLL (training mode, p_net as configured).
GradCheckReport grad_check_model(const ModelConfig& config, std::uint64_t seed, double tolerance = 1e-4);

}  // namespace mmdial
