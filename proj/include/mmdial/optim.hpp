#pragma once

#include <set>
#include <span>
#include <string>
#include <vector>

#include "mmdial/layers.hpp"

namespace mmdial {

struct AdamConfig {
  double lr = 4e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

/// One bias-corrected Adam update for step t >= 1, in place.
void adam_step(std::span<double> param, std::span<const double> grad, std::span<double> m, std::span<double> v,
               const AdamConfig& config, std::size_t t);

/// Adam over a ParameterSet. Names in `frozen` keep their values and moments.
class Adam {
 public:
  Adam(const ParameterSet& params, AdamConfig config, std::set<std::string> frozen = {});

  /// Applies one update from the accumulated grads. Throws NumericError naming
  /// the first parameter with a non-finite gradient, before touching anything.
  void step();

  std::size_t steps() const { return t_; }
  void set_steps(std::size_t t) { t_ = t; }
  const AdamConfig& config() const { return config_; }
  void set_lr(double lr) { config_.lr = lr; }
  bool is_frozen(const std::string& name) const { return frozen_.count(name) != 0; }

  std::vector<std::vector<double>>& first_moments() { return m_; }
  std::vector<std::vector<double>>& second_moments() { return v_; }
  const std::vector<std::vector<double>>& first_moments() const { return m_; }
  const std::vector<std::vector<double>>& second_moments() const { return v_; }

 private:
  ParameterSet params_;
  AdamConfig config_;
  std::set<std::string> frozen_;
  std::vector<std::vector<double>> m_, v_;
  std::size_t t_ = 0;
};

}  // namespace mmdial
