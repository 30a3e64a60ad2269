#include "mmdial/optim.hpp"

#include <cmath>

namespace mmdial {

void adam_step(std::span<double> param, std::span<const double> grad, std::span<double> m, std::span<double> v,
               const AdamConfig& config, std::size_t t) {
  if (t < 1) throw ContractError("adam_step: t must be >= 1");
  if (grad.size() != param.size() || m.size() != param.size() || v.size() != param.size()) {
    throw DimensionError("adam_step: parameter, gradient and moment sizes differ");
  }
  const double c1 = 1.0 - std::pow(config.beta1, static_cast<double>(t));
  const double c2 = 1.0 - std::pow(config.beta2, static_cast<double>(t));
  for (std::size_t i = 0; i < param.size(); ++i) {
    m[i] = config.beta1 * m[i] + (1.0 - config.beta1) * grad[i];
    v[i] = config.beta2 * v[i] + (1.0 - config.beta2) * grad[i] * grad[i];
    param[i] -= config.lr * (m[i] / c1) / (std::sqrt(v[i] / c2) + config.eps);
  }
}

Adam::Adam(const ParameterSet& params, AdamConfig config, std::set<std::string> frozen)
    : params_(params), config_(config), frozen_(std::move(frozen)) {
  if (!(config_.lr > 0.0)) throw ConfigError("learning rate must be positive");
  for (const auto& name : frozen_) {
    if (!params_.contains(name)) throw ConfigError("cannot freeze unknown parameter " + name);
  }
  for (const auto& [name, t] : params_.items()) {
    m_.emplace_back(t.numel(), 0.0);
    v_.emplace_back(t.numel(), 0.0);
  }
}

void Adam::step() {
  const auto& items = params_.items();
  for (const auto& [name, t] : items) {
    if (is_frozen(name)) continue;
    for (double g : t.grad()) {
      if (!std::isfinite(g)) throw NumericError("non-finite gradient in parameter " + name);
    }
  }
  ++t_;
  for (std::size_t i = 0; i < items.size(); ++i) {
    if (is_frozen(items[i].first)) continue;
    Tensor param = items[i].second;
    adam_step(param.data(), param.grad(), m_[i], v_[i], config_, t_);
  }
}

}  // namespace mmdial
