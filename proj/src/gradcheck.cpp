#include "mmdial/gradcheck.hpp"

#include <algorithm>
#include <cmath>
#include <random>

namespace mmdial {

double relative_error(double analytic, double numeric, double floor) {
  return std::abs(analytic - numeric) / std::max({std::abs(analytic), std::abs(numeric), floor});
}

GradCheckReport check_gradients(const std::function<Tensor()>& loss_fn, const ParameterSet& params, double h,
                                double tolerance) {
  for (const auto& item : params.items()) {
    Tensor t = item.second;
    t.zero_grad();
  }
  backward(loss_fn());

  GradCheckReport report;
  report.tolerance = tolerance;
  for (const auto& [name, tensor] : params.items()) {
    Tensor t = tensor;
    std::vector<double> analytic(t.grad().begin(), t.grad().end());
    double worst = 0.0;
    auto values = t.data();
    for (std::size_t i = 0; i < values.size(); ++i) {
      const double saved = values[i];
      double plus = 0.0, minus = 0.0;
      {
        NoGradGuard guard;
        values[i] = saved + h;
        plus = loss_fn().item();
        values[i] = saved - h;
        minus = loss_fn().item();
      }
      values[i] = saved;
      const double numeric = (plus - minus) / (2.0 * h);
      const double err = relative_error(analytic[i], numeric);
      ++report.checked;
      worst = std::max(worst, err);
      if (err >= report.max_rel_error) {
        report.max_rel_error = err;
        report.worst = {name, i, analytic[i], numeric, err};
      }
    }
    report.per_parameter.emplace_back(name, worst);
  }
  report.passed = report.max_rel_error < tolerance;
  return report;
}

ModelConfig gradcheck_config() {
  ModelConfig c;
  c.vocab_size = 12;
  c.d_model = 8;
  c.d_ff = 16;
  c.n_layers = 2;
  c.n_heads = 2;
  c.d_img = 5;
  c.h_len = 3;
  c.max_len = 6;
  c.max_images = 2;
  c.context_size = 2;
  c.p_net = 0.0;
  return c;
}

std::vector<DialogueSample> gradcheck_samples(const ModelConfig& config, std::uint64_t seed) {
  Rng rng(seed);
  std::uniform_int_distribution<int> token(kNumReserved, static_cast<int>(config.vocab_size) - 1);
  std::normal_distribution<double> feature(0.0, 1.0);
  auto text = [&](std::size_t n) {
    std::vector<int> t;
    for (std::size_t i = 0; i < n; ++i) t.push_back(token(rng));
    return t;
  };
  auto images = [&](std::size_t n) {
    std::vector<std::vector<double>> out(n, std::vector<double>(config.d_img));
    for (auto& v : out)
      for (double& x : v) x = feature(rng);
    return out;
  };

  DialogueSample a;
  a.id = 0;
  a.context.push_back({Speaker::user, text(4), images(1)});
  a.context.push_back({Speaker::system, {kImgCtx}, images(2)});
  a.query = {Speaker::user, text(3), images(2)};
  a.response = text(3);
  a.response.push_back(kEos);

  DialogueSample b;
  b.id = 1;
  b.context.push_back({Speaker::user, text(2), {}});
  b.query = {Speaker::user, text(5), images(1)};
  b.response = text(2);
  b.response.push_back(kEos);

  DialogueSample c;
  c.id = 2;
  c.query = {Speaker::user, text(3), {}};
  c.response = text(4);
  c.response.push_back(kEos);
  return {a, b, c};
}

GradCheckReport grad_check_model(const ModelConfig& config, std::uint64_t seed, double tolerance) {
  Model model(config, seed);
  const auto samples = gradcheck_samples(config, seed + 1);
  const FusionSchedule schedule{true, config.p_net, std::vector<double>(config.n_layers, 0.5)};
  auto loss = [&]() {
    Tensor total = response_nll(samples[0], model, schedule);
    for (std::size_t i = 1; i < samples.size(); ++i) total = add(total, response_nll(samples[i], model, schedule));
    return total;
  };
  return check_gradients(loss, model.parameters(), 1e-5, tolerance);
}

}  // namespace mmdial
