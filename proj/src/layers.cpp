#include "mmdial/layers.hpp"

#include <cmath>

namespace mmdial {

Tensor xavier_uniform(std::size_t fan_in, std::size_t fan_out, Rng& rng) {
  const double limit = std::sqrt(6.0 / static_cast<double>(fan_in + fan_out));
  std::uniform_real_distribution<double> dist(-limit, limit);
  std::vector<double> values(fan_in * fan_out);
  for (double& v : values) v = dist(rng);
  return Tensor::matrix(fan_in, fan_out, std::move(values), true);
}

Tensor normal_init(Shape shape, double stddev, Rng& rng) {
  std::normal_distribution<double> dist(0.0, stddev);
  std::vector<double> values(shape_numel(shape));
  for (double& v : values) v = dist(rng);
  return Tensor::from(std::move(shape), std::move(values), true);
}

void ParameterSet::add(std::string name, Tensor tensor) {
  if (contains(name)) throw ContractError("duplicate parameter name " + name);
  items_.emplace_back(std::move(name), std::move(tensor));
}

std::size_t ParameterSet::scalar_count() const {
  std::size_t n = 0;
  for (const auto& [name, t] : items_) n += t.numel();
  return n;
}

const Tensor& ParameterSet::at(const std::string& name) const {
  for (const auto& [n, t] : items_)
    if (n == name) return t;
  throw ContractError("unknown parameter " + name);
}

bool ParameterSet::contains(const std::string& name) const {
  for (const auto& item : items_)
    if (item.first == name) return true;
  return false;
}

void ParameterSet::zero_grad() const {
  for (auto item : items_) item.second.zero_grad();
}

LayerNormParams LayerNormParams::make(std::size_t d) {
  return {Tensor::full({d}, 1.0, true), Tensor::zeros({d}, true)};
}

void LayerNormParams::register_into(ParameterSet& set, const std::string& prefix) const {
  set.add(prefix + ".gain", gain);
  set.add(prefix + ".bias", bias);
}

MultiHeadAttentionParams MultiHeadAttentionParams::make(std::size_t d_model, std::size_t n_heads, Rng& rng) {
  if (n_heads == 0 || d_model % n_heads != 0) {
    throw ConfigError("d_model " + std::to_string(d_model) + " is not divisible by n_heads " +
                      std::to_string(n_heads));
  }
  MultiHeadAttentionParams p;
  p.w_q = xavier_uniform(d_model, d_model, rng);
  p.w_k = xavier_uniform(d_model, d_model, rng);
  p.w_v = xavier_uniform(d_model, d_model, rng);
  p.w_o = xavier_uniform(d_model, d_model, rng);
  p.n_heads = n_heads;
  return p;
}

void MultiHeadAttentionParams::register_into(ParameterSet& set, const std::string& prefix) const {
  set.add(prefix + ".w_q", w_q);
  set.add(prefix + ".w_k", w_k);
  set.add(prefix + ".w_v", w_v);
  set.add(prefix + ".w_o", w_o);
}

FFNParams FFNParams::make(std::size_t d_model, std::size_t d_ff, Rng& rng) {
  if (d_ff == 0) throw ConfigError("d_ff must be positive");
  FFNParams p;
  p.w1 = xavier_uniform(d_model, d_ff, rng);
  p.b1 = Tensor::zeros({d_ff}, true);
  p.w2 = xavier_uniform(d_ff, d_model, rng);
  p.b2 = Tensor::zeros({d_model}, true);
  return p;
}

void FFNParams::register_into(ParameterSet& set, const std::string& prefix) const {
  set.add(prefix + ".w1", w1);
  set.add(prefix + ".b1", b1);
  set.add(prefix + ".w2", w2);
  set.add(prefix + ".b2", b2);
}

Tensor multi_head_attention(const Tensor& q, const Tensor& k, const Tensor& v, const AttentionMask* mask,
                            const MultiHeadAttentionParams& params) {
  const std::size_t d = params.d_model();
  if (q.cols() != d || k.cols() != d || v.cols() != d) {
    throw DimensionError("multi_head_attention: inputs " + shape_str(q.shape()) + "/" + shape_str(k.shape()) + "/" +
                         shape_str(v.shape()) + " vs d_model " + std::to_string(d));
  }
  if (k.rows() == 0) throw ContractError("multi_head_attention: empty key set");
  if (k.rows() != v.rows()) throw DimensionError("multi_head_attention: keys and values differ in length");
  Tensor heads = attention_heads(matmul(q, params.w_q), matmul(k, params.w_k), matmul(v, params.w_v),
                                 params.n_heads, mask);
  return matmul(heads, params.w_o);
}

Tensor ffn(const Tensor& x, const FFNParams& params) {
  return add_row(matmul(relu(add_row(matmul(x, params.w1), params.b1)), params.w2), params.b2);
}

Tensor positional_encoding(std::size_t length, std::size_t d_model) {
  if (length == 0) throw ContractError("positional_encoding: length must be >= 1");
  Tensor pe = Tensor::zeros({length, d_model});
  for (std::size_t pos = 0; pos < length; ++pos) {
    for (std::size_t i = 0; i < d_model; ++i) {
      const double exponent = static_cast<double>(i - i % 2) / static_cast<double>(d_model);
      const double angle = static_cast<double>(pos) / std::pow(10000.0, exponent);
      pe.at(pos, i) = (i % 2 == 0) ? std::sin(angle) : std::cos(angle);
    }
  }
  return pe;
}

}  // namespace mmdial
