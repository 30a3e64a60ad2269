#pragma once

#include <cstdint>
#include <random>
#include <string>
#include <utility>
#include <vector>

#include "mmdial/ops.hpp"
#include "mmdial/tensor.hpp"

namespace mmdial {

using Rng = std::mt19937_64;

/// Glorot/Xavier uniform: U(-sqrt(6/(fan_in+fan_out)), +sqrt(6/(fan_in+fan_out))).
Tensor xavier_uniform(std::size_t fan_in, std::size_t fan_out, Rng& rng);
Tensor normal_init(Shape shape, double stddev, Rng& rng);

/// Ordered name -> tensor registry. Tensors are shared handles into the owning model.
class ParameterSet {
 public:
  void add(std::string name, Tensor tensor);
  const std::vector<std::pair<std::string, Tensor>>& items() const { return items_; }
  std::size_t size() const { return items_.size(); }
  std::size_t scalar_count() const;
  const Tensor& at(const std::string& name) const;
  bool contains(const std::string& name) const;
  void zero_grad() const;

 private:
  std::vector<std::pair<std::string, Tensor>> items_;
};

struct LayerNormParams {
  Tensor gain;
  Tensor bias;

  static LayerNormParams make(std::size_t d);
  Tensor operator()(const Tensor& x) const { return layer_norm(x, gain, bias); }
  void register_into(ParameterSet& set, const std::string& prefix) const;
};

struct MultiHeadAttentionParams {
  Tensor w_q, w_k, w_v, w_o;
  std::size_t n_heads = 1;

  static MultiHeadAttentionParams make(std::size_t d_model, std::size_t n_heads, Rng& rng);
  std::size_t d_model() const { return w_q.rows(); }
  void register_into(ParameterSet& set, const std::string& prefix) const;
};

struct FFNParams {
  Tensor w1, b1, w2, b2;

  static FFNParams make(std::size_t d_model, std::size_t d_ff, Rng& rng);
  void register_into(ParameterSet& set, const std::string& prefix) const;
};

/// Bias-free Q/K/V/O projections around per-head scaled dot-product attention.
/// `mask`, when given, is Lq x Lk; excluded keys get zero weight.
Tensor multi_head_attention(const Tensor& q, const Tensor& k, const Tensor& v, const AttentionMask* mask,
                            const MultiHeadAttentionParams& params);

/// Position-wise W2 * relu(W1 * x + b1) + b2.
Tensor ffn(const Tensor& x, const FFNParams& params);

/// Fixed sinusoidal table: sin on even columns, cos on odd, base 10000.
Tensor positional_encoding(std::size_t length, std::size_t d_model);

}  // namespace mmdial
