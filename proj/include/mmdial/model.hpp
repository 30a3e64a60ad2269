#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "mmdial/layers.hpp"

namespace mmdial {

enum class DropoutGranularity { per_step, per_example };

/// Encoder hyperparameters. Defaults are the desk-scale profile.
struct EncoderConfig {
  std::size_t n_layers = 2;
  std::size_t d_model = 64;
  std::size_t n_heads = 4;
  double p_net = 0.4;
  std::size_t h_len = 16;
  std::size_t max_images = 4;
  std::size_t max_len = 16;
  std::size_t context_size = 2;
};

struct ModelConfig : EncoderConfig {
  std::size_t vocab_size = 200;
  std::size_t d_ff = 256;
  std::size_t d_img = 64;
  bool tie_output = true;
  DropoutGranularity dropout_granularity = DropoutGranularity::per_step;

  void validate() const;
  static ModelConfig paper_scale();
};

struct EncoderLayerParams {
  MultiHeadAttentionParams text_attn;
  LayerNormParams text_norm;
  MultiHeadAttentionParams image_attn;
  LayerNormParams image_norm;
  MultiHeadAttentionParams history_attn;
  LayerNormParams history_norm;
  FFNParams history_ffn;
  LayerNormParams history_ffn_norm;
};

struct DecoderLayerParams {
  MultiHeadAttentionParams self_attn;
  LayerNormParams self_norm;
  MultiHeadAttentionParams cross_attn;
  LayerNormParams cross_norm;
  FFNParams ffn;
  LayerNormParams ffn_norm;
};

/// All trainable weights. The embedding table is shared by encoder and
/// decoder and, unless untied, doubles as the output projection.
class Model {
 public:
  Model(const ModelConfig& config, std::uint64_t seed);
  Model(const Model&) = delete;
  Model& operator=(const Model&) = delete;
  Model(Model&&) = default;
  Model& operator=(Model&&) = default;

  const ModelConfig& config() const { return config_; }
  const ParameterSet& parameters() const { return params_; }

  const Tensor& embedding() const { return embedding_; }
  const Tensor& image_projection() const { return image_proj_; }
  const Tensor& history() const { return history_; }
  const Tensor& output_projection() const { return tie_or_output(); }
  const std::vector<EncoderLayerParams>& encoder_layers() const { return encoder_; }
  const std::vector<DecoderLayerParams>& decoder_layers() const { return decoder_; }

  /// Embedding rows are scaled by sqrt(d_model) before positions are added.
  double embedding_scale() const;
  /// Rows [0, length) of the cached sinusoidal table.
  Tensor positions(std::size_t length) const;

  /// Deep copy with independent storage.
  Model clone() const;
  /// Copies values (not handles) from `other`; shapes must match by name.
  void load_values(const Model& other);

 private:
  const Tensor& tie_or_output() const { return config_.tie_output ? embedding_ : output_proj_; }
  void register_all();

  ModelConfig config_;
  Tensor embedding_;
  Tensor image_proj_;
  Tensor history_;
  Tensor output_proj_;
  std::vector<EncoderLayerParams> encoder_;
  std::vector<DecoderLayerParams> decoder_;
  Tensor pe_table_;
  ParameterSet params_;
};

}  // namespace mmdial
