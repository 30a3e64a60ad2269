#include "mmdial/model.hpp"

#include "mmdial/dialogue.hpp"

#include <algorithm>
#include <cmath>

namespace mmdial {

void ModelConfig::validate() const {
  if (n_layers < 1) throw ConfigError("n_layers must be >= 1");
  if (d_model == 0 || n_heads == 0 || d_model % n_heads != 0) {
    throw ConfigError("d_model " + std::to_string(d_model) + " must be a positive multiple of n_heads " +
                      std::to_string(n_heads));
  }
  if (!(p_net >= 0.0 && p_net <= 1.0)) throw ConfigError("p_net must lie in [0, 1]");
  if (h_len < 1) throw ConfigError("h_len must be >= 1");
  if (max_len < 1) throw ConfigError("max_len must be >= 1");
  if (vocab_size <= static_cast<std::size_t>(kNumReserved)) throw ConfigError("vocab_size too small");
  if (d_ff < 1) throw ConfigError("d_ff must be >= 1");
  if (d_img < 1) throw ConfigError("d_img must be >= 1");
}

ModelConfig ModelConfig::paper_scale() {
  ModelConfig c;
  c.d_model = 512;
  c.d_ff = 2048;
  c.n_layers = 2;
  c.n_heads = 8;
  c.max_len = 32;
  c.h_len = 32;
  c.max_images = 4;
  c.context_size = 2;
  c.d_img = 512;
  return c;
}

Model::Model(const ModelConfig& config, std::uint64_t seed) : config_(config) {
  config_.validate();
  Rng rng(seed);
  const std::size_t d = config_.d_model;
  embedding_ = xavier_uniform(config_.vocab_size, d, rng);
  image_proj_ = xavier_uniform(config_.d_img, d, rng);
  history_ = normal_init({config_.h_len, d}, 0.02, rng);
  for (std::size_t l = 0; l < config_.n_layers; ++l) {
    EncoderLayerParams e;
    e.text_attn = MultiHeadAttentionParams::make(d, config_.n_heads, rng);
    e.text_norm = LayerNormParams::make(d);
    e.image_attn = MultiHeadAttentionParams::make(d, config_.n_heads, rng);
    e.image_norm = LayerNormParams::make(d);
    e.history_attn = MultiHeadAttentionParams::make(d, config_.n_heads, rng);
    e.history_norm = LayerNormParams::make(d);
    e.history_ffn = FFNParams::make(d, config_.d_ff, rng);
    e.history_ffn_norm = LayerNormParams::make(d);
    encoder_.push_back(std::move(e));
  }
  for (std::size_t l = 0; l < config_.n_layers; ++l) {
    DecoderLayerParams p;
    p.self_attn = MultiHeadAttentionParams::make(d, config_.n_heads, rng);
    p.self_norm = LayerNormParams::make(d);
    p.cross_attn = MultiHeadAttentionParams::make(d, config_.n_heads, rng);
    p.cross_norm = LayerNormParams::make(d);
    p.ffn = FFNParams::make(d, config_.d_ff, rng);
    p.ffn_norm = LayerNormParams::make(d);
    decoder_.push_back(std::move(p));
  }
  if (!config_.tie_output) output_proj_ = xavier_uniform(config_.vocab_size, d, rng);
  pe_table_ = positional_encoding(std::max(config_.max_len, config_.h_len) + 1, d);
  register_all();
}

void Model::register_all() {
  params_ = ParameterSet{};
  params_.add("embedding", embedding_);
  params_.add("image_projection", image_proj_);
  params_.add("history", history_);
  for (std::size_t l = 0; l < encoder_.size(); ++l) {
    const auto& e = encoder_[l];
    const std::string p = "encoder." + std::to_string(l);
    e.text_attn.register_into(params_, p + ".text_attn");
    e.text_norm.register_into(params_, p + ".text_norm");
    e.image_attn.register_into(params_, p + ".image_attn");
    e.image_norm.register_into(params_, p + ".image_norm");
    e.history_attn.register_into(params_, p + ".history_attn");
    e.history_norm.register_into(params_, p + ".history_norm");
    e.history_ffn.register_into(params_, p + ".history_ffn");
    e.history_ffn_norm.register_into(params_, p + ".history_ffn_norm");
  }
  for (std::size_t l = 0; l < decoder_.size(); ++l) {
    const auto& dl = decoder_[l];
    const std::string p = "decoder." + std::to_string(l);
    dl.self_attn.register_into(params_, p + ".self_attn");
    dl.self_norm.register_into(params_, p + ".self_norm");
    dl.cross_attn.register_into(params_, p + ".cross_attn");
    dl.cross_norm.register_into(params_, p + ".cross_norm");
    dl.ffn.register_into(params_, p + ".ffn");
    dl.ffn_norm.register_into(params_, p + ".ffn_norm");
  }
  if (!config_.tie_output) params_.add("output_projection", output_proj_);
}

double Model::embedding_scale() const { return std::sqrt(static_cast<double>(config_.d_model)); }

Tensor Model::positions(std::size_t length) const {
  if (length > pe_table_.rows()) return positional_encoding(length, config_.d_model);
  const std::size_t d = config_.d_model;
  std::vector<double> rows(pe_table_.data().begin(),
                           pe_table_.data().begin() + static_cast<std::ptrdiff_t>(length * d));
  return Tensor::matrix(length, d, std::move(rows));
}

Model Model::clone() const {
  Model copy(config_, 0);
  copy.load_values(*this);
  return copy;
}

void Model::load_values(const Model& other) {
  const auto& src = other.parameters().items();
  const auto& dst = params_.items();
  if (src.size() != dst.size()) throw ContractError("load_values: parameter lists differ");
  for (std::size_t i = 0; i < dst.size(); ++i) {
    if (src[i].first != dst[i].first || src[i].second.shape() != dst[i].second.shape()) {
      throw ContractError("load_values: mismatch at " + dst[i].first);
    }
    Tensor target = dst[i].second;
    std::copy(src[i].second.data().begin(), src[i].second.data().end(), target.data().begin());
  }
}

}  // namespace mmdial
