#include "mmdial/encoder.hpp"

#include <algorithm>
#include <cmath>
#include <optional>
#include <string>

namespace mmdial {

const char* to_string(FusionBranch branch) {
  switch (branch) {
    case FusionBranch::text:
      return "text";
    case FusionBranch::image:
      return "image";
    case FusionBranch::mean:
      return "mean";
  }
  return "?";
}

FusionBranch select_fusion_branch(double p_net, double u) {
  if (!(p_net >= 0.0 && p_net <= 1.0)) throw ConfigError("p_net " + std::to_string(p_net) + " outside [0, 1]");
  if (u < p_net / 2.0) return FusionBranch::text;
  if (u > 1.0 - p_net / 2.0) return FusionBranch::image;
  return FusionBranch::mean;
}

Tensor modality_dropout_fuse(const Tensor& text, const Tensor& image, double p_net, double u, bool training,
                             FusionBranch* taken) {
  if (text.shape() != image.shape()) {
    throw DimensionError("fuse: text " + shape_str(text.shape()) + " vs image " + shape_str(image.shape()));
  }
  // p_net is forced to zero at inference.
  const FusionBranch branch = select_fusion_branch(training ? p_net : 0.0, u);
  if (taken) *taken = branch;
  switch (branch) {
    case FusionBranch::text:
      return text;
    case FusionBranch::image:
      return image;
    case FusionBranch::mean:
      break;
  }
  return scale(add(text, image), 0.5);
}

FusionSchedule FusionSchedule::inference(std::size_t n_layers) { return {false, 0.0, std::vector<double>(n_layers, 0.5)}; }

FusionSchedule FusionSchedule::sample(double p_net, std::size_t n_layers, Rng& rng) {
  if (!(p_net >= 0.0 && p_net <= 1.0)) throw ConfigError("p_net " + std::to_string(p_net) + " outside [0, 1]");
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  FusionSchedule s{true, p_net, {}};
  s.u.reserve(n_layers);
  for (std::size_t l = 0; l < n_layers; ++l) s.u.push_back(unit(rng));
  return s;
}

EmbeddedUtterance embed_utterance(const Utterance& utterance, const Model& model) {
  const ModelConfig& cfg = model.config();
  if (utterance.tokens.empty()) throw ContractError("utterance has no tokens (use the image-context token)");
  if (utterance.image_features.size() > cfg.max_images) {
    throw DataError("utterance has " + std::to_string(utterance.image_features.size()) + " images, limit is " +
                    std::to_string(cfg.max_images));
  }
  EmbeddedUtterance out;
  out.token_mask.reserve(utterance.tokens.size());
  bool any_real = false;
  for (int t : utterance.tokens) {
    out.token_mask.push_back(t != kPad ? 1 : 0);
    any_real = any_real || t != kPad;
  }
  if (!any_real) throw ContractError("utterance consists only of padding");

  out.text = add(embedding(model.embedding(), utterance.tokens, model.embedding_scale()),
                 model.positions(utterance.tokens.size()));

  const std::size_t n = utterance.image_features.size();
  std::vector<double> feats;
  feats.reserve(n * cfg.d_img);
  for (const auto& f : utterance.image_features) {
    if (f.size() != cfg.d_img) {
      throw DataError("image feature of width " + std::to_string(f.size()) + ", expected " +
                      std::to_string(cfg.d_img));
    }
    for (double v : f) {
      if (!std::isfinite(v)) throw DataError("non-finite image feature");
    }
    feats.insert(feats.end(), f.begin(), f.end());
  }
  out.images = matmul(Tensor::matrix(n, cfg.d_img, std::move(feats)), model.image_projection());
  return out;
}

namespace {

bool all_set(const std::vector<std::uint8_t>& mask) {
  for (auto m : mask)
    if (!m) return false;
  return true;
}

}  // namespace

Tensor text_stream_layer(const Tensor& text_prev, const std::vector<std::uint8_t>& token_mask,
                         const EncoderLayerParams& layer) {
  if (text_prev.rows() == 0) throw ContractError("text stream: empty utterance");
  std::optional<AttentionMask> mask;
  if (!token_mask.empty() && !all_set(token_mask)) mask = AttentionMask::keys(text_prev.rows(), token_mask);
  Tensor attended =
      multi_head_attention(text_prev, text_prev, text_prev, mask ? &*mask : nullptr, layer.text_attn);
  return add(layer.text_norm(attended), text_prev);
}

Tensor image_stream_layer(const Tensor& text_prev, const Tensor& image_prev,
                          const std::vector<std::uint8_t>* image_key_mask, const EncoderLayerParams& layer) {
  std::optional<AttentionMask> mask;
  if (image_key_mask && !all_set(*image_key_mask)) mask = AttentionMask::keys(text_prev.rows(), *image_key_mask);
  Tensor attended =
      multi_head_attention(text_prev, image_prev, image_prev, mask ? &*mask : nullptr, layer.image_attn);
  return add(layer.image_norm(attended), text_prev);
}

Tensor history_update(const Tensor& fused, const Tensor& history_prev, const std::vector<std::uint8_t>& history_mask,
                      const EncoderLayerParams& layer) {
  if (history_prev.rows() == 0) throw ContractError("history update: empty history");
  std::optional<AttentionMask> mask;
  if (!history_mask.empty() && !all_set(history_mask)) mask = AttentionMask::keys(fused.rows(), history_mask);
  Tensor attended =
      multi_head_attention(fused, history_prev, history_prev, mask ? &*mask : nullptr, layer.history_attn);
  Tensor hat = add(layer.history_norm(attended), fused);
  return add(layer.history_ffn_norm(ffn(hat, layer.history_ffn)), hat);
}

ContextEncoding encode_context(std::span<const Utterance> utterances, const Model& model,
                               const FusionSchedule& schedule, EncoderState* trace) {
  const ModelConfig& cfg = model.config();
  if (utterances.empty()) throw ContractError("encode_context: no utterances");
  if (utterances.size() > cfg.context_size + 1) {
    throw ContractError("encode_context: " + std::to_string(utterances.size()) + " utterances exceed context_size + 1");
  }
  if (schedule.u.size() != cfg.n_layers) throw ContractError("encode_context: one fusion variate per layer required");

  if (trace) {
    trace->u = schedule.u;
    trace->utterances.clear();
  }
  ContextEncoding result;
  Tensor history = model.history();
  std::vector<std::uint8_t> history_mask(history.rows(), 1);

  for (const Utterance& utterance : utterances) {
    EmbeddedUtterance emb = embed_utterance(utterance, model);
    const bool fallback = emb.images.rows() == 0;
    result.image_fallbacks += fallback ? 1 : 0;
    UtteranceState* ustate = nullptr;
    if (trace) {
      trace->utterances.emplace_back();
      ustate = &trace->utterances.back();
      ustate->text0 = emb.text;
      ustate->image0 = emb.images;
      ustate->image_fallback = fallback;
    }

    Tensor text = emb.text;
    Tensor image = emb.images;
    // Image keys are real images at layer 0 and word-aligned afterwards.
    const std::vector<std::uint8_t>* image_mask = nullptr;
    for (std::size_t l = 0; l < cfg.n_layers; ++l) {
      const EncoderLayerParams& layer = model.encoder_layers()[l];
      Tensor next_text = text_stream_layer(text, emb.token_mask, layer);
      Tensor next_image = fallback ? next_text : image_stream_layer(text, image, image_mask, layer);
      FusionBranch branch = FusionBranch::mean;
      Tensor fused = modality_dropout_fuse(next_text, next_image, schedule.p_net, schedule.u[l], schedule.training,
                                           &branch);
      Tensor next_history = history_update(fused, history, history_mask, layer);
      if (ustate) {
        ustate->layers.push_back({next_text, next_image, fused, history, next_history, branch});
      }
      text = next_text;
      image = next_image;
      image_mask = &emb.token_mask;
      history = next_history;
      history_mask = emb.token_mask;
    }
  }
  result.memory = history;
  result.memory_mask = history_mask;
  return result;
}

std::vector<Utterance> encoder_inputs(const DialogueSample& sample, std::size_t context_size) {
  std::vector<Utterance> out;
  const std::size_t keep = std::min(context_size, sample.context.size());
  out.insert(out.end(), sample.context.end() - static_cast<std::ptrdiff_t>(keep), sample.context.end());
  out.push_back(sample.query);
  return out;
}

}  // namespace mmdial
