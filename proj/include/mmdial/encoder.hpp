#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "mmdial/dialogue.hpp"
#include "mmdial/model.hpp"

namespace mmdial {

enum class FusionBranch { text, image, mean };

const char* to_string(FusionBranch branch);

/// Which modality-dropout branch a uniform variate selects:
/// u < p/2 -> text, u > 1 - p/2 -> image, otherwise the average.
FusionBranch select_fusion_branch(double p_net, double u);

/// Fuses word-aligned text and text-visual features. Outside training the
/// average is always used regardless of p_net.
Tensor modality_dropout_fuse(const Tensor& text, const Tensor& image, double p_net, double u, bool training,
                             FusionBranch* taken = nullptr);

/// Per-forward-pass modality dropout draws, one variate per encoder layer.
struct FusionSchedule {
  bool training = false;
  double p_net = 0.0;
  std::vector<double> u;

  static FusionSchedule inference(std::size_t n_layers);
  static FusionSchedule sample(double p_net, std::size_t n_layers, Rng& rng);
};

struct EmbeddedUtterance {
  Tensor text;    // m x d: scaled token embeddings + positions
  Tensor images;  // n x d: projected image features (n may be 0)
  std::vector<std::uint8_t> token_mask;  // false at kPad positions
};

EmbeddedUtterance embed_utterance(const Utterance& utterance, const Model& model);

/// T_l = LayerNorm(MHA(T, T, T)) + T, padded keys excluded.
Tensor text_stream_layer(const Tensor& text_prev, const std::vector<std::uint8_t>& token_mask,
                         const EncoderLayerParams& layer);

/// I_l = LayerNorm(MHA(T, I, I)) + T. Word queries, so the result is m x d.
Tensor image_stream_layer(const Tensor& text_prev, const Tensor& image_prev,
                          const std::vector<std::uint8_t>* image_key_mask, const EncoderLayerParams& layer);

/// H~ = MHA(M, H, H); H^ = LayerNorm(H~) + M; result = LayerNorm(FFN(H^)) + H^.
Tensor history_update(const Tensor& fused, const Tensor& history_prev, const std::vector<std::uint8_t>& history_mask,
                      const EncoderLayerParams& layer);

struct LayerState {
  Tensor text;
  Tensor image;
  Tensor fused;
  Tensor history_in;
  Tensor history_out;
  FusionBranch branch = FusionBranch::mean;
};

struct UtteranceState {
  Tensor text0;
  Tensor image0;
  bool image_fallback = false;
  std::vector<LayerState> layers;
};

/// Full record of one context pass, for inspection and tests.
struct EncoderState {
  std::vector<double> u;
  std::vector<UtteranceState> utterances;
};

struct ContextEncoding {
  Tensor memory;                          // H_L of the query, m_q x d
  std::vector<std::uint8_t> memory_mask;  // query token mask
  std::size_t image_fallbacks = 0;        // utterances encoded without images
};

/// Encodes utterances oldest-first (the last one is the query), threading the
/// history state across them. The first utterance is seeded with the model's
/// trainable history matrix.
ContextEncoding encode_context(std::span<const Utterance> utterances, const Model& model,
                               const FusionSchedule& schedule, EncoderState* trace = nullptr);

/// The most recent `context_size` context turns followed by the query.
std::vector<Utterance> encoder_inputs(const DialogueSample& sample, std::size_t context_size);

}  // namespace mmdial
