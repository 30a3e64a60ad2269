#include "mmdial/decoder.hpp"

#include <string>

namespace mmdial {

Tensor decode_logits(const std::vector<int>& prefix, const ContextEncoding& memory, const Model& model) {
  const ModelConfig& cfg = model.config();
  if (prefix.empty() || prefix.front() != kBos) throw ContractError("decoder prefix must start with BOS");
  if (prefix.size() > cfg.max_len) {
    throw ContractError("decoder prefix of length " + std::to_string(prefix.size()) + " exceeds max_len " +
                        std::to_string(cfg.max_len));
  }
  if (!memory.memory.defined() || memory.memory.rows() == 0) throw ContractError("decoder memory is empty");

  const std::size_t len = prefix.size();
  Tensor x = add(embedding(model.embedding(), prefix, model.embedding_scale()), model.positions(len));
  const AttentionMask causal = AttentionMask::causal(len);
  const AttentionMask cross = AttentionMask::keys(len, memory.memory_mask);
  for (const DecoderLayerParams& layer : model.decoder_layers()) {
    x = layer.self_norm(add(x, multi_head_attention(x, x, x, &causal, layer.self_attn)));
    x = layer.cross_norm(add(x, multi_head_attention(x, memory.memory, memory.memory, &cross, layer.cross_attn)));
    x = layer.ffn_norm(add(x, ffn(x, layer.ffn)));
  }
  return matmul_nt(x, model.output_projection());
}

Tensor response_nll(const DialogueSample& sample, const Model& model, const FusionSchedule& schedule) {
  if (sample.response.empty() || sample.response.back() != kEos) {
    throw ContractError("reference response must be nonempty and end with EOS");
  }
  const auto inputs = encoder_inputs(sample, model.config().context_size);
  ContextEncoding memory = encode_context(inputs, model, schedule);
  std::vector<int> prefix{kBos};
  prefix.insert(prefix.end(), sample.response.begin(), sample.response.end() - 1);
  return cross_entropy(decode_logits(prefix, memory, model), sample.response);
}

double log_likelihood(const DialogueSample& sample, const Model& model) {
  NoGradGuard guard;
  return -response_nll(sample, model, FusionSchedule::inference(model.config().n_layers)).item();
}

std::vector<int> generate_greedy(std::span<const Utterance> utterances, const Model& model,
                                 std::size_t max_new_tokens) {
  NoGradGuard guard;
  const ModelConfig& cfg = model.config();
  ContextEncoding memory = encode_context(utterances, model, FusionSchedule::inference(cfg.n_layers));
  const std::size_t limit = std::min(max_new_tokens, cfg.max_len);
  std::vector<int> prefix{kBos};
  std::vector<int> out;
  while (out.size() < limit) {
    Tensor logits = decode_logits(prefix, memory, model);
    const std::size_t vocab = logits.cols();
    const std::size_t last = logits.rows() - 1;
    int best = 0;
    for (std::size_t c = 1; c < vocab; ++c)
      if (logits.at(last, c) > logits.at(last, static_cast<std::size_t>(best))) best = static_cast<int>(c);
    out.push_back(best);
    if (best == kEos) break;
    prefix.push_back(best);
  }
  return out;
}

}  // namespace mmdial
