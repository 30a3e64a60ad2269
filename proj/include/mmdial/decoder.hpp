#pragma once

#include <span>
#include <vector>

#include "mmdial/encoder.hpp"

namespace mmdial {

/// Causal decoder pass: row i of the result holds next-token logits given
/// prefix[0..i] and the context memory. Shape prefix.size() x vocab.
Tensor decode_logits(const std::vector<int>& prefix, const ContextEncoding& memory, const Model& model);

/// Teacher-forced sum of -log p(response | context) as a differentiable scalar.
Tensor response_nll(const DialogueSample& sample, const Model& model, const FusionSchedule& schedule);

/// Sum of log p(w_i | w_<i, context) over the reference response, inference mode.
double log_likelihood(const DialogueSample& sample, const Model& model);

/// Argmax decoding from BOS until EOS (kept in the output) or max_new_tokens.
/// Always runs the encoder in inference mode.
std::vector<int> generate_greedy(std::span<const Utterance> utterances, const Model& model,
                                 std::size_t max_new_tokens);

}  // namespace mmdial
