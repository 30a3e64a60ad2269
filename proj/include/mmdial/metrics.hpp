#pragma once

#include <array>
#include <span>
#include <vector>

namespace mmdial {

using TokenSeq = std::vector<int>;

/// Drops PAD/BOS/EOS so scoring sees only content tokens.
TokenSeq strip_specials(std::span<const int> tokens);

/// Corpus BLEU-1..max_n on the 0-100 scale, single reference per candidate,
/// unsmoothed. Element n-1 is BLEU-n.
std::vector<double> bleu(std::span<const TokenSeq> candidates, std::span<const TokenSeq> references,
                         std::size_t max_n = 4);

/// Corpus NIST: per order, information-weighted matches over candidate n-gram
/// count, summed over orders 1..max_n, times the NIST brevity penalty.
/// Information weights come from the reference corpus.
double nist(std::span<const TokenSeq> candidates, std::span<const TokenSeq> references, std::size_t max_n = 5);

struct MetricReport {
  std::array<double, 4> bleu{};
  double nist = 0.0;
  std::size_t samples = 0;
};

/// Strips special tokens, then scores BLEU-1..4 and NIST-5.
MetricReport score_corpus(std::span<const TokenSeq> candidates, std::span<const TokenSeq> references);

}  // namespace mmdial
