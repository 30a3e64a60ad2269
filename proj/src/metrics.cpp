#include "mmdial/metrics.hpp"

#include <cmath>
#include <map>
#include <string>

#include "mmdial/dialogue.hpp"
#include "mmdial/tensor.hpp"

namespace mmdial {

namespace {

using NGram = std::vector<int>;
using Counts = std::map<NGram, std::size_t>;

Counts ngram_counts(const TokenSeq& seq, std::size_t n) {
  Counts counts;
  if (seq.size() < n) return counts;
  for (std::size_t i = 0; i + n <= seq.size(); ++i) ++counts[NGram(seq.begin() + static_cast<std::ptrdiff_t>(i),
                                                                    seq.begin() + static_cast<std::ptrdiff_t>(i + n))];
  return counts;
}

void check_inputs(std::span<const TokenSeq> candidates, std::span<const TokenSeq> references, const char* who) {
  if (candidates.empty()) throw ContractError(std::string(who) + ": empty candidate set");
  if (candidates.size() != references.size()) {
    throw ContractError(std::string(who) + ": " + std::to_string(candidates.size()) + " candidates vs " +
                        std::to_string(references.size()) + " references");
  }
}

}  // namespace

TokenSeq strip_specials(std::span<const int> tokens) {
  TokenSeq out;
  for (int t : tokens)
    if (t != kPad && t != kBos && t != kEos) out.push_back(t);
  return out;
}

std::vector<double> bleu(std::span<const TokenSeq> candidates, std::span<const TokenSeq> references,
                         std::size_t max_n) {
  check_inputs(candidates, references, "bleu");
  if (max_n == 0) throw ContractError("bleu: max_n must be >= 1");
  std::vector<double> matched(max_n, 0.0), total(max_n, 0.0);
  double cand_len = 0.0, ref_len = 0.0;
  for (std::size_t i = 0; i < candidates.size(); ++i) {
    cand_len += static_cast<double>(candidates[i].size());
    ref_len += static_cast<double>(references[i].size());
    for (std::size_t n = 1; n <= max_n; ++n) {
      const Counts cand = ngram_counts(candidates[i], n);
      const Counts ref = ngram_counts(references[i], n);
      for (const auto& [gram, count] : cand) {
        total[n - 1] += static_cast<double>(count);
        if (auto it = ref.find(gram); it != ref.end()) matched[n - 1] += static_cast<double>(std::min(count, it->second));
      }
    }
  }
  const double bp = cand_len == 0.0 ? 0.0 : (cand_len < ref_len ? std::exp(1.0 - ref_len / cand_len) : 1.0);
  std::vector<double> scores(max_n, 0.0);
  double log_sum = 0.0;
  bool zero = false;
  for (std::size_t n = 1; n <= max_n; ++n) {
    if (matched[n - 1] == 0.0 || total[n - 1] == 0.0) zero = true;
    if (!zero) log_sum += std::log(matched[n - 1] / total[n - 1]);
    scores[n - 1] = zero ? 0.0 : 100.0 * bp * std::exp(log_sum / static_cast<double>(n));
  }
  return scores;
}

double nist(std::span<const TokenSeq> candidates, std::span<const TokenSeq> references, std::size_t max_n) {
  check_inputs(candidates, references, "nist");
  if (max_n == 0) throw ContractError("nist: max_n must be >= 1");

  Counts ref_freq;
  double ref_words = 0.0;
  for (const auto& ref : references) {
    for (std::size_t n = 1; n <= max_n; ++n)
      for (const auto& [gram, count] : ngram_counts(ref, n)) ref_freq[gram] += count;
    ref_words += static_cast<double>(ref.size());
  }
  auto info = [&](const NGram& gram) {
    const NGram prefix(gram.begin(), gram.end() - 1);
    double numerator = ref_words;
    if (!prefix.empty()) {
      if (auto it = ref_freq.find(prefix); it != ref_freq.end()) numerator = static_cast<double>(it->second);
    }
    return std::log2(numerator / static_cast<double>(ref_freq.at(gram)));
  };

  double score = 0.0;
  double cand_len = 0.0, ref_len = 0.0;
  for (std::size_t i = 0; i < candidates.size(); ++i) {
    cand_len += static_cast<double>(candidates[i].size());
    ref_len += static_cast<double>(references[i].size());
  }
  for (std::size_t n = 1; n <= max_n; ++n) {
    double weighted = 0.0, count = 0.0;
    for (std::size_t i = 0; i < candidates.size(); ++i) {
      const Counts cand = ngram_counts(candidates[i], n);
      const Counts ref = ngram_counts(references[i], n);
      for (const auto& [gram, c] : cand) {
        count += static_cast<double>(c);
        if (auto it = ref.find(gram); it != ref.end())
          weighted += info(gram) * static_cast<double>(std::min(c, it->second));
      }
    }
    if (count > 0.0) score += weighted / count;
  }

  const double ratio = ref_len > 0.0 ? cand_len / ref_len : 0.0;
  double penalty = 1.0;
  if (ratio <= 0.0) {
    penalty = 0.0;
  } else if (ratio < 1.0) {
    // beta gives a penalty of 0.5 when the candidate is 2/3 of the reference length
    const double beta = std::log(0.5) / std::pow(std::log(1.5), 2);
    penalty = std::exp(beta * std::pow(std::log(ratio), 2));
  }
  return score * penalty;
}

MetricReport score_corpus(std::span<const TokenSeq> candidates, std::span<const TokenSeq> references) {
  check_inputs(candidates, references, "score_corpus");
  std::vector<TokenSeq> cand, ref;
  cand.reserve(candidates.size());
  ref.reserve(references.size());
  for (const auto& c : candidates) cand.push_back(strip_specials(c));
  for (const auto& r : references) ref.push_back(strip_specials(r));
  MetricReport report;
  const auto b = bleu(cand, ref, 4);
  for (std::size_t n = 0; n < 4; ++n) report.bleu[n] = b[n];
  report.nist = nist(cand, ref, 5);
  report.samples = candidates.size();
  return report;
}

}  // namespace mmdial
