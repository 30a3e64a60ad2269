#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include "mmdial/dialogue.hpp"

namespace mmdial {

/// Token <-> id bijection with the reserved ids fixed at 0..4.
class Vocabulary {
 public:
  Vocabulary();

  int add(const std::string& token);
  std::optional<int> find(std::string_view token) const;
  int id(std::string_view token) const;  // kUnk when absent
  const std::string& token(int id) const;
  std::size_t size() const { return tokens_.size(); }

  std::vector<int> encode(std::string_view text) const;
  /// Joins tokens with spaces, dropping PAD/BOS/EOS.
  std::string decode(std::span<const int> ids) const;

  void save(const std::filesystem::path& path) const;
  static Vocabulary load(const std::filesystem::path& path);

 private:
  std::vector<std::string> tokens_;
  std::unordered_map<std::string, int> index_;
};

/// Padded, masked view of a list of utterances.
struct PaddedUtterances {
  std::size_t count = 0;
  std::size_t max_tokens = 0;
  std::size_t max_images = 0;
  std::size_t d_img = 0;
  std::vector<int> tokens;                  // count x max_tokens, kPad filled
  std::vector<std::uint8_t> token_mask;     // count x max_tokens
  std::vector<double> images;               // count x max_images x d_img, zero filled
  std::vector<std::uint8_t> image_mask;     // count x max_images
  std::vector<Speaker> speakers;
};

struct Batch {
  std::vector<std::uint64_t> ids;
  std::vector<std::uint8_t> conversation_start;
  std::size_t context_slots = 0;
  std::vector<std::uint8_t> context_present;  // size x context_slots
  PaddedUtterances context;                   // size * context_slots rows, oldest first
  PaddedUtterances query;
  std::size_t max_response = 0;
  std::vector<int> response;                  // size x max_response
  std::vector<std::uint8_t> response_mask;
  std::size_t truncations = 0;

  std::size_t size() const { return ids.size(); }
};

/// Pads a nonempty batch to its own maxima. Sequences longer than max_len are
/// truncated with a warning: context/query keep their tail, responses keep
/// their head and are re-terminated with EOS.
Batch batch_and_pad(std::span<const DialogueSample> samples, std::size_t max_len, std::size_t d_img);
std::vector<DialogueSample> unbatch(const Batch& batch);

/// Line-delimited JSON records, one sample per line. Schema version 1.
inline constexpr int kCorpusVersion = 1;
void save_corpus(const std::filesystem::path& path, std::span<const DialogueSample> samples);
std::vector<DialogueSample> load_corpus(const std::filesystem::path& path);
std::string serialize_sample(const DialogueSample& sample);
DialogueSample parse_sample(std::string_view line);

/// Every id in the sample is below vocab_size.
bool ids_in_range(const DialogueSample& sample, std::size_t vocab_size);

}  // namespace mmdial
