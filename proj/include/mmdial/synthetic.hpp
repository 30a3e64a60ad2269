#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "mmdial/data.hpp"

namespace mmdial {

/// Knobs for the synthetic shopping-dialogue task. The reference response
/// names a product keyword said in the oldest context turn and the
/// attributes of the query's images, so it needs both modalities and the
/// cross-turn history.
struct SyntheticSpec {
  std::size_t vocab_size = 200;
  std::size_t n_attributes = 16;
  std::size_t n_keywords = 24;
  std::size_t d_img = 64;
  std::size_t max_len = 16;
  std::size_t context_size = 2;
  std::size_t max_images = 4;
  std::size_t max_query_images = 2;
  double image_noise = 0.02;
  std::uint64_t seed = 1234;

  void validate() const;
};

/// Vocabulary, attribute codebook and token classes derived from a spec.
struct SyntheticWorld {
  SyntheticSpec spec;
  Vocabulary vocab;
  std::vector<int> attribute_tokens;
  std::vector<int> keyword_tokens;
  std::vector<int> filler_tokens;
  std::vector<std::vector<double>> codebook;  // unit vectors, one per attribute

  bool is_keyword(int id) const;
  bool is_attribute(int id) const;
  /// Index into attribute_tokens of the codebook vector nearest to `feature`.
  std::size_t nearest_attribute(std::span<const double> feature) const;
  /// Codebook vector for an attribute word, or empty when unknown.
  std::vector<double> feature_for(const std::string& attribute) const;
};

SyntheticWorld build_world(const SyntheticSpec& spec);

/// The hidden variables a response is built from.
struct DialogueLatent {
  int keyword = kUnk;
  std::vector<int> attributes;  // sorted token ids
};

std::vector<int> render_response(const SyntheticWorld& world, const DialogueLatent& latent);

std::vector<DialogueSample> generate_synthetic_corpus(const SyntheticWorld& world, std::size_t n_samples);

/// Rule-based responder: finds the keyword in the oldest context turn and
/// maps each query image to its nearest codebook attribute.
DialogueLatent recover_latent(const DialogueSample& sample, const SyntheticWorld& world);
std::vector<int> oracle_respond(const DialogueSample& sample, const SyntheticWorld& world);

enum class Split { train, valid, test };
const char* to_string(Split split);
/// 80/10/10 assignment from a seeded hash of the sample id.
Split split_of(std::uint64_t sample_id, std::uint64_t seed);

struct CorpusSplits {
  std::vector<DialogueSample> train, valid, test;
};
CorpusSplits split_corpus(std::span<const DialogueSample> samples, std::uint64_t seed);

std::uint64_t splitmix64(std::uint64_t x);

/// Writes {train,valid,test}.jsonl, vocab.txt and world.json into `dir`.
void write_dataset(const std::filesystem::path& dir, const SyntheticWorld& world, const CorpusSplits& splits);
void save_world_spec(const std::filesystem::path& path, const SyntheticSpec& spec);
SyntheticSpec load_world_spec(const std::filesystem::path& path);

}  // namespace mmdial
