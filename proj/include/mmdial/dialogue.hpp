#pragma once

#include <cstdint>
#include <vector>

namespace mmdial {

// Reserved vocabulary ids.
inline constexpr int kPad = 0;
inline constexpr int kBos = 1;
inline constexpr int kEos = 2;
inline constexpr int kUnk = 3;
inline constexpr int kImgCtx = 4;
inline constexpr int kNumReserved = 5;

enum class Speaker { user, system };

/// One dialogue turn: token ids plus zero or more image feature vectors.
/// An image-only turn carries the single token kImgCtx.
struct Utterance {
  Speaker speaker = Speaker::user;
  std::vector<int> tokens;
  std::vector<std::vector<double>> image_features;

  bool operator==(const Utterance&) const = default;
};

struct DialogueSample {
  std::uint64_t id = 0;
  std::vector<Utterance> context;  // oldest first
  Utterance query;
  std::vector<int> response;  // ends with kEos
  bool conversation_start = true;

  bool operator==(const DialogueSample&) const = default;
};

}  // namespace mmdial
