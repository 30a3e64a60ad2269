#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <utility>
#include <vector>

#include "mmdial/tensor.hpp"

namespace mmdial {

/// Versioned binary container of named tensors plus training bookkeeping.
///
/// Layout (all integers and floats little-endian):
///   magic "MMDCKPT1" | u32 version | str config | str rng | u64 step |
///   u64 epoch | f64 best_bleu4 | u64 count | count x tensor
/// where str = u64 length + bytes and
///   tensor = str name | u32 ndim | ndim x u64 dims | numel x f64.
struct Checkpoint {
  static constexpr std::uint32_t kVersion = 1;

  std::string config_json;
  std::string rng_state;
  std::uint64_t step = 0;
  std::uint64_t epoch = 0;
  double best_bleu4 = -1.0;
  std::vector<std::pair<std::string, Tensor>> tensors;

  const Tensor& tensor(const std::string& name) const;
};

void write_checkpoint(const std::filesystem::path& path, const Checkpoint& checkpoint);
Checkpoint read_checkpoint(const std::filesystem::path& path);

}  // namespace mmdial
