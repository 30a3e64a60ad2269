#pragma once

#include <cstdint>
#include <optional>
#include <vector>

#include "mmdial/tensor.hpp"

namespace mmdial {

/// Boolean Lq x Lk admission matrix; false entries are excluded from softmax.
struct AttentionMask {
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::vector<std::uint8_t> allowed;

  bool operator()(std::size_t r, std::size_t c) const { return allowed[r * cols + c] != 0; }

  static AttentionMask all(std::size_t rows, std::size_t cols);
  /// Every query row sees exactly the keys whose flag is set.
  static AttentionMask keys(std::size_t rows, const std::vector<std::uint8_t>& key_valid);
  /// Lower-triangular (query i sees keys 0..i), intersected with key_valid when given.
  static AttentionMask causal(std::size_t length, const std::vector<std::uint8_t>* key_valid = nullptr);
};

Tensor matmul(const Tensor& a, const Tensor& b);
/// a * b^T
Tensor matmul_nt(const Tensor& a, const Tensor& b);
Tensor transpose(const Tensor& a);

Tensor add(const Tensor& a, const Tensor& b);
/// Adds a length-n vector to every row of an m x n matrix.
Tensor add_row(const Tensor& a, const Tensor& row);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& a, double s);
Tensor relu(const Tensor& a);

/// Softmax over the last axis with max subtraction. Masked entries get weight 0.
Tensor softmax(const Tensor& x, const AttentionMask* mask = nullptr);
Tensor log_softmax(const Tensor& x);

Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias, double eps = 1e-5);

/// Gathers rows of `table`; backward scatter-adds into the table.
Tensor embedding(const Tensor& table, const std::vector<int>& ids, double multiplier = 1.0);

Tensor concat_rows(const std::vector<Tensor>& parts);
Tensor concat_cols(const std::vector<Tensor>& parts);
Tensor slice_cols(const Tensor& x, std::size_t begin, std::size_t width);

Tensor sum(const Tensor& x);
Tensor mean(const Tensor& x);

/// Sum over rows of -log softmax(logits)[row, target]. Rows with target < 0 are skipped.
Tensor cross_entropy(const Tensor& logits, const std::vector<int>& targets);

/// Scaled dot-product attention over pre-projected q/k/v, split into
/// `heads` column blocks. Returns the concatenated per-head outputs.
Tensor attention_heads(const Tensor& q, const Tensor& k, const Tensor& v, std::size_t heads,
                       const AttentionMask* mask = nullptr);

}  // namespace mmdial
