#include "mmdial/ops.hpp"

#include <Eigen/Dense>
#include <cmath>
#include <limits>
#include <string>

namespace mmdial {

namespace {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MatMap = Eigen::Map<RowMat>;
using CMatMap = Eigen::Map<const RowMat>;
using Strided = Eigen::Map<RowMat, 0, Eigen::OuterStride<>>;
using CStrided = Eigen::Map<const RowMat, 0, Eigen::OuterStride<>>;
using Impl = std::shared_ptr<TensorImpl>;

CMatMap view(const Impl& t, std::size_t r, std::size_t c) {
  return CMatMap(t->data.data(), static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(c));
}
MatMap grad_view(const Impl& t, std::size_t r, std::size_t c) {
  return MatMap(t->grad.data(), static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(c));
}

void require_matrix(const Tensor& t, const char* op) {
  if (!t.defined() || t.dim() != 2) {
    throw DimensionError(std::string(op) + ": expected a matrix, got " +
                         (t.defined() ? shape_str(t.shape()) : std::string("undefined")));
  }
}

void check_finite(const Tensor& t, const char* op) {
  for (double v : t.data()) {
    if (!std::isfinite(v)) throw NumericError(std::string(op) + ": non-finite value in output");
  }
}

bool any_grad(std::initializer_list<const Tensor*> inputs) {
  if (!grad_enabled()) return false;
  for (const Tensor* t : inputs) {
    if (t->requires_grad()) return true;
  }
  return false;
}

// Finalizes an op output: finite check, then tape recording when any input is trainable.
Tensor finish(Tensor out, const char* op, std::vector<Impl> inputs, bool track, std::function<void()> rule) {
  check_finite(out, op);
  if (track) {
    out.set_requires_grad(true);
    current_tape().push({std::move(inputs), out.shared(), std::move(rule)});
  }
  return out;
}

}  // namespace

AttentionMask AttentionMask::all(std::size_t rows, std::size_t cols) {
  return {rows, cols, std::vector<std::uint8_t>(rows * cols, 1)};
}

AttentionMask AttentionMask::keys(std::size_t rows, const std::vector<std::uint8_t>& key_valid) {
  AttentionMask m{rows, key_valid.size(), {}};
  m.allowed.reserve(rows * key_valid.size());
  for (std::size_t r = 0; r < rows; ++r) m.allowed.insert(m.allowed.end(), key_valid.begin(), key_valid.end());
  return m;
}

AttentionMask AttentionMask::causal(std::size_t length, const std::vector<std::uint8_t>* key_valid) {
  AttentionMask m{length, length, std::vector<std::uint8_t>(length * length, 0)};
  for (std::size_t r = 0; r < length; ++r) {
    for (std::size_t c = 0; c <= r; ++c) {
      m.allowed[r * length + c] = key_valid ? (*key_valid)[c] : 1;
    }
  }
  return m;
}

Tensor matmul(const Tensor& a, const Tensor& b) {
  require_matrix(a, "matmul");
  require_matrix(b, "matmul");
  const std::size_t m = a.rows(), k = a.cols(), n = b.cols();
  if (b.rows() != k) {
    throw DimensionError("matmul: inner dimensions differ, " + shape_str(a.shape()) + " * " + shape_str(b.shape()));
  }
  Tensor out = Tensor::zeros({m, n});
  Impl A = a.shared(), B = b.shared(), C = out.shared();
  MatMap(out.data().data(), m, n).noalias() = view(A, m, k) * view(B, k, n);
  return finish(out, "matmul", {A, B}, any_grad({&a, &b}), [A, B, C, m, k, n] {
    auto dC = grad_view(C, m, n);
    if (A->requires_grad) grad_view(A, m, k).noalias() += dC * view(B, k, n).transpose();
    if (B->requires_grad) grad_view(B, k, n).noalias() += view(A, m, k).transpose() * dC;
  });
}

Tensor matmul_nt(const Tensor& a, const Tensor& b) {
  require_matrix(a, "matmul_nt");
  require_matrix(b, "matmul_nt");
  const std::size_t m = a.rows(), k = a.cols(), n = b.rows();
  if (b.cols() != k) {
    throw DimensionError("matmul_nt: inner dimensions differ, " + shape_str(a.shape()) + " * " +
                         shape_str(b.shape()) + "^T");
  }
  Tensor out = Tensor::zeros({m, n});
  Impl A = a.shared(), B = b.shared(), C = out.shared();
  MatMap(out.data().data(), m, n).noalias() = view(A, m, k) * view(B, n, k).transpose();
  return finish(out, "matmul_nt", {A, B}, any_grad({&a, &b}), [A, B, C, m, k, n] {
    auto dC = grad_view(C, m, n);
    if (A->requires_grad) grad_view(A, m, k).noalias() += dC * view(B, n, k);
    if (B->requires_grad) grad_view(B, n, k).noalias() += dC.transpose() * view(A, m, k);
  });
}

Tensor transpose(const Tensor& a) {
  require_matrix(a, "transpose");
  const std::size_t m = a.rows(), n = a.cols();
  Tensor out = Tensor::zeros({n, m});
  Impl A = a.shared(), C = out.shared();
  MatMap(out.data().data(), n, m) = view(A, m, n).transpose();
  return finish(out, "transpose", {A}, any_grad({&a}), [A, C, m, n] {
    grad_view(A, m, n) += grad_view(C, n, m).transpose();
  });
}

Tensor add(const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape()) {
    throw DimensionError("add: shapes differ, " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  }
  Tensor out = Tensor::zeros(a.shape());
  auto o = out.data();
  auto x = a.data(), y = b.data();
  for (std::size_t i = 0; i < o.size(); ++i) o[i] = x[i] + y[i];
  Impl A = a.shared(), B = b.shared(), C = out.shared();
  return finish(out, "add", {A, B}, any_grad({&a, &b}), [A, B, C] {
    for (const Impl& in : {A, B}) {
      if (!in->requires_grad) continue;
      for (std::size_t i = 0; i < C->grad.size(); ++i) in->grad[i] += C->grad[i];
    }
  });
}

Tensor add_row(const Tensor& a, const Tensor& row) {
  require_matrix(a, "add_row");
  const std::size_t m = a.rows(), n = a.cols();
  if (row.numel() != n) {
    throw DimensionError("add_row: row " + shape_str(row.shape()) + " does not match " + shape_str(a.shape()));
  }
  Tensor out = Tensor::zeros({m, n});
  auto o = out.data();
  auto x = a.data(), r = row.data();
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) o[i * n + j] = x[i * n + j] + r[j];
  Impl A = a.shared(), R = row.shared(), C = out.shared();
  return finish(out, "add_row", {A, R}, any_grad({&a, &row}), [A, R, C, m, n] {
    if (A->requires_grad)
      for (std::size_t i = 0; i < m * n; ++i) A->grad[i] += C->grad[i];
    if (R->requires_grad)
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j) R->grad[j] += C->grad[i * n + j];
  });
}

Tensor mul(const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape()) {
    throw DimensionError("mul: shapes differ, " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  }
  Tensor out = Tensor::zeros(a.shape());
  auto o = out.data();
  auto x = a.data(), y = b.data();
  for (std::size_t i = 0; i < o.size(); ++i) o[i] = x[i] * y[i];
  Impl A = a.shared(), B = b.shared(), C = out.shared();
  return finish(out, "mul", {A, B}, any_grad({&a, &b}), [A, B, C] {
    for (std::size_t i = 0; i < C->grad.size(); ++i) {
      if (A->requires_grad) A->grad[i] += C->grad[i] * B->data[i];
      if (B->requires_grad) B->grad[i] += C->grad[i] * A->data[i];
    }
  });
}

Tensor scale(const Tensor& a, double s) {
  Tensor out = Tensor::zeros(a.shape());
  auto o = out.data();
  auto x = a.data();
  for (std::size_t i = 0; i < o.size(); ++i) o[i] = s * x[i];
  Impl A = a.shared(), C = out.shared();
  return finish(out, "scale", {A}, any_grad({&a}), [A, C, s] {
    for (std::size_t i = 0; i < C->grad.size(); ++i) A->grad[i] += s * C->grad[i];
  });
}

Tensor relu(const Tensor& a) {
  Tensor out = Tensor::zeros(a.shape());
  auto o = out.data();
  auto x = a.data();
  for (std::size_t i = 0; i < o.size(); ++i) o[i] = x[i] > 0.0 ? x[i] : 0.0;
  Impl A = a.shared(), C = out.shared();
  return finish(out, "relu", {A}, any_grad({&a}), [A, C] {
    for (std::size_t i = 0; i < C->grad.size(); ++i)
      if (A->data[i] > 0.0) A->grad[i] += C->grad[i];
  });
}

Tensor softmax(const Tensor& x, const AttentionMask* mask) {
  if (x.dim() == 0) throw DimensionError("softmax: scalar input");
  const std::size_t n = x.cols();
  const std::size_t m = x.numel() / n;
  if (mask && (mask->rows != m || mask->cols != n)) {
    throw ContractError("softmax: mask " + std::to_string(mask->rows) + "x" + std::to_string(mask->cols) +
                        " does not match input " + shape_str(x.shape()));
  }
  Tensor out = Tensor::zeros(x.shape());
  auto o = out.data();
  auto in = x.data();
  for (std::size_t r = 0; r < m; ++r) {
    double hi = -std::numeric_limits<double>::infinity();
    for (std::size_t c = 0; c < n; ++c)
      if (!mask || (*mask)(r, c)) hi = std::max(hi, in[r * n + c]);
    if (!std::isfinite(hi)) throw ContractError("softmax: row " + std::to_string(r) + " is fully masked");
    double total = 0.0;
    for (std::size_t c = 0; c < n; ++c) {
      double e = (!mask || (*mask)(r, c)) ? std::exp(in[r * n + c] - hi) : 0.0;
      o[r * n + c] = e;
      total += e;
    }
    for (std::size_t c = 0; c < n; ++c) o[r * n + c] /= total;
  }
  Impl A = x.shared(), C = out.shared();
  return finish(out, "softmax", {A}, any_grad({&x}), [A, C, m, n] {
    for (std::size_t r = 0; r < m; ++r) {
      const double* y = &C->data[r * n];
      const double* dy = &C->grad[r * n];
      double dot = 0.0;
      for (std::size_t c = 0; c < n; ++c) dot += dy[c] * y[c];
      for (std::size_t c = 0; c < n; ++c) A->grad[r * n + c] += y[c] * (dy[c] - dot);
    }
  });
}

Tensor log_softmax(const Tensor& x) {
  if (x.dim() == 0) throw DimensionError("log_softmax: scalar input");
  const std::size_t n = x.cols();
  const std::size_t m = x.numel() / n;
  Tensor out = Tensor::zeros(x.shape());
  auto o = out.data();
  auto in = x.data();
  for (std::size_t r = 0; r < m; ++r) {
    double hi = in[r * n];
    for (std::size_t c = 1; c < n; ++c) hi = std::max(hi, in[r * n + c]);
    double total = 0.0;
    for (std::size_t c = 0; c < n; ++c) total += std::exp(in[r * n + c] - hi);
    const double lse = hi + std::log(total);
    for (std::size_t c = 0; c < n; ++c) o[r * n + c] = in[r * n + c] - lse;
  }
  Impl A = x.shared(), C = out.shared();
  return finish(out, "log_softmax", {A}, any_grad({&x}), [A, C, m, n] {
    for (std::size_t r = 0; r < m; ++r) {
      double total = 0.0;
      for (std::size_t c = 0; c < n; ++c) total += C->grad[r * n + c];
      for (std::size_t c = 0; c < n; ++c)
        A->grad[r * n + c] += C->grad[r * n + c] - std::exp(C->data[r * n + c]) * total;
    }
  });
}

Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias, double eps) {
  if (x.dim() == 0) throw DimensionError("layer_norm: scalar input");
  const std::size_t d = x.cols();
  const std::size_t m = x.numel() / d;
  if (gain.numel() != d || bias.numel() != d) {
    throw DimensionError("layer_norm: gain/bias " + shape_str(gain.shape()) + "/" + shape_str(bias.shape()) +
                         " vs input " + shape_str(x.shape()));
  }
  Tensor out = Tensor::zeros(x.shape());
  auto xhat = std::make_shared<std::vector<double>>(x.numel());
  auto rstd = std::make_shared<std::vector<double>>(m);
  auto in = x.data();
  auto o = out.data();
  auto g = gain.data(), b = bias.data();
  for (std::size_t r = 0; r < m; ++r) {
    double mu = 0.0;
    for (std::size_t c = 0; c < d; ++c) mu += in[r * d + c];
    mu /= static_cast<double>(d);
    double var = 0.0;
    for (std::size_t c = 0; c < d; ++c) {
      const double z = in[r * d + c] - mu;
      var += z * z;
    }
    var /= static_cast<double>(d);
    const double s = 1.0 / std::sqrt(var + eps);
    (*rstd)[r] = s;
    for (std::size_t c = 0; c < d; ++c) {
      const double h = (in[r * d + c] - mu) * s;
      (*xhat)[r * d + c] = h;
      o[r * d + c] = g[c] * h + b[c];
    }
  }
  Impl X = x.shared(), G = gain.shared(), B = bias.shared(), C = out.shared();
  return finish(out, "layer_norm", {X, G, B}, any_grad({&x, &gain, &bias}), [X, G, B, C, xhat, rstd, m, d] {
    std::vector<double> dxhat(d);
    for (std::size_t r = 0; r < m; ++r) {
      const double* dy = &C->grad[r * d];
      const double* h = &(*xhat)[r * d];
      if (G->requires_grad)
        for (std::size_t c = 0; c < d; ++c) G->grad[c] += dy[c] * h[c];
      if (B->requires_grad)
        for (std::size_t c = 0; c < d; ++c) B->grad[c] += dy[c];
      if (!X->requires_grad) continue;
      double mean_dh = 0.0, mean_dh_h = 0.0;
      for (std::size_t c = 0; c < d; ++c) {
        dxhat[c] = dy[c] * G->data[c];
        mean_dh += dxhat[c];
        mean_dh_h += dxhat[c] * h[c];
      }
      mean_dh /= static_cast<double>(d);
      mean_dh_h /= static_cast<double>(d);
      for (std::size_t c = 0; c < d; ++c)
        X->grad[r * d + c] += (*rstd)[r] * (dxhat[c] - mean_dh - h[c] * mean_dh_h);
    }
  });
}

Tensor embedding(const Tensor& table, const std::vector<int>& ids, double multiplier) {
  require_matrix(table, "embedding");
  const std::size_t vocab = table.rows(), d = table.cols();
  for (int id : ids) {
    if (id < 0 || static_cast<std::size_t>(id) >= vocab) {
      throw DataError("embedding: token id " + std::to_string(id) + " outside vocabulary of " +
                      std::to_string(vocab));
    }
  }
  Tensor out = Tensor::zeros({ids.size(), d});
  auto o = out.data();
  auto t = table.data();
  for (std::size_t i = 0; i < ids.size(); ++i)
    for (std::size_t c = 0; c < d; ++c) o[i * d + c] = multiplier * t[static_cast<std::size_t>(ids[i]) * d + c];
  Impl T = table.shared(), C = out.shared();
  return finish(out, "embedding", {T}, any_grad({&table}), [T, C, ids, d, multiplier] {
    for (std::size_t i = 0; i < ids.size(); ++i)
      for (std::size_t c = 0; c < d; ++c)
        T->grad[static_cast<std::size_t>(ids[i]) * d + c] += multiplier * C->grad[i * d + c];
  });
}

Tensor concat_rows(const std::vector<Tensor>& parts) {
  if (parts.empty()) throw ContractError("concat_rows: no inputs");
  const std::size_t n = parts.front().cols();
  std::size_t total = 0;
  bool track = false;
  std::vector<Impl> inputs;
  for (const Tensor& p : parts) {
    require_matrix(p, "concat_rows");
    if (p.cols() != n) throw DimensionError("concat_rows: column counts differ");
    total += p.rows();
    track = track || any_grad({&p});
    inputs.push_back(p.shared());
  }
  Tensor out = Tensor::zeros({total, n});
  std::size_t offset = 0;
  for (const Tensor& p : parts) {
    std::copy(p.data().begin(), p.data().end(), out.data().begin() + static_cast<std::ptrdiff_t>(offset));
    offset += p.numel();
  }
  Impl C = out.shared();
  return finish(out, "concat_rows", inputs, track, [inputs, C] {
    std::size_t off = 0;
    for (const Impl& in : inputs) {
      if (in->requires_grad)
        for (std::size_t i = 0; i < in->data.size(); ++i) in->grad[i] += C->grad[off + i];
      off += in->data.size();
    }
  });
}

Tensor concat_cols(const std::vector<Tensor>& parts) {
  if (parts.empty()) throw ContractError("concat_cols: no inputs");
  const std::size_t m = parts.front().rows();
  std::size_t total = 0;
  bool track = false;
  std::vector<Impl> inputs;
  std::vector<std::size_t> widths;
  for (const Tensor& p : parts) {
    require_matrix(p, "concat_cols");
    if (p.rows() != m) throw DimensionError("concat_cols: row counts differ");
    total += p.cols();
    widths.push_back(p.cols());
    track = track || any_grad({&p});
    inputs.push_back(p.shared());
  }
  Tensor out = Tensor::zeros({m, total});
  auto o = out.data();
  std::size_t col = 0;
  for (std::size_t k = 0; k < parts.size(); ++k) {
    auto src = parts[k].data();
    for (std::size_t r = 0; r < m; ++r)
      for (std::size_t c = 0; c < widths[k]; ++c) o[r * total + col + c] = src[r * widths[k] + c];
    col += widths[k];
  }
  Impl C = out.shared();
  return finish(out, "concat_cols", inputs, track, [inputs, widths, C, m, total] {
    std::size_t col0 = 0;
    for (std::size_t k = 0; k < inputs.size(); ++k) {
      if (inputs[k]->requires_grad)
        for (std::size_t r = 0; r < m; ++r)
          for (std::size_t c = 0; c < widths[k]; ++c)
            inputs[k]->grad[r * widths[k] + c] += C->grad[r * total + col0 + c];
      col0 += widths[k];
    }
  });
}

Tensor slice_cols(const Tensor& x, std::size_t begin, std::size_t width) {
  require_matrix(x, "slice_cols");
  const std::size_t m = x.rows(), n = x.cols();
  if (begin + width > n) {
    throw DimensionError("slice_cols: [" + std::to_string(begin) + "," + std::to_string(begin + width) +
                         ") outside " + shape_str(x.shape()));
  }
  Tensor out = Tensor::zeros({m, width});
  auto o = out.data();
  auto in = x.data();
  for (std::size_t r = 0; r < m; ++r)
    for (std::size_t c = 0; c < width; ++c) o[r * width + c] = in[r * n + begin + c];
  Impl X = x.shared(), C = out.shared();
  return finish(out, "slice_cols", {X}, any_grad({&x}), [X, C, m, n, begin, width] {
    for (std::size_t r = 0; r < m; ++r)
      for (std::size_t c = 0; c < width; ++c) X->grad[r * n + begin + c] += C->grad[r * width + c];
  });
}

Tensor sum(const Tensor& x) {
  double total = 0.0;
  for (double v : x.data()) total += v;
  Tensor out = Tensor::full({}, total);
  Impl X = x.shared(), C = out.shared();
  return finish(out, "sum", {X}, any_grad({&x}), [X, C] {
    for (double& g : X->grad) g += C->grad[0];
  });
}

Tensor mean(const Tensor& x) {
  if (x.numel() == 0) throw ContractError("mean: empty tensor");
  return scale(sum(x), 1.0 / static_cast<double>(x.numel()));
}

Tensor cross_entropy(const Tensor& logits, const std::vector<int>& targets) {
  require_matrix(logits, "cross_entropy");
  const std::size_t m = logits.rows(), n = logits.cols();
  if (targets.size() != m) {
    throw DimensionError("cross_entropy: " + std::to_string(targets.size()) + " targets for " +
                         shape_str(logits.shape()) + " logits");
  }
  auto probs = std::make_shared<std::vector<double>>(m * n);
  auto in = logits.data();
  double loss = 0.0;
  for (std::size_t r = 0; r < m; ++r) {
    if (targets[r] < 0) continue;
    if (static_cast<std::size_t>(targets[r]) >= n) throw DataError("cross_entropy: target outside vocabulary");
    double hi = in[r * n];
    for (std::size_t c = 1; c < n; ++c) hi = std::max(hi, in[r * n + c]);
    double total = 0.0;
    for (std::size_t c = 0; c < n; ++c) {
      const double e = std::exp(in[r * n + c] - hi);
      (*probs)[r * n + c] = e;
      total += e;
    }
    for (std::size_t c = 0; c < n; ++c) (*probs)[r * n + c] /= total;
    loss += hi + std::log(total) - in[r * n + static_cast<std::size_t>(targets[r])];
  }
  Tensor out = Tensor::full({}, loss);
  Impl X = logits.shared(), C = out.shared();
  return finish(out, "cross_entropy", {X}, any_grad({&logits}), [X, C, probs, targets, m, n] {
    const double g = C->grad[0];
    for (std::size_t r = 0; r < m; ++r) {
      if (targets[r] < 0) continue;
      for (std::size_t c = 0; c < n; ++c) X->grad[r * n + c] += g * (*probs)[r * n + c];
      X->grad[r * n + static_cast<std::size_t>(targets[r])] -= g;
    }
  });
}

Tensor attention_heads(const Tensor& q, const Tensor& k, const Tensor& v, std::size_t heads,
                       const AttentionMask* mask) {
  require_matrix(q, "attention");
  require_matrix(k, "attention");
  require_matrix(v, "attention");
  const std::size_t lq = q.rows(), lk = k.rows(), d = q.cols();
  if (lk == 0) throw ContractError("attention: empty key set");
  if (k.cols() != d || v.cols() != d || v.rows() != lk) {
    throw DimensionError("attention: q " + shape_str(q.shape()) + ", k " + shape_str(k.shape()) + ", v " +
                         shape_str(v.shape()));
  }
  if (heads == 0 || d % heads != 0) {
    throw ConfigError("attention: width " + std::to_string(d) + " not divisible by " + std::to_string(heads) +
                      " heads");
  }
  if (mask && (mask->rows != lq || mask->cols != lk)) {
    throw ContractError("attention: mask " + std::to_string(mask->rows) + "x" + std::to_string(mask->cols) +
                        " does not match " + std::to_string(lq) + "x" + std::to_string(lk));
  }
  const std::size_t dk = d / heads;
  const double sc = 1.0 / std::sqrt(static_cast<double>(dk));
  const auto s = [](std::size_t x) { return static_cast<Eigen::Index>(x); };

  Tensor out = Tensor::zeros({lq, d});
  auto weights = std::make_shared<std::vector<RowMat>>(heads);
  Impl Q = q.shared(), K = k.shared(), V = v.shared(), C = out.shared();
  const Eigen::OuterStride<> stride(s(d));
  for (std::size_t h = 0; h < heads; ++h) {
    CStrided qh(Q->data.data() + h * dk, s(lq), s(dk), stride);
    CStrided kh(K->data.data() + h * dk, s(lk), s(dk), stride);
    CStrided vh(V->data.data() + h * dk, s(lk), s(dk), stride);
    RowMat p = (qh * kh.transpose()) * sc;
    for (std::size_t r = 0; r < lq; ++r) {
      double hi = -std::numeric_limits<double>::infinity();
      bool any = false;
      for (std::size_t c = 0; c < lk; ++c) {
        if (mask && !(*mask)(r, c)) continue;
        const double v = p(s(r), s(c));
        if (!std::isfinite(v)) throw NumericError("attention: non-finite score in query row " + std::to_string(r));
        hi = std::max(hi, v);
        any = true;
      }
      if (!any) throw ContractError("attention: query row " + std::to_string(r) + " sees no keys");
      double total = 0.0;
      for (std::size_t c = 0; c < lk; ++c) {
        const double e = (!mask || (*mask)(r, c)) ? std::exp(p(s(r), s(c)) - hi) : 0.0;
        p(s(r), s(c)) = e;
        total += e;
      }
      p.row(s(r)) /= total;
    }
    Strided(C->data.data() + h * dk, s(lq), s(dk), stride).noalias() = p * vh;
    (*weights)[h] = std::move(p);
  }
  return finish(out, "attention", {Q, K, V}, any_grad({&q, &k, &v}), [Q, K, V, C, weights, heads, lq, lk, d, dk, sc, s] {
    const Eigen::OuterStride<> st(s(d));
    for (std::size_t h = 0; h < heads; ++h) {
      const RowMat& p = (*weights)[h];
      CStrided dout(C->grad.data() + h * dk, s(lq), s(dk), st);
      CStrided vh(V->data.data() + h * dk, s(lk), s(dk), st);
      if (V->requires_grad) Strided(V->grad.data() + h * dk, s(lk), s(dk), st).noalias() += p.transpose() * dout;
      if (!Q->requires_grad && !K->requires_grad) continue;
      RowMat dp = dout * vh.transpose();
      RowMat ds = p.cwiseProduct(dp);
      Eigen::VectorXd rowdot = ds.rowwise().sum();
      ds = (p.array().colwise() * rowdot.array()).matrix() * -1.0 + ds;
      ds *= sc;
      if (Q->requires_grad) {
        CStrided kh(K->data.data() + h * dk, s(lk), s(dk), st);
        Strided(Q->grad.data() + h * dk, s(lq), s(dk), st).noalias() += ds * kh;
      }
      if (K->requires_grad) {
        CStrided qh(Q->data.data() + h * dk, s(lq), s(dk), st);
        Strided(K->grad.data() + h * dk, s(lk), s(dk), st).noalias() += ds.transpose() * qh;
      }
    }
  });
}

}  // namespace mmdial
