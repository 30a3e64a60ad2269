#include "mmdial/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>

namespace mmdial {

namespace {

constexpr char kMagic[8] = {'M', 'M', 'D', 'C', 'K', 'P', 'T', '1'};

template <typename T>
T to_little(T value) {
  if constexpr (std::endian::native == std::endian::little) {
    return value;
  } else {
    unsigned char bytes[sizeof(T)];
    std::memcpy(bytes, &value, sizeof(T));
    for (std::size_t i = 0; i < sizeof(T) / 2; ++i) std::swap(bytes[i], bytes[sizeof(T) - 1 - i]);
    std::memcpy(&value, bytes, sizeof(T));
    return value;
  }
}

class Writer {
 public:
  explicit Writer(const std::filesystem::path& path) : out_(path, std::ios::binary) {
    if (!out_) throw DataError("cannot write checkpoint " + path.string());
  }
  template <typename T>
  void put(T value) {
    value = to_little(value);
    out_.write(reinterpret_cast<const char*>(&value), sizeof(T));
  }
  void put_string(const std::string& s) {
    put<std::uint64_t>(s.size());
    out_.write(s.data(), static_cast<std::streamsize>(s.size()));
  }
  void raw(const char* data, std::size_t n) { out_.write(data, static_cast<std::streamsize>(n)); }
  void finish() {
    out_.flush();
    if (!out_) throw DataError("checkpoint write failed");
  }

 private:
  std::ofstream out_;
};

class Reader {
 public:
  explicit Reader(const std::filesystem::path& path) : in_(path, std::ios::binary), path_(path) {
    if (!in_) throw DataError("cannot read checkpoint " + path.string());
  }
  template <typename T>
  T get() {
    T value;
    in_.read(reinterpret_cast<char*>(&value), sizeof(T));
    if (!in_) throw DataError(path_.string() + ": truncated checkpoint");
    return to_little(value);
  }
  std::string get_string() {
    const auto n = get<std::uint64_t>();
    if (n > (1ULL << 32)) throw DataError(path_.string() + ": corrupt string length");
    std::string s(n, '\0');
    in_.read(s.data(), static_cast<std::streamsize>(n));
    if (!in_) throw DataError(path_.string() + ": truncated checkpoint");
    return s;
  }
  void raw(char* data, std::size_t n) {
    in_.read(data, static_cast<std::streamsize>(n));
    if (!in_) throw DataError(path_.string() + ": truncated checkpoint");
  }

 private:
  std::ifstream in_;
  std::filesystem::path path_;
};

}  // namespace

const Tensor& Checkpoint::tensor(const std::string& name) const {
  for (const auto& [n, t] : tensors)
    if (n == name) return t;
  throw DataError("checkpoint has no tensor " + name);
}

void write_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt) {
  Writer w(path);
  w.raw(kMagic, sizeof kMagic);
  w.put<std::uint32_t>(Checkpoint::kVersion);
  w.put_string(ckpt.config_json);
  w.put_string(ckpt.rng_state);
  w.put<std::uint64_t>(ckpt.step);
  w.put<std::uint64_t>(ckpt.epoch);
  w.put<double>(ckpt.best_bleu4);
  w.put<std::uint64_t>(ckpt.tensors.size());
  for (const auto& [name, t] : ckpt.tensors) {
    w.put_string(name);
    w.put<std::uint32_t>(static_cast<std::uint32_t>(t.dim()));
    for (auto d : t.shape()) w.put<std::uint64_t>(d);
    for (double v : t.data()) w.put<double>(v);
  }
  w.finish();
}

Checkpoint read_checkpoint(const std::filesystem::path& path) {
  Reader r(path);
  char magic[8];
  r.raw(magic, sizeof magic);
  if (std::memcmp(magic, kMagic, sizeof magic) != 0) throw DataError(path.string() + ": not a checkpoint file");
  const auto version = r.get<std::uint32_t>();
  if (version != Checkpoint::kVersion) {
    throw DataError(path.string() + ": unsupported checkpoint version " + std::to_string(version));
  }
  Checkpoint ckpt;
  ckpt.config_json = r.get_string();
  ckpt.rng_state = r.get_string();
  ckpt.step = r.get<std::uint64_t>();
  ckpt.epoch = r.get<std::uint64_t>();
  ckpt.best_bleu4 = r.get<double>();
  const auto count = r.get<std::uint64_t>();
  for (std::uint64_t i = 0; i < count; ++i) {
    std::string name = r.get_string();
    const auto ndim = r.get<std::uint32_t>();
    if (ndim > 8) throw DataError(path.string() + ": corrupt tensor rank for " + name);
    Shape shape;
    for (std::uint32_t k = 0; k < ndim; ++k) shape.push_back(r.get<std::uint64_t>());
    std::vector<double> values(shape_numel(shape));
    for (double& v : values) v = r.get<double>();
    ckpt.tensors.emplace_back(std::move(name), Tensor::from(std::move(shape), std::move(values)));
  }
  return ckpt;
}

}  // namespace mmdial
