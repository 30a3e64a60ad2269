#include "mmdial/data.hpp"

#include <algorithm>
#include <fstream>
#include <iostream>
#include <sstream>

#include "mmdial/tensor.hpp"

namespace mmdial {

Vocabulary::Vocabulary() {
  for (const char* t : {"<pad>", "<bos>", "<eos>", "<unk>", "<img>"}) add(t);
}

int Vocabulary::add(const std::string& token) {
  if (auto it = index_.find(token); it != index_.end()) return it->second;
  if (token.empty() || token.find_first_of(" \t\r\n") != std::string::npos) {
    throw DataError("vocabulary token must be a nonempty word without whitespace: '" + token + "'");
  }
  const int id = static_cast<int>(tokens_.size());
  tokens_.push_back(token);
  index_.emplace(token, id);
  return id;
}

std::optional<int> Vocabulary::find(std::string_view token) const {
  if (auto it = index_.find(std::string(token)); it != index_.end()) return it->second;
  return std::nullopt;
}

int Vocabulary::id(std::string_view token) const { return find(token).value_or(kUnk); }

const std::string& Vocabulary::token(int id) const {
  if (id < 0 || static_cast<std::size_t>(id) >= tokens_.size()) {
    throw DataError("token id " + std::to_string(id) + " outside vocabulary of " + std::to_string(tokens_.size()));
  }
  return tokens_[static_cast<std::size_t>(id)];
}

std::vector<int> Vocabulary::encode(std::string_view text) const {
  std::vector<int> ids;
  std::istringstream in{std::string(text)};
  std::string word;
  while (in >> word) ids.push_back(id(word));
  return ids;
}

std::string Vocabulary::decode(std::span<const int> ids) const {
  std::string out;
  for (int id : ids) {
    if (id == kPad || id == kBos || id == kEos) continue;
    if (!out.empty()) out += ' ';
    out += token(id);
  }
  return out;
}

void Vocabulary::save(const std::filesystem::path& path) const {
  std::ofstream out(path);
  if (!out) throw DataError("cannot write " + path.string());
  for (const auto& t : tokens_) out << t << '\n';
}

Vocabulary Vocabulary::load(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot read " + path.string());
  Vocabulary v;
  std::string line;
  std::size_t n = 0;
  while (std::getline(in, line)) {
    if (n < static_cast<std::size_t>(kNumReserved)) {
      if (line != v.tokens_[n]) throw DataError(path.string() + ": reserved token mismatch at line " + std::to_string(n + 1));
    } else {
      if (v.find(line)) throw DataError(path.string() + ": duplicate token at line " + std::to_string(n + 1));
      v.add(line);
    }
    ++n;
  }
  return v;
}

namespace {

void warn_truncation(const char* what, std::size_t len, std::size_t max_len) {
  std::clog << "warning: " << what << " of length " << len << " truncated to " << max_len << '\n';
}

PaddedUtterances pad_utterances(const std::vector<const Utterance*>& utts, std::size_t max_len, std::size_t d_img,
                                std::size_t& truncations) {
  PaddedUtterances p;
  p.count = utts.size();
  p.d_img = d_img;
  for (const Utterance* u : utts) {
    if (!u) continue;
    p.max_tokens = std::max(p.max_tokens, std::min(u->tokens.size(), max_len));
    p.max_images = std::max(p.max_images, u->image_features.size());
  }
  p.tokens.assign(p.count * p.max_tokens, kPad);
  p.token_mask.assign(p.count * p.max_tokens, 0);
  p.images.assign(p.count * p.max_images * d_img, 0.0);
  p.image_mask.assign(p.count * p.max_images, 0);
  p.speakers.assign(p.count, Speaker::user);
  for (std::size_t i = 0; i < p.count; ++i) {
    const Utterance* u = utts[i];
    if (!u) continue;
    p.speakers[i] = u->speaker;
    std::size_t start = 0;
    if (u->tokens.size() > max_len) {
      warn_truncation("utterance", u->tokens.size(), max_len);
      ++truncations;
      start = u->tokens.size() - max_len;  // keep the tail
    }
    for (std::size_t t = start; t < u->tokens.size(); ++t) {
      p.tokens[i * p.max_tokens + (t - start)] = u->tokens[t];
      p.token_mask[i * p.max_tokens + (t - start)] = 1;
    }
    for (std::size_t j = 0; j < u->image_features.size(); ++j) {
      const auto& f = u->image_features[j];
      if (f.size() != d_img) throw DataError("image feature width " + std::to_string(f.size()) + " != " + std::to_string(d_img));
      std::copy(f.begin(), f.end(), p.images.begin() + static_cast<std::ptrdiff_t>((i * p.max_images + j) * d_img));
      p.image_mask[i * p.max_images + j] = 1;
    }
  }
  return p;
}

Utterance unpad_utterance(const PaddedUtterances& p, std::size_t i) {
  Utterance u;
  u.speaker = p.speakers[i];
  for (std::size_t t = 0; t < p.max_tokens; ++t)
    if (p.token_mask[i * p.max_tokens + t]) u.tokens.push_back(p.tokens[i * p.max_tokens + t]);
  for (std::size_t j = 0; j < p.max_images; ++j) {
    if (!p.image_mask[i * p.max_images + j]) continue;
    auto begin = p.images.begin() + static_cast<std::ptrdiff_t>((i * p.max_images + j) * p.d_img);
    u.image_features.emplace_back(begin, begin + static_cast<std::ptrdiff_t>(p.d_img));
  }
  return u;
}

}  // namespace

Batch batch_and_pad(std::span<const DialogueSample> samples, std::size_t max_len, std::size_t d_img) {
  if (samples.empty()) throw ContractError("batch_and_pad: empty batch");
  Batch b;
  for (const auto& s : samples) b.context_slots = std::max(b.context_slots, s.context.size());

  std::vector<const Utterance*> ctx(samples.size() * b.context_slots, nullptr);
  std::vector<const Utterance*> queries;
  b.context_present.assign(samples.size() * b.context_slots, 0);
  for (std::size_t i = 0; i < samples.size(); ++i) {
    const auto& s = samples[i];
    b.ids.push_back(s.id);
    b.conversation_start.push_back(s.conversation_start ? 1 : 0);
    for (std::size_t c = 0; c < s.context.size(); ++c) {
      ctx[i * b.context_slots + c] = &s.context[c];
      b.context_present[i * b.context_slots + c] = 1;
    }
    queries.push_back(&s.query);
    b.max_response = std::max(b.max_response, std::min(s.response.size(), max_len));
  }
  b.context = pad_utterances(ctx, max_len, d_img, b.truncations);
  b.query = pad_utterances(queries, max_len, d_img, b.truncations);

  b.response.assign(samples.size() * b.max_response, kPad);
  b.response_mask.assign(samples.size() * b.max_response, 0);
  for (std::size_t i = 0; i < samples.size(); ++i) {
    std::vector<int> r = samples[i].response;
    if (r.size() > max_len) {
      warn_truncation("response", r.size(), max_len);
      ++b.truncations;
      r.resize(max_len);  // keep the head
      r.back() = kEos;
    }
    for (std::size_t t = 0; t < r.size(); ++t) {
      b.response[i * b.max_response + t] = r[t];
      b.response_mask[i * b.max_response + t] = 1;
    }
  }
  return b;
}

std::vector<DialogueSample> unbatch(const Batch& batch) {
  std::vector<DialogueSample> out(batch.size());
  for (std::size_t i = 0; i < batch.size(); ++i) {
    DialogueSample& s = out[i];
    s.id = batch.ids[i];
    s.conversation_start = batch.conversation_start[i] != 0;
    for (std::size_t c = 0; c < batch.context_slots; ++c)
      if (batch.context_present[i * batch.context_slots + c])
        s.context.push_back(unpad_utterance(batch.context, i * batch.context_slots + c));
    s.query = unpad_utterance(batch.query, i);
    for (std::size_t t = 0; t < batch.max_response; ++t)
      if (batch.response_mask[i * batch.max_response + t]) s.response.push_back(batch.response[i * batch.max_response + t]);
  }
  return out;
}

bool ids_in_range(const DialogueSample& sample, std::size_t vocab_size) {
  auto ok = [vocab_size](const std::vector<int>& ids) {
    return std::all_of(ids.begin(), ids.end(),
                       [vocab_size](int id) { return id >= 0 && static_cast<std::size_t>(id) < vocab_size; });
  };
  for (const auto& u : sample.context)
    if (!ok(u.tokens)) return false;
  return ok(sample.query.tokens) && ok(sample.response);
}

}  // namespace mmdial
