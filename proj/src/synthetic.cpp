#include "mmdial/synthetic.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <json.hpp>
#include <limits>
#include <random>

#include "mmdial/tensor.hpp"

namespace mmdial {

namespace {

using Rng = std::mt19937_64;

const std::vector<std::string> kAttributeWords = {
    "red",   "blue",   "green", "black", "white", "yellow", "pink",    "purple", "orange", "brown",
    "grey",  "navy",   "beige", "striped", "floral", "denim", "leather", "silk", "wool", "linen",
    "gold",  "silver", "olive", "maroon", "teal", "cream", "plaid", "dotted"};

const std::vector<std::string> kKeywordWords = {
    "shirt",  "shoes",   "dress",  "jacket", "jeans",  "skirt",  "hat",     "bag",   "scarf", "boots",
    "sandals", "coat",   "sweater", "shorts", "belt",  "watch",  "gloves",  "socks", "blouse", "suit",
    "tie",    "vest",    "hoodie", "sneakers", "cardigan", "loafers", "backpack", "trousers", "poncho", "kimono"};

const std::vector<std::string> kTemplateWords = {
    "i",    "am",   "looking", "for",  "a",    "want", "need",  "new",  "do",     "you",  "have",
    "?",    "show", "me",      "sure", "here", "are",  "some",  "options", "what", "about", "these",
    "similar", "ones", "it",   "like", "this", "the",  "comes", "in",   "and",    ".",    "sorry", "no",
    "pictures"};

std::vector<int> words(const SyntheticWorld& w, std::initializer_list<const char*> list) {
  std::vector<int> ids;
  for (const char* s : list) ids.push_back(w.vocab.id(s));
  return ids;
}

std::vector<double> noisy_feature(const SyntheticWorld& w, std::size_t attribute, Rng& rng) {
  std::normal_distribution<double> noise(0.0, w.spec.image_noise);
  std::vector<double> f = w.codebook[attribute];
  if (w.spec.image_noise > 0.0)
    for (double& v : f) v += noise(rng);
  return f;
}

std::size_t pick(std::size_t n, Rng& rng) { return std::uniform_int_distribution<std::size_t>(0, n - 1)(rng); }

void append_fillers(const SyntheticWorld& w, std::vector<int>& tokens, std::size_t max_extra, Rng& rng) {
  const std::size_t extra = pick(max_extra + 1, rng);
  for (std::size_t i = 0; i < extra && tokens.size() < w.spec.max_len; ++i)
    tokens.push_back(w.filler_tokens[pick(w.filler_tokens.size(), rng)]);
}

void add_distractors(const SyntheticWorld& w, Utterance& u, std::size_t count, Rng& rng) {
  for (std::size_t i = 0; i < count && u.image_features.size() < w.spec.max_images; ++i)
    u.image_features.push_back(noisy_feature(w, pick(w.attribute_tokens.size(), rng), rng));
}

double distance(const std::vector<double>& a, std::span<const double> b) {
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += (a[i] - b[i]) * (a[i] - b[i]);
  return std::sqrt(s);
}

}  // namespace

void SyntheticSpec::validate() const {
  const std::size_t needed = kNumReserved + n_attributes + n_keywords + kTemplateWords.size() + 1;
  if (n_attributes == 0 || n_keywords == 0) throw ConfigError("synthetic task needs attributes and keywords");
  if (n_attributes > kAttributeWords.size()) throw ConfigError("at most " + std::to_string(kAttributeWords.size()) + " attributes");
  if (n_keywords > kKeywordWords.size()) throw ConfigError("at most " + std::to_string(kKeywordWords.size()) + " keywords");
  if (needed > vocab_size) {
    throw ConfigError("vocab_size " + std::to_string(vocab_size) + " cannot hold " + std::to_string(needed) +
                      " task tokens");
  }
  if (max_len < 12) throw ConfigError("synthetic task needs max_len >= 12");
  if (context_size < 1) throw ConfigError("synthetic task needs context_size >= 1");
  if (max_query_images > max_images || max_query_images > n_attributes) {
    throw ConfigError("max_query_images exceeds max_images or attribute count");
  }
  if (max_query_images > 4) throw ConfigError("max_query_images must be <= 4");
  if (d_img == 0) throw ConfigError("d_img must be positive");
  if (image_noise < 0.0) throw ConfigError("image_noise must be >= 0");
}

bool SyntheticWorld::is_keyword(int id) const {
  return std::find(keyword_tokens.begin(), keyword_tokens.end(), id) != keyword_tokens.end();
}

bool SyntheticWorld::is_attribute(int id) const {
  return std::find(attribute_tokens.begin(), attribute_tokens.end(), id) != attribute_tokens.end();
}

std::size_t SyntheticWorld::nearest_attribute(std::span<const double> feature) const {
  if (feature.size() != spec.d_img) throw DataError("image feature width mismatch");
  std::size_t best = 0;
  double best_d = std::numeric_limits<double>::infinity();
  for (std::size_t a = 0; a < codebook.size(); ++a) {
    const double d = distance(codebook[a], feature);
    if (d < best_d) {
      best_d = d;
      best = a;
    }
  }
  return best;
}

std::vector<double> SyntheticWorld::feature_for(const std::string& attribute) const {
  const auto id = vocab.find(attribute);
  if (!id) return {};
  for (std::size_t a = 0; a < attribute_tokens.size(); ++a)
    if (attribute_tokens[a] == *id) return codebook[a];
  return {};
}

SyntheticWorld build_world(const SyntheticSpec& spec) {
  spec.validate();
  SyntheticWorld w;
  w.spec = spec;
  for (std::size_t a = 0; a < spec.n_attributes; ++a) w.attribute_tokens.push_back(w.vocab.add(kAttributeWords[a]));
  for (std::size_t k = 0; k < spec.n_keywords; ++k) w.keyword_tokens.push_back(w.vocab.add(kKeywordWords[k]));
  for (const auto& t : kTemplateWords) w.vocab.add(t);
  for (std::size_t i = 0; w.vocab.size() < spec.vocab_size; ++i) {
    char name[16];
    std::snprintf(name, sizeof name, "w%03zu", i);
    w.filler_tokens.push_back(w.vocab.add(name));
  }

  Rng rng(splitmix64(spec.seed ^ 0xc0deb00cULL));
  std::normal_distribution<double> gauss(0.0, 1.0);
  for (int attempt = 0; attempt < 100; ++attempt) {
    w.codebook.assign(spec.n_attributes, std::vector<double>(spec.d_img));
    for (auto& v : w.codebook) {
      double norm = 0.0;
      for (double& x : v) {
        x = gauss(rng);
        norm += x * x;
      }
      norm = std::sqrt(norm);
      for (double& x : v) x /= norm;
    }
    double min_d = std::numeric_limits<double>::infinity();
    for (std::size_t a = 0; a < spec.n_attributes; ++a)
      for (std::size_t b = a + 1; b < spec.n_attributes; ++b) min_d = std::min(min_d, distance(w.codebook[a], w.codebook[b]));
    if (min_d > 0.5) return w;
  }
  throw ConfigError("could not draw a codebook with pairwise distance > 0.5; increase d_img");
}

std::vector<int> render_response(const SyntheticWorld& w, const DialogueLatent& latent) {
  std::vector<int> r;
  if (latent.attributes.empty()) {
    r = words(w, {"sorry", "no"});
    r.push_back(latent.keyword);
    for (int t : words(w, {"pictures", "."})) r.push_back(t);
  } else {
    r = words(w, {"the"});
    r.push_back(latent.keyword);
    for (int t : words(w, {"comes", "in"})) r.push_back(t);
    for (std::size_t i = 0; i < latent.attributes.size(); ++i) {
      if (i) r.push_back(w.vocab.id("and"));
      r.push_back(latent.attributes[i]);
    }
    r.push_back(w.vocab.id("."));
  }
  r.push_back(kEos);
  return r;
}

std::vector<DialogueSample> generate_synthetic_corpus(const SyntheticWorld& w, std::size_t n_samples) {
  if (n_samples == 0) throw ContractError("generate_synthetic_corpus: n_samples must be >= 1");
  const SyntheticSpec& spec = w.spec;
  const std::vector<std::vector<int>> openers = {
      words(w, {"i", "am", "looking", "for", "a"}), words(w, {"i", "want", "a"}),
      words(w, {"do", "you", "have", "a"}), words(w, {"show", "me", "a"}), words(w, {"i", "need", "a", "new"})};
  const std::vector<std::vector<int>> queries = {
      words(w, {"what", "about", "these", "?"}), words(w, {"show", "me", "similar", "ones"}),
      words(w, {"do", "you", "have", "it", "like", "this", "?"}), words(w, {"i", "like", "these"})};
  const std::vector<int> system_turn = words(w, {"sure", "here", "are", "some", "options"});
  const std::vector<int> question_mark = words(w, {"?"});

  std::vector<DialogueSample> out;
  out.reserve(n_samples);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  for (std::size_t i = 0; i < n_samples; ++i) {
    Rng rng(splitmix64(spec.seed ^ splitmix64(i + 1)));
    DialogueSample s;
    s.id = i;
    s.conversation_start = true;
    DialogueLatent latent;
    latent.keyword = w.keyword_tokens[pick(w.keyword_tokens.size(), rng)];

    const std::size_t n_context = 1 + pick(spec.context_size, rng);
    Utterance first;
    first.speaker = Speaker::user;
    first.tokens = openers[pick(openers.size(), rng)];
    first.tokens.push_back(latent.keyword);
    if (unit(rng) < 0.3) first.tokens.push_back(question_mark[0]);
    append_fillers(w, first.tokens, 3, rng);
    if (unit(rng) < 0.3) add_distractors(w, first, 1, rng);
    s.context.push_back(std::move(first));

    for (std::size_t c = 1; c < n_context; ++c) {
      Utterance turn;
      turn.speaker = (c % 2 == 1) ? Speaker::system : Speaker::user;
      if (unit(rng) < 0.25) {
        turn.tokens = {kImgCtx};
        add_distractors(w, turn, 1 + pick(2, rng), rng);
      } else {
        turn.tokens = system_turn;
        append_fillers(w, turn.tokens, 2, rng);
        add_distractors(w, turn, pick(3, rng), rng);
      }
      s.context.push_back(std::move(turn));
    }

    s.query.speaker = Speaker::user;
    s.query.tokens = queries[pick(queries.size(), rng)];
    append_fillers(w, s.query.tokens, 2, rng);
    std::size_t n_images = 0;
    if (spec.max_query_images > 0 && unit(rng) >= 0.2) n_images = 1 + pick(spec.max_query_images, rng);
    std::vector<std::size_t> chosen;
    while (chosen.size() < n_images) {
      const std::size_t a = pick(w.attribute_tokens.size(), rng);
      if (std::find(chosen.begin(), chosen.end(), a) == chosen.end()) chosen.push_back(a);
    }
    for (std::size_t a : chosen) {
      s.query.image_features.push_back(noisy_feature(w, a, rng));
      latent.attributes.push_back(w.attribute_tokens[a]);
    }
    std::sort(latent.attributes.begin(), latent.attributes.end());
    s.response = render_response(w, latent);
    out.push_back(std::move(s));
  }
  return out;
}

DialogueLatent recover_latent(const DialogueSample& sample, const SyntheticWorld& world) {
  DialogueLatent latent;
  if (!sample.context.empty()) {
    for (int t : sample.context.front().tokens) {
      if (world.is_keyword(t)) {
        latent.keyword = t;
        break;
      }
    }
  }
  for (const auto& f : sample.query.image_features)
    latent.attributes.push_back(world.attribute_tokens[world.nearest_attribute(f)]);
  std::sort(latent.attributes.begin(), latent.attributes.end());
  return latent;
}

std::vector<int> oracle_respond(const DialogueSample& sample, const SyntheticWorld& world) {
  return render_response(world, recover_latent(sample, world));
}

const char* to_string(Split split) {
  switch (split) {
    case Split::train:
      return "train";
    case Split::valid:
      return "valid";
    case Split::test:
      return "test";
  }
  return "?";
}

std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

Split split_of(std::uint64_t sample_id, std::uint64_t seed) {
  const std::uint64_t bucket = splitmix64(splitmix64(seed ^ 0x5eed5011ULL) ^ sample_id) % 10;
  if (bucket < 8) return Split::train;
  return bucket == 8 ? Split::valid : Split::test;
}

CorpusSplits split_corpus(std::span<const DialogueSample> samples, std::uint64_t seed) {
  CorpusSplits out;
  for (const auto& s : samples) {
    switch (split_of(s.id, seed)) {
      case Split::train:
        out.train.push_back(s);
        break;
      case Split::valid:
        out.valid.push_back(s);
        break;
      case Split::test:
        out.test.push_back(s);
        break;
    }
  }
  return out;
}

void save_world_spec(const std::filesystem::path& path, const SyntheticSpec& spec) {
  nlohmann::json j{{"vocab_size", spec.vocab_size},   {"n_attributes", spec.n_attributes},
                   {"n_keywords", spec.n_keywords},   {"d_img", spec.d_img},
                   {"max_len", spec.max_len},         {"context_size", spec.context_size},
                   {"max_images", spec.max_images},   {"max_query_images", spec.max_query_images},
                   {"image_noise", spec.image_noise}, {"seed", spec.seed}};
  std::ofstream out(path);
  if (!out) throw DataError("cannot write " + path.string());
  out << j.dump(2) << '\n';
}

SyntheticSpec load_world_spec(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot read " + path.string());
  try {
    const auto j = nlohmann::json::parse(in);
    SyntheticSpec s;
    s.vocab_size = j.at("vocab_size");
    s.n_attributes = j.at("n_attributes");
    s.n_keywords = j.at("n_keywords");
    s.d_img = j.at("d_img");
    s.max_len = j.at("max_len");
    s.context_size = j.at("context_size");
    s.max_images = j.at("max_images");
    s.max_query_images = j.at("max_query_images");
    s.image_noise = j.at("image_noise");
    s.seed = j.at("seed");
    return s;
  } catch (const nlohmann::json::exception& e) {
    throw DataError(path.string() + ": " + e.what());
  }
}

void write_dataset(const std::filesystem::path& dir, const SyntheticWorld& world, const CorpusSplits& splits) {
  std::filesystem::create_directories(dir);
  save_corpus(dir / "train.jsonl", splits.train);
  save_corpus(dir / "valid.jsonl", splits.valid);
  save_corpus(dir / "test.jsonl", splits.test);
  world.vocab.save(dir / "vocab.txt");
  save_world_spec(dir / "world.json", world.spec);
}

}  // namespace mmdial
