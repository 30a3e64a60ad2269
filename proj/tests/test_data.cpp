#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <random>
#include <fstream>
#include <set>

#include "mmdial/data.hpp"
#include "mmdial/metrics.hpp"
#include "mmdial/synthetic.hpp"
#include "mmdial/tensor.hpp"

using namespace mmdial;
namespace fs = std::filesystem;

namespace {

fs::path temp_dir(const std::string& name) {
  fs::path p = fs::temp_directory_path() / ("mmdial_test_" + name);
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

std::string serialize_all(const std::vector<DialogueSample>& corpus) {
  std::string out;
  for (const auto& s : corpus) out += serialize_sample(s) + "\n";
  return out;
}

DialogueSample random_sample(std::mt19937_64& rng, std::uint64_t id, std::size_t d_img) {
  std::uniform_int_distribution<int> len(1, 7), tok(kNumReserved, 40), imgs(0, 3), ctx(0, 3);
  std::normal_distribution<double> nd(0.0, 1.0);
  auto utt = [&](Speaker sp) {
    Utterance u{sp, {}, {}};
    for (int i = len(rng); i > 0; --i) u.tokens.push_back(tok(rng));
    for (int i = imgs(rng); i > 0; --i) {
      std::vector<double> f(d_img);
      for (double& x : f) x = nd(rng);
      u.image_features.push_back(f);
    }
    return u;
  };
  DialogueSample s;
  s.id = id;
  s.conversation_start = id % 2 == 0;
  for (int c = ctx(rng); c > 0; --c) s.context.push_back(utt(c % 2 ? Speaker::user : Speaker::system));
  s.query = utt(Speaker::user);
  for (int i = len(rng); i > 0; --i) s.response.push_back(tok(rng));
  s.response.push_back(kEos);
  return s;
}

}  // namespace

TEST_SUITE("data") {

TEST_CASE("vocabulary reserves the special ids") {
  Vocabulary v;
  CHECK(v.size() == 5);
  CHECK(v.id("<pad>") == kPad);
  CHECK(v.id("<bos>") == kBos);
  CHECK(v.id("<eos>") == kEos);
  CHECK(v.id("<unk>") == kUnk);
  CHECK(v.id("<img>") == kImgCtx);
  const int red = v.add("red");
  CHECK(red == 5);
  CHECK(v.add("red") == red);
  CHECK(v.token(red) == "red");
  CHECK(v.id("nope") == kUnk);
  CHECK(v.encode("red nope") == std::vector<int>{red, kUnk});
  CHECK(v.decode(std::vector<int>{kBos, red, kEos}) == "red");

  fs::path dir = temp_dir("vocab");
  v.save(dir / "v.txt");
  Vocabulary w = Vocabulary::load(dir / "v.txt");
  CHECK(w.size() == v.size());
  for (int i = 0; i < static_cast<int>(v.size()); ++i) CHECK(w.token(i) == v.token(i));
}

TEST_CASE("corpus generation is deterministic") {
  SyntheticSpec spec;
  const auto a = generate_synthetic_corpus(build_world(spec), 200);
  const auto b = generate_synthetic_corpus(build_world(spec), 200);
  CHECK(serialize_all(a) == serialize_all(b));
  spec.seed = 99;
  CHECK(serialize_all(generate_synthetic_corpus(build_world(spec), 200)) != serialize_all(a));
}

TEST_CASE("synthetic corpus properties") {
  const SyntheticWorld world = build_world(SyntheticSpec{});
  const auto corpus = generate_synthetic_corpus(world, 1000);
  for (const auto& s : corpus) {
    CHECK(ids_in_range(s, world.spec.vocab_size));
    REQUIRE(!s.response.empty());
    CHECK(s.response.back() == kEos);
    CHECK(s.context.size() >= 1);
    CHECK(s.context.size() <= world.spec.context_size);
    CHECK(s.response.size() <= world.spec.max_len);
    bool has_attr = false;
    for (int t : s.response) has_attr = has_attr || world.is_attribute(t);
    CHECK(has_attr == !s.query.image_features.empty());
    // The keyword is said in the oldest context turn and named in the response.
    int keyword = -1;
    for (int t : s.response)
      if (world.is_keyword(t)) keyword = t;
    REQUIRE(keyword >= 0);
    bool keyword_in_first = false;
    for (int t : s.context.front().tokens) keyword_in_first = keyword_in_first || t == keyword;
    CHECK(keyword_in_first);
  }
}

TEST_CASE("codebook vectors are unit length and well separated") {
  const SyntheticWorld world = build_world(SyntheticSpec{});
  for (std::size_t a = 0; a < world.codebook.size(); ++a) {
    double norm = 0.0;
    for (double v : world.codebook[a]) norm += v * v;
    CHECK(norm == doctest::Approx(1.0).epsilon(1e-12));
    for (std::size_t b = a + 1; b < world.codebook.size(); ++b) {
      double dist = 0.0;
      for (std::size_t k = 0; k < world.codebook[a].size(); ++k)
        dist += (world.codebook[a][k] - world.codebook[b][k]) * (world.codebook[a][k] - world.codebook[b][k]);
      CHECK(std::sqrt(dist) > 0.5);
    }
    CHECK(world.nearest_attribute(world.codebook[a]) == a);
  }
}

TEST_CASE("oracle responder reproduces every reference") {
  const SyntheticWorld world = build_world(SyntheticSpec{});
  const auto corpus = generate_synthetic_corpus(world, 2000);
  std::vector<TokenSeq> cands, refs;
  for (const auto& s : corpus) {
    cands.push_back(oracle_respond(s, world));
    refs.push_back(s.response);
    CHECK(cands.back() == s.response);
  }
  CHECK(score_corpus(cands, refs).bleu[3] == 100.0);
}

TEST_CASE("spec inconsistencies are config errors") {
  SyntheticSpec spec;
  spec.n_attributes = 60;
  CHECK_THROWS_AS(build_world(spec), ConfigError);
  spec = SyntheticSpec{};
  spec.vocab_size = 40;
  CHECK_THROWS_AS(build_world(spec), ConfigError);
  CHECK_THROWS_AS(generate_synthetic_corpus(build_world(SyntheticSpec{}), 0), ContractError);
}

TEST_CASE("splits are 80/10/10, disjoint and seed-stable") {
  const auto corpus = generate_synthetic_corpus(build_world(SyntheticSpec{}), 5000);
  const CorpusSplits s = split_corpus(corpus, 1234);
  CHECK(s.train.size() + s.valid.size() + s.test.size() == corpus.size());
  CHECK(std::abs(double(s.train.size()) / 5000.0 - 0.8) < 0.03);
  CHECK(std::abs(double(s.valid.size()) / 5000.0 - 0.1) < 0.03);
  std::set<std::uint64_t> ids;
  for (const auto* part : {&s.train, &s.valid, &s.test})
    for (const auto& x : *part) CHECK(ids.insert(x.id).second);
  for (const auto& x : s.valid) CHECK(split_of(x.id, 1234) == Split::valid);
  const CorpusSplits again = split_corpus(corpus, 1234);
  CHECK(serialize_all(again.test) == serialize_all(s.test));
}

TEST_CASE("batching pads and masks") {
  DialogueSample a, b;
  a.id = 1;
  a.query = {Speaker::user, {5, 6, 7}, {}};
  a.response = {8, kEos};
  b.id = 2;
  b.query = {Speaker::user, {5, 6, 7, 8, 9}, {{1.0, 2.0}}};
  b.response = {9, 10, 11, kEos};
  SUBCASE("equal lengths need no padding") {
    std::vector<DialogueSample> same{a, a};
    Batch batch = batch_and_pad(same, 16, 2);
    CHECK(batch.query.max_tokens == 3);
    for (auto m : batch.query.token_mask) CHECK(m == 1);
    for (auto m : batch.response_mask) CHECK(m == 1);
  }
  SUBCASE("lengths 3 and 5 pad to 5") {
    std::vector<DialogueSample> mixed{a, b};
    Batch batch = batch_and_pad(mixed, 16, 2);
    CHECK(batch.query.max_tokens == 5);
    int row0 = 0, row1 = 0;
    for (std::size_t t = 0; t < 5; ++t) {
      row0 += batch.query.token_mask[t];
      row1 += batch.query.token_mask[5 + t];
    }
    CHECK(row0 == 3);
    CHECK(row1 == 5);
    CHECK(batch.query.tokens[3] == kPad);
    CHECK(batch.query.max_images == 1);
    CHECK(batch.query.image_mask == std::vector<std::uint8_t>{0, 1});
    CHECK(batch.query.images == std::vector<double>{0.0, 0.0, 1.0, 2.0});
  }
  CHECK_THROWS_AS(batch_and_pad(std::span<const DialogueSample>{}, 16, 2), ContractError);
}

TEST_CASE("over-long sequences are truncated tail-first for inputs and head-first for responses") {
  DialogueSample s;
  s.query = {Speaker::user, {5, 6, 7, 8, 9, 10}, {}};
  s.response = {11, 12, 13, 14, 15, kEos};
  Batch batch = batch_and_pad(std::span<const DialogueSample>(&s, 1), 4, 2);
  CHECK(batch.truncations == 2);
  CHECK(batch.query.tokens == std::vector<int>{7, 8, 9, 10});
  CHECK(batch.response == std::vector<int>{11, 12, 13, kEos});
}

TEST_CASE("unbatch inverts batch for random corpora") {
  std::mt19937_64 rng(5);
  for (int corpus = 0; corpus < 50; ++corpus) {
    std::vector<DialogueSample> samples;
    const std::size_t n = 1 + rng() % 6;
    for (std::size_t i = 0; i < n; ++i) samples.push_back(random_sample(rng, i, 3));
    CHECK(unbatch(batch_and_pad(samples, 16, 3)) == samples);
  }
}

TEST_CASE("corpus files round-trip") {
  std::mt19937_64 rng(6);
  std::vector<DialogueSample> samples;
  for (std::uint64_t i = 0; i < 20; ++i) samples.push_back(random_sample(rng, i, 4));
  fs::path dir = temp_dir("corpus");
  save_corpus(dir / "c.jsonl", samples);
  const auto loaded = load_corpus(dir / "c.jsonl");
  REQUIRE(loaded.size() == samples.size());
  for (std::size_t i = 0; i < samples.size(); ++i) {
    CHECK(loaded[i].id == samples[i].id);
    CHECK(loaded[i].response == samples[i].response);
    CHECK(loaded[i].query.tokens == samples[i].query.tokens);
    REQUIRE(loaded[i].query.image_features.size() == samples[i].query.image_features.size());
    for (std::size_t j = 0; j < samples[i].query.image_features.size(); ++j)
      for (std::size_t k = 0; k < 4; ++k)
        CHECK(std::abs(loaded[i].query.image_features[j][k] - samples[i].query.image_features[j][k]) < 1e-9);
  }

  std::ofstream(dir / "empty.jsonl").close();
  CHECK(load_corpus(dir / "empty.jsonl").empty());
}

TEST_CASE("hand-written fixture parses") {
  fs::path dir = temp_dir("fixture");
  {
    std::ofstream f(dir / "fixture.jsonl");
    f << R"({"version":1,"id":7,"conversation_start":true,"context":[{"speaker":"user","tokens":[9,10],"image_features":[]}],"query":{"speaker":"user","tokens":[4],"image_features":[[0.5,-1.25]]},"response":[11,12,2]})"
      << "\n"
      << R"({"version":1,"id":8,"conversation_start":false,"context":[],"query":{"speaker":"system","tokens":[6,6,6],"image_features":[]},"response":[2]})"
      << "\n";
  }
  const auto s = load_corpus(dir / "fixture.jsonl");
  REQUIRE(s.size() == 2);
  CHECK(s[0].id == 7);
  CHECK(s[0].conversation_start);
  REQUIRE(s[0].context.size() == 1);
  CHECK(s[0].context[0].speaker == Speaker::user);
  CHECK(s[0].context[0].tokens == std::vector<int>{9, 10});
  CHECK(s[0].query.tokens == std::vector<int>{kImgCtx});
  CHECK(s[0].query.image_features == std::vector<std::vector<double>>{{0.5, -1.25}});
  CHECK(s[0].response == std::vector<int>{11, 12, kEos});
  CHECK(s[1].id == 8);
  CHECK_FALSE(s[1].conversation_start);
  CHECK(s[1].context.empty());
  CHECK(s[1].query.speaker == Speaker::system);
  CHECK(s[1].response == std::vector<int>{kEos});
}

TEST_CASE("malformed lines report their line number") {
  fs::path dir = temp_dir("bad");
  {
    std::ofstream f(dir / "bad.jsonl");
    f << serialize_sample(DialogueSample{0, {}, {Speaker::user, {5}, {}}, {kEos}, true}) << "\n{not json\n";
  }
  try {
    load_corpus(dir / "bad.jsonl");
    FAIL("expected DataError");
  } catch (const DataError& e) {
    CHECK(std::string(e.what()).find(":2:") != std::string::npos);
  }
  {
    std::ofstream f(dir / "v2.jsonl");
    f << R"({"version":2,"id":0,"conversation_start":true,"context":[],"query":{"speaker":"user","tokens":[5],"image_features":[]},"response":[2]})"
      << "\n";
  }
  CHECK_THROWS_AS(load_corpus(dir / "v2.jsonl"), DataError);
}

TEST_CASE("dataset directory holds splits, vocabulary and world spec") {
  SyntheticSpec spec;
  spec.seed = 77;
  const SyntheticWorld world = build_world(spec);
  const auto corpus = generate_synthetic_corpus(world, 100);
  fs::path dir = temp_dir("dataset");
  write_dataset(dir, world, split_corpus(corpus, spec.seed));
  for (const char* f : {"train.jsonl", "valid.jsonl", "test.jsonl", "vocab.txt", "world.json"}) CHECK(fs::exists(dir / f));
  const SyntheticSpec back = load_world_spec(dir / "world.json");
  CHECK(back.seed == 77);
  CHECK(build_world(back).codebook == world.codebook);
  CHECK(Vocabulary::load(dir / "vocab.txt").size() == world.vocab.size());
}

}  // TEST_SUITE
