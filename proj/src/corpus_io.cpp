#include <fstream>
#include <json.hpp>

#include "mmdial/data.hpp"
#include "mmdial/tensor.hpp"

namespace mmdial {

using json = nlohmann::json;

namespace {

json utterance_to_json(const Utterance& u) {
  return json{{"speaker", u.speaker == Speaker::user ? "user" : "system"},
              {"tokens", u.tokens},
              {"image_features", u.image_features}};
}

Utterance utterance_from_json(const json& j) {
  Utterance u;
  const std::string speaker = j.at("speaker").get<std::string>();
  if (speaker == "user") {
    u.speaker = Speaker::user;
  } else if (speaker == "system") {
    u.speaker = Speaker::system;
  } else {
    throw DataError("unknown speaker '" + speaker + "'");
  }
  u.tokens = j.at("tokens").get<std::vector<int>>();
  u.image_features = j.at("image_features").get<std::vector<std::vector<double>>>();
  return u;
}

}  // namespace

std::string serialize_sample(const DialogueSample& s) {
  json j;
  j["version"] = kCorpusVersion;
  j["id"] = s.id;
  j["conversation_start"] = s.conversation_start;
  j["context"] = json::array();
  for (const auto& u : s.context) j["context"].push_back(utterance_to_json(u));
  j["query"] = utterance_to_json(s.query);
  j["response"] = s.response;
  return j.dump();
}

DialogueSample parse_sample(std::string_view line) {
  json j;
  try {
    j = json::parse(line);
  } catch (const json::parse_error& e) {
    throw DataError(std::string("malformed record: ") + e.what());
  }
  try {
    const int version = j.at("version").get<int>();
    if (version != kCorpusVersion) throw DataError("unknown corpus schema version " + std::to_string(version));
    DialogueSample s;
    s.id = j.at("id").get<std::uint64_t>();
    s.conversation_start = j.at("conversation_start").get<bool>();
    for (const auto& u : j.at("context")) s.context.push_back(utterance_from_json(u));
    s.query = utterance_from_json(j.at("query"));
    s.response = j.at("response").get<std::vector<int>>();
    return s;
  } catch (const json::exception& e) {
    throw DataError(std::string("malformed record: ") + e.what());
  }
}

void save_corpus(const std::filesystem::path& path, std::span<const DialogueSample> samples) {
  std::ofstream out(path);
  if (!out) throw DataError("cannot write " + path.string());
  for (const auto& s : samples) out << serialize_sample(s) << '\n';
}

std::vector<DialogueSample> load_corpus(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot read " + path.string());
  std::vector<DialogueSample> samples;
  std::string line;
  std::size_t number = 0;
  while (std::getline(in, line)) {
    ++number;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    try {
      samples.push_back(parse_sample(line));
    } catch (const DataError& e) {
      throw DataError(path.string() + ":" + std::to_string(number) + ": " + e.what());
    }
  }
  return samples;
}

}  // namespace mmdial
