// mmdial command-line entry point.
#include <CLI11.hpp>
#include <json.hpp>

#include <algorithm>
#include <cstdio>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "mmdial/checkpoint.hpp"
#include "mmdial/gradcheck.hpp"
#include "mmdial/synthetic.hpp"
#include "mmdial/trainer.hpp"

namespace fs = std::filesystem;
using json = nlohmann::json;
using namespace mmdial;

namespace {

std::string read_text(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot read " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

SyntheticWorld load_world(const fs::path& data_dir) { return build_world(load_world_spec(data_dir / "world.json")); }

std::vector<DialogueSample> load_split(const fs::path& data_dir, const std::string& split) {
  return load_corpus(data_dir / (split + ".jsonl"));
}

void print_table(std::ostream& out, const std::string& label, const MetricReport& r) {
  out << std::left << std::setw(10) << "split" << std::right << std::setw(8) << "samples" << std::setw(9) << "BLEU-1"
      << std::setw(9) << "BLEU-2" << std::setw(9) << "BLEU-3" << std::setw(9) << "BLEU-4" << std::setw(9) << "NIST"
      << "\n";
  out << std::left << std::setw(10) << label << std::right << std::setw(8) << r.samples << std::fixed
      << std::setprecision(2);
  for (double b : r.bleu) out << std::setw(9) << b;
  out << std::setw(9) << std::setprecision(4) << r.nist << "\n";
  out.unsetf(std::ios::fixed);
}

void print_ablation(std::ostream& out, const std::vector<AblationRow>& rows) {
  out << std::left << std::setw(16) << "setting" << std::right << std::setw(6) << "seed" << std::setw(11)
      << "valid-B4" << std::setw(9) << "BLEU-1" << std::setw(9) << "BLEU-2" << std::setw(9) << "BLEU-3"
      << std::setw(9) << "BLEU-4" << std::setw(9) << "NIST" << "\n"
      << std::fixed;
  for (const auto& r : rows) {
    out << std::left << std::setw(16) << r.label << std::right << std::setw(6) << r.seed << std::setprecision(2)
        << std::setw(11) << r.best_valid_bleu4;
    for (double b : r.test.bleu) out << std::setw(9) << b;
    out << std::setw(9) << std::setprecision(4) << r.test.nist << "\n";
  }
  out.unsetf(std::ios::fixed);
}

void write_ablation_json(const fs::path& path, const std::vector<AblationRow>& rows) {
  std::ofstream out(path);
  if (!out) throw DataError("cannot write " + path.string());
  for (const auto& r : rows) {
    out << json{{"label", r.label},
                {"p_net", r.p_net},
                {"history_mode", to_string(r.history_mode)},
                {"seed", r.seed},
                {"valid_bleu4", r.best_valid_bleu4},
                {"bleu1", r.test.bleu[0]},
                {"bleu2", r.test.bleu[1]},
                {"bleu3", r.test.bleu[2]},
                {"bleu4", r.test.bleu[3]},
                {"nist", r.test.nist}}
               .dump()
        << "\n";
  }
}

// Options shared by train and the ablation commands. Unset flags leave the
// config file (or defaults) untouched.
struct TrainFlags {
  std::string config_file;
  bool paper_scale = false;
  std::map<std::string, std::string> values;
  bool untie = false;

  void attach(CLI::App* app) {
    app->add_option("--config", config_file, "JSON config file; flags override it")->check(CLI::ExistingFile);
    app->add_flag("--paper-scale", paper_scale, "d_model 512, d_ff 2048, 8 heads, batch 150, 10 epochs");
    app->add_flag("--untie-output", untie, "separate output projection instead of the embedding table");
    for (const char* key : {"lr", "batch_size", "epochs", "history_mode", "seed", "precision", "warmup_steps",
                            "target_bleu4", "eval_limit", "n_layers", "d_model", "n_heads", "p_net", "h_len", "d_ff",
                            "dropout_granularity"}) {
      std::string flag = std::string("--") + key;
      std::replace(flag.begin(), flag.end(), '_', '-');
      app->add_option(flag, values[key]);
    }
  }

  TrainConfig resolve(const SyntheticSpec& world) const {
    TrainConfig c;
    c.model.vocab_size = world.vocab_size;
    c.model.d_img = world.d_img;
    c.model.max_len = world.max_len;
    c.model.context_size = world.context_size;
    c.model.max_images = world.max_images;
    if (paper_scale) {
      c.model = c.model.paper_scale();
      c.batch_size = 150;
      c.epochs = 10;
    }
    if (!config_file.empty()) c = TrainConfig::from_json(read_text(config_file), c);
    json overrides = json::object();
    for (const auto& [key, text] : values) {
      if (text.empty()) continue;
      if (key == "history_mode" || key == "dropout_granularity") {
        overrides[key] = text;
      } else {
        try {
          overrides[key] = json::parse(text);
        } catch (const json::exception&) {
          throw ConfigError("--" + key + ": not a number: " + text);
        }
      }
    }
    if (untie) overrides["tie_output"] = false;
    c = TrainConfig::from_json(overrides.dump(), c);
    c.validate();
    return c;
  }
};

int cmd_gen_data(const fs::path& out, std::size_t samples, const SyntheticSpec& spec) {
  const SyntheticWorld world = build_world(spec);
  const auto corpus = generate_synthetic_corpus(world, samples);
  const auto splits = split_corpus(corpus, spec.seed);
  write_dataset(out, world, splits);
  std::cout << "wrote " << out.string() << ": train " << splits.train.size() << ", valid " << splits.valid.size()
            << ", test " << splits.test.size() << ", vocab " << world.vocab.size() << "\n";
  return 0;
}

int cmd_train(const fs::path& data, const fs::path& out, const TrainFlags& flags, std::size_t train_limit,
              bool resume) {
  const SyntheticSpec spec = load_world_spec(data / "world.json");
  auto train = load_split(data, "train");
  const auto valid = load_split(data, "valid");
  if (train_limit && train.size() > train_limit) train.resize(train_limit);
  fs::create_directories(out);

  const fs::path last = out / "last.ckpt";
  Trainer trainer = resume && fs::exists(last) ? Trainer::load(last) : Trainer(flags.resolve(spec));
  if (resume && fs::exists(last)) std::cout << "resuming from " << last.string() << " at epoch " << trainer.epoch() << "\n";
  std::cout << "config " << trainer.config().to_json() << "\n";
  std::cout << "parameters " << trainer.model().parameters().scalar_count() << ", train " << train.size()
            << ", valid " << valid.size() << "\n";

  TrainOptions options;
  options.checkpoint_dir = out;
  options.metrics_log = out / "metrics.jsonl";
  options.verbose = true;
  const TrainResult result = trainer.fit(train, valid, options);
  if (result.halted) {
    std::cerr << "training halted: " << result.halt_reason << "\n";
    return 3;
  }
  std::cout << "best valid BLEU-4 " << result.best_bleu4 << " at epoch " << result.best_epoch << " ("
            << result.seconds << " s)\n";
  return 0;
}

struct ResponseFile {
  std::map<std::uint64_t, TokenSeq> by_id;
};

ResponseFile read_responses(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot read " + path.string());
  ResponseFile f;
  std::string line;
  std::size_t n = 0;
  while (std::getline(in, line)) {
    ++n;
    if (line.empty()) continue;
    try {
      const json j = json::parse(line);
      f.by_id[j.at("id").get<std::uint64_t>()] = j.at("tokens").get<TokenSeq>();
    } catch (const json::exception& e) {
      throw DataError(path.string() + ":" + std::to_string(n) + ": " + e.what());
    }
  }
  return f;
}

std::vector<TokenSeq> produce(const std::vector<DialogueSample>& samples, const fs::path& checkpoint, bool oracle,
                              const fs::path& data) {
  std::vector<TokenSeq> out;
  out.reserve(samples.size());
  if (oracle) {
    const SyntheticWorld world = load_world(data);
    for (const auto& s : samples) out.push_back(oracle_respond(s, world));
    return out;
  }
  const Model model = model_from_checkpoint(read_checkpoint(checkpoint));
  for (const auto& s : samples) {
    const auto inputs = encoder_inputs(s, model.config().context_size);
    out.push_back(generate_greedy(inputs, model, model.config().max_len));
  }
  return out;
}

int cmd_eval(const fs::path& data, const std::string& split, const fs::path& checkpoint, const fs::path& responses,
             bool oracle) {
  const auto samples = load_split(data, split);
  std::vector<TokenSeq> cands, refs;
  if (!responses.empty()) {
    const ResponseFile f = read_responses(responses);
    for (const auto& s : samples) {
      auto it = f.by_id.find(s.id);
      if (it == f.by_id.end()) throw DataError("no response for sample " + std::to_string(s.id));
      cands.push_back(it->second);
    }
  } else {
    cands = produce(samples, checkpoint, oracle, data);
  }
  for (const auto& s : samples) refs.push_back(s.response);
  print_table(std::cout, split, score_corpus(cands, refs));
  return 0;
}

int cmd_generate(const fs::path& data, const std::string& split, const fs::path& checkpoint, const fs::path& out,
                 bool oracle) {
  const auto samples = load_split(data, split);
  const auto outputs = produce(samples, checkpoint, oracle, data);
  const Vocabulary vocab = Vocabulary::load(data / "vocab.txt");
  std::ofstream f(out);
  if (!f) throw DataError("cannot write " + out.string());
  for (std::size_t i = 0; i < samples.size(); ++i) {
    f << json{{"id", samples[i].id}, {"tokens", outputs[i]}, {"text", vocab.decode(outputs[i])}}.dump() << "\n";
  }
  std::cout << "wrote " << samples.size() << " responses to " << out.string() << "\n";
  return 0;
}

// Splits "show me [red] [blue] shoes" into words and attribute tags.
Utterance parse_chat_line(const std::string& line, const SyntheticWorld& world, std::string* error) {
  Utterance u;
  u.speaker = Speaker::user;
  std::istringstream words(line);
  std::string w;
  while (words >> w) {
    if (w.size() > 2 && w.front() == '[' && w.back() == ']') {
      const std::string attr = w.substr(1, w.size() - 2);
      auto feature = world.feature_for(attr);
      if (feature.empty()) {
        *error = "unknown attribute tag [" + attr + "]";
        return {};
      }
      if (u.image_features.size() >= world.spec.max_images) {
        *error = "at most " + std::to_string(world.spec.max_images) + " images per turn";
        return {};
      }
      u.image_features.push_back(std::move(feature));
    } else {
      u.tokens.push_back(world.vocab.id(w));
    }
  }
  if (u.tokens.empty() && !u.image_features.empty()) u.tokens.push_back(kImgCtx);
  return u;
}

int cmd_chat(const fs::path& checkpoint, const fs::path& data) {
  const Model model = model_from_checkpoint(read_checkpoint(checkpoint));
  const SyntheticWorld world = load_world(data);
  const std::size_t context_size = model.config().context_size;
  std::vector<Utterance> context;
  std::cout << "type a message; [attr] attaches that attribute's image, /reset clears context, /quit exits\n";
  std::string line;
  while (true) {
    std::cout << "> " << std::flush;
    if (!std::getline(std::cin, line)) break;
    if (line == "/quit") break;
    if (line == "/reset") {
      context.clear();
      std::cout << "(context cleared)\n";
      continue;
    }
    std::string error;
    Utterance query = parse_chat_line(line, world, &error);
    if (!error.empty()) {
      std::cout << "error: " << error << "\n";
      continue;
    }
    if (query.tokens.empty()) continue;
    if (context.empty()) std::clog << "[history] empty context: H_0 seeded from the learned history parameter\n";
    std::vector<Utterance> inputs = context;
    inputs.push_back(query);
    const auto reply = generate_greedy(inputs, model, model.config().max_len);
    std::cout << world.vocab.decode(reply) << "\n";
    context.push_back(query);
    TokenSeq said = reply;
    std::erase(said, kEos);
    if (said.empty()) said.push_back(kUnk);
    context.push_back({Speaker::system, said, {}});
    while (context.size() > context_size) context.erase(context.begin());
  }
  return 0;
}

int cmd_gradcheck(std::uint64_t seed, double tolerance) {
  const GradCheckReport r = grad_check_model(gradcheck_config(), seed, tolerance);
  for (const auto& [name, err] : r.per_parameter) std::cout << std::left << std::setw(40) << name << err << "\n";
  std::cout << "checked " << r.checked << " scalars, max relative error " << r.max_rel_error << " at "
            << r.worst.parameter << "[" << r.worst.index << "] (tolerance " << tolerance << "): "
            << (r.passed ? "PASS" : "FAIL") << "\n";
  return r.passed ? 0 : 1;
}

std::vector<std::uint64_t> seed_list(const std::vector<std::uint64_t>& given, std::size_t n) {
  if (!given.empty()) return given;
  std::vector<std::uint64_t> s;
  for (std::size_t i = 1; i <= n; ++i) s.push_back(i);
  return s;
}

CorpusSplits load_all(const fs::path& data, std::size_t train_limit) {
  CorpusSplits s{load_split(data, "train"), load_split(data, "valid"), load_split(data, "test")};
  if (train_limit && s.train.size() > train_limit) s.train.resize(train_limit);
  return s;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"mmdial: multimodal dialogue encoder with modality dropout and history updates"};
  app.require_subcommand(1);

  SyntheticSpec spec;
  std::size_t n_samples = 5000;
  fs::path gen_out;
  auto* gen = app.add_subcommand("gen-data", "generate the synthetic corpus");
  gen->add_option("--out", gen_out, "output directory")->required();
  gen->add_option("--samples", n_samples, "number of dialogues")->capture_default_str();
  gen->add_option("--seed", spec.seed)->capture_default_str();
  gen->add_option("--vocab-size", spec.vocab_size)->capture_default_str();
  gen->add_option("--n-attributes", spec.n_attributes)->capture_default_str();
  gen->add_option("--n-keywords", spec.n_keywords)->capture_default_str();
  gen->add_option("--d-img", spec.d_img)->capture_default_str();
  gen->add_option("--max-len", spec.max_len)->capture_default_str();
  gen->add_option("--context-size", spec.context_size)->capture_default_str();
  gen->add_option("--max-images", spec.max_images)->capture_default_str();
  gen->add_option("--max-query-images", spec.max_query_images)->capture_default_str();
  gen->add_option("--image-noise", spec.image_noise)->capture_default_str();

  fs::path data_dir, out_dir, checkpoint, responses, out_file;
  std::string split = "test";
  bool oracle = false, resume = false;
  std::size_t train_limit = 0;

  TrainFlags train_flags;
  auto* train = app.add_subcommand("train", "train a model on a generated corpus");
  train->add_option("--data", data_dir, "corpus directory from gen-data")->required()->check(CLI::ExistingDirectory);
  train->add_option("--out", out_dir, "checkpoint directory")->required();
  train->add_option("--train-limit", train_limit, "use only the first N training samples");
  train->add_flag("--resume", resume, "continue from <out>/last.ckpt when present");
  train_flags.attach(train);

  auto* eval = app.add_subcommand("eval", "score a checkpoint or a responses file on a split");
  eval->add_option("--data", data_dir)->required()->check(CLI::ExistingDirectory);
  eval->add_option("--split", split)->check(CLI::IsMember({"train", "valid", "test"}))->capture_default_str();
  auto* eval_src = eval->add_option_group("source");
  eval_src->add_option("--checkpoint", checkpoint)->check(CLI::ExistingFile);
  eval_src->add_option("--responses", responses)->check(CLI::ExistingFile);
  eval_src->add_flag("--oracle", oracle, "score the rule-based responder");
  eval_src->require_option(1);

  auto* gen_resp = app.add_subcommand("generate", "write greedy responses for a split");
  gen_resp->add_option("--data", data_dir)->required()->check(CLI::ExistingDirectory);
  gen_resp->add_option("--split", split)->check(CLI::IsMember({"train", "valid", "test"}))->capture_default_str();
  gen_resp->add_option("--out", out_file, "responses file (JSON lines)")->required();
  auto* gen_src = gen_resp->add_option_group("source");
  gen_src->add_option("--checkpoint", checkpoint)->check(CLI::ExistingFile);
  gen_src->add_flag("--oracle", oracle, "use the rule-based responder");
  gen_src->require_option(1);

  auto* chat = app.add_subcommand("chat", "interactive session with a trained model");
  chat->add_option("--checkpoint", checkpoint)->required()->check(CLI::ExistingFile);
  chat->add_option("--data", data_dir, "corpus directory (vocabulary and image codebook)")
      ->required()
      ->check(CLI::ExistingDirectory);

  std::uint64_t gc_seed = 7;
  double gc_tol = 1e-4;
  auto* gc = app.add_subcommand("gradcheck", "finite-difference check of every model parameter");
  gc->add_option("--seed", gc_seed)->capture_default_str();
  gc->add_option("--tolerance", gc_tol)->capture_default_str();

  std::vector<std::uint64_t> seeds;
  TrainFlags ablate_flags;
  auto* ap = app.add_subcommand("ablate-pnet", "sweep p_net over 0, 0.2, ..., 1.0");
  auto* ah = app.add_subcommand("ablate-history", "trained versus fixed history parameter");
  for (auto* sub : {ap, ah}) {
    sub->add_option("--data", data_dir)->required()->check(CLI::ExistingDirectory);
    sub->add_option("--seeds", seeds, "training seeds (default 1..3 for p_net, 1..5 for history)");
    sub->add_option("--train-limit", train_limit, "use only the first N training samples");
    sub->add_option("--out", out_file, "also write rows as JSON lines");
    ablate_flags.attach(sub);
  }

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    std::cerr << app.help();
    return e.get_exit_code() ? e.get_exit_code() : 2;
  }

  try {
    if (*gen) return cmd_gen_data(gen_out, n_samples, spec);
    if (*train) return cmd_train(data_dir, out_dir, train_flags, train_limit, resume);
    if (*eval) return cmd_eval(data_dir, split, checkpoint, responses, oracle);
    if (*gen_resp) return cmd_generate(data_dir, split, checkpoint, out_file, oracle);
    if (*chat) return cmd_chat(checkpoint, data_dir);
    if (*gc) return cmd_gradcheck(gc_seed, gc_tol);
    if (*ap || *ah) {
      const TrainConfig base = ablate_flags.resolve(load_world_spec(data_dir / "world.json"));
      const CorpusSplits splits = load_all(data_dir, train_limit);
      std::vector<AblationRow> rows;
      if (*ap) {
        rows = ablate_pnet(base, splits, kPnetGrid, seed_list(seeds, 3), true);
      } else {
        rows = ablate_history(base, splits, seed_list(seeds, 5), true);
      }
      print_ablation(std::cout, rows);
      if (!out_file.empty()) write_ablation_json(out_file, rows);
      return 0;
    }
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
