#include "mmdial/trainer.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <fstream>
#include <iostream>
#include <json.hpp>
#include <numeric>
#include <sstream>

namespace mmdial {

using json = nlohmann::json;

const char* to_string(HistoryMode mode) { return mode == HistoryMode::trained ? "trained" : "fixed"; }

HistoryMode parse_history_mode(const std::string& text) {
  if (text == "trained" || text == "training") return HistoryMode::trained;
  if (text == "fixed") return HistoryMode::fixed;
  throw ConfigError("history_mode must be 'trained' or 'fixed', got '" + text + "'");
}

void TrainConfig::validate() const {
  model.validate();
  if (!(lr > 0.0)) throw ConfigError("lr must be positive");
  if (batch_size < 1) throw ConfigError("batch_size must be >= 1");
  if (precision != 64) throw ConfigError("only precision 64 is supported");
  if (target_bleu4 < 0.0 || target_bleu4 > 100.0) throw ConfigError("target_bleu4 must lie in [0, 100]");
}

std::string TrainConfig::to_json() const {
  json j{{"lr", lr},
         {"batch_size", batch_size},
         {"epochs", epochs},
         {"history_mode", mmdial::to_string(history_mode)},
         {"seed", seed},
         {"precision", precision},
         {"warmup_steps", warmup_steps},
         {"target_bleu4", target_bleu4},
         {"eval_limit", eval_limit},
         {"n_layers", model.n_layers},
         {"d_model", model.d_model},
         {"n_heads", model.n_heads},
         {"p_net", model.p_net},
         {"h_len", model.h_len},
         {"max_images", model.max_images},
         {"max_len", model.max_len},
         {"context_size", model.context_size},
         {"vocab_size", model.vocab_size},
         {"d_ff", model.d_ff},
         {"d_img", model.d_img},
         {"tie_output", model.tie_output},
         {"dropout_granularity",
          model.dropout_granularity == DropoutGranularity::per_step ? "per_step" : "per_example"}};
  return j.dump(2);
}

TrainConfig TrainConfig::from_json(const std::string& json_text, TrainConfig base) {
  json j;
  try {
    j = json::parse(json_text);
  } catch (const json::parse_error& e) {
    throw ConfigError(std::string("malformed config: ") + e.what());
  }
  if (!j.is_object()) throw ConfigError("config must be a JSON object");
  TrainConfig c = std::move(base);
  try {
    for (const auto& [key, value] : j.items()) {
      if (key == "lr") c.lr = value;
      else if (key == "batch_size") c.batch_size = value;
      else if (key == "epochs") c.epochs = value;
      else if (key == "history_mode") c.history_mode = parse_history_mode(value.get<std::string>());
      else if (key == "seed") c.seed = value;
      else if (key == "precision") c.precision = value;
      else if (key == "warmup_steps") c.warmup_steps = value;
      else if (key == "target_bleu4") c.target_bleu4 = value;
      else if (key == "eval_limit") c.eval_limit = value;
      else if (key == "n_layers") c.model.n_layers = value;
      else if (key == "d_model") c.model.d_model = value;
      else if (key == "n_heads") c.model.n_heads = value;
      else if (key == "p_net") c.model.p_net = value;
      else if (key == "h_len") c.model.h_len = value;
      else if (key == "max_images") c.model.max_images = value;
      else if (key == "max_len") c.model.max_len = value;
      else if (key == "context_size") c.model.context_size = value;
      else if (key == "vocab_size") c.model.vocab_size = value;
      else if (key == "d_ff") c.model.d_ff = value;
      else if (key == "d_img") c.model.d_img = value;
      else if (key == "tie_output") c.model.tie_output = value;
      else if (key == "dropout_granularity") {
        const std::string g = value;
        if (g == "per_step") c.model.dropout_granularity = DropoutGranularity::per_step;
        else if (g == "per_example") c.model.dropout_granularity = DropoutGranularity::per_example;
        else throw ConfigError("dropout_granularity must be per_step or per_example");
      } else {
        throw ConfigError("unknown config key '" + key + "'");
      }
    }
  } catch (const json::exception& e) {
    throw ConfigError(std::string("bad config value: ") + e.what());
  }
  return c;
}

TrainConfig TrainConfig::from_json(const std::string& json_text) { return from_json(json_text, TrainConfig{}); }

MetricReport evaluate_model(const Model& model, std::span<const DialogueSample> samples,
                            std::vector<TokenSeq>* outputs) {
  std::vector<TokenSeq> candidates, references;
  candidates.reserve(samples.size());
  for (const auto& s : samples) {
    const auto inputs = encoder_inputs(s, model.config().context_size);
    candidates.push_back(generate_greedy(inputs, model, model.config().max_len));
    references.push_back(s.response);
  }
  if (outputs) *outputs = candidates;
  return score_corpus(candidates, references);
}

namespace {

std::set<std::string> frozen_names(HistoryMode mode) {
  if (mode == HistoryMode::fixed) return {"history"};
  return {};
}

void count_branches(std::vector<BranchCounts>& counts, const FusionSchedule& schedule) {
  for (std::size_t l = 0; l < schedule.u.size(); ++l) {
    switch (select_fusion_branch(schedule.p_net, schedule.u[l])) {
      case FusionBranch::text:
        ++counts[l].text;
        break;
      case FusionBranch::image:
        ++counts[l].image;
        break;
      case FusionBranch::mean:
        ++counts[l].mean;
        break;
    }
  }
}

void zero_all(const ParameterSet& params) {
  for (const auto& item : params.items()) {
    Tensor t = item.second;
    t.zero_grad();
  }
}

}  // namespace

Trainer::Trainer(const TrainConfig& config) : Trainer(config, Model(config.model, config.seed)) {}

Trainer::Trainer(const TrainConfig& config, Model model)
    : config_(config),
      model_(std::move(model)),
      adam_(model_.parameters(), AdamConfig{config.lr}, frozen_names(config.history_mode)),
      rng_(splitmix64(config.seed ^ 0x7a11ULL)),
      branches_(config.model.n_layers) {
  config_.validate();
}

double Trainer::train_step(std::span<const DialogueSample> batch) {
  if (batch.empty()) throw ContractError("train_step: empty batch");
  const ParameterSet& params = model_.parameters();
  zero_all(params);
  double tokens = 0.0;
  for (const auto& s : batch) tokens += static_cast<double>(s.response.size());

  const std::size_t layers = config_.model.n_layers;
  const bool per_example = config_.model.dropout_granularity == DropoutGranularity::per_example;
  FusionSchedule schedule = FusionSchedule::sample(config_.model.p_net, layers, rng_);
  double total = 0.0;
  try {
    for (std::size_t i = 0; i < batch.size(); ++i) {
      if (per_example && i > 0) schedule = FusionSchedule::sample(config_.model.p_net, layers, rng_);
      if (per_example || i == 0) count_branches(branches_, schedule);
      Tensor nll = response_nll(batch[i], model_, schedule);
      total += nll.item();
      backward(scale(nll, 1.0 / tokens));
    }
    const double loss = total / tokens;
    if (!std::isfinite(loss)) throw NumericError("non-finite training loss");
    if (config_.warmup_steps > 0) {
      const double frac = static_cast<double>(adam_.steps() + 1) / static_cast<double>(config_.warmup_steps);
      adam_.set_lr(config_.lr * std::min(1.0, frac));
    }
    adam_.step();
    return loss;
  } catch (const NumericError&) {
    current_tape().clear();
    zero_all(params);
    throw;
  }
}

TrainResult Trainer::fit(std::span<const DialogueSample> train, std::span<const DialogueSample> valid,
                         const TrainOptions& options) {
  if (train.empty()) throw ContractError("fit: empty training corpus");
  const auto start = std::chrono::steady_clock::now();
  TrainResult result;
  result.best_bleu4 = best_bleu4_;
  if (!options.checkpoint_dir.empty()) std::filesystem::create_directories(options.checkpoint_dir);

  std::vector<std::size_t> order(train.size());
  std::vector<DialogueSample> batch;
  while (epoch_ < config_.epochs) {
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::shuffle(order.begin(), order.end(), rng_);
    double epoch_loss = 0.0;
    std::size_t batches = 0;
    for (std::size_t b = 0; b < order.size(); b += config_.batch_size) {
      batch.clear();
      for (std::size_t i = b; i < std::min(order.size(), b + config_.batch_size); ++i) batch.push_back(train[order[i]]);
      double loss = 0.0;
      try {
        loss = train_step(batch);
      } catch (const NumericError& e) {
        result.halted = true;
        result.halt_reason = e.what();
        if (!options.checkpoint_dir.empty()) save(options.checkpoint_dir / "last_good.ckpt");
        result.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
        return result;
      }
      result.step_losses.push_back(loss);
      epoch_loss += loss;
      ++batches;
    }
    ++epoch_;

    EpochRecord record;
    record.epoch = epoch_;
    record.step = adam_.steps();
    record.train_loss = epoch_loss / static_cast<double>(std::max<std::size_t>(batches, 1));
    if (!valid.empty()) {
      const std::size_t n = config_.eval_limit ? std::min(config_.eval_limit, valid.size()) : valid.size();
      record.valid = evaluate_model(model_, valid.first(n));
      if (record.valid.bleu[3] > best_bleu4_) {
        best_bleu4_ = record.valid.bleu[3];
        best_model_ = std::make_unique<Model>(model_.clone());
        result.best_epoch = epoch_;
        if (!options.checkpoint_dir.empty()) save(options.checkpoint_dir / "best.ckpt");
      }
    }
    result.best_bleu4 = best_bleu4_;
    result.epochs.push_back(record);
    if (!options.checkpoint_dir.empty()) save(options.checkpoint_dir / "last.ckpt");
    if (!options.metrics_log.empty()) {
      std::ofstream log(options.metrics_log, std::ios::app);
      json line{{"epoch", record.epoch},           {"step", record.step},
                {"loss", record.train_loss},       {"bleu1", record.valid.bleu[0]},
                {"bleu2", record.valid.bleu[1]},   {"bleu3", record.valid.bleu[2]},
                {"bleu4", record.valid.bleu[3]},   {"nist", record.valid.nist}};
      log << line.dump() << '\n';
    }
    if (options.verbose) {
      std::clog << "epoch " << record.epoch << " step " << record.step << " loss " << record.train_loss
                << " valid BLEU-4 " << record.valid.bleu[3] << " NIST " << record.valid.nist << '\n';
    }
    if (options.on_epoch) options.on_epoch(record);
    if (config_.target_bleu4 > 0.0 && !valid.empty() && record.valid.bleu[3] >= config_.target_bleu4) {
      result.reached_target = true;
      break;
    }
  }
  result.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  return result;
}

std::vector<std::pair<std::string, Tensor>> export_parameters(const Model& model) {
  std::vector<std::pair<std::string, Tensor>> out;
  for (const auto& [name, t] : model.parameters().items()) out.emplace_back(name, t.clone());
  return out;
}

namespace {

void import_parameters(Model& model, const Checkpoint& ckpt) {
  for (const auto& [name, t] : model.parameters().items()) {
    const Tensor& src = ckpt.tensor(name);
    if (src.shape() != t.shape()) {
      throw DataError("checkpoint tensor " + name + " has shape " + shape_str(src.shape()) + ", model expects " +
                      shape_str(t.shape()));
    }
    Tensor dst = t;
    std::copy(src.data().begin(), src.data().end(), dst.data().begin());
  }
}

}  // namespace

Checkpoint Trainer::checkpoint() const {
  Checkpoint ckpt;
  ckpt.config_json = config_.to_json();
  std::ostringstream rng;
  rng << rng_;
  ckpt.rng_state = rng.str();
  ckpt.step = adam_.steps();
  ckpt.epoch = epoch_;
  ckpt.best_bleu4 = best_bleu4_;
  ckpt.tensors = export_parameters(model_);
  const auto& items = model_.parameters().items();
  for (std::size_t i = 0; i < items.size(); ++i) {
    ckpt.tensors.emplace_back("adam.m." + items[i].first,
                              Tensor::from(items[i].second.shape(), adam_.first_moments()[i]));
    ckpt.tensors.emplace_back("adam.v." + items[i].first,
                              Tensor::from(items[i].second.shape(), adam_.second_moments()[i]));
  }
  return ckpt;
}

void Trainer::save(const std::filesystem::path& path) const { write_checkpoint(path, checkpoint()); }

Model model_from_checkpoint(const Checkpoint& ckpt) {
  const TrainConfig config = TrainConfig::from_json(ckpt.config_json);
  Model model(config.model, config.seed);
  import_parameters(model, ckpt);
  return model;
}

Trainer Trainer::from_checkpoint(const Checkpoint& ckpt) {
  const TrainConfig config = TrainConfig::from_json(ckpt.config_json);
  Trainer trainer(config, model_from_checkpoint(ckpt));
  const auto& items = trainer.model_.parameters().items();
  for (std::size_t i = 0; i < items.size(); ++i) {
    const Tensor& m = ckpt.tensor("adam.m." + items[i].first);
    const Tensor& v = ckpt.tensor("adam.v." + items[i].first);
    trainer.adam_.first_moments()[i].assign(m.data().begin(), m.data().end());
    trainer.adam_.second_moments()[i].assign(v.data().begin(), v.data().end());
  }
  trainer.adam_.set_steps(ckpt.step);
  std::istringstream rng(ckpt.rng_state);
  rng >> trainer.rng_;
  if (!rng) throw DataError("checkpoint RNG state is corrupt");
  trainer.epoch_ = ckpt.epoch;
  trainer.best_bleu4_ = ckpt.best_bleu4;
  return trainer;
}

Trainer Trainer::load(const std::filesystem::path& path) { return from_checkpoint(read_checkpoint(path)); }

namespace {

AblationRow run_ablation(const TrainConfig& config, const CorpusSplits& data, std::string label, bool verbose) {
  Trainer trainer(config);
  TrainResult result = trainer.fit(data.train, data.valid);
  AblationRow row;
  row.label = std::move(label);
  row.p_net = config.model.p_net;
  row.history_mode = config.history_mode;
  row.seed = config.seed;
  row.best_valid_bleu4 = result.best_bleu4;
  row.test = evaluate_model(trainer.best_model(), data.test);
  if (verbose) {
    std::clog << row.label << " seed " << row.seed << ": valid BLEU-4 " << row.best_valid_bleu4 << ", test BLEU-4 "
              << row.test.bleu[3] << " (" << result.seconds << " s)\n";
  }
  return row;
}

}  // namespace

std::vector<AblationRow> ablate_pnet(const TrainConfig& base, const CorpusSplits& data, std::span<const double> grid,
                                     std::span<const std::uint64_t> seeds, bool verbose) {
  std::vector<AblationRow> rows;
  for (const double p : grid) {
    for (const std::uint64_t seed : seeds) {
      TrainConfig c = base;
      c.model.p_net = p;
      c.seed = seed;
      std::ostringstream label;
      label << "p=" << p;
      rows.push_back(run_ablation(c, data, label.str(), verbose));
    }
  }
  return rows;
}

std::vector<AblationRow> ablate_history(const TrainConfig& base, const CorpusSplits& data,
                                        std::span<const std::uint64_t> seeds, bool verbose) {
  std::vector<AblationRow> rows;
  for (const std::uint64_t seed : seeds) {
    for (const HistoryMode mode : {HistoryMode::trained, HistoryMode::fixed}) {
      TrainConfig c = base;
      c.seed = seed;
      c.history_mode = mode;
      rows.push_back(run_ablation(c, data, std::string("H ") + to_string(mode), verbose));
    }
  }
  return rows;
}

}  // namespace mmdial
