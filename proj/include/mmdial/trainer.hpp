#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "mmdial/checkpoint.hpp"
#include "mmdial/decoder.hpp"
#include "mmdial/metrics.hpp"
#include "mmdial/optim.hpp"
#include "mmdial/synthetic.hpp"

namespace mmdial {

enum class HistoryMode { trained, fixed };

const char* to_string(HistoryMode mode);
HistoryMode parse_history_mode(const std::string& text);

struct TrainConfig {
  ModelConfig model;
  double lr = 4e-4;
  std::size_t batch_size = 32;
  std::size_t epochs = 20;
  HistoryMode history_mode = HistoryMode::trained;
  std::uint64_t seed = 1;
  int precision = 64;
  std::size_t warmup_steps = 0;  // linear warmup; 0 keeps lr constant
  double target_bleu4 = 0.0;     // stop once valid BLEU-4 reaches this; 0 disables
  std::size_t eval_limit = 0;    // validation samples scored per epoch; 0 = all

  void validate() const;
  std::string to_json() const;
  /// Overrides fields present in `json_text` on top of `base`.
  static TrainConfig from_json(const std::string& json_text, TrainConfig base);
  static TrainConfig from_json(const std::string& json_text);
};

struct BranchCounts {
  std::size_t text = 0;
  std::size_t image = 0;
  std::size_t mean = 0;
};

struct EpochRecord {
  std::size_t epoch = 0;
  std::size_t step = 0;
  double train_loss = 0.0;
  MetricReport valid;
};

struct TrainResult {
  std::vector<double> step_losses;
  std::vector<EpochRecord> epochs;
  double best_bleu4 = -1.0;
  std::size_t best_epoch = 0;
  bool reached_target = false;
  bool halted = false;
  std::string halt_reason;
  double seconds = 0.0;
};

struct TrainOptions {
  std::filesystem::path checkpoint_dir;  // best.ckpt / last.ckpt; empty disables
  std::filesystem::path metrics_log;     // JSON lines appended per epoch; empty disables
  bool verbose = false;
  std::function<void(const EpochRecord&)> on_epoch;
};

/// Greedy-decodes every sample and scores against the references.
MetricReport evaluate_model(const Model& model, std::span<const DialogueSample> samples,
                            std::vector<TokenSeq>* outputs = nullptr);

class Trainer {
 public:
  explicit Trainer(const TrainConfig& config);
  static Trainer from_checkpoint(const Checkpoint& checkpoint);
  static Trainer load(const std::filesystem::path& path);

  /// Teacher-forced update on one batch; returns the mean token NLL.
  /// Throws NumericError (parameters untouched) on a non-finite loss or grad.
  double train_step(std::span<const DialogueSample> batch);

  /// Runs the remaining epochs, scoring valid each epoch and keeping the best
  /// model by valid BLEU-4.
  TrainResult fit(std::span<const DialogueSample> train, std::span<const DialogueSample> valid,
                  const TrainOptions& options = {});

  Checkpoint checkpoint() const;
  void save(const std::filesystem::path& path) const;

  const TrainConfig& config() const { return config_; }
  const Model& model() const { return model_; }
  Model& model() { return model_; }
  /// Best-by-valid model after fit(); the live model if fit() never scored.
  const Model& best_model() const { return best_model_ ? *best_model_ : model_; }
  std::size_t step() const { return adam_.steps(); }
  std::size_t epoch() const { return epoch_; }
  const std::vector<BranchCounts>& branch_counts() const { return branches_; }

 private:
  Trainer(const TrainConfig& config, Model model);

  TrainConfig config_;
  Model model_;
  Adam adam_;
  Rng rng_;
  std::size_t epoch_ = 0;
  double best_bleu4_ = -1.0;
  std::unique_ptr<Model> best_model_;
  std::vector<BranchCounts> branches_;
};

/// Model parameters as checkpoint tensors, and the reverse.
std::vector<std::pair<std::string, Tensor>> export_parameters(const Model& model);
Model model_from_checkpoint(const Checkpoint& checkpoint);

struct AblationRow {
  std::string label;
  double p_net = 0.0;
  HistoryMode history_mode = HistoryMode::trained;
  std::uint64_t seed = 0;
  double best_valid_bleu4 = 0.0;
  MetricReport test;
};

/// Trains one model per (p_net, seed) and scores the best-by-valid model on test.
std::vector<AblationRow> ablate_pnet(const TrainConfig& base, const CorpusSplits& data, std::span<const double> grid,
                                     std::span<const std::uint64_t> seeds, bool verbose = false);

/// Trains trained-H and fixed-H models from the same initialization per seed.
std::vector<AblationRow> ablate_history(const TrainConfig& base, const CorpusSplits& data,
                                        std::span<const std::uint64_t> seeds, bool verbose = false);

inline constexpr double kPnetGrid[] = {0.0, 0.2, 0.4, 0.6, 0.8, 1.0};

}  // namespace mmdial
