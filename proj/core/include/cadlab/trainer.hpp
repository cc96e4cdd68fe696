#pragma once

// Deterministic mini-batch training of the combined objective.

#include <cstdint>
#include <filesystem>
#include <optional>
#include <set>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "cadlab/config_file.hpp"
#include "cadlab/datakit.hpp"
#include "cadlab/model.hpp"
#include "cadlab/objective.hpp"

namespace cadlab::train {

enum class OptimizerKind { Adam, Sgd };
enum class CheckpointRule { BestTrainAccuracy, BestValidationAccuracy };

struct TrainConfig {
  double alpha = 1.6;
  double beta = 0.1;
  double learning_rate = 1e-3;
  /// Pairs per step; each pair contributes two examples.
  std::size_t batch_pairs = 16;
  std::size_t epochs = 100;
  std::uint64_t seed = 0;
  OptimizerKind optimizer = OptimizerKind::Adam;
  double adam_beta1 = 0.9;
  double adam_beta2 = 0.999;
  double adam_eps = 1e-8;
  CheckpointRule checkpoint_rule = CheckpointRule::BestTrainAccuracy;
  bool stop_grad_on_W_for_ocd = false;
  data::EnvironmentScheme environments = data::EnvironmentScheme::Disjoint;
  objective::PredictionLossMode prediction_loss = objective::PredictionLossMode::Pooled;
  std::size_t model_dim = 16;
  bool hidden_layer = false;

  /// Throws ValidationError.
  void validate() const;

  static TrainConfig from_doc(const KeyValueDoc& doc, bool strict = true);
  KeyValueDoc to_doc() const;
  static const std::set<std::string>& keys();
};

/// Shallow-encoder regime: lr 1e-3, 32 examples per step, alpha 1.6,
/// beta 0.1, 100 epochs.
TrainConfig shallow_preset();
/// Pretrained-encoder regime constants (lr 1e-5, 8 examples per step,
/// alpha 0.1, beta 0.1, 10 epochs). Kept for reference; this project only
/// ships the shallow encoder.
TrainConfig pretrained_preset();

/// A training unit: a counterfactual pair, or a lone original.
struct Unit {
  std::size_t original = 0;
  std::optional<std::size_t> counterfactual;
};

/// Featurized training set. Examples are indexed; units reference them.
struct TrainingData {
  data::Vocabulary vocab;
  std::vector<data::Example> examples;
  std::vector<data::FeatureVector> features;
  std::vector<Unit> units;

  static TrainingData from_pairs(const std::vector<data::Pair>& pairs);
  /// Unaugmented data: every example becomes a lone unit.
  static TrainingData from_originals(const std::vector<data::Example>& originals);

  std::size_t counterfactual_count() const;
};

/// Shuffles units by (seed, epoch) and cuts them into batches of
/// 2 * batch_pairs examples without splitting a pair. The last batch may be
/// short.
std::vector<std::vector<std::size_t>> make_batches(std::span<const Unit> units,
                                                   std::size_t batch_pairs,
                                                   std::uint64_t seed, std::size_t epoch);

/// Convenience overload for all-pair data.
std::vector<std::vector<std::size_t>> make_batches(std::size_t n_pairs,
                                                   std::size_t batch_pairs,
                                                   std::uint64_t seed, std::size_t epoch);

struct AdamState {
  std::vector<double> m;
  std::vector<double> v;
  std::uint64_t t = 0;

  explicit AdamState(std::size_t n = 0) : m(n, 0.0), v(n, 0.0) {}
};

struct AdamHyper {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

/// Bias-corrected Adam update in place.
void adam_step(std::span<double> params, std::span<const double> grads, AdamState& state,
               const AdamHyper& hyper);
void sgd_step(std::span<double> params, std::span<const double> grads, double lr);

struct StepLog {
  std::size_t step = 0;
  std::size_t epoch = 0;
  objective::LossBreakdown loss;
};

struct EpochSummary {
  std::size_t epoch = 0;
  double train_accuracy = 0.0;
  std::optional<double> validation_accuracy;
  double mean_l_p = 0.0;
  double mean_l_irm = 0.0;
  double mean_l_ocd = 0.0;
  double mean_total = 0.0;
};

struct Checkpoint {
  model::ModelParams params;
  data::Vocabulary vocab;
  std::size_t epoch = 0;
  double train_accuracy = 0.0;
  /// Name of the training log this checkpoint came from, if any.
  std::string log_ref;
  std::uint64_t seed = 0;
  /// Fingerprint of the canonical training config.
  std::string config_fingerprint;
};

struct TrainResult {
  Checkpoint best;
  model::ModelParams final_params;
  std::vector<StepLog> steps;
  std::vector<EpochSummary> epochs;
};

/// Raised when a loss component becomes non-finite.
class TrainingError : public std::runtime_error {
 public:
  TrainingError(std::size_t step, std::string component);
  std::size_t step() const noexcept { return step_; }
  const std::string& component() const noexcept { return component_; }

 private:
  std::size_t step_;
  std::string component_;
};

/// Fraction of examples predicted correctly.
double accuracy(const model::ModelParams& params,
                std::span<const data::FeatureVector> features,
                std::span<const data::Example> examples);

/// Parameters train() starts from: shape from the data and config, values
/// seeded by config.seed.
model::ModelParams initial_params(const TrainConfig& config, const TrainingData& data,
                                  const std::vector<data::Example>* validation = nullptr);

/// Runs epochs x batches steps of combined loss -> backward -> update and
/// returns the checkpoint selected by config.checkpoint_rule.
TrainResult train(const TrainConfig& config, const TrainingData& data,
                  const std::vector<data::Example>* validation = nullptr);

/// Loss breakdown and parameter gradient of one batch, without updating.
struct StepGraph {
  objective::LossBreakdown loss;
  std::vector<double> gradient;
};
StepGraph evaluate_step(const TrainConfig& config, const TrainingData& data,
                        const model::ModelParams& params,
                        std::span<const std::size_t> batch_units);

std::string step_log_csv(std::span<const StepLog> steps);
std::string epoch_summary_csv(std::span<const EpochSummary> epochs);

std::string checkpoint_to_json(const Checkpoint& ckpt);
void save_checkpoint(const Checkpoint& ckpt, const std::filesystem::path& path);
Checkpoint load_checkpoint(const std::filesystem::path& path);
Checkpoint checkpoint_from_json(std::string_view text);

}  // namespace cadlab::train
