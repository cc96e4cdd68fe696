#pragma once

// Evaluation, feature-group reliance probing, and the ablation and
// data-efficiency experiment runners.

#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include "cadlab/config_file.hpp"
#include "cadlab/datakit.hpp"
#include "cadlab/model.hpp"
#include "cadlab/trainer.hpp"

namespace cadlab::eval {

struct EvalReport {
  std::string split;
  double accuracy = 0.0;
  std::size_t correct = 0;
  std::size_t n = 0;
  /// Class -> accuracy over the examples of that class.
  std::map<int, double> per_class_accuracy;
  std::string config_fingerprint;
  std::uint64_t seed = 0;
};

/// Throws ValidationError on an empty example list.
EvalReport evaluate(const model::ModelParams& params, const data::Vocabulary& vocab,
                    const std::vector<data::Example>& examples, std::string split = "eval");

struct GroupReliance {
  double masked_accuracy = 0.0;
  /// baseline - masked accuracy.
  double drop = 0.0;
};

struct RelianceProbe {
  double baseline_accuracy = 0.0;
  std::size_t n = 0;
  std::map<data::GroupKind, GroupReliance> groups;

  double drop(data::GroupKind g) const { return groups.at(g).drop; }
};

/// Re-evaluates with each feature group's tokens removed before
/// featurization. Examples must carry group annotations.
RelianceProbe myopia_probe(const model::ModelParams& params, const data::Vocabulary& vocab,
                           const std::vector<data::Example>& examples,
                           const data::FeatureGroups& groups);

// ---------------------------------------------------------------------------
// Experiments

/// Generator and trainer settings read from one flat document. The run seed
/// drives both the generator and the trainer.
struct ExperimentConfig {
  data::GeneratorConfig generator;
  train::TrainConfig training;
  /// Worker threads for independent runs; 0 = hardware concurrency.
  std::size_t jobs = 0;

  static ExperimentConfig from_doc(const KeyValueDoc& doc);
  static ExperimentConfig defaults();
  KeyValueDoc to_doc() const;
  std::string fingerprint() const;
};

struct RunOutcome {
  std::uint64_t seed = 0;
  double ood_shift = 0.0;
  double ood_stress = 0.0;
  double ood_mean = 0.0;
  double train_accuracy = 0.0;
  std::size_t best_epoch = 0;
  /// Probe on the correlation-shifted OOD split.
  RelianceProbe probe;
};

/// Generates data with `seed`, trains with the given weights and evaluates on
/// both OOD splits.
RunOutcome run_once(const ExperimentConfig& config, std::uint64_t seed, double alpha,
                    double beta);

struct AblationArm {
  std::string name;
  double alpha = 0.0;
  double beta = 0.0;
  std::vector<RunOutcome> runs;  // one per seed, in seed order
  double mean_ood_shift = 0.0;
  double mean_ood_stress = 0.0;
  double mean_ood = 0.0;
};

struct AblationReport {
  std::vector<std::uint64_t> seeds;
  /// full_ecf, no_irm, no_ocd, neither.
  std::vector<AblationArm> arms;
  std::string config_fingerprint;

  const AblationArm& arm(const std::string& name) const;
};

/// Throws ValidationError for fewer than two seeds.
AblationReport run_ablation(const ExperimentConfig& config,
                            const std::vector<std::uint64_t>& seeds);

struct EfficiencyRow {
  std::size_t size = 0;
  std::string arm;  // ecf_cad, erm_cad, erm_original
  std::uint64_t seed = 0;
  std::size_t n_train_examples = 0;
  std::size_t n_counterfactual = 0;
  double ood_shift = 0.0;
  double ood_stress = 0.0;
  double ood_mean = 0.0;
};

struct EfficiencyReport {
  std::vector<std::size_t> sizes;
  std::vector<std::uint64_t> seeds;
  std::vector<EfficiencyRow> rows;
  std::string config_fingerprint;
};

/// For each size s: ECF on s/2 pairs, ERM on s/2 pairs, ERM on s originals.
/// Sizes must be positive and even.
EfficiencyReport run_data_efficiency(const ExperimentConfig& config,
                                     const std::vector<std::size_t>& sizes,
                                     const std::vector<std::uint64_t>& seeds);

// ---------------------------------------------------------------------------
// Reports (CSV and JSON side by side)

std::string to_csv(const EvalReport& r);
std::string to_json(const EvalReport& r);
std::string to_csv(const RelianceProbe& p);
std::string to_json(const RelianceProbe& p, const std::string& fingerprint);
std::string summary_csv(const AblationReport& r);
std::string runs_csv(const AblationReport& r);
std::string to_json(const AblationReport& r);
std::string to_csv(const EfficiencyReport& r);
std::string to_json(const EfficiencyReport& r);

void write_text(const std::filesystem::path& path, const std::string& text);

}  // namespace cadlab::eval
