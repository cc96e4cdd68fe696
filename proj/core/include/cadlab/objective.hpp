#pragma once

// Training objective: L = L_P + alpha * L_IRM + beta * L_OCD.
//
//   L_P    mean cross-entropy over the batch.
//   L_IRM  sum over environments of (dR_e(w * M)/dw at w = 1)^2, where w is a
//          scalar multiplying every logit. The inner derivative is taken with
//          gradient_graph(), so the penalty stays differentiable in the
//          model parameters.
//   L_OCD  mean over counterfactual pairs of ||h_perp - h*_perp||^2, each side
//          projected against its own gold label vector.

#include <cstddef>
#include <map>
#include <optional>
#include <span>
#include <vector>

#include "cadlab/datakit.hpp"
#include "cadlab/gradcore.hpp"
#include "cadlab/model.hpp"

namespace cadlab::objective {

/// Encoder output and logits of one example on the current tape.
struct Forward {
  std::vector<grad::Var> h;
  std::vector<grad::Var> logits;
  std::size_t label = 0;
};

Forward forward(const data::FeatureVector& x, std::size_t label,
                const model::BoundParams& params);

using ExampleRefs = std::vector<const Forward*>;
using EnvBatches = std::map<data::Environment, ExampleRefs>;

struct OcdPair {
  const Forward* original = nullptr;
  const Forward* counterfactual = nullptr;
};

/// Rows of the classifier used as label vectors by the OCD term; either the
/// bound leaves or detached constants.
using LabelVectors = std::vector<std::vector<grad::Var>>;

LabelVectors label_vectors(grad::Tape& tape, const model::BoundParams& bound,
                           const model::ModelParams& values, bool stop_gradient);

struct LossBreakdown {
  double l_p = 0.0;
  double l_irm = 0.0;
  double l_ocd = 0.0;
  double total = 0.0;
  double alpha = 0.0;
  double beta = 0.0;
  std::size_t n_pairs_used = 0;
};

/// -log softmax(logits)[label].
grad::Var cross_entropy(std::span<const grad::Var> logits, std::size_t label);

/// Mean cross-entropy. Throws std::invalid_argument on an empty batch.
grad::Var prediction_loss(std::span<const Forward> batch);
grad::Var prediction_loss(const ExampleRefs& batch);

/// dR_e(w * M)/dw at w = 1 as a differentiable node.
grad::Var env_risk_omega_grad(const ExampleRefs& env_batch);

/// Sum over environments of the squared omega-gradient.
grad::Var irm_penalty(const EnvBatches& env_batches);

struct OcdResult {
  /// Empty when every pair was skipped for a degenerate label vector.
  std::optional<grad::Var> value;
  std::size_t n_pairs_used = 0;
};

OcdResult ocd_loss(std::span<const OcdPair> pairs, const LabelVectors& label_vectors);

enum class PredictionLossMode {
  /// Mean over every example of the batch.
  Pooled,
  /// Mean of per-environment mean risks.
  EnvironmentMean,
};

struct CombinedInputs {
  std::span<const Forward> batch;
  std::span<const OcdPair> pairs;
  const EnvBatches* env_batches = nullptr;
  const LabelVectors* label_vectors = nullptr;
  double alpha = 0.0;
  double beta = 0.0;
  PredictionLossMode prediction_mode = PredictionLossMode::Pooled;
};

struct CombinedLoss {
  grad::Var total;
  LossBreakdown breakdown;
};

/// Terms with a zero weight are not built and report 0.
CombinedLoss combined_loss(const CombinedInputs& in);

}  // namespace cadlab::objective
