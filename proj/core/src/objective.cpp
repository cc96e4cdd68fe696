#include "cadlab/objective.hpp"

#include <iostream>
#include <stdexcept>

#include "cadlab/errors.hpp"

namespace cadlab::objective {

using grad::Var;

Forward forward(const data::FeatureVector& x, std::size_t label,
                const model::BoundParams& params) {
  if (label >= params.shape.classes) {
    throw std::invalid_argument("forward: label " + std::to_string(label) +
                                " out of range");
  }
  Forward f;
  f.h = model::encode(x, params);
  f.logits = model::logits(f.h, params);
  f.label = label;
  return f;
}

LabelVectors label_vectors(grad::Tape& tape, const model::BoundParams& bound,
                           const model::ModelParams& values, bool stop_gradient) {
  LabelVectors rows;
  rows.reserve(bound.shape.classes);
  for (std::size_t k = 0; k < bound.shape.classes; ++k) {
    if (stop_gradient) {
      rows.push_back(model::detached_label_vector(tape, values, k));
    } else {
      const auto row = bound.label_vector(k);
      rows.emplace_back(row.begin(), row.end());
    }
  }
  return rows;
}

Var cross_entropy(std::span<const Var> logits, std::size_t label) {
  return grad::log_sum_exp(logits) - logits[label];
}

namespace {

Var mean(std::vector<Var>& terms) {
  const double n = static_cast<double>(terms.size());
  return grad::sum(terms) * (1.0 / n);
}

}  // namespace

Var prediction_loss(std::span<const Forward> batch) {
  if (batch.empty()) throw std::invalid_argument("prediction_loss: empty batch");
  std::vector<Var> terms;
  terms.reserve(batch.size());
  for (const Forward& f : batch) terms.push_back(cross_entropy(f.logits, f.label));
  return mean(terms);
}

Var prediction_loss(const ExampleRefs& batch) {
  if (batch.empty()) throw std::invalid_argument("prediction_loss: empty batch");
  std::vector<Var> terms;
  terms.reserve(batch.size());
  for (const Forward* f : batch) terms.push_back(cross_entropy(f->logits, f->label));
  return mean(terms);
}

Var env_risk_omega_grad(const ExampleRefs& env_batch) {
  if (env_batch.empty()) {
    throw std::invalid_argument("env_risk_omega_grad: empty environment batch");
  }
  grad::Tape& tape = *env_batch.front()->logits.front().tape();
  const Var omega = tape.variable(1.0);

  std::vector<Var> risks;
  risks.reserve(env_batch.size());
  std::vector<Var> scaled;
  for (const Forward* f : env_batch) {
    scaled.clear();
    for (const Var& z : f->logits) scaled.push_back(omega * z);
    risks.push_back(cross_entropy(scaled, f->label));
  }
  const Var risk = mean(risks);
  const Var wrt[] = {omega};
  return grad::gradient_graph(risk, wrt).front();
}

Var irm_penalty(const EnvBatches& env_batches) {
  if (env_batches.empty()) throw std::invalid_argument("irm_penalty: no environments");
  std::vector<Var> terms;
  for (const auto& [env, batch] : env_batches) {
    if (batch.empty()) {
      throw ValidationError("irm_penalty: environment " +
                            std::string(data::to_string(env)) + " is empty");
    }
    terms.push_back(grad::square(env_risk_omega_grad(batch)));
  }
  return grad::sum(terms);
}

OcdResult ocd_loss(std::span<const OcdPair> pairs, const LabelVectors& label_vectors) {
  OcdResult result;
  std::vector<Var> distances;
  std::vector<Var> diff_sq;
  for (const OcdPair& p : pairs) {
    const auto lhs = model::decompose(std::span<const Var>(p.original->h),
                                      label_vectors.at(p.original->label));
    const auto rhs = model::decompose(std::span<const Var>(p.counterfactual->h),
                                      label_vectors.at(p.counterfactual->label));
    if (!lhs || !rhs) continue;
    diff_sq.clear();
    for (std::size_t j = 0; j < lhs->orthogonal.size(); ++j) {
      diff_sq.push_back(grad::square(lhs->orthogonal[j] - rhs->orthogonal[j]));
    }
    distances.push_back(grad::sum(diff_sq));
  }
  result.n_pairs_used = distances.size();
  if (distances.empty()) {
    if (!pairs.empty()) {
      std::clog << "warning: every OCD pair had a degenerate label vector; "
                   "the OCD term is skipped for this step\n";
    }
    return result;
  }
  result.value = mean(distances);
  return result;
}

CombinedLoss combined_loss(const CombinedInputs& in) {
  if (!(in.alpha >= 0.0) || !(in.beta >= 0.0)) {
    throw std::invalid_argument("combined_loss: alpha and beta must be non-negative");
  }
  CombinedLoss out;
  LossBreakdown& b = out.breakdown;
  b.alpha = in.alpha;
  b.beta = in.beta;

  Var lp;
  if (in.prediction_mode == PredictionLossMode::EnvironmentMean && in.env_batches) {
    std::vector<Var> risks;
    for (const auto& [env, batch] : *in.env_batches) {
      if (!batch.empty()) risks.push_back(prediction_loss(batch));
    }
    lp = mean(risks);
  } else {
    lp = prediction_loss(in.batch);
  }
  b.l_p = lp.value();
  Var total = lp;

  if (in.alpha > 0.0) {
    if (!in.env_batches) {
      throw std::invalid_argument("combined_loss: alpha > 0 requires environment batches");
    }
    const Var irm = irm_penalty(*in.env_batches);
    b.l_irm = irm.value();
    total = total + irm * in.alpha;
  }

  if (in.beta > 0.0) {
    if (!in.label_vectors) {
      throw std::invalid_argument("combined_loss: beta > 0 requires label vectors");
    }
    const OcdResult ocd = ocd_loss(in.pairs, *in.label_vectors);
    b.n_pairs_used = ocd.n_pairs_used;
    if (ocd.value) {
      b.l_ocd = ocd.value->value();
      total = total + *ocd.value * in.beta;
    }
  }

  b.total = total.value();
  out.total = total;
  return out;
}

}  // namespace cadlab::objective
