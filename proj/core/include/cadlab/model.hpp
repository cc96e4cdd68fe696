#pragma once

// Bag-of-words classifier: feature vector -> h = tanh(E^T x + b) (optionally
// followed by one more tanh layer) -> logits z_k = w_k . h, where the rows
// w_k of the classifier matrix are the label vectors.

#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "cadlab/datakit.hpp"
#include "cadlab/gradcore.hpp"

namespace cadlab::model {

struct ModelShape {
  std::size_t vocab = 0;    // V, including the OOV bucket
  std::size_t dim = 0;      // d
  std::size_t classes = 2;  // N
  bool hidden_layer = false;

  bool operator==(const ModelShape&) const = default;
};

/// All parameters in one flat buffer:
///   embed        V x d   (row v is the embedding of token v)
///   bias         d
///   hidden       d x d   (hidden layer only)
///   hidden_bias  d       (hidden layer only)
///   classifier   N x d   (row k is the label vector of class k)
class ModelParams {
 public:
  ModelParams() = default;
  explicit ModelParams(const ModelShape& shape);

  /// Matrices uniform in (-0.1, 0.1), biases zero.
  static ModelParams initialize(const ModelShape& shape, std::uint64_t seed);

  const ModelShape& shape() const noexcept { return shape_; }
  std::size_t size() const noexcept { return values_.size(); }

  std::span<double> values() noexcept { return values_; }
  std::span<const double> values() const noexcept { return values_; }

  std::size_t embed_offset() const noexcept { return 0; }
  std::size_t bias_offset() const noexcept { return shape_.vocab * shape_.dim; }
  std::size_t hidden_offset() const noexcept { return bias_offset() + shape_.dim; }
  std::size_t hidden_bias_offset() const noexcept {
    return hidden_offset() + (shape_.hidden_layer ? shape_.dim * shape_.dim : 0);
  }
  std::size_t classifier_offset() const noexcept {
    return hidden_bias_offset() + (shape_.hidden_layer ? shape_.dim : 0);
  }

  double& embed(std::size_t v, std::size_t j) {
    return values_[embed_offset() + v * shape_.dim + j];
  }
  double embed(std::size_t v, std::size_t j) const {
    return values_[embed_offset() + v * shape_.dim + j];
  }
  double& bias(std::size_t j) { return values_[bias_offset() + j]; }
  double bias(std::size_t j) const { return values_[bias_offset() + j]; }
  double& hidden(std::size_t i, std::size_t j) {
    return values_[hidden_offset() + i * shape_.dim + j];
  }
  double hidden(std::size_t i, std::size_t j) const {
    return values_[hidden_offset() + i * shape_.dim + j];
  }
  double& hidden_bias(std::size_t j) { return values_[hidden_bias_offset() + j]; }
  double hidden_bias(std::size_t j) const { return values_[hidden_bias_offset() + j]; }
  double& classifier(std::size_t k, std::size_t j) {
    return values_[classifier_offset() + k * shape_.dim + j];
  }
  double classifier(std::size_t k, std::size_t j) const {
    return values_[classifier_offset() + k * shape_.dim + j];
  }
  std::span<const double> label_vector(std::size_t k) const {
    return std::span<const double>(values_).subspan(classifier_offset() + k * shape_.dim,
                                                    shape_.dim);
  }

  bool all_finite() const;

  bool operator==(const ModelParams&) const = default;

 private:
  ModelShape shape_;
  std::vector<double> values_;
};

/// ModelParams mirrored as leaves of a tape, same flat layout.
struct BoundParams {
  ModelShape shape;
  std::vector<grad::Var> vars;
  std::size_t bias_offset = 0;
  std::size_t hidden_offset = 0;
  std::size_t hidden_bias_offset = 0;
  std::size_t classifier_offset = 0;

  std::span<const grad::Var> label_vector(std::size_t k) const {
    return std::span<const grad::Var>(vars).subspan(classifier_offset + k * shape.dim,
                                                    shape.dim);
  }
};

BoundParams bind(grad::Tape& tape, const ModelParams& params);

/// Label vector k as tape constants: gradients do not reach the classifier.
std::vector<grad::Var> detached_label_vector(grad::Tape& tape, const ModelParams& params,
                                             std::size_t k);

// Differentiable path --------------------------------------------------------

/// Throws std::invalid_argument on dimension mismatch.
std::vector<grad::Var> encode(const data::FeatureVector& x, const BoundParams& params);
std::vector<grad::Var> logits(std::span<const grad::Var> h, const BoundParams& params);

// Plain-double path (evaluation) ---------------------------------------------

std::vector<double> encode(const data::FeatureVector& x, const ModelParams& params);
std::vector<double> logits(std::span<const double> h, const ModelParams& params);
/// Softmax of h . w_k over classes, with max subtraction.
std::vector<double> predict_proba(std::span<const double> h, const ModelParams& params);
std::vector<double> softmax(std::span<const double> logits);
/// Argmax of the probabilities; ties go to the lowest class index.
std::size_t argmax(std::span<const double> p);
std::size_t predict(const data::FeatureVector& x, const ModelParams& params);

// Decomposition --------------------------------------------------------------

inline constexpr double kDegenerateNorm = 1e-8;

template <typename T>
struct Decomposition {
  std::vector<T> parallel;
  std::vector<T> orthogonal;
};

/// Projection of h onto span(label_vector) and its orthogonal complement.
/// Empty when ||label_vector|| <= kDegenerateNorm.
std::optional<Decomposition<double>> decompose(std::span<const double> h,
                                               std::span<const double> label_vector);
std::optional<Decomposition<grad::Var>> decompose(std::span<const grad::Var> h,
                                                  std::span<const grad::Var> label_vector);
std::optional<Decomposition<double>> decompose(std::span<const double> h, std::size_t label,
                                               const ModelParams& params);

// Serialization --------------------------------------------------------------

nlohmann::ordered_json params_to_json(const ModelParams& params);
/// Throws ValidationError on malformed input or inconsistent dimensions.
ModelParams params_from_json(const nlohmann::json& j);

}  // namespace cadlab::model
