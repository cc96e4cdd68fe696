#include "cadlab/model.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

#include "cadlab/errors.hpp"
#include "cadlab/random.hpp"

namespace cadlab::model {

using grad::Var;

ModelParams::ModelParams(const ModelShape& shape) : shape_(shape) {
  std::size_t n = shape.vocab * shape.dim + shape.dim + shape.classes * shape.dim;
  if (shape.hidden_layer) n += shape.dim * shape.dim + shape.dim;
  values_.assign(n, 0.0);
}

ModelParams ModelParams::initialize(const ModelShape& shape, std::uint64_t seed) {
  if (shape.vocab == 0 || shape.dim == 0 || shape.classes == 0) {
    throw std::invalid_argument("model: all dimensions must be positive");
  }
  ModelParams p(shape);
  Rng rng(seed);
  auto fill = [&](std::size_t offset, std::size_t count) {
    for (std::size_t i = 0; i < count; ++i) p.values_[offset + i] = rng.uniform(-0.1, 0.1);
  };
  fill(p.embed_offset(), shape.vocab * shape.dim);
  if (shape.hidden_layer) fill(p.hidden_offset(), shape.dim * shape.dim);
  fill(p.classifier_offset(), shape.classes * shape.dim);
  return p;
}

bool ModelParams::all_finite() const {
  return std::all_of(values_.begin(), values_.end(),
                     [](double v) { return std::isfinite(v); });
}

BoundParams bind(grad::Tape& tape, const ModelParams& params) {
  BoundParams b;
  b.shape = params.shape();
  b.bias_offset = params.bias_offset();
  b.hidden_offset = params.hidden_offset();
  b.hidden_bias_offset = params.hidden_bias_offset();
  b.classifier_offset = params.classifier_offset();
  b.vars.reserve(params.size());
  for (double v : params.values()) b.vars.push_back(tape.variable(v));
  return b;
}

std::vector<Var> detached_label_vector(grad::Tape& tape, const ModelParams& params,
                                       std::size_t k) {
  std::vector<Var> out;
  for (double v : params.label_vector(k)) out.push_back(tape.constant(v));
  return out;
}

namespace {

void check_input(const data::FeatureVector& x, const ModelShape& shape) {
  if (x.size() != shape.vocab) {
    throw std::invalid_argument("model: feature dimension " + std::to_string(x.size()) +
                                " does not match vocabulary size " +
                                std::to_string(shape.vocab));
  }
}

}  // namespace

std::vector<Var> encode(const data::FeatureVector& x, const BoundParams& params) {
  const ModelShape& s = params.shape;
  check_input(x, s);
  const std::span<const Var> w(params.vars);

  std::vector<std::size_t> active;
  for (std::size_t v = 0; v < x.size(); ++v) {
    if (x[v] != 0.0) active.push_back(v);
  }

  std::vector<Var> h;
  h.reserve(s.dim);
  std::vector<Var> terms;
  for (std::size_t j = 0; j < s.dim; ++j) {
    terms.clear();
    for (std::size_t v : active) terms.push_back(w[v * s.dim + j] * x[v]);
    terms.push_back(w[params.bias_offset + j]);
    h.push_back(grad::tanh(grad::sum(terms)));
  }
  if (!s.hidden_layer) return h;

  std::vector<Var> out;
  out.reserve(s.dim);
  for (std::size_t i = 0; i < s.dim; ++i) {
    terms.clear();
    for (std::size_t j = 0; j < s.dim; ++j) {
      terms.push_back(w[params.hidden_offset + i * s.dim + j] * h[j]);
    }
    terms.push_back(w[params.hidden_bias_offset + i]);
    out.push_back(grad::tanh(grad::sum(terms)));
  }
  return out;
}

std::vector<Var> logits(std::span<const Var> h, const BoundParams& params) {
  std::vector<Var> z;
  z.reserve(params.shape.classes);
  for (std::size_t k = 0; k < params.shape.classes; ++k) {
    z.push_back(grad::dot(params.label_vector(k), h));
  }
  return z;
}

std::vector<double> encode(const data::FeatureVector& x, const ModelParams& params) {
  const ModelShape& s = params.shape();
  check_input(x, s);
  std::vector<double> pre(s.dim);
  for (std::size_t j = 0; j < s.dim; ++j) pre[j] = params.bias(j);
  for (std::size_t v = 0; v < x.size(); ++v) {
    if (x[v] == 0.0) continue;
    for (std::size_t j = 0; j < s.dim; ++j) pre[j] += params.embed(v, j) * x[v];
  }
  std::vector<double> h(s.dim);
  for (std::size_t j = 0; j < s.dim; ++j) h[j] = std::tanh(pre[j]);
  if (!s.hidden_layer) return h;

  std::vector<double> out(s.dim);
  for (std::size_t i = 0; i < s.dim; ++i) {
    double acc = params.hidden_bias(i);
    for (std::size_t j = 0; j < s.dim; ++j) acc += params.hidden(i, j) * h[j];
    out[i] = std::tanh(acc);
  }
  return out;
}

std::vector<double> logits(std::span<const double> h, const ModelParams& params) {
  const ModelShape& s = params.shape();
  if (h.size() != s.dim) throw std::invalid_argument("model: h has the wrong dimension");
  std::vector<double> z(s.classes, 0.0);
  for (std::size_t k = 0; k < s.classes; ++k) {
    double acc = 0.0;
    for (std::size_t j = 0; j < s.dim; ++j) acc += params.classifier(k, j) * h[j];
    z[k] = acc;
  }
  return z;
}

std::vector<double> softmax(std::span<const double> z) {
  if (z.empty()) return {};
  const double m = *std::max_element(z.begin(), z.end());
  std::vector<double> p(z.size());
  double total = 0.0;
  for (std::size_t k = 0; k < z.size(); ++k) {
    p[k] = std::exp(z[k] - m);
    total += p[k];
  }
  for (double& v : p) v /= total;
  return p;
}

std::vector<double> predict_proba(std::span<const double> h, const ModelParams& params) {
  return softmax(logits(h, params));
}

std::size_t argmax(std::span<const double> p) {
  std::size_t best = 0;
  for (std::size_t k = 1; k < p.size(); ++k) {
    if (p[k] > p[best]) best = k;
  }
  return best;
}

std::size_t predict(const data::FeatureVector& x, const ModelParams& params) {
  return argmax(predict_proba(encode(x, params), params));
}

namespace {

double value_of(double v) { return v; }
double value_of(const Var& v) { return v.value(); }

double dot_values(std::span<const double> a, std::span<const double> b) {
  double acc = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) acc += a[i] * b[i];
  return acc;
}
Var dot_values(std::span<const Var> a, std::span<const Var> b) { return grad::dot(a, b); }

template <typename T>
std::optional<Decomposition<T>> project(std::span<const T> h, std::span<const T> w) {
  if (h.size() != w.size() || h.empty()) {
    throw std::invalid_argument("decompose: h and the label vector differ in dimension");
  }
  double norm_sq = 0.0;
  for (const T& x : w) norm_sq += value_of(x) * value_of(x);
  if (std::sqrt(norm_sq) <= kDegenerateNorm) return std::nullopt;

  const T coef = dot_values(h, w) / dot_values(w, w);
  Decomposition<T> d;
  d.parallel.reserve(h.size());
  d.orthogonal.reserve(h.size());
  for (std::size_t i = 0; i < h.size(); ++i) {
    d.parallel.push_back(coef * w[i]);
    d.orthogonal.push_back(h[i] - d.parallel.back());
  }
  return d;
}

}  // namespace

std::optional<Decomposition<double>> decompose(std::span<const double> h,
                                               std::span<const double> label_vector) {
  return project<double>(h, label_vector);
}

std::optional<Decomposition<Var>> decompose(std::span<const Var> h,
                                            std::span<const Var> label_vector) {
  return project<Var>(h, label_vector);
}

std::optional<Decomposition<double>> decompose(std::span<const double> h, std::size_t label,
                                               const ModelParams& params) {
  if (label >= params.shape().classes) throw std::out_of_range("decompose: bad label");
  return project<double>(h, params.label_vector(label));
}

nlohmann::ordered_json params_to_json(const ModelParams& params) {
  const ModelShape& s = params.shape();
  nlohmann::ordered_json j;
  j["shape"] = {{"vocab", s.vocab},
                {"dim", s.dim},
                {"classes", s.classes},
                {"hidden_layer", s.hidden_layer}};
  auto slice = [&](std::size_t offset, std::size_t count) {
    const auto v = params.values().subspan(offset, count);
    return std::vector<double>(v.begin(), v.end());
  };
  nlohmann::ordered_json t;
  t["embed"] = slice(params.embed_offset(), s.vocab * s.dim);
  t["bias"] = slice(params.bias_offset(), s.dim);
  if (s.hidden_layer) {
    t["hidden"] = slice(params.hidden_offset(), s.dim * s.dim);
    t["hidden_bias"] = slice(params.hidden_bias_offset(), s.dim);
  }
  t["classifier"] = slice(params.classifier_offset(), s.classes * s.dim);
  j["tensors"] = std::move(t);
  return j;
}

ModelParams params_from_json(const nlohmann::json& j) {
  try {
    const auto& sj = j.at("shape");
    ModelShape s;
    s.vocab = sj.at("vocab").get<std::size_t>();
    s.dim = sj.at("dim").get<std::size_t>();
    s.classes = sj.at("classes").get<std::size_t>();
    s.hidden_layer = sj.at("hidden_layer").get<bool>();
    ModelParams p(s);
    const auto& t = j.at("tensors");
    auto read = [&](const char* name, std::size_t offset, std::size_t count) {
      const auto values = t.at(name).get<std::vector<double>>();
      if (values.size() != count) {
        throw ValidationError(std::string("checkpoint: tensor '") + name + "' has " +
                              std::to_string(values.size()) + " values, expected " +
                              std::to_string(count));
      }
      std::copy(values.begin(), values.end(), p.values().begin() + offset);
    };
    read("embed", p.embed_offset(), s.vocab * s.dim);
    read("bias", p.bias_offset(), s.dim);
    if (s.hidden_layer) {
      read("hidden", p.hidden_offset(), s.dim * s.dim);
      read("hidden_bias", p.hidden_bias_offset(), s.dim);
    }
    read("classifier", p.classifier_offset(), s.classes * s.dim);
    return p;
  } catch (const nlohmann::json::exception& e) {
    throw ValidationError(std::string("checkpoint: ") + e.what());
  }
}

}  // namespace cadlab::model
