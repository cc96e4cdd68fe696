#include "cadlab/trainer.hpp"

#include <cmath>
#include <cstdio>
#include <fstream>
#include <sstream>

#include <json.hpp>

#include "cadlab/errors.hpp"
#include "cadlab/random.hpp"

namespace cadlab::train {

namespace {

constexpr std::uint64_t kInitStream = 7;
constexpr std::uint64_t kShuffleStream = 1000;

std::string format_double(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

}  // namespace

// ---------------------------------------------------------------------------
// Config

void TrainConfig::validate() const {
  auto fail = [](const std::string& msg) { throw ValidationError("train config: " + msg); };
  if (!(learning_rate > 0.0)) fail("learning_rate must be > 0");
  if (epochs < 1) fail("epochs must be >= 1");
  if (batch_pairs < 1) fail("batch_pairs must be >= 1");
  if (!(alpha >= 0.0)) fail("alpha must be >= 0");
  if (!(beta >= 0.0)) fail("beta must be >= 0");
  if (!(adam_beta1 >= 0.0 && adam_beta1 < 1.0)) fail("adam_beta1 must lie in [0,1)");
  if (!(adam_beta2 >= 0.0 && adam_beta2 < 1.0)) fail("adam_beta2 must lie in [0,1)");
  if (!(adam_eps > 0.0)) fail("adam_eps must be > 0");
  if (model_dim < 1) fail("model_dim must be >= 1");
}

const std::set<std::string>& TrainConfig::keys() {
  static const std::set<std::string> k = {
      "alpha", "beta", "learning_rate", "batch_pairs", "epochs", "seed", "optimizer",
      "adam_beta1", "adam_beta2", "adam_eps", "checkpoint_rule",
      "stop_grad_on_W_for_ocd", "environments", "prediction_loss", "model_dim",
      "hidden_layer", "preset"};
  return k;
}

TrainConfig TrainConfig::from_doc(const KeyValueDoc& doc, bool strict) {
  if (strict) doc.require_known(keys());
  TrainConfig c;
  const std::string preset = doc.get_string("preset", "shallow");
  if (preset == "shallow") {
    c = shallow_preset();
  } else if (preset == "pretrained") {
    c = pretrained_preset();
  } else {
    throw ValidationError("train config: unknown preset '" + preset + "'");
  }
  auto count = [&](const char* key, std::size_t fallback) {
    const std::int64_t v = doc.get_int(key, static_cast<std::int64_t>(fallback));
    if (v < 0) throw ValidationError(std::string("train config: '") + key + "' must be >= 0");
    return static_cast<std::size_t>(v);
  };
  c.alpha = doc.get_double("alpha", c.alpha);
  c.beta = doc.get_double("beta", c.beta);
  c.learning_rate = doc.get_double("learning_rate", c.learning_rate);
  c.batch_pairs = count("batch_pairs", c.batch_pairs);
  c.epochs = count("epochs", c.epochs);
  c.seed = doc.get_uint("seed", c.seed);
  c.adam_beta1 = doc.get_double("adam_beta1", c.adam_beta1);
  c.adam_beta2 = doc.get_double("adam_beta2", c.adam_beta2);
  c.adam_eps = doc.get_double("adam_eps", c.adam_eps);
  c.stop_grad_on_W_for_ocd = doc.get_bool("stop_grad_on_W_for_ocd", c.stop_grad_on_W_for_ocd);
  c.model_dim = count("model_dim", c.model_dim);
  c.hidden_layer = doc.get_bool("hidden_layer", c.hidden_layer);

  const std::string opt = doc.get_string("optimizer", "adam");
  if (opt == "adam") c.optimizer = OptimizerKind::Adam;
  else if (opt == "sgd") c.optimizer = OptimizerKind::Sgd;
  else throw ValidationError("train config: unknown optimizer '" + opt + "'");

  const std::string rule = doc.get_string("checkpoint_rule", "best_train_accuracy");
  if (rule == "best_train_accuracy") c.checkpoint_rule = CheckpointRule::BestTrainAccuracy;
  else if (rule == "best_validation_accuracy")
    c.checkpoint_rule = CheckpointRule::BestValidationAccuracy;
  else throw ValidationError("train config: unknown checkpoint_rule '" + rule + "'");

  const std::string envs = doc.get_string("environments", "disjoint");
  if (envs == "disjoint") c.environments = data::EnvironmentScheme::Disjoint;
  else if (envs == "cad_includes_originals")
    c.environments = data::EnvironmentScheme::CadIncludesOriginals;
  else throw ValidationError("train config: unknown environments '" + envs + "'");

  const std::string lp = doc.get_string("prediction_loss", "pooled");
  if (lp == "pooled") c.prediction_loss = objective::PredictionLossMode::Pooled;
  else if (lp == "environment_mean")
    c.prediction_loss = objective::PredictionLossMode::EnvironmentMean;
  else throw ValidationError("train config: unknown prediction_loss '" + lp + "'");

  c.validate();
  return c;
}

KeyValueDoc TrainConfig::to_doc() const {
  KeyValueDoc d;
  d.set("alpha", format_double(alpha));
  d.set("beta", format_double(beta));
  d.set("learning_rate", format_double(learning_rate));
  d.set("batch_pairs", std::to_string(batch_pairs));
  d.set("epochs", std::to_string(epochs));
  d.set("seed", std::to_string(seed));
  d.set("optimizer", optimizer == OptimizerKind::Adam ? "adam" : "sgd");
  d.set("adam_beta1", format_double(adam_beta1));
  d.set("adam_beta2", format_double(adam_beta2));
  d.set("adam_eps", format_double(adam_eps));
  d.set("checkpoint_rule", checkpoint_rule == CheckpointRule::BestTrainAccuracy
                               ? "best_train_accuracy"
                               : "best_validation_accuracy");
  d.set("stop_grad_on_W_for_ocd", stop_grad_on_W_for_ocd ? "true" : "false");
  d.set("environments", environments == data::EnvironmentScheme::Disjoint
                            ? "disjoint"
                            : "cad_includes_originals");
  d.set("prediction_loss", prediction_loss == objective::PredictionLossMode::Pooled
                               ? "pooled"
                               : "environment_mean");
  d.set("model_dim", std::to_string(model_dim));
  d.set("hidden_layer", hidden_layer ? "true" : "false");
  return d;
}

TrainConfig shallow_preset() {
  TrainConfig c;
  c.alpha = 1.6;
  c.beta = 0.1;
  c.learning_rate = 1e-3;
  c.batch_pairs = 16;
  c.epochs = 100;
  return c;
}

TrainConfig pretrained_preset() {
  TrainConfig c;
  c.alpha = 0.1;
  c.beta = 0.1;
  c.learning_rate = 1e-5;
  c.batch_pairs = 4;
  c.epochs = 10;
  return c;
}

// ---------------------------------------------------------------------------
// Data

TrainingData TrainingData::from_pairs(const std::vector<data::Pair>& pairs) {
  TrainingData d;
  d.examples = data::flatten(pairs);
  d.vocab = data::Vocabulary::build(d.examples);
  d.features.reserve(d.examples.size());
  for (const data::Example& ex : d.examples) {
    d.features.push_back(data::featurize(ex.tokens, d.vocab));
  }
  d.units.reserve(pairs.size());
  for (std::size_t i = 0; i < pairs.size(); ++i) d.units.push_back({2 * i, 2 * i + 1});
  return d;
}

TrainingData TrainingData::from_originals(const std::vector<data::Example>& originals) {
  TrainingData d;
  d.examples = originals;
  d.vocab = data::Vocabulary::build(d.examples);
  d.features.reserve(d.examples.size());
  for (const data::Example& ex : d.examples) {
    d.features.push_back(data::featurize(ex.tokens, d.vocab));
  }
  d.units.reserve(originals.size());
  for (std::size_t i = 0; i < originals.size(); ++i) d.units.push_back({i, std::nullopt});
  return d;
}

std::size_t TrainingData::counterfactual_count() const {
  std::size_t n = 0;
  for (const data::Example& ex : examples) n += ex.variant == data::Variant::Counterfactual;
  return n;
}

std::vector<std::vector<std::size_t>> make_batches(std::span<const Unit> units,
                                                   std::size_t batch_pairs,
                                                   std::uint64_t seed, std::size_t epoch) {
  std::vector<std::size_t> order(units.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  Rng rng(derive_seed(seed, kShuffleStream + epoch));
  rng.shuffle(order);

  const std::size_t capacity = 2 * batch_pairs;
  std::vector<std::vector<std::size_t>> batches;
  std::vector<std::size_t> current;
  std::size_t filled = 0;
  for (std::size_t u : order) {
    const std::size_t width = units[u].counterfactual ? 2 : 1;
    if (filled + width > capacity && !current.empty()) {
      batches.push_back(std::move(current));
      current.clear();
      filled = 0;
    }
    current.push_back(u);
    filled += width;
  }
  if (!current.empty()) batches.push_back(std::move(current));
  return batches;
}

std::vector<std::vector<std::size_t>> make_batches(std::size_t n_pairs,
                                                   std::size_t batch_pairs,
                                                   std::uint64_t seed, std::size_t epoch) {
  std::vector<Unit> units(n_pairs);
  for (std::size_t i = 0; i < n_pairs; ++i) units[i] = {2 * i, 2 * i + 1};
  return make_batches(units, batch_pairs, seed, epoch);
}

// ---------------------------------------------------------------------------
// Optimizers

void adam_step(std::span<double> params, std::span<const double> grads, AdamState& state,
               const AdamHyper& hyper) {
  if (params.size() != grads.size() || state.m.size() != params.size() ||
      state.v.size() != params.size()) {
    throw std::invalid_argument("adam_step: state and parameter sizes differ");
  }
  ++state.t;
  const double t = static_cast<double>(state.t);
  const double correction1 = 1.0 - std::pow(hyper.beta1, t);
  const double correction2 = 1.0 - std::pow(hyper.beta2, t);
  for (std::size_t i = 0; i < params.size(); ++i) {
    const double g = grads[i];
    state.m[i] = hyper.beta1 * state.m[i] + (1.0 - hyper.beta1) * g;
    state.v[i] = hyper.beta2 * state.v[i] + (1.0 - hyper.beta2) * g * g;
    const double m_hat = state.m[i] / correction1;
    const double v_hat = state.v[i] / correction2;
    params[i] -= hyper.lr * m_hat / (std::sqrt(v_hat) + hyper.eps);
  }
}

void sgd_step(std::span<double> params, std::span<const double> grads, double lr) {
  if (params.size() != grads.size()) {
    throw std::invalid_argument("sgd_step: gradient size differs from parameters");
  }
  for (std::size_t i = 0; i < params.size(); ++i) params[i] -= lr * grads[i];
}

// ---------------------------------------------------------------------------
// Training

TrainingError::TrainingError(std::size_t step, std::string component)
    : std::runtime_error("non-finite " + component + " at step " + std::to_string(step)),
      step_(step),
      component_(std::move(component)) {}

double accuracy(const model::ModelParams& params,
                std::span<const data::FeatureVector> features,
                std::span<const data::Example> examples) {
  if (examples.empty()) return 0.0;
  std::size_t correct = 0;
  for (std::size_t i = 0; i < examples.size(); ++i) {
    correct += model::predict(features[i], params) ==
               static_cast<std::size_t>(examples[i].label);
  }
  return static_cast<double>(correct) / static_cast<double>(examples.size());
}

namespace {

struct BuiltStep {
  objective::LossBreakdown breakdown;
  std::vector<double> gradient;
};

BuiltStep build_step(const TrainConfig& config, const TrainingData& data,
                     const model::ModelParams& params,
                     std::span<const std::size_t> batch_units) {
  grad::Tape tape;
  tape.reserve(16384);
  const model::BoundParams bound = model::bind(tape, params);

  std::vector<objective::Forward> batch;
  batch.reserve(2 * batch_units.size());
  struct Slots {
    std::size_t original;
    std::optional<std::size_t> counterfactual;
  };
  std::vector<Slots> slots;
  slots.reserve(batch_units.size());
  for (std::size_t u : batch_units) {
    const Unit& unit = data.units[u];
    Slots s{batch.size(), std::nullopt};
    batch.push_back(objective::forward(
        data.features[unit.original],
        static_cast<std::size_t>(data.examples[unit.original].label), bound));
    if (unit.counterfactual) {
      s.counterfactual = batch.size();
      batch.push_back(objective::forward(
          data.features[*unit.counterfactual],
          static_cast<std::size_t>(data.examples[*unit.counterfactual].label), bound));
    }
    slots.push_back(s);
  }

  objective::EnvBatches envs;
  std::vector<objective::OcdPair> pairs;
  for (const Slots& s : slots) {
    envs[data::Environment::Original].push_back(&batch[s.original]);
    if (config.environments == data::EnvironmentScheme::CadIncludesOriginals) {
      envs[data::Environment::Counterfactual].push_back(&batch[s.original]);
    }
    if (s.counterfactual) {
      envs[data::Environment::Counterfactual].push_back(&batch[*s.counterfactual]);
      pairs.push_back({&batch[s.original], &batch[*s.counterfactual]});
    }
  }

  const objective::LabelVectors rows =
      config.beta > 0.0
          ? objective::label_vectors(tape, bound, params, config.stop_grad_on_W_for_ocd)
          : objective::LabelVectors{};

  objective::CombinedInputs in;
  in.batch = batch;
  in.pairs = pairs;
  in.env_batches = &envs;
  in.label_vectors = &rows;
  in.alpha = config.alpha;
  in.beta = config.beta;
  in.prediction_mode = config.prediction_loss;
  const objective::CombinedLoss loss = objective::combined_loss(in);

  BuiltStep out;
  out.breakdown = loss.breakdown;
  out.gradient = grad::gradient(loss.total, bound.vars);
  return out;
}

void check_finite(const objective::LossBreakdown& b, std::size_t step) {
  if (!std::isfinite(b.l_p)) throw TrainingError(step, "l_p");
  if (!std::isfinite(b.l_irm)) throw TrainingError(step, "l_irm");
  if (!std::isfinite(b.l_ocd)) throw TrainingError(step, "l_ocd");
  if (!std::isfinite(b.total)) throw TrainingError(step, "total");
}

}  // namespace

StepGraph evaluate_step(const TrainConfig& config, const TrainingData& data,
                        const model::ModelParams& params,
                        std::span<const std::size_t> batch_units) {
  BuiltStep s = build_step(config, data, params, batch_units);
  return {s.breakdown, std::move(s.gradient)};
}

model::ModelParams initial_params(const TrainConfig& config, const TrainingData& data,
                                  const std::vector<data::Example>* validation) {
  std::size_t n_classes = 0;
  for (const data::Example& ex : data.examples) {
    n_classes = std::max(n_classes, static_cast<std::size_t>(ex.label) + 1);
  }
  if (validation) {
    for (const data::Example& ex : *validation) {
      n_classes = std::max(n_classes, static_cast<std::size_t>(ex.label) + 1);
    }
  }
  n_classes = std::max<std::size_t>(n_classes, 2);

  model::ModelShape shape;
  shape.vocab = data.vocab.size();
  shape.dim = config.model_dim;
  shape.classes = n_classes;
  shape.hidden_layer = config.hidden_layer;
  return model::ModelParams::initialize(shape, derive_seed(config.seed, kInitStream));
}

TrainResult train(const TrainConfig& config, const TrainingData& data,
                  const std::vector<data::Example>* validation) {
  config.validate();
  if (data.units.empty()) throw ValidationError("train: no training examples");
  if (config.alpha > 0.0) {
    // Throws when an environment would be empty.
    data::partition_environments(data.examples, config.alpha, config.environments);
  }
  if (config.checkpoint_rule == CheckpointRule::BestValidationAccuracy &&
      (validation == nullptr || validation->empty())) {
    throw ValidationError("train: best_validation_accuracy needs a validation split");
  }

  model::ModelParams params = initial_params(config, data, validation);

  std::vector<data::FeatureVector> validation_features;
  if (validation) {
    for (const data::Example& ex : *validation) {
      validation_features.push_back(data::featurize(ex.tokens, data.vocab));
    }
  }

  AdamState adam(params.size());
  const AdamHyper hyper{config.learning_rate, config.adam_beta1, config.adam_beta2,
                        config.adam_eps};

  TrainResult result;
  std::optional<double> best_score;
  std::size_t step = 0;
  for (std::size_t epoch = 1; epoch <= config.epochs; ++epoch) {
    const auto batches = make_batches(data.units, config.batch_pairs, config.seed, epoch);
    EpochSummary summary;
    summary.epoch = epoch;
    for (const auto& batch : batches) {
      ++step;
      BuiltStep s = build_step(config, data, params, batch);
      check_finite(s.breakdown, step);
      if (config.optimizer == OptimizerKind::Adam) {
        adam_step(params.values(), s.gradient, adam, hyper);
      } else {
        sgd_step(params.values(), s.gradient, config.learning_rate);
      }
      if (!params.all_finite()) throw TrainingError(step, "parameters");
      summary.mean_l_p += s.breakdown.l_p;
      summary.mean_l_irm += s.breakdown.l_irm;
      summary.mean_l_ocd += s.breakdown.l_ocd;
      summary.mean_total += s.breakdown.total;
      result.steps.push_back({step, epoch, s.breakdown});
    }
    const double n = static_cast<double>(batches.size());
    summary.mean_l_p /= n;
    summary.mean_l_irm /= n;
    summary.mean_l_ocd /= n;
    summary.mean_total /= n;
    summary.train_accuracy = accuracy(params, data.features, data.examples);
    if (validation) {
      summary.validation_accuracy = accuracy(params, validation_features, *validation);
    }

    const double score = config.checkpoint_rule == CheckpointRule::BestTrainAccuracy
                             ? summary.train_accuracy
                             : *summary.validation_accuracy;
    // Strict comparison: ties keep the earlier epoch.
    if (!best_score || score > *best_score) {
      best_score = score;
      result.best.params = params;
      result.best.epoch = epoch;
      result.best.train_accuracy = summary.train_accuracy;
    }
    result.epochs.push_back(summary);
  }
  result.best.vocab = data.vocab;
  result.best.seed = config.seed;
  result.best.config_fingerprint = fingerprint(config.to_doc().canonical());
  result.final_params = std::move(params);
  return result;
}

// ---------------------------------------------------------------------------
// Logs and checkpoints

std::string step_log_csv(std::span<const StepLog> steps) {
  std::string out = "step,l_p,l_irm,l_ocd,total,n_pairs_used\n";
  for (const StepLog& s : steps) {
    out += std::to_string(s.step) + "," + format_double(s.loss.l_p) + "," +
           format_double(s.loss.l_irm) + "," + format_double(s.loss.l_ocd) + "," +
           format_double(s.loss.total) + "," + std::to_string(s.loss.n_pairs_used) + "\n";
  }
  return out;
}

std::string epoch_summary_csv(std::span<const EpochSummary> epochs) {
  std::string out =
      "epoch,train_accuracy,validation_accuracy,mean_l_p,mean_l_irm,mean_l_ocd,mean_total\n";
  for (const EpochSummary& e : epochs) {
    out += std::to_string(e.epoch) + "," + format_double(e.train_accuracy) + "," +
           (e.validation_accuracy ? format_double(*e.validation_accuracy) : "") + "," +
           format_double(e.mean_l_p) + "," + format_double(e.mean_l_irm) + "," +
           format_double(e.mean_l_ocd) + "," + format_double(e.mean_total) + "\n";
  }
  return out;
}

std::string checkpoint_to_json(const Checkpoint& ckpt) {
  nlohmann::ordered_json j;
  j["format"] = "cadlab-checkpoint";
  j["version"] = 1;
  j["epoch"] = ckpt.epoch;
  j["train_accuracy"] = ckpt.train_accuracy;
  j["log_ref"] = ckpt.log_ref;
  j["seed"] = ckpt.seed;
  j["config_fingerprint"] = ckpt.config_fingerprint;
  j["vocabulary"] = ckpt.vocab.tokens();
  j["model"] = model::params_to_json(ckpt.params);
  return j.dump() + "\n";
}

void save_checkpoint(const Checkpoint& ckpt, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out << checkpoint_to_json(ckpt);
}

Checkpoint checkpoint_from_json(std::string_view text) {
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(text);
  } catch (const nlohmann::json::parse_error& e) {
    throw ValidationError(std::string("checkpoint: ") + e.what());
  }
  try {
    if (j.at("format").get<std::string>() != "cadlab-checkpoint") {
      throw ValidationError("checkpoint: unrecognized format");
    }
    if (j.at("version").get<int>() != 1) {
      throw ValidationError("checkpoint: unsupported version");
    }
    Checkpoint c;
    c.epoch = j.at("epoch").get<std::size_t>();
    c.train_accuracy = j.at("train_accuracy").get<double>();
    c.log_ref = j.value("log_ref", "");
    c.seed = j.value("seed", std::uint64_t{0});
    c.config_fingerprint = j.value("config_fingerprint", "");
    c.vocab = data::Vocabulary(j.at("vocabulary").get<std::vector<std::string>>());
    c.params = model::params_from_json(j.at("model"));
    if (c.params.shape().vocab != c.vocab.size()) {
      throw ValidationError("checkpoint: vocabulary size does not match the embedding");
    }
    return c;
  } catch (const nlohmann::json::exception& e) {
    throw ValidationError(std::string("checkpoint: ") + e.what());
  }
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ValidationError("cannot open " + path.string());
  std::ostringstream buf;
  buf << in.rdbuf();
  return checkpoint_from_json(buf.str());
}

}  // namespace cadlab::train
