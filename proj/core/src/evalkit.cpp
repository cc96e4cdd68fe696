#include "cadlab/evalkit.hpp"

#include <algorithm>
#include <atomic>
#include <cstdio>
#include <exception>
#include <fstream>
#include <functional>
#include <thread>

#include <json.hpp>

#include "cadlab/errors.hpp"

namespace cadlab::eval {

using ordered_json = nlohmann::ordered_json;

namespace {

std::string format_double(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

/// Runs fn(i) for i in [0, n) on up to `jobs` threads. Results are written by
/// index, so output order does not depend on scheduling.
void parallel_for(std::size_t n, std::size_t jobs, const std::function<void(std::size_t)>& fn) {
  if (jobs == 0) jobs = std::max(1u, std::thread::hardware_concurrency());
  jobs = std::min(jobs, n);
  if (jobs <= 1) {
    for (std::size_t i = 0; i < n; ++i) fn(i);
    return;
  }
  std::atomic<std::size_t> next{0};
  std::vector<std::exception_ptr> errors(n);
  std::vector<std::thread> workers;
  workers.reserve(jobs);
  for (std::size_t w = 0; w < jobs; ++w) {
    workers.emplace_back([&] {
      for (std::size_t i = next++; i < n; i = next++) {
        try {
          fn(i);
        } catch (...) {
          errors[i] = std::current_exception();
        }
      }
    });
  }
  for (auto& t : workers) t.join();
  for (const auto& e : errors) {
    if (e) std::rethrow_exception(e);
  }
}

}  // namespace

EvalReport evaluate(const model::ModelParams& params, const data::Vocabulary& vocab,
                    const std::vector<data::Example>& examples, std::string split) {
  if (examples.empty()) throw ValidationError("evaluate: no examples in split '" + split + "'");
  EvalReport r;
  r.split = std::move(split);
  r.n = examples.size();
  std::map<int, std::pair<std::size_t, std::size_t>> per_class;  // correct, total
  for (const data::Example& ex : examples) {
    const bool ok = model::predict(data::featurize(ex.tokens, vocab), params) ==
                    static_cast<std::size_t>(ex.label);
    r.correct += ok;
    auto& [c, t] = per_class[ex.label];
    c += ok;
    ++t;
  }
  r.accuracy = static_cast<double>(r.correct) / static_cast<double>(r.n);
  for (const auto& [label, ct] : per_class) {
    r.per_class_accuracy[label] =
        static_cast<double>(ct.first) / static_cast<double>(ct.second);
  }
  return r;
}

RelianceProbe myopia_probe(const model::ModelParams& params, const data::Vocabulary& vocab,
                           const std::vector<data::Example>& examples,
                           const data::FeatureGroups& groups) {
  if (examples.empty()) throw ValidationError("myopia_probe: no examples");
  for (const data::Example& ex : examples) {
    if (!ex.groups) {
      throw ValidationError("myopia_probe: example '" + ex.id +
                            "' has no feature-group annotations");
    }
  }
  auto masked_accuracy = [&](const std::set<std::string>& masked) {
    std::size_t correct = 0;
    for (const data::Example& ex : examples) {
      correct += model::predict(data::featurize_masked(ex.tokens, vocab, masked), params) ==
                 static_cast<std::size_t>(ex.label);
    }
    return static_cast<double>(correct) / static_cast<double>(examples.size());
  };

  RelianceProbe probe;
  probe.n = examples.size();
  probe.baseline_accuracy = masked_accuracy({});
  for (data::GroupKind g : data::kProbeGroups) {
    GroupReliance rel;
    rel.masked_accuracy = masked_accuracy(data::members(groups, g));
    rel.drop = probe.baseline_accuracy - rel.masked_accuracy;
    probe.groups[g] = rel;
  }
  return probe;
}

// ---------------------------------------------------------------------------
// Experiments

ExperimentConfig ExperimentConfig::defaults() {
  ExperimentConfig c;
  c.training = train::shallow_preset();
  return c;
}

ExperimentConfig ExperimentConfig::from_doc(const KeyValueDoc& doc) {
  std::set<std::string> allowed = data::GeneratorConfig::keys();
  const auto& train_keys = train::TrainConfig::keys();
  allowed.insert(train_keys.begin(), train_keys.end());
  allowed.insert("jobs");
  doc.require_known(allowed);

  // Layer the document over the experiment defaults.
  ExperimentConfig c = defaults();
  KeyValueDoc gen = c.generator.to_doc();
  KeyValueDoc tr = c.training.to_doc();
  for (const auto& [k, v] : doc.entries()) {
    if (data::GeneratorConfig::keys().count(k)) gen.set(k, v);
    if (train_keys.count(k)) tr.set(k, v);
  }
  if (!doc.has("rho_ood") && doc.has("rho_train")) {
    // rho_ood tracks rho_train unless given explicitly.
    const double rho = doc.get_double("rho_train", 0.9);
    gen.set("rho_ood", format_double(1.0 - rho));
  }
  c.generator = data::GeneratorConfig::from_doc(gen, false);
  c.training = train::TrainConfig::from_doc(tr, false);
  const std::int64_t jobs = doc.get_int("jobs", 0);
  if (jobs < 0) throw ValidationError("config: 'jobs' must be >= 0");
  c.jobs = static_cast<std::size_t>(jobs);
  return c;
}

KeyValueDoc ExperimentConfig::to_doc() const {
  KeyValueDoc doc = generator.to_doc();
  const KeyValueDoc train_doc = training.to_doc();
  for (const auto& [k, v] : train_doc.entries()) doc.set(k, v);
  // The run seed comes from the seed list, not the document.
  doc.set("seed", "per-run");
  return doc;
}

std::string ExperimentConfig::fingerprint() const {
  return cadlab::fingerprint(to_doc().canonical());
}

RunOutcome run_once(const ExperimentConfig& config, std::uint64_t seed, double alpha,
                    double beta) {
  data::GeneratorConfig gen = config.generator;
  gen.seed = seed;
  const data::GeneratedData generated = data::generate_cad(gen);
  const train::TrainingData td = train::TrainingData::from_pairs(generated.train);

  train::TrainConfig tc = config.training;
  tc.seed = seed;
  tc.alpha = alpha;
  tc.beta = beta;
  const train::TrainResult result = train::train(tc, td);

  RunOutcome out;
  out.seed = seed;
  out.train_accuracy = result.best.train_accuracy;
  out.best_epoch = result.best.epoch;
  const model::ModelParams& p = result.best.params;
  out.ood_shift = evaluate(p, td.vocab, generated.ood_shift, "ood_shift").accuracy;
  out.ood_stress = evaluate(p, td.vocab, generated.ood_stress, "ood_stress").accuracy;
  out.ood_mean = 0.5 * (out.ood_shift + out.ood_stress);
  out.probe = myopia_probe(p, td.vocab, generated.ood_shift, generated.groups);
  return out;
}

const AblationArm& AblationReport::arm(const std::string& name) const {
  for (const AblationArm& a : arms) {
    if (a.name == name) return a;
  }
  throw std::out_of_range("ablation: no arm named " + name);
}

AblationReport run_ablation(const ExperimentConfig& config,
                            const std::vector<std::uint64_t>& seeds) {
  if (seeds.size() < 2) throw ValidationError("ablation: at least two seeds are required");
  const double a = config.training.alpha;
  const double b = config.training.beta;

  AblationReport report;
  report.seeds = seeds;
  report.config_fingerprint = config.fingerprint();
  report.arms = {{"full_ecf", a, b, {}, 0, 0, 0},
                 {"no_irm", 0.0, b, {}, 0, 0, 0},
                 {"no_ocd", a, 0.0, {}, 0, 0, 0},
                 {"neither", 0.0, 0.0, {}, 0, 0, 0}};
  for (AblationArm& arm : report.arms) arm.runs.resize(seeds.size());

  const std::size_t n_arms = report.arms.size();
  parallel_for(n_arms * seeds.size(), config.jobs, [&](std::size_t task) {
    AblationArm& arm = report.arms[task % n_arms];
    const std::size_t s = task / n_arms;
    arm.runs[s] = run_once(config, seeds[s], arm.alpha, arm.beta);
  });

  for (AblationArm& arm : report.arms) {
    for (const RunOutcome& r : arm.runs) {
      arm.mean_ood_shift += r.ood_shift;
      arm.mean_ood_stress += r.ood_stress;
      arm.mean_ood += r.ood_mean;
    }
    const double n = static_cast<double>(arm.runs.size());
    arm.mean_ood_shift /= n;
    arm.mean_ood_stress /= n;
    arm.mean_ood /= n;
  }
  return report;
}

EfficiencyReport run_data_efficiency(const ExperimentConfig& config,
                                     const std::vector<std::size_t>& sizes,
                                     const std::vector<std::uint64_t>& seeds) {
  if (sizes.empty()) throw ValidationError("data-efficiency: no sizes given");
  if (seeds.empty()) throw ValidationError("data-efficiency: no seeds given");
  for (std::size_t s : sizes) {
    if (s == 0 || s % 2 != 0) {
      throw ValidationError("data-efficiency: sizes must be positive and even, got " +
                            std::to_string(s));
    }
  }
  const std::size_t largest = *std::max_element(sizes.begin(), sizes.end());

  EfficiencyReport report;
  report.sizes = sizes;
  report.seeds = seeds;
  report.config_fingerprint = config.fingerprint();

  static const char* kArms[] = {"ecf_cad", "erm_cad", "erm_original"};
  const std::size_t per_seed = sizes.size() * 3;
  report.rows.resize(seeds.size() * per_seed);

  // One generated pool per seed, shared by every size and arm.
  std::vector<data::GeneratedData> pools(seeds.size());
  parallel_for(seeds.size(), config.jobs, [&](std::size_t i) {
    data::GeneratorConfig gen = config.generator;
    gen.seed = seeds[i];
    gen.ood_size = config.generator.effective_ood_size();
    // Pairs are drawn sequentially, so a larger pool keeps the same prefix.
    gen.n_pairs = std::max(gen.n_pairs, largest);
    pools[i] = data::generate_cad(gen);
  });

  parallel_for(report.rows.size(), config.jobs, [&](std::size_t task) {
    const std::size_t seed_idx = task / per_seed;
    const std::size_t size_idx = (task % per_seed) / 3;
    const std::size_t arm_idx = task % 3;
    const data::GeneratedData& pool = pools[seed_idx];
    const std::size_t s = sizes[size_idx];

    train::TrainingData td;
    train::TrainConfig tc = config.training;
    tc.seed = seeds[seed_idx];
    if (arm_idx < 2) {
      const std::vector<data::Pair> pairs(pool.train.begin(),
                                          pool.train.begin() + static_cast<long>(s / 2));
      td = train::TrainingData::from_pairs(pairs);
      if (arm_idx == 1) tc.alpha = tc.beta = 0.0;
    } else {
      std::vector<data::Example> originals;
      originals.reserve(s);
      for (std::size_t i = 0; i < s; ++i) originals.push_back(pool.train[i].original);
      td = train::TrainingData::from_originals(originals);
      tc.alpha = tc.beta = 0.0;
    }
    const train::TrainResult result = train::train(tc, td);

    EfficiencyRow& row = report.rows[task];
    row.size = s;
    row.arm = kArms[arm_idx];
    row.seed = seeds[seed_idx];
    row.n_train_examples = td.examples.size();
    row.n_counterfactual = td.counterfactual_count();
    row.ood_shift = evaluate(result.best.params, td.vocab, pool.ood_shift).accuracy;
    row.ood_stress = evaluate(result.best.params, td.vocab, pool.ood_stress).accuracy;
    row.ood_mean = 0.5 * (row.ood_shift + row.ood_stress);
  });
  return report;
}

// ---------------------------------------------------------------------------
// Reports

std::string to_csv(const EvalReport& r) {
  std::string out = "split,n,correct,accuracy";
  for (const auto& [label, acc] : r.per_class_accuracy) {
    out += ",class_" + std::to_string(label) + "_accuracy";
  }
  out += "\n" + r.split + "," + std::to_string(r.n) + "," + std::to_string(r.correct) + "," +
         format_double(r.accuracy);
  for (const auto& [label, acc] : r.per_class_accuracy) out += "," + format_double(acc);
  return out + "\n";
}

std::string to_json(const EvalReport& r) {
  ordered_json j;
  j["split"] = r.split;
  j["n"] = r.n;
  j["correct"] = r.correct;
  j["accuracy"] = r.accuracy;
  ordered_json pc = ordered_json::object();
  for (const auto& [label, acc] : r.per_class_accuracy) pc[std::to_string(label)] = acc;
  j["per_class_accuracy"] = pc;
  j["config_fingerprint"] = r.config_fingerprint;
  j["seed"] = r.seed;
  return j.dump(2) + "\n";
}

std::string to_csv(const RelianceProbe& p) {
  std::string out = "group,baseline_accuracy,masked_accuracy,drop\n";
  for (const auto& [g, rel] : p.groups) {
    out += std::string(data::to_string(g)) + "," + format_double(p.baseline_accuracy) + "," +
           format_double(rel.masked_accuracy) + "," + format_double(rel.drop) + "\n";
  }
  return out;
}

namespace {

ordered_json probe_json(const RelianceProbe& p) {
  ordered_json j;
  j["baseline_accuracy"] = p.baseline_accuracy;
  j["n"] = p.n;
  ordered_json groups = ordered_json::object();
  for (const auto& [g, rel] : p.groups) {
    groups[std::string(data::to_string(g))] = {{"masked_accuracy", rel.masked_accuracy},
                                               {"drop", rel.drop}};
  }
  j["groups"] = groups;
  return j;
}

}  // namespace

std::string to_json(const RelianceProbe& p, const std::string& fingerprint) {
  ordered_json j = probe_json(p);
  j["config_fingerprint"] = fingerprint;
  return j.dump(2) + "\n";
}

std::string summary_csv(const AblationReport& r) {
  std::string out = "arm,alpha,beta,ood_shift,ood_stress,ood_mean\n";
  for (const AblationArm& a : r.arms) {
    out += a.name + "," + format_double(a.alpha) + "," + format_double(a.beta) + "," +
           format_double(a.mean_ood_shift) + "," + format_double(a.mean_ood_stress) + "," +
           format_double(a.mean_ood) + "\n";
  }
  return out;
}

std::string runs_csv(const AblationReport& r) {
  std::string out =
      "arm,seed,ood_shift,ood_stress,ood_mean,train_accuracy,best_epoch,"
      "drop_edited_causal,drop_nonedited_causal,drop_correlated\n";
  for (const AblationArm& a : r.arms) {
    for (const RunOutcome& run : a.runs) {
      out += a.name + "," + std::to_string(run.seed) + "," + format_double(run.ood_shift) +
             "," + format_double(run.ood_stress) + "," + format_double(run.ood_mean) + "," +
             format_double(run.train_accuracy) + "," + std::to_string(run.best_epoch) + "," +
             format_double(run.probe.drop(data::GroupKind::EditedCausal)) + "," +
             format_double(run.probe.drop(data::GroupKind::NoneditedCausal)) + "," +
             format_double(run.probe.drop(data::GroupKind::Correlated)) + "\n";
    }
  }
  return out;
}

std::string to_json(const AblationReport& r) {
  ordered_json j;
  j["config_fingerprint"] = r.config_fingerprint;
  j["seeds"] = r.seeds;
  ordered_json arms = ordered_json::array();
  for (const AblationArm& a : r.arms) {
    ordered_json aj;
    aj["arm"] = a.name;
    aj["alpha"] = a.alpha;
    aj["beta"] = a.beta;
    aj["mean_ood_shift"] = a.mean_ood_shift;
    aj["mean_ood_stress"] = a.mean_ood_stress;
    aj["mean_ood"] = a.mean_ood;
    ordered_json runs = ordered_json::array();
    for (const RunOutcome& run : a.runs) {
      runs.push_back({{"seed", run.seed},
                      {"ood_shift", run.ood_shift},
                      {"ood_stress", run.ood_stress},
                      {"ood_mean", run.ood_mean},
                      {"train_accuracy", run.train_accuracy},
                      {"best_epoch", run.best_epoch},
                      {"probe", probe_json(run.probe)}});
    }
    aj["runs"] = runs;
    arms.push_back(aj);
  }
  j["arms"] = arms;
  return j.dump(2) + "\n";
}

std::string to_csv(const EfficiencyReport& r) {
  std::string out =
      "size,arm,seed,n_train_examples,n_counterfactual,ood_shift,ood_stress,ood_mean\n";
  for (const EfficiencyRow& row : r.rows) {
    out += std::to_string(row.size) + "," + row.arm + "," + std::to_string(row.seed) + "," +
           std::to_string(row.n_train_examples) + "," + std::to_string(row.n_counterfactual) +
           "," + format_double(row.ood_shift) + "," + format_double(row.ood_stress) + "," +
           format_double(row.ood_mean) + "\n";
  }
  return out;
}

std::string to_json(const EfficiencyReport& r) {
  ordered_json j;
  j["config_fingerprint"] = r.config_fingerprint;
  j["sizes"] = r.sizes;
  j["seeds"] = r.seeds;
  ordered_json rows = ordered_json::array();
  for (const EfficiencyRow& row : r.rows) {
    rows.push_back({{"size", row.size},
                    {"arm", row.arm},
                    {"seed", row.seed},
                    {"n_train_examples", row.n_train_examples},
                    {"n_counterfactual", row.n_counterfactual},
                    {"ood_shift", row.ood_shift},
                    {"ood_stress", row.ood_stress},
                    {"ood_mean", row.ood_mean}});
  }
  j["rows"] = rows;
  return j.dump(2) + "\n";
}

void write_text(const std::filesystem::path& path, const std::string& text) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out << text;
}

}  // namespace cadlab::eval
