// cadlab: generate synthetic CAD, train, evaluate, probe and run experiments.

#include <cstdint>
#include <exception>
#include <filesystem>
#include <iostream>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "cadlab/config_file.hpp"
#include "cadlab/datakit.hpp"
#include "cadlab/errors.hpp"
#include "cadlab/evalkit.hpp"
#include "cadlab/trainer.hpp"

namespace fs = std::filesystem;
using namespace cadlab;

namespace {

/// Loads the config file (if any) and applies `key=value` overrides.
KeyValueDoc load_config(const std::string& path, const std::vector<std::string>& overrides) {
  KeyValueDoc doc = path.empty() ? KeyValueDoc{} : KeyValueDoc::load(path);
  for (const std::string& kv : overrides) {
    const auto eq = kv.find('=');
    if (eq == std::string::npos || eq == 0) {
      throw ValidationError("--set expects key=value, got '" + kv + "'");
    }
    doc.set(kv.substr(0, eq), kv.substr(eq + 1));
  }
  return doc;
}

KeyValueDoc restrict_to(const KeyValueDoc& doc, const std::set<std::string>& keys) {
  KeyValueDoc out;
  for (const auto& [k, v] : doc.entries()) {
    if (keys.count(k)) out.set(k, v);
  }
  return out;
}

std::set<std::string> experiment_keys() {
  std::set<std::string> keys = data::GeneratorConfig::keys();
  const auto& t = train::TrainConfig::keys();
  keys.insert(t.begin(), t.end());
  keys.insert("jobs");
  return keys;
}

std::vector<std::uint64_t> seed_list(const std::string& csv) {
  std::vector<std::uint64_t> out;
  for (std::int64_t v : parse_int_list(csv)) {
    if (v < 0) throw ValidationError("seeds must be non-negative");
    out.push_back(static_cast<std::uint64_t>(v));
  }
  return out;
}

void emit(const std::string& out_dir, const std::string& name, const std::string& text) {
  if (out_dir.empty()) {
    std::cout << text;
  } else {
    eval::write_text(fs::path(out_dir) / name, text);
  }
}

std::vector<data::Example> load_split(const fs::path& path) {
  return data::load_jsonl(path, data::LoadOptions{.require_pairs = false});
}

std::string split_name(const fs::path& path) { return path.stem().string(); }

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Counterfactual-augmentation training lab"};
  app.require_subcommand(1);

  std::string config_path;
  std::vector<std::string> overrides;
  std::string out_dir;
  std::string data_path;
  std::string checkpoint_path;
  std::string groups_path;
  std::string seeds = "0,1,2,3,4,5,6,7,8,9";
  std::string sizes = "100,200,400,800";
  std::optional<std::uint64_t> seed;
  std::optional<double> alpha;
  std::optional<double> beta;
  std::optional<std::size_t> epochs;
  std::optional<std::size_t> jobs;

  auto add_set = [&](CLI::App* cmd) {
    cmd->add_option("--set", overrides, "Override a config value (key=value)");
  };

  auto* generate = app.add_subcommand("generate", "Write a synthetic CAD dataset");
  generate->add_option("--config", config_path, "Generator config file");
  generate->add_option("--out", out_dir, "Output directory")->required();
  generate->add_option("--seed", seed, "Generator seed");
  add_set(generate);

  auto* trainc = app.add_subcommand("train", "Train on DIR/train.jsonl");
  trainc->add_option("--config", config_path, "Training config file");
  trainc->add_option("--data", data_path, "Dataset directory")->required();
  trainc->add_option("--out", out_dir, "Output directory")->required();
  trainc->add_option("--seed", seed, "Training seed")->required();
  trainc->add_option("--alpha", alpha, "IRM penalty weight");
  trainc->add_option("--beta", beta, "OCD penalty weight");
  trainc->add_option("--epochs", epochs, "Number of epochs");
  add_set(trainc);

  auto* evalc = app.add_subcommand("eval", "Evaluate a checkpoint on a JSONL split");
  evalc->add_option("--checkpoint", checkpoint_path, "Checkpoint file")->required();
  evalc->add_option("--data", data_path, "JSONL file")->required();
  evalc->add_option("--out", out_dir, "Write eval.csv/eval.json here instead of stdout");

  auto* probe = app.add_subcommand("probe", "Feature-group reliance probe");
  probe->add_option("--checkpoint", checkpoint_path, "Checkpoint file")->required();
  probe->add_option("--data", data_path, "Annotated JSONL file")->required();
  probe->add_option("--groups", groups_path, "groups.json (default: next to --data)");
  probe->add_option("--out", out_dir, "Write probe.csv/probe.json here instead of stdout");

  auto* ablate = app.add_subcommand("ablate", "Ablation over (alpha, beta) zeroing");
  ablate->add_option("--config", config_path, "Experiment config file");
  ablate->add_option("--seeds", seeds, "Comma-separated seeds")->capture_default_str();
  ablate->add_option("--out", out_dir, "Report directory (default: summary to stdout)");
  ablate->add_option("--jobs", jobs, "Worker threads (0 = all cores)");
  add_set(ablate);

  auto* efficiency = app.add_subcommand("data-efficiency", "Training-size curves");
  efficiency->add_option("--config", config_path, "Experiment config file");
  efficiency->add_option("--sizes", sizes, "Comma-separated training sizes")
      ->capture_default_str();
  efficiency->add_option("--seeds", seeds, "Comma-separated seeds")->capture_default_str();
  efficiency->add_option("--out", out_dir, "Report directory (default: CSV to stdout)");
  efficiency->add_option("--jobs", jobs, "Worker threads (0 = all cores)");
  add_set(efficiency);

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return 1;
  }

  try {
    if (generate->parsed()) {
      const KeyValueDoc doc = load_config(config_path, overrides);
      doc.require_known(experiment_keys());
      data::GeneratorConfig gen =
          data::GeneratorConfig::from_doc(restrict_to(doc, data::GeneratorConfig::keys()));
      if (seed) gen.seed = *seed;
      gen.validate();
      data::write_generated(data::generate_cad(gen), gen, out_dir);
      return 0;
    }

    if (trainc->parsed()) {
      const KeyValueDoc doc = load_config(config_path, overrides);
      doc.require_known(experiment_keys());
      train::TrainConfig cfg =
          train::TrainConfig::from_doc(restrict_to(doc, train::TrainConfig::keys()));
      cfg.seed = *seed;
      if (alpha) cfg.alpha = *alpha;
      if (beta) cfg.beta = *beta;
      if (epochs) cfg.epochs = *epochs;
      cfg.validate();

      const fs::path dir(data_path);
      const auto examples = data::load_jsonl(dir / "train.jsonl");
      const auto td = train::TrainingData::from_pairs(data::make_pairs(examples));
      train::TrainResult result = train::train(cfg, td);
      result.best.log_ref = "train_log.csv";

      const fs::path out(out_dir);
      fs::create_directories(out);
      eval::write_text(out / "config.cfg", cfg.to_doc().canonical());
      eval::write_text(out / "train_log.csv", train::step_log_csv(result.steps));
      eval::write_text(out / "epochs.csv", train::epoch_summary_csv(result.epochs));
      train::save_checkpoint(result.best, out / "checkpoint.json");

      for (const char* split : {"ood_shift", "ood_stress"}) {
        const fs::path file = dir / (std::string(split) + ".jsonl");
        if (!fs::exists(file)) continue;
        eval::EvalReport r =
            eval::evaluate(result.best.params, result.best.vocab, load_split(file), split);
        r.config_fingerprint = result.best.config_fingerprint;
        r.seed = result.best.seed;
        eval::write_text(out / ("eval_" + std::string(split) + ".csv"), eval::to_csv(r));
        eval::write_text(out / ("eval_" + std::string(split) + ".json"), eval::to_json(r));
      }
      return 0;
    }

    if (evalc->parsed()) {
      const train::Checkpoint ckpt = train::load_checkpoint(checkpoint_path);
      eval::EvalReport r =
          eval::evaluate(ckpt.params, ckpt.vocab, load_split(data_path), split_name(data_path));
      r.config_fingerprint = ckpt.config_fingerprint;
      r.seed = ckpt.seed;
      if (out_dir.empty()) {
        std::cout << eval::to_json(r);
      } else {
        emit(out_dir, "eval.csv", eval::to_csv(r));
        emit(out_dir, "eval.json", eval::to_json(r));
      }
      return 0;
    }

    if (probe->parsed()) {
      const train::Checkpoint ckpt = train::load_checkpoint(checkpoint_path);
      const fs::path groups_file =
          groups_path.empty() ? fs::path(data_path).parent_path() / "groups.json"
                              : fs::path(groups_path);
      const eval::RelianceProbe p = eval::myopia_probe(
          ckpt.params, ckpt.vocab, load_split(data_path), data::load_groups(groups_file));
      if (out_dir.empty()) {
        std::cout << eval::to_csv(p);
      } else {
        emit(out_dir, "probe.csv", eval::to_csv(p));
        emit(out_dir, "probe.json", eval::to_json(p, ckpt.config_fingerprint));
      }
      return 0;
    }

    if (ablate->parsed() || efficiency->parsed()) {
      eval::ExperimentConfig cfg =
          eval::ExperimentConfig::from_doc(load_config(config_path, overrides));
      if (jobs) cfg.jobs = *jobs;
      cfg.generator.validate();
      cfg.training.validate();
      const auto seed_values = seed_list(seeds);

      if (ablate->parsed()) {
        const eval::AblationReport r = eval::run_ablation(cfg, seed_values);
        emit(out_dir, "ablation_summary.csv", eval::summary_csv(r));
        if (!out_dir.empty()) {
          emit(out_dir, "ablation_runs.csv", eval::runs_csv(r));
          emit(out_dir, "ablation.json", eval::to_json(r));
        }
      } else {
        std::vector<std::size_t> size_values;
        for (std::int64_t s : parse_int_list(sizes)) {
          if (s <= 0) throw ValidationError("sizes must be positive");
          size_values.push_back(static_cast<std::size_t>(s));
        }
        const eval::EfficiencyReport r = eval::run_data_efficiency(cfg, size_values, seed_values);
        emit(out_dir, "data_efficiency.csv", eval::to_csv(r));
        if (!out_dir.empty()) emit(out_dir, "data_efficiency.json", eval::to_json(r));
      }
      return 0;
    }
  } catch (const ValidationError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  } catch (const std::exception& e) {
    std::cerr << "failure: " << e.what() << "\n";
    return 2;
  }
  return 2;
}
