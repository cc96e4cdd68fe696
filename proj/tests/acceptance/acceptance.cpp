// Acceptance suite: one PASS/FAIL line per criterion.
//
//   cadlab_acceptance            run every criterion
//   cadlab_acceptance 3 5        run only the listed criteria

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "cadlab/datakit.hpp"
#include "cadlab/evalkit.hpp"
#include "cadlab/gradcore.hpp"
#include "cadlab/model.hpp"
#include "cadlab/objective.hpp"
#include "cadlab/random.hpp"
#include "cadlab/trainer.hpp"
#include "reference_erm.hpp"
#include "test_util.hpp"

using namespace cadlab;
namespace fs = std::filesystem;

namespace {

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) {
  return std::chrono::duration<double>(Clock::now() - t0).count();
}

struct Outcome {
  bool pass = false;
  std::string detail;
};

std::string fmt(const char* f, double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, f, v);
  return buf;
}

const std::vector<std::uint64_t> kSeeds = {0, 1, 2, 3, 4, 5, 6, 7, 8, 9};

// One-sided sign test: P(X >= wins) for X ~ Binomial(n, 1/2).
double sign_test_p(int wins, int n) {
  double p = 0.0;
  for (int k = wins; k <= n; ++k) {
    double c = 1.0;
    for (int i = 0; i < k; ++i) c = c * (n - i) / (i + 1);
    p += c * std::pow(0.5, n);
  }
  return p;
}

// ---------------------------------------------------------------------------

Outcome gradient_check() {
  const auto t0 = Clock::now();
  data::GeneratorConfig g;
  g.n_pairs = 4;
  g.seed = 101;
  const auto td = train::TrainingData::from_pairs(data::generate_cad(g).train);
  train::TrainConfig c = train::shallow_preset();
  c.alpha = 0.1;
  c.beta = 0.1;
  c.model_dim = 8;
  c.seed = 101;
  const model::ModelParams p0 = train::initial_params(c, td);
  const std::vector<std::size_t> batch = {0, 1, 2, 3};
  const auto analytic = train::evaluate_step(c, td, p0, batch);

  const double step = 1e-4;
  double worst = 0.0;
  for (std::size_t i = 0; i < p0.size(); ++i) {
    model::ModelParams plus = p0, minus = p0;
    plus.values()[i] += step;
    minus.values()[i] -= step;
    const double fd = (train::evaluate_step(c, td, plus, batch).loss.total -
                       train::evaluate_step(c, td, minus, batch).loss.total) /
                      (2 * step);
    const double denom = std::max({std::abs(fd), std::abs(analytic.gradient[i]), 1e-8});
    worst = std::max(worst, std::abs(fd - analytic.gradient[i]) / denom);
  }
  const double secs = seconds_since(t0);
  const bool ok = p0.size() <= 1000 && td.examples.size() == 8 && worst < 1e-4 && secs < 10;
  return {ok, std::to_string(p0.size()) + " params, 8 examples, max rel err " +
                  fmt("%.3g", worst) + ", " + fmt("%.2f", secs) + " s"};
}

Outcome irm_oracle() {
  Rng rng(202);
  data::GeneratorConfig g;
  g.n_pairs = 64;
  g.seed = 202;
  const auto td = train::TrainingData::from_pairs(data::generate_cad(g).train);
  double worst_oracle = 0.0, worst_sum = 0.0;
  for (int trial = 0; trial < 100; ++trial) {
    const model::ModelParams p = model::ModelParams::initialize(
        {td.vocab.size(), 1 + rng.index(12), 2, rng.index(2) == 1}, rng.next());
    // Scale weights up so the logits are not all near zero.
    model::ModelParams scaled = p;
    for (double& v : scaled.values()) v *= 20.0;
    grad::Tape tape;
    const auto bound = model::bind(tape, scaled);
    std::vector<objective::Forward> fw;
    const std::size_t n_pairs = 1 + rng.index(8);
    std::vector<std::size_t> ori, cad;
    for (std::size_t k = 0; k < n_pairs; ++k) {
      const auto& unit = td.units[rng.index(td.units.size())];
      ori.push_back(fw.size());
      fw.push_back(objective::forward(td.features[unit.original],
                                      td.examples[unit.original].label, bound));
      cad.push_back(fw.size());
      fw.push_back(objective::forward(td.features[*unit.counterfactual],
                                      td.examples[*unit.counterfactual].label, bound));
    }
    objective::EnvBatches envs;
    for (std::size_t i : ori) envs[data::Environment::Original].push_back(&fw[i]);
    for (std::size_t i : cad) envs[data::Environment::Counterfactual].push_back(&fw[i]);

    double sum_sq = 0.0;
    for (const auto& [env, refs] : envs) {
      const double autodiff = objective::env_risk_omega_grad(refs).value();
      // mean over the environment of sum_i p_i z_i - z_y, from plain doubles.
      double oracle = 0.0;
      for (const objective::Forward* f : refs) {
        std::vector<double> z;
        for (const auto& v : f->logits) z.push_back(v.value());
        const double m = *std::max_element(z.begin(), z.end());
        double norm = 0.0;
        for (double zk : z) norm += std::exp(zk - m);
        double expect = 0.0;
        for (double zk : z) expect += std::exp(zk - m) / norm * zk;
        oracle += expect - z[f->label];
      }
      oracle /= static_cast<double>(refs.size());
      worst_oracle = std::max(worst_oracle, std::abs(autodiff - oracle));
      sum_sq += autodiff * autodiff;
    }
    worst_sum = std::max(worst_sum, std::abs(objective::irm_penalty(envs).value() - sum_sq));
  }
  return {worst_oracle <= 1e-8 && worst_sum <= 1e-12,
          "100 batches, max |autodiff - closed form| " + fmt("%.3g", worst_oracle) +
              ", max |penalty - sum of squares| " + fmt("%.3g", worst_sum)};
}

Outcome decomposition_suite() {
  Rng rng(303);
  double worst_recon = 0.0, worst_orth = 0.0, worst_gold = 0.0, worst_shift = 0.0;
  for (int trial = 0; trial < 1000; ++trial) {
    const std::size_t d = 1 + rng.index(64);
    std::vector<double> h(d), w(d), w2(d), hs(d);
    for (std::size_t j = 0; j < d; ++j) {
      h[j] = rng.uniform(-3, 3);
      w[j] = rng.uniform(-3, 3);
      w2[j] = rng.uniform(-3, 3);
      hs[j] = rng.uniform(-3, 3);
    }
    const auto dec = model::decompose(h, w);
    if (!dec) continue;
    double hh = 0, ww = 0, orth = 0, gold_h = 0, gold_par = 0;
    for (std::size_t j = 0; j < d; ++j) {
      worst_recon = std::max(worst_recon, std::abs(dec->parallel[j] + dec->orthogonal[j] - h[j]));
      hh += h[j] * h[j];
      ww += w[j] * w[j];
      orth += dec->orthogonal[j] * w[j];
      gold_h += h[j] * w[j];
      gold_par += dec->parallel[j] * w[j];
    }
    worst_orth = std::max(worst_orth, std::abs(orth) / (std::sqrt(hh) * std::sqrt(ww)));
    worst_gold = std::max(worst_gold, std::abs(gold_h - gold_par));

    // OCD is unchanged when h moves along its gold label vector.
    const double lambda = rng.uniform(-10, 10);
    std::vector<double> shifted = h;
    for (std::size_t j = 0; j < d; ++j) shifted[j] += lambda * w[j];
    grad::Tape tape;
    objective::LabelVectors rows(2);
    for (std::size_t j = 0; j < d; ++j) {
      rows[0].push_back(tape.constant(w[j]));
      rows[1].push_back(tape.constant(w2[j]));
    }
    auto fwd = [&](const std::vector<double>& v, std::size_t y) {
      objective::Forward f;
      for (double x : v) f.h.push_back(tape.variable(x));
      f.label = y;
      return f;
    };
    const auto a = fwd(h, 0), a2 = fwd(shifted, 0), b = fwd(hs, 1);
    const std::vector<objective::OcdPair> p1 = {{&a, &b}}, p2 = {{&a2, &b}};
    const double l1 = objective::ocd_loss(p1, rows).value->value();
    const double l2 = objective::ocd_loss(p2, rows).value->value();
    worst_shift = std::max(worst_shift, std::abs(l1 - l2) / std::max(1.0, l1));
  }
  const bool ok = worst_recon <= 1e-9 && worst_orth <= 1e-9 && worst_gold <= 1e-9 &&
                  worst_shift <= 1e-9;
  return {ok, "1000 draws: reconstruction " + fmt("%.2g", worst_recon) + ", orthogonality " +
                  fmt("%.2g", worst_orth) + ", gold logit " + fmt("%.2g", worst_gold) +
                  ", OCD shift " + fmt("%.2g", worst_shift)};
}

Outcome erm_reduction() {
  data::GeneratorConfig g;
  g.n_pairs = 200;
  g.seed = 404;
  const auto td = train::TrainingData::from_pairs(data::generate_cad(g).train);
  train::TrainConfig c = train::shallow_preset();
  c.alpha = 0.0;
  c.beta = 0.0;
  c.epochs = 3;
  c.seed = 404;
  const auto result = train::train(c, td);
  const auto ref = test::reference_erm(c, td);
  if (ref.size() != result.steps.size()) return {false, "step counts differ"};
  double worst = 0.0;
  for (std::size_t i = 0; i < ref.size(); ++i) {
    worst = std::max(worst, std::abs(ref[i].loss - result.steps[i].loss.total));
  }
  return {worst <= 1e-12, std::to_string(ref.size()) + " steps, max loss difference " +
                              fmt("%.3g", worst)};
}

Outcome myopia_reproduction() {
  const auto t0 = Clock::now();
  const eval::ExperimentConfig cfg = eval::ExperimentConfig::defaults();
  std::vector<eval::RunOutcome> base(kSeeds.size()), ecf(kSeeds.size());
  for (std::size_t i = 0; i < kSeeds.size(); ++i) {
    base[i] = eval::run_once(cfg, kSeeds[i], 0.0, 0.0);
    ecf[i] = eval::run_once(cfg, kSeeds[i], 1.6, 0.1);
  }
  const double secs = seconds_since(t0);

  int edited_dominant = 0, ecf_wins = 0, ties = 0;
  double base_u = 0.0, ecf_u = 0.0;
  for (std::size_t i = 0; i < kSeeds.size(); ++i) {
    edited_dominant += base[i].probe.drop(data::GroupKind::EditedCausal) >
                       base[i].probe.drop(data::GroupKind::NoneditedCausal);
    base_u += base[i].probe.drop(data::GroupKind::NoneditedCausal) / kSeeds.size();
    ecf_u += ecf[i].probe.drop(data::GroupKind::NoneditedCausal) / kSeeds.size();
    ecf_wins += ecf[i].ood_mean > base[i].ood_mean;
    ties += ecf[i].ood_mean == base[i].ood_mean;
  }
  const double p = sign_test_p(ecf_wins, static_cast<int>(kSeeds.size()) - ties);
  const bool a = edited_dominant >= 8;
  const bool b = ecf_u > base_u;
  const bool c = ecf_wins >= 8 && p < 0.05;
  const bool t = secs < 300;
  std::ostringstream s;
  s << "(a) edited > nonedited drop in " << edited_dominant << "/10 [" << (a ? "ok" : "FAIL")
    << "]; (b) mean nonedited drop ECF " << fmt("%.4f", ecf_u) << " vs ERM "
    << fmt("%.4f", base_u) << " [" << (b ? "ok" : "FAIL") << "]; (c) ECF OOD better in "
    << ecf_wins << "/10, ties " << ties << ", sign test p " << fmt("%.3g", p) << " ["
    << (c ? "ok" : "FAIL") << "]; " << fmt("%.1f", secs) << " s [" << (t ? "ok" : "FAIL") << "]";
  return {a && b && c && t, s.str()};
}

Outcome ablation_directionality() {
  const eval::ExperimentConfig cfg = eval::ExperimentConfig::defaults();
  const eval::AblationReport r = eval::run_ablation(cfg, kSeeds);
  const double full = r.arm("full_ecf").mean_ood;
  const double no_irm = r.arm("no_irm").mean_ood;
  const double no_ocd = r.arm("no_ocd").mean_ood;
  std::ostringstream s;
  s << "mean OOD full_ecf " << fmt("%.4f", full) << ", no_irm " << fmt("%.4f", no_irm)
    << ", no_ocd " << fmt("%.4f", no_ocd) << ", neither "
    << fmt("%.4f", r.arm("neither").mean_ood);
  return {full >= no_irm && full >= no_ocd, s.str()};
}

Outcome data_efficiency() {
  const eval::ExperimentConfig cfg = eval::ExperimentConfig::defaults();
  const std::vector<std::size_t> sizes = {100, 200, 400, 800};
  const eval::EfficiencyReport r = eval::run_data_efficiency(cfg, sizes, kSeeds);
  std::set<std::tuple<std::size_t, std::string, std::uint64_t>> cells;
  bool sizes_ok = true, zero_cf = true;
  for (const auto& row : r.rows) {
    cells.insert({row.size, row.arm, row.seed});
    sizes_ok = sizes_ok && row.n_train_examples == row.size;
    if (row.arm == "erm_original") zero_cf = zero_cf && row.n_counterfactual == 0;
  }
  bool complete = r.rows.size() == sizes.size() * 3 * kSeeds.size() &&
                  cells.size() == r.rows.size();
  for (std::size_t s : sizes)
    for (const char* arm : {"ecf_cad", "erm_cad", "erm_original"})
      for (std::uint64_t seed : kSeeds) complete = complete && cells.count({s, arm, seed});
  return {complete && sizes_ok && zero_cf,
          std::to_string(r.rows.size()) + " rows (4 sizes x 3 arms x 10 seeds); complete " +
              (complete ? "yes" : "no") + ", arm sizes " + (sizes_ok ? "ok" : "wrong") +
              ", unaugmented arm counterfactuals " + (zero_cf ? "0" : "non-zero")};
}

int run(const std::string& cmd) {
  return std::system((cmd + " > /dev/null 2>&1").c_str());
}

Outcome cli_determinism() {
  const std::string cli = CADLAB_CLI_PATH;
  test::TempDir root;
  const fs::path cfg = root.path() / "exp.cfg";
  {
    std::ofstream out(cfg);
    out << "n_pairs = 120\nood_size = 200\nepochs = 4\nmodel_dim = 8\n";
  }
  std::vector<std::string> failures;
  for (int rep = 0; rep < 2; ++rep) {
    const fs::path d = root.path() / ("rep" + std::to_string(rep));
    const std::string data = (d / "data").string();
    const std::string trained = (d / "train").string();
    const std::vector<std::string> cmds = {
        cli + " generate --config " + cfg.string() + " --out " + data + " --seed 7",
        cli + " train --config " + cfg.string() + " --data " + data + " --out " + trained +
            " --seed 7",
        cli + " eval --checkpoint " + trained + "/checkpoint.json --data " + data +
            "/ood_shift.jsonl --out " + (d / "eval").string(),
        cli + " probe --checkpoint " + trained + "/checkpoint.json --data " + data +
            "/ood_shift.jsonl --out " + (d / "probe").string(),
        cli + " ablate --config " + cfg.string() + " --seeds 1,2 --out " +
            (d / "ablate").string(),
        cli + " data-efficiency --config " + cfg.string() +
            " --sizes 20,40 --seeds 1,2 --out " + (d / "efficiency").string(),
    };
    for (const auto& c : cmds) {
      if (run(c) != 0) failures.push_back("command failed: " + c);
    }
  }
  std::size_t compared = 0;
  const fs::path a = root.path() / "rep0", b = root.path() / "rep1";
  for (const auto& entry : fs::recursive_directory_iterator(a)) {
    if (!entry.is_regular_file()) continue;
    const fs::path rel = fs::relative(entry.path(), a);
    const std::string ext = rel.extension().string();
    if (ext != ".csv" && ext != ".json" && ext != ".jsonl" && ext != ".cfg") continue;
    ++compared;
    if (!fs::exists(b / rel) || test::read_file(entry.path()) != test::read_file(b / rel)) {
      failures.push_back("differs: " + rel.string());
    }
  }
  std::string detail = std::to_string(compared) + " report files compared across two runs";
  for (const auto& f : failures) detail += "; " + f;
  return {failures.empty() && compared >= 15, detail};
}

}  // namespace

int main(int argc, char** argv) {
  struct Criterion {
    int id;
    const char* name;
    std::function<Outcome()> fn;
  };
  const std::vector<Criterion> criteria = {
      {1, "gradient correctness", gradient_check},
      {2, "IRM oracle equivalence", irm_oracle},
      {3, "decomposition suite", decomposition_suite},
      {4, "ERM reduction", erm_reduction},
      {5, "myopia reproduction", myopia_reproduction},
      {6, "ablation directionality", ablation_directionality},
      {7, "data-efficiency runner", data_efficiency},
      {8, "CLI determinism", cli_determinism},
  };
  std::set<int> only;
  for (int i = 1; i < argc; ++i) only.insert(std::atoi(argv[i]));

  int failed = 0;
  for (const Criterion& c : criteria) {
    if (!only.empty() && !only.count(c.id)) continue;
    Outcome o;
    try {
      o = c.fn();
    } catch (const std::exception& e) {
      o = {false, std::string("exception: ") + e.what()};
    }
    std::cout << (o.pass ? "PASS" : "FAIL") << " criterion " << c.id << " (" << c.name
              << "): " << o.detail << std::endl;
    failed += !o.pass;
  }
  return failed == 0 ? 0 : 1;
}
