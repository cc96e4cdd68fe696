#include <doctest.h>

#include <cmath>
#include <iostream>
#include <sstream>
#include <vector>

#include "cadlab/errors.hpp"
#include "cadlab/objective.hpp"
#include "cadlab/random.hpp"

using namespace cadlab;
using namespace cadlab::grad;
using namespace cadlab::objective;

namespace {

Forward from_logits(Tape& tape, const std::vector<double>& z, std::size_t label) {
  Forward f;
  for (double v : z) f.logits.push_back(tape.variable(v));
  f.label = label;
  return f;
}

Forward from_h(Tape& tape, const std::vector<double>& h, std::size_t label) {
  Forward f;
  for (double v : h) f.h.push_back(tape.variable(v));
  f.label = label;
  return f;
}

// Independent oracle: d/dw CE(w z, y) at w = 1 equals sum_i p_i z_i - z_y.
double omega_grad_oracle(const std::vector<std::vector<double>>& zs,
                         const std::vector<std::size_t>& ys) {
  double total = 0;
  for (std::size_t n = 0; n < zs.size(); ++n) {
    const auto& z = zs[n];
    double m = z[0];
    for (double v : z) m = std::max(m, v);
    double norm = 0;
    for (double v : z) norm += std::exp(v - m);
    double expect = 0;
    for (double v : z) expect += std::exp(v - m) / norm * v;
    total += expect - z[ys[n]];
  }
  return total / static_cast<double>(zs.size());
}

LabelVectors constant_rows(Tape& tape, const std::vector<std::vector<double>>& rows) {
  LabelVectors out;
  for (const auto& r : rows) {
    std::vector<Var> v;
    for (double x : r) v.push_back(tape.constant(x));
    out.push_back(v);
  }
  return out;
}

}  // namespace

TEST_CASE("prediction loss examples") {
  Tape tape;
  std::vector<Forward> one = {from_logits(tape, {0, 0}, 0)};
  CHECK(prediction_loss(one).value() == doctest::Approx(0.693147).epsilon(1e-6));
  CHECK(prediction_loss(one).value() == doctest::Approx(std::log(2.0)).epsilon(1e-15));

  std::vector<Forward> big = {from_logits(tape, {10, 0}, 0)};
  CHECK(prediction_loss(big).value() == doctest::Approx(4.54e-5).epsilon(1e-3));
  CHECK(prediction_loss(big).value() ==
        doctest::Approx(std::log1p(std::exp(-10.0))).epsilon(1e-12));

  std::vector<Forward> twice = {from_logits(tape, {1.5, -0.5}, 1),
                                from_logits(tape, {1.5, -0.5}, 1)};
  std::vector<Forward> once = {from_logits(tape, {1.5, -0.5}, 1)};
  CHECK(prediction_loss(twice).value() == doctest::Approx(prediction_loss(once).value()));

  CHECK_THROWS_AS(prediction_loss(std::span<const Forward>{}), std::invalid_argument);
}

TEST_CASE("omega gradient examples") {
  Tape tape;
  Forward a = from_logits(tape, {0, 0}, 0);
  CHECK(env_risk_omega_grad({&a}).value() == doctest::Approx(0.0));

  Forward b = from_logits(tape, {1, 0}, 0);
  const double e = std::exp(1.0);
  CHECK(env_risk_omega_grad({&b}).value() == doctest::Approx(e / (1 + e) - 1).epsilon(1e-14));
  CHECK(env_risk_omega_grad({&b}).value() == doctest::Approx(-0.268941).epsilon(1e-6));

  // Finite difference on w directly.
  auto risk = [](double w) { return std::log(std::exp(w) + 1.0) - w; };
  const double fd = (risk(1 + 1e-6) - risk(1 - 1e-6)) / 2e-6;
  CHECK(env_risk_omega_grad({&b}).value() == doctest::Approx(fd).epsilon(1e-8));

  // Two examples with omega-gradients g and -g average to 0. For logits (0, t)
  // and label 0 the gradient is t e^t / (1 + e^t); solve for -g by bisection.
  const double g = env_risk_omega_grad({&b}).value();
  auto g_of = [](double t) { return t * std::exp(t) / (1 + std::exp(t)); };
  double lo = 0.0, hi = 5.0;
  for (int i = 0; i < 200; ++i) {
    const double mid = 0.5 * (lo + hi);
    (g_of(mid) < -g ? lo : hi) = mid;
  }
  Forward c = from_logits(tape, {0, lo}, 0);
  CHECK(env_risk_omega_grad({&c}).value() == doctest::Approx(-g).epsilon(1e-12));
  CHECK(std::abs(env_risk_omega_grad({&b, &c}).value()) <= 1e-12);
}

TEST_CASE("omega gradient matches the closed form on random batches") {
  Rng rng(31);
  for (int trial = 0; trial < 100; ++trial) {
    const std::size_t n = 1 + rng.index(8);
    const std::size_t classes = 2 + rng.index(3);
    std::vector<std::vector<double>> zs(n, std::vector<double>(classes));
    std::vector<std::size_t> ys(n);
    Tape tape;
    std::vector<Forward> fw;
    for (std::size_t i = 0; i < n; ++i) {
      for (auto& v : zs[i]) v = rng.uniform(-4, 4);
      ys[i] = rng.index(classes);
      fw.push_back(from_logits(tape, zs[i], ys[i]));
    }
    ExampleRefs refs;
    for (const auto& f : fw) refs.push_back(&f);
    CHECK(std::abs(env_risk_omega_grad(refs).value() - omega_grad_oracle(zs, ys)) <= 1e-8);
  }
}

TEST_CASE("irm penalty examples and properties") {
  Tape tape;
  Forward zero_a = from_logits(tape, {0, 0}, 0);
  Forward zero_b = from_logits(tape, {2, 2}, 1);
  EnvBatches zeros = {{data::Environment::Original, {&zero_a}},
                      {data::Environment::Counterfactual, {&zero_b}}};
  CHECK(irm_penalty(zeros).value() == 0.0);

  Forward b = from_logits(tape, {1, 0}, 0);
  EnvBatches single = {{data::Environment::Original, {&b}}};
  CHECK(irm_penalty(single).value() == doctest::Approx(0.072329).epsilon(1e-5));

  Forward c = from_logits(tape, {0.3, -1.2}, 1);
  EnvBatches ab = {{data::Environment::Original, {&b}},
                   {data::Environment::Counterfactual, {&c}}};
  EnvBatches ba = {{data::Environment::Original, {&c}},
                   {data::Environment::Counterfactual, {&b}}};
  CHECK(irm_penalty(ab).value() == irm_penalty(ba).value());

  EnvBatches empty = {{data::Environment::Original, {}}};
  CHECK_THROWS_AS(irm_penalty(empty), ValidationError);
}

TEST_CASE("irm penalty equals the squared sum across environments") {
  Rng rng(32);
  for (int trial = 0; trial < 100; ++trial) {
    Tape tape;
    std::vector<Forward> ori, cad;
    std::vector<std::vector<double>> zo, zc;
    std::vector<std::size_t> yo, yc;
    for (int i = 0; i < 4; ++i) {
      zo.push_back({rng.uniform(-3, 3), rng.uniform(-3, 3)});
      zc.push_back({rng.uniform(-3, 3), rng.uniform(-3, 3)});
      yo.push_back(rng.index(2));
      yc.push_back(rng.index(2));
    }
    for (int i = 0; i < 4; ++i) {
      ori.push_back(from_logits(tape, zo[i], yo[i]));
      cad.push_back(from_logits(tape, zc[i], yc[i]));
    }
    EnvBatches envs;
    for (auto& f : ori) envs[data::Environment::Original].push_back(&f);
    for (auto& f : cad) envs[data::Environment::Counterfactual].push_back(&f);
    const double go = env_risk_omega_grad(envs[data::Environment::Original]).value();
    const double gc = env_risk_omega_grad(envs[data::Environment::Counterfactual]).value();
    const double p = irm_penalty(envs).value();
    CHECK(std::abs(p - (go * go + gc * gc)) <= 1e-12);
    CHECK(p >= 0.0);
    const double oracle = std::pow(omega_grad_oracle(zo, yo), 2) +
                          std::pow(omega_grad_oracle(zc, yc), 2);
    CHECK(std::abs(p - oracle) <= 1e-8);
  }
}

TEST_CASE("ocd loss examples") {
  Tape tape;
  const LabelVectors rows = constant_rows(tape, {{1, 0}, {1, 0}});
  // h = (2,1) -> perp (0,1); h* = (5,-1) -> perp (0,-1); distance^2 = 4.
  Forward a = from_h(tape, {2, 1}, 0);
  Forward b = from_h(tape, {5, -1}, 1);
  std::vector<OcdPair> pairs = {{&a, &b}};
  auto r = ocd_loss(pairs, rows);
  REQUIRE(r.value);
  CHECK(r.value->value() == doctest::Approx(4.0));
  CHECK(r.n_pairs_used == 1);

  Forward c = from_h(tape, {7, 1}, 1);
  pairs = {{&a, &c}};
  CHECK(ocd_loss(pairs, rows).value->value() == doctest::Approx(0.0));

  // Swapping the sides of every pair is symmetric.
  pairs = {{&b, &a}};
  CHECK(ocd_loss(pairs, rows).value->value() == doctest::Approx(4.0));
}

TEST_CASE("ocd loss uses each side's own label vector") {
  Tape tape;
  const LabelVectors rows = constant_rows(tape, {{1, 0}, {0, 1}});
  // h = (2,3) vs row 0 -> perp (0,3); h* = (2,3) vs row 1 -> perp (2,0).
  Forward a = from_h(tape, {2, 3}, 0);
  Forward b = from_h(tape, {2, 3}, 1);
  std::vector<OcdPair> pairs = {{&a, &b}};
  CHECK(ocd_loss(pairs, rows).value->value() == doctest::Approx(13.0));
}

TEST_CASE("ocd loss is invariant to shifts along the gold label vector") {
  Rng rng(33);
  for (int trial = 0; trial < 200; ++trial) {
    const std::size_t d = 1 + rng.index(12);
    std::vector<std::vector<double>> w(2, std::vector<double>(d));
    for (auto& row : w)
      for (auto& v : row) v = rng.uniform(-1, 1);
    std::vector<double> h(d), hs(d);
    for (auto& v : h) v = rng.uniform(-1, 1);
    for (auto& v : hs) v = rng.uniform(-1, 1);
    const double lambda = rng.uniform(-5, 5);
    std::vector<double> shifted = h;
    for (std::size_t j = 0; j < d; ++j) shifted[j] += lambda * w[0][j];

    Tape tape;
    const LabelVectors rows = constant_rows(tape, w);
    Forward a = from_h(tape, h, 0), a2 = from_h(tape, shifted, 0), b = from_h(tape, hs, 1);
    std::vector<OcdPair> p1 = {{&a, &b}}, p2 = {{&a2, &b}};
    const double l1 = ocd_loss(p1, rows).value->value();
    const double l2 = ocd_loss(p2, rows).value->value();
    CHECK(std::abs(l1 - l2) <= 1e-9 * std::max(1.0, l1));
    CHECK(l1 >= 0.0);
  }
}

TEST_CASE("ocd loss skips degenerate label vectors") {
  Tape tape;
  const LabelVectors rows = constant_rows(tape, {{0, 0}, {1, 0}});
  Forward a = from_h(tape, {1, 1}, 0);
  Forward b = from_h(tape, {1, 2}, 1);
  std::vector<OcdPair> pairs = {{&a, &b}};
  std::ostringstream captured;
  auto* old = std::clog.rdbuf(captured.rdbuf());
  const auto r = ocd_loss(pairs, rows);
  std::clog.rdbuf(old);
  CHECK_FALSE(r.value);
  CHECK(r.n_pairs_used == 0);
  CHECK_FALSE(captured.str().empty());
}

TEST_CASE("combined loss accounting") {
  Rng rng(34);
  for (int trial = 0; trial < 50; ++trial) {
    Tape tape;
    const LabelVectors rows =
        constant_rows(tape, {{rng.uniform(-1, 1), rng.uniform(-1, 1), rng.uniform(-1, 1)},
                             {rng.uniform(-1, 1), rng.uniform(-1, 1), rng.uniform(-1, 1)}});
    std::vector<Forward> batch;
    for (int i = 0; i < 4; ++i) {
      const std::size_t y = static_cast<std::size_t>(i % 2);
      Forward f = from_h(tape, {rng.uniform(-1, 1), rng.uniform(-1, 1), rng.uniform(-1, 1)}, y);
      for (const auto& row : rows) f.logits.push_back(dot(f.h, row));
      batch.push_back(f);
    }
    std::vector<OcdPair> pairs = {{&batch[0], &batch[1]}, {&batch[2], &batch[3]}};
    EnvBatches envs = {{data::Environment::Original, {&batch[0], &batch[2]}},
                       {data::Environment::Counterfactual, {&batch[1], &batch[3]}}};
    CombinedInputs in;
    in.batch = batch;
    in.pairs = pairs;
    in.env_batches = &envs;
    in.label_vectors = &rows;
    in.alpha = rng.uniform(0, 2);
    in.beta = rng.uniform(0, 2);
    const CombinedLoss loss = combined_loss(in);
    const auto& b = loss.breakdown;
    CHECK(std::abs(b.total - (b.l_p + b.alpha * b.l_irm + b.beta * b.l_ocd)) <= 1e-12);
    CHECK(loss.total.value() == b.total);
    CHECK(b.l_p == prediction_loss(batch).value());
    CHECK(b.l_irm == irm_penalty(envs).value());
    CHECK(b.l_ocd == ocd_loss(pairs, rows).value->value());
    CHECK(b.n_pairs_used == 2);

    in.alpha = 0.0;
    in.beta = 0.0;
    in.env_batches = nullptr;
    in.label_vectors = nullptr;
    const CombinedLoss erm = combined_loss(in);
    CHECK(erm.total.value() == prediction_loss(batch).value());
    CHECK(erm.breakdown.l_irm == 0.0);
    CHECK(erm.breakdown.l_ocd == 0.0);
  }
}

TEST_CASE("combined loss weights known components") {
  Tape tape;
  const LabelVectors rows = constant_rows(tape, {{1, 0}, {1, 0}});
  Forward a = from_h(tape, {0.0, 1.0}, 0);
  Forward b = from_h(tape, {0.0, 0.0}, 1);
  a.logits = {tape.variable(0.0), tape.variable(0.0)};
  b.logits = {tape.variable(0.0), tape.variable(0.0)};
  std::vector<Forward> batch = {a, b};
  std::vector<OcdPair> pairs = {{&batch[0], &batch[1]}};
  EnvBatches envs = {{data::Environment::Original, {&batch[0]}},
                     {data::Environment::Counterfactual, {&batch[1]}}};
  CombinedInputs in{batch, pairs, &envs, &rows, 0.1, 0.1, PredictionLossMode::Pooled};
  const auto bd = combined_loss(in).breakdown;
  // l_p = ln 2, l_irm = 0, l_ocd = 1.
  CHECK(bd.l_p == doctest::Approx(std::log(2.0)));
  CHECK(bd.l_irm == doctest::Approx(0.0));
  CHECK(bd.l_ocd == doctest::Approx(1.0));
  CHECK(bd.total == doctest::Approx(std::log(2.0) + 0.1));
}

TEST_CASE("environment-mean prediction loss") {
  Tape tape;
  Forward a = from_logits(tape, {0, 0}, 0);
  Forward b = from_logits(tape, {3, 0}, 0);
  Forward c = from_logits(tape, {-1, 2}, 0);
  std::vector<Forward> batch = {a, b, c};
  EnvBatches envs = {{data::Environment::Original, {&batch[0]}},
                     {data::Environment::Counterfactual, {&batch[1], &batch[2]}}};
  CombinedInputs in;
  in.batch = batch;
  in.env_batches = &envs;
  in.prediction_mode = PredictionLossMode::EnvironmentMean;
  const double lp = combined_loss(in).breakdown.l_p;
  const double r0 = std::log(2.0);
  const double r1 = 0.5 * (std::log1p(std::exp(-3.0)) + (std::log(std::exp(-1.0) + std::exp(2.0)) + 1.0));
  CHECK(lp == doctest::Approx(0.5 * (r0 + r1)));
}
