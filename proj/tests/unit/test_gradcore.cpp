#include <doctest.h>

#include <cmath>
#include <functional>
#include <limits>
#include <stdexcept>
#include <vector>

#include "cadlab/gradcore.hpp"
#include "cadlab/random.hpp"

using namespace cadlab::grad;

namespace {

struct UnaryCase {
  const char* name;
  std::function<Var(Var)> build;
  std::function<double(double)> derivative;  // hand-written
  double lo, hi;
};

struct BinaryCase {
  const char* name;
  std::function<Var(Var, Var)> build;
  std::function<double(double, double)> d_a;
  std::function<double(double, double)> d_b;
  double lo, hi;
};

}  // namespace

TEST_CASE("unary ops match hand derivatives and central differences") {
  const std::vector<UnaryCase> cases = {
      {"neg", [](Var a) { return -a; }, [](double) { return -1.0; }, -3, 3},
      {"scale", [](Var a) { return a * 2.5; }, [](double) { return 2.5; }, -3, 3},
      {"add_const", [](Var a) { return a + 4.0; }, [](double) { return 1.0; }, -3, 3},
      {"square", [](Var a) { return square(a); }, [](double x) { return 2 * x; }, -3, 3},
      {"exp", [](Var a) { return exp(a); }, [](double x) { return std::exp(x); }, -3, 3},
      {"log", [](Var a) { return log(a); }, [](double x) { return 1 / x; }, 0.1, 5},
      {"tanh", [](Var a) { return tanh(a); },
       [](double x) { return 1 - std::tanh(x) * std::tanh(x); }, -3, 3},
  };
  cadlab::Rng rng(11);
  for (const auto& c : cases) {
    CAPTURE(c.name);
    for (int i = 0; i < 100; ++i) {
      const double x = rng.uniform(c.lo, c.hi);
      Tape tape;
      const Var a = tape.variable(x);
      const Var out = c.build(a);
      const std::vector<Var> wrt = {a};
      const double g = gradient(out, wrt)[0];
      CHECK(g == doctest::Approx(c.derivative(x)).epsilon(1e-12));

      const std::vector<double> pt = {x};
      const ScalarFn f = [&](Tape&, std::span<const Var> v) { return c.build(v[0]); };
      CHECK(finite_diff_check(f, pt, 1e-5) < 1e-6);
    }
  }
}

TEST_CASE("binary ops match hand derivatives and central differences") {
  const std::vector<BinaryCase> cases = {
      {"add", [](Var a, Var b) { return a + b; }, [](double, double) { return 1.0; },
       [](double, double) { return 1.0; }, -3, 3},
      {"sub", [](Var a, Var b) { return a - b; }, [](double, double) { return 1.0; },
       [](double, double) { return -1.0; }, -3, 3},
      {"mul", [](Var a, Var b) { return a * b; }, [](double, double y) { return y; },
       [](double x, double) { return x; }, -3, 3},
      {"div", [](Var a, Var b) { return a / b; }, [](double, double y) { return 1 / y; },
       [](double x, double y) { return -x / (y * y); }, 0.5, 3},
  };
  cadlab::Rng rng(12);
  for (const auto& c : cases) {
    CAPTURE(c.name);
    for (int i = 0; i < 100; ++i) {
      const double x = rng.uniform(c.lo, c.hi);
      const double y = rng.uniform(c.lo, c.hi);
      Tape tape;
      const std::vector<Var> v = {tape.variable(x), tape.variable(y)};
      const auto g = gradient(c.build(v[0], v[1]), v);
      CHECK(g[0] == doctest::Approx(c.d_a(x, y)).epsilon(1e-12));
      CHECK(g[1] == doctest::Approx(c.d_b(x, y)).epsilon(1e-12));

      const std::vector<double> pt = {x, y};
      const ScalarFn f = [&](Tape&, std::span<const Var> w) { return c.build(w[0], w[1]); };
      CHECK(finite_diff_check(f, pt, 1e-5) < 1e-6);
    }
  }
}

TEST_CASE("max routes the gradient to the larger argument, ties to the first") {
  Tape tape;
  const std::vector<Var> v = {tape.variable(2.0), tape.variable(1.0)};
  auto g = gradient(max(v[0], v[1]), v);
  CHECK(g == std::vector<double>{1.0, 0.0});
  g = gradient(max(v[1], v[0]), v);
  CHECK(g == std::vector<double>{1.0, 0.0});

  Tape t2;
  const std::vector<Var> w = {t2.variable(3.0), t2.variable(3.0)};
  CHECK(gradient(max(w[0], w[1]), w) == std::vector<double>{1.0, 0.0});
}

TEST_CASE("sum, dot and log_sum_exp") {
  cadlab::Rng rng(13);
  for (int trial = 0; trial < 100; ++trial) {
    Tape tape;
    std::vector<double> xs(5), cs(5);
    std::vector<Var> vs;
    for (std::size_t i = 0; i < 5; ++i) {
      xs[i] = rng.uniform(-4, 4);
      cs[i] = rng.uniform(-2, 2);
      vs.push_back(tape.variable(xs[i]));
    }
    // log-sum-exp: gradient is softmax.
    const Var lse = log_sum_exp(vs);
    double m = xs[0];
    for (double x : xs) m = std::max(m, x);
    double z = 0;
    for (double x : xs) z += std::exp(x - m);
    CHECK(lse.value() == doctest::Approx(m + std::log(z)).epsilon(1e-14));
    const auto g = gradient(lse, vs);
    for (std::size_t i = 0; i < 5; ++i) {
      CHECK(g[i] == doctest::Approx(std::exp(xs[i] - m) / z).epsilon(1e-12));
    }

    const auto gd = gradient(dot(vs, cs), vs);
    for (std::size_t i = 0; i < 5; ++i) CHECK(gd[i] == cs[i]);

    const auto gs = gradient(sum(vs), vs);
    for (double v : gs) CHECK(v == 1.0);

    const auto gvv = gradient(dot(vs, vs), vs);
    for (std::size_t i = 0; i < 5; ++i) CHECK(gvv[i] == doctest::Approx(2 * xs[i]));
  }
}

TEST_CASE("log_sum_exp stays finite for large logits") {
  Tape tape;
  const std::vector<Var> vs = {tape.variable(1000.0), tape.variable(999.0)};
  const Var lse = log_sum_exp(vs);
  CHECK(std::isfinite(lse.value()));
  CHECK(lse.value() == doctest::Approx(1000.0 + std::log1p(std::exp(-1.0))));
}

TEST_CASE("gradient is linear in the output") {
  cadlab::Rng rng(14);
  for (int trial = 0; trial < 50; ++trial) {
    const double x = rng.uniform(-2, 2), y = rng.uniform(-2, 2);
    const double a = rng.uniform(-3, 3), b = rng.uniform(-3, 3);
    Tape tape;
    const std::vector<Var> v = {tape.variable(x), tape.variable(y)};
    const Var f = exp(v[0]) * v[1];
    const Var g = tanh(v[0] - v[1] * v[1]);
    const auto gf = gradient(f, v);
    const auto gg = gradient(g, v);
    const auto gc = gradient(f * a + g * b, v);
    for (int i = 0; i < 2; ++i) {
      CHECK(gc[i] == doctest::Approx(a * gf[i] + b * gg[i]).epsilon(1e-12));
    }
  }
}

TEST_CASE("unconnected variables get zero gradient") {
  Tape tape;
  const std::vector<Var> v = {tape.variable(1.0), tape.variable(2.0)};
  const Var out = square(v[0]);
  CHECK(gradient(out, v)[1] == 0.0);
  const auto gg = gradient_graph(out, v);
  CHECK(gg[1].value() == 0.0);
}

TEST_CASE("second derivatives through gradient_graph") {
  cadlab::Rng rng(15);
  for (int trial = 0; trial < 100; ++trial) {
    const double x = rng.uniform(-1.5, 1.5), y = rng.uniform(-1.5, 1.5);
    Tape tape;
    const std::vector<Var> v = {tape.variable(x), tape.variable(y)};
    // f = x y^2 + exp(x y) + tanh(x)
    const Var f = v[0] * square(v[1]) + exp(v[0] * v[1]) + tanh(v[0]);
    const auto g = gradient_graph(f, v);
    const double e = std::exp(x * y);
    CHECK(g[0].value() == doctest::Approx(y * y + y * e + 1 - std::pow(std::tanh(x), 2)));
    CHECK(g[1].value() == doctest::Approx(2 * x * y + x * e));

    const auto hx = gradient(g[0], v);
    const auto hy = gradient(g[1], v);
    const double t = std::tanh(x);
    CHECK(hx[0] == doctest::Approx(y * y * e - 2 * t * (1 - t * t)).epsilon(1e-10));
    CHECK(hx[1] == doctest::Approx(2 * y + e + x * y * e).epsilon(1e-10));
    CHECK(hy[1] == doctest::Approx(2 * x + x * x * e).epsilon(1e-10));
    // Mixed partials agree.
    CHECK(hx[1] == doctest::Approx(hy[0]).epsilon(1e-12));
  }
}

TEST_CASE("gradient of a squared gradient (penalty shape)") {
  // p(x) = (d/dw (w x)^2 at w=1)^2 = (2 x^2)^2 = 4 x^4, dp/dx = 16 x^3.
  cadlab::Rng rng(16);
  for (int trial = 0; trial < 50; ++trial) {
    const double x = rng.uniform(-2, 2);
    Tape tape;
    const Var vx = tape.variable(x);
    const Var w = tape.variable(1.0);
    const std::vector<Var> ws = {w};
    const Var inner = gradient_graph(square(w * vx), ws)[0];
    const Var p = square(inner);
    CHECK(p.value() == doctest::Approx(4 * std::pow(x, 4)));
    const std::vector<Var> xs = {vx};
    CHECK(gradient(p, xs)[0] == doctest::Approx(16 * std::pow(x, 3)).epsilon(1e-12));
  }
}

TEST_CASE("backward passes are deterministic") {
  auto run = [] {
    Tape tape;
    std::vector<Var> v;
    for (int i = 0; i < 8; ++i) v.push_back(tape.variable(0.1 * i - 0.3));
    const Var out = log_sum_exp(v) * tanh(dot(v, v));
    return gradient(out, v);
  };
  CHECK(run() == run());
}

TEST_CASE("domain and argument errors") {
  Tape tape;
  const Var zero = tape.variable(0.0);
  CHECK_THROWS_AS(log(zero), std::domain_error);
  CHECK_THROWS_AS(log(tape.variable(-1.0)), std::domain_error);

  const ScalarFn f = [](Tape&, std::span<const Var> v) { return square(v[0]); };
  const std::vector<double> pt = {1.0};
  CHECK_THROWS(finite_diff_check(f, pt, 0.0));

  const ScalarFn blowup = [](Tape&, std::span<const Var> v) { return exp(v[0] * 1000.0); };
  CHECK(finite_diff_check(blowup, pt, 1e-4) == std::numeric_limits<double>::infinity());
}
