#include "cadlab/gradcore.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <string>

namespace cadlab::grad {

namespace {

constexpr std::uint32_t kNone = std::numeric_limits<std::uint32_t>::max();

Tape& tape_of(Var a, Var b) {
  if (a.tape() == nullptr || a.tape() != b.tape()) {
    throw std::invalid_argument("gradcore: operands live on different tapes");
  }
  return *a.tape();
}

Tape& tape_of(Var a) {
  if (a.tape() == nullptr) {
    throw std::invalid_argument("gradcore: operand is not attached to a tape");
  }
  return *a.tape();
}

}  // namespace

std::string_view op_name(Op op) noexcept {
  switch (op) {
    case Op::Leaf: return "leaf";
    case Op::Constant: return "const";
    case Op::Add: return "add";
    case Op::Sub: return "sub";
    case Op::Mul: return "mul";
    case Op::Div: return "div";
    case Op::Neg: return "neg";
    case Op::Scale: return "scale";
    case Op::AddConst: return "add_const";
    case Op::Square: return "square";
    case Op::Exp: return "exp";
    case Op::Log: return "log";
    case Op::Tanh: return "tanh";
    case Op::Max: return "max";
    case Op::Sum: return "sum";
  }
  return "?";
}

double Var::value() const { return tape_->node(id_).value; }

Var Tape::push(const Node& n) {
  nodes_.push_back(n);
  return Var(this, static_cast<std::uint32_t>(nodes_.size() - 1));
}

void Tape::check_owner(Var v) const {
  if (v.tape() != this) {
    throw std::invalid_argument("gradcore: variable belongs to another tape");
  }
}

Var Tape::variable(double value) {
  return push({Op::Leaf, kNone, kNone, 0.0, 0, 0, value});
}

Var Tape::constant(double value) {
  return push({Op::Constant, kNone, kNone, 0.0, 0, 0, value});
}

Var Tape::unary(Op op, Var a, double value, double constant) {
  check_owner(a);
  return push({op, a.id(), kNone, constant, 0, 0, value});
}

Var Tape::binary(Op op, Var a, Var b, double value) {
  check_owner(a);
  check_owner(b);
  return push({op, a.id(), b.id(), 0.0, 0, 0, value});
}

Var Tape::sum(std::span<const Var> terms) {
  if (terms.empty()) {
    throw std::invalid_argument("gradcore: sum of an empty list");
  }
  const auto begin = static_cast<std::uint32_t>(sum_args_.size());
  double total = 0.0;
  for (const Var& t : terms) {
    check_owner(t);
    sum_args_.push_back(t.id());
    total += t.value();
  }
  return push({Op::Sum, kNone, kNone, 0.0, begin,
               static_cast<std::uint32_t>(terms.size()), total});
}

Var add(Var a, Var b) {
  return tape_of(a, b).binary(Op::Add, a, b, a.value() + b.value());
}
Var mul(Var a, Var b) {
  return tape_of(a, b).binary(Op::Mul, a, b, a.value() * b.value());
}
Var neg(Var a) { return tape_of(a).unary(Op::Neg, a, -a.value()); }
Var scale(Var a, double c) {
  return tape_of(a).unary(Op::Scale, a, c * a.value(), c);
}
Var square(Var a) {
  return tape_of(a).unary(Op::Square, a, a.value() * a.value());
}
Var exp(Var a) { return tape_of(a).unary(Op::Exp, a, std::exp(a.value())); }
Var log(Var a) {
  if (!(a.value() > 0.0)) {
    throw std::domain_error("gradcore: log of non-positive value " +
                            std::to_string(a.value()));
  }
  return tape_of(a).unary(Op::Log, a, std::log(a.value()));
}
Var tanh(Var a) { return tape_of(a).unary(Op::Tanh, a, std::tanh(a.value())); }
Var max(Var a, Var b) {
  return tape_of(a, b).binary(Op::Max, a, b, std::max(a.value(), b.value()));
}
Var sum(std::span<const Var> terms) {
  if (terms.empty()) {
    throw std::invalid_argument("gradcore: sum of an empty list");
  }
  return tape_of(terms.front()).sum(terms);
}

Var operator+(Var a, Var b) { return add(a, b); }
Var operator-(Var a, Var b) {
  return tape_of(a, b).binary(Op::Sub, a, b, a.value() - b.value());
}
Var operator*(Var a, Var b) { return mul(a, b); }
Var operator/(Var a, Var b) {
  return tape_of(a, b).binary(Op::Div, a, b, a.value() / b.value());
}
Var operator-(Var a) { return neg(a); }
Var operator+(Var a, double c) {
  return tape_of(a).unary(Op::AddConst, a, a.value() + c, c);
}
Var operator+(double c, Var a) { return a + c; }
Var operator-(Var a, double c) { return a + (-c); }
Var operator-(double c, Var a) { return neg(a) + c; }
Var operator*(Var a, double c) { return scale(a, c); }
Var operator*(double c, Var a) { return scale(a, c); }
Var operator/(Var a, double c) { return scale(a, 1.0 / c); }

Var dot(std::span<const Var> a, std::span<const Var> b) {
  if (a.size() != b.size() || a.empty()) {
    throw std::invalid_argument("gradcore: dot of mismatched or empty vectors");
  }
  std::vector<Var> terms;
  terms.reserve(a.size());
  for (std::size_t i = 0; i < a.size(); ++i) terms.push_back(a[i] * b[i]);
  return sum(terms);
}

Var dot(std::span<const Var> a, std::span<const double> b) {
  if (a.size() != b.size() || a.empty()) {
    throw std::invalid_argument("gradcore: dot of mismatched or empty vectors");
  }
  std::vector<Var> terms;
  terms.reserve(a.size());
  for (std::size_t i = 0; i < a.size(); ++i) terms.push_back(a[i] * b[i]);
  return sum(terms);
}

Var log_sum_exp(std::span<const Var> logits) {
  if (logits.empty()) {
    throw std::invalid_argument("gradcore: log_sum_exp of an empty list");
  }
  // The shift is a constant: lse(z) = m + log sum exp(z - m) for any m, so
  // derivatives of every order are unaffected.
  double shift = logits.front().value();
  for (const Var& z : logits) shift = std::max(shift, z.value());
  std::vector<Var> terms;
  terms.reserve(logits.size());
  for (const Var& z : logits) terms.push_back(exp(z - shift));
  return log(sum(terms)) + shift;
}

std::vector<double> gradient(Var output, std::span<const Var> wrt) {
  Tape& tape = tape_of(output);
  for (const Var& w : wrt) tape.check_owner(w);

  const std::uint32_t top = output.id();
  std::vector<double> adj(static_cast<std::size_t>(top) + 1, 0.0);
  adj[top] = 1.0;

  for (std::uint32_t i = top + 1; i-- > 0;) {
    const double g = adj[i];
    if (g == 0.0) continue;
    const Tape::Node& n = tape.nodes_[i];
    switch (n.op) {
      case Op::Leaf:
      case Op::Constant:
        break;
      case Op::Add:
        adj[n.lhs] += g;
        adj[n.rhs] += g;
        break;
      case Op::Sub:
        adj[n.lhs] += g;
        adj[n.rhs] -= g;
        break;
      case Op::Mul:
        adj[n.lhs] += g * tape.nodes_[n.rhs].value;
        adj[n.rhs] += g * tape.nodes_[n.lhs].value;
        break;
      case Op::Div: {
        const double b = tape.nodes_[n.rhs].value;
        adj[n.lhs] += g / b;
        adj[n.rhs] -= g * n.value / b;
        break;
      }
      case Op::Neg:
        adj[n.lhs] -= g;
        break;
      case Op::Scale:
        adj[n.lhs] += g * n.constant;
        break;
      case Op::AddConst:
        adj[n.lhs] += g;
        break;
      case Op::Square:
        adj[n.lhs] += 2.0 * g * tape.nodes_[n.lhs].value;
        break;
      case Op::Exp:
        adj[n.lhs] += g * n.value;
        break;
      case Op::Log:
        adj[n.lhs] += g / tape.nodes_[n.lhs].value;
        break;
      case Op::Tanh:
        adj[n.lhs] += g * (1.0 - n.value * n.value);
        break;
      case Op::Max:
        if (tape.nodes_[n.lhs].value >= tape.nodes_[n.rhs].value) {
          adj[n.lhs] += g;
        } else {
          adj[n.rhs] += g;
        }
        break;
      case Op::Sum:
        for (std::uint32_t k = 0; k < n.args_count; ++k) {
          adj[tape.sum_args_[n.args_begin + k]] += g;
        }
        break;
    }
  }

  std::vector<double> out;
  out.reserve(wrt.size());
  for (const Var& w : wrt) out.push_back(w.id() <= top ? adj[w.id()] : 0.0);
  return out;
}

std::vector<Var> gradient_graph(Var output, std::span<const Var> wrt) {
  Tape& tape = tape_of(output);
  for (const Var& w : wrt) tape.check_owner(w);

  const std::uint32_t top = output.id();
  std::uint32_t bottom = top + 1;
  for (const Var& w : wrt) bottom = std::min(bottom, w.id());

  // Only nodes downstream of some wrt variable carry a useful adjoint.
  std::vector<char> live(static_cast<std::size_t>(top) + 1, 0);
  for (const Var& w : wrt) {
    if (w.id() <= top) live[w.id()] = 1;
  }
  for (std::uint32_t i = bottom; i <= top && bottom <= top; ++i) {
    if (live[i]) continue;
    const Tape::Node& n = tape.nodes_[i];
    switch (n.op) {
      case Op::Leaf:
      case Op::Constant:
        break;
      case Op::Sum:
        for (std::uint32_t k = 0; k < n.args_count; ++k) {
          if (live[tape.sum_args_[n.args_begin + k]]) {
            live[i] = 1;
            break;
          }
        }
        break;
      default:
        live[i] = static_cast<char>(live[n.lhs] ||
                                    (n.rhs != kNone && live[n.rhs]));
    }
  }

  std::vector<std::uint32_t> adj(static_cast<std::size_t>(top) + 1, kNone);
  auto accumulate = [&](std::uint32_t target, Var contribution) {
    if (!live[target]) return;
    if (adj[target] == kNone) {
      adj[target] = contribution.id();
    } else {
      adj[target] = add(Var(&tape, adj[target]), contribution).id();
    }
  };

  if (live[top]) adj[top] = tape.constant(1.0).id();

  for (std::uint32_t i = top + 1; i-- > bottom;) {
    if (adj[i] == kNone || !live[i]) continue;
    const Var g(&tape, adj[i]);
    // Copy: building contributions appends to the tape.
    const Tape::Node n = tape.nodes_[i];
    const Var self(&tape, i);
    const Var a(&tape, n.lhs);
    const Var b(&tape, n.rhs);
    switch (n.op) {
      case Op::Leaf:
      case Op::Constant:
        break;
      case Op::Add:
        accumulate(n.lhs, g);
        accumulate(n.rhs, g);
        break;
      case Op::Sub:
        accumulate(n.lhs, g);
        if (live[n.rhs]) accumulate(n.rhs, -g);
        break;
      case Op::Mul:
        if (live[n.lhs]) accumulate(n.lhs, g * b);
        if (live[n.rhs]) accumulate(n.rhs, g * a);
        break;
      case Op::Div:
        if (live[n.lhs]) accumulate(n.lhs, g / b);
        if (live[n.rhs]) accumulate(n.rhs, -(g * self) / b);
        break;
      case Op::Neg:
        accumulate(n.lhs, -g);
        break;
      case Op::Scale:
        accumulate(n.lhs, g * n.constant);
        break;
      case Op::AddConst:
        accumulate(n.lhs, g);
        break;
      case Op::Square:
        accumulate(n.lhs, (g * a) * 2.0);
        break;
      case Op::Exp:
        accumulate(n.lhs, g * self);
        break;
      case Op::Log:
        accumulate(n.lhs, g / a);
        break;
      case Op::Tanh:
        accumulate(n.lhs, g * (1.0 - square(self)));
        break;
      case Op::Max:
        if (tape.nodes_[n.lhs].value >= tape.nodes_[n.rhs].value) {
          accumulate(n.lhs, g);
        } else {
          accumulate(n.rhs, g);
        }
        break;
      case Op::Sum:
        for (std::uint32_t k = 0; k < n.args_count; ++k) {
          accumulate(tape.sum_args_[n.args_begin + k], g);
        }
        break;
    }
  }

  std::vector<Var> out;
  out.reserve(wrt.size());
  for (const Var& w : wrt) {
    if (w.id() <= top && adj[w.id()] != kNone) {
      out.push_back(Var(&tape, adj[w.id()]));
    } else {
      out.push_back(tape.constant(0.0));
    }
  }
  return out;
}

double evaluate(const ScalarFn& f, std::span<const double> point) {
  Tape tape;
  std::vector<Var> xs;
  xs.reserve(point.size());
  for (double p : point) xs.push_back(tape.variable(p));
  return f(tape, xs).value();
}

double finite_diff_check(const ScalarFn& f, std::span<const double> point,
                         double step) {
  if (!(step > 0.0)) {
    throw std::invalid_argument("finite_diff_check: step must be positive");
  }
  Tape tape;
  std::vector<Var> xs;
  xs.reserve(point.size());
  for (double p : point) xs.push_back(tape.variable(p));
  const std::vector<double> analytic = gradient(f(tape, xs), xs);

  std::vector<double> probe(point.begin(), point.end());
  double worst = 0.0;
  for (std::size_t i = 0; i < probe.size(); ++i) {
    const double x0 = probe[i];
    probe[i] = x0 + step;
    const double up = evaluate(f, probe);
    probe[i] = x0 - step;
    const double down = evaluate(f, probe);
    probe[i] = x0;
    const double numeric = (up - down) / (2.0 * step);
    if (!std::isfinite(numeric) || !std::isfinite(analytic[i])) {
      return std::numeric_limits<double>::infinity();
    }
    const double denom =
        std::max({std::abs(analytic[i]), std::abs(numeric), 1e-8});
    worst = std::max(worst, std::abs(analytic[i] - numeric) / denom);
  }
  return worst;
}

}  // namespace cadlab::grad
