#pragma once

// Reverse-mode automatic differentiation over scalar nodes.
//
// A Tape owns every node created while building one expression graph. Nodes
// are appended in creation order, which is therefore a valid topological
// order. Backward passes can run in two modes:
//
//   * gradient()       accumulates plain doubles;
//   * gradient_graph() records the adjoint computation on the same tape, so
//     the returned gradients are themselves Vars that can be differentiated
//     again (double backpropagation).

#include <cstdint>
#include <functional>
#include <span>
#include <stdexcept>
#include <string_view>
#include <vector>

namespace cadlab::grad {

enum class Op : std::uint8_t {
  Leaf,
  Constant,
  Add,
  Sub,
  Mul,
  Div,
  Neg,
  Scale,
  AddConst,
  Square,
  Exp,
  Log,
  Tanh,
  Max,
  Sum,
};

std::string_view op_name(Op op) noexcept;

class Tape;

/// Handle to one scalar node on a Tape. Cheap to copy.
class Var {
 public:
  Var() = default;

  double value() const;
  Tape* tape() const noexcept { return tape_; }
  std::uint32_t id() const noexcept { return id_; }
  bool valid() const noexcept { return tape_ != nullptr; }

 private:
  friend class Tape;
  friend std::vector<double> gradient(Var, std::span<const Var>);
  friend std::vector<Var> gradient_graph(Var, std::span<const Var>);
  Var(Tape* tape, std::uint32_t id) : tape_(tape), id_(id) {}

  Tape* tape_ = nullptr;
  std::uint32_t id_ = 0;
};

class Tape {
 public:
  struct Node {
    Op op;
    std::uint32_t lhs;
    std::uint32_t rhs;
    // Scale factor / additive constant, or index into the Sum argument list.
    double constant;
    std::uint32_t args_begin;
    std::uint32_t args_count;
    double value;
  };

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Var variable(double value);
  Var constant(double value);

  std::size_t size() const noexcept { return nodes_.size(); }
  const Node& node(std::uint32_t id) const { return nodes_[id]; }
  void reserve(std::size_t n) { nodes_.reserve(n); }

  // Raw node constructors used by the free operator functions.
  Var unary(Op op, Var a, double value, double constant = 0.0);
  Var binary(Op op, Var a, Var b, double value);
  Var sum(std::span<const Var> terms);

 private:
  friend std::vector<double> gradient(Var, std::span<const Var>);
  friend std::vector<Var> gradient_graph(Var, std::span<const Var>);

  Var push(const Node& n);
  void check_owner(Var v) const;

  std::vector<Node> nodes_;
  std::vector<std::uint32_t> sum_args_;
};

Var operator+(Var a, Var b);
Var operator-(Var a, Var b);
Var operator*(Var a, Var b);
Var operator/(Var a, Var b);
Var operator-(Var a);
Var operator+(Var a, double c);
Var operator+(double c, Var a);
Var operator-(Var a, double c);
Var operator-(double c, Var a);
Var operator*(Var a, double c);
Var operator*(double c, Var a);
Var operator/(Var a, double c);

Var add(Var a, Var b);
Var mul(Var a, Var b);
Var neg(Var a);
Var scale(Var a, double c);
Var square(Var a);
Var exp(Var a);
/// Throws std::domain_error for a non-positive argument.
Var log(Var a);
Var tanh(Var a);
/// Subgradient routes to `a` on ties.
Var max(Var a, Var b);
/// Sum of a non-empty list of terms (one node, many parents).
Var sum(std::span<const Var> terms);
Var dot(std::span<const Var> a, std::span<const Var> b);
Var dot(std::span<const Var> a, std::span<const double> b);

/// log(sum_i exp(z_i)), stabilized by subtracting the largest value.
Var log_sum_exp(std::span<const Var> logits);

/// d(output)/d(wrt_i) as plain doubles. Variables outside the output's
/// ancestry get exactly 0.
std::vector<double> gradient(Var output, std::span<const Var> wrt);

/// d(output)/d(wrt_i) recorded as new nodes on the output's tape, so the
/// result can feed further graph construction and a second backward pass.
/// Unconnected variables get a constant 0 node.
std::vector<Var> gradient_graph(Var output, std::span<const Var> wrt);

/// Builds a scalar expression of the given inputs on a fresh tape.
using ScalarFn = std::function<Var(Tape&, std::span<const Var>)>;

/// Compares gradient() against central differences at `point`. Returns the
/// max over coordinates of |analytic - numeric| / max(|analytic|, |numeric|,
/// 1e-8); a non-finite coordinate yields +infinity.
double finite_diff_check(const ScalarFn& f, std::span<const double> point,
                         double step);

/// Value of f at `point`, evaluated on a throwaway tape.
double evaluate(const ScalarFn& f, std::span<const double> point);

}  // namespace cadlab::grad
