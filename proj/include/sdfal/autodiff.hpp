#pragma once

// Reverse-mode automatic differentiation over scalars.
//
// A Tape records every primitive operation as a node with its local partial
// derivatives, evaluated eagerly in double precision. Tape::backward() sweeps
// the nodes in reverse creation order and returns one adjoint per node.
//
// Var is a cheap handle (tape pointer, node index, cached value). A Var
// without a tape is a constant: arithmetic on constants records nothing, so
// the same templated code runs with plain doubles, constant Vars and tracked
// Vars.
//
// Subgradient conventions (pinned by tests):
//   min/max/abs   gradient flows to the first argument on ties
//   sqrt(0)       partial is 0
//   norm(0)       partials are 0

#include <cstdint>
#include <functional>
#include <span>
#include <vector>

#include "sdfal/errors.hpp"

namespace sdfal::ad {

class Tape;

class Var {
 public:
  Var() = default;
  Var(double constant) : value_(constant) {}  // NOLINT: implicit by design of mixed arithmetic

  double value() const { return value_; }
  bool is_constant() const { return tape_ == nullptr; }
  Tape* tape() const { return tape_; }
  std::uint32_t index() const { return index_; }

 private:
  friend class Tape;
  Var(Tape* tape, std::uint32_t index, double value)
      : tape_(tape), index_(index), value_(value) {}

  Tape* tape_ = nullptr;
  std::uint32_t index_ = 0;
  double value_ = 0.0;
};

class Adjoints;

// Receives adjoint contributions from a custom operation's backward callback.
class AdjointSink {
 public:
  void add(const Var& input, double contribution);

 private:
  friend class Tape;
  AdjointSink(const Tape* tape, std::vector<double>* adjoints)
      : tape_(tape), adjoints_(adjoints) {}
  const Tape* tape_;
  std::vector<double>* adjoints_;
};

class Tape {
 public:
  // output_adjoints has one entry per output of the custom op, in order.
  using CustomBackward =
      std::function<void(std::span<const double> output_adjoints, AdjointSink& sink)>;

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  // New independent variable (leaf).
  Var variable(double value);
  std::vector<Var> variables(std::span<const double> values);

  // Records a node with the given local partials. Constant inputs are
  // skipped; if every input is constant the result is a constant.
  Var record(double value, std::span<const Var> inputs, std::span<const double> partials);
  Var record(double value, const Var& a, double da);
  Var record(double value, const Var& a, double da, const Var& b, double db);

  // Records a multi-output operation whose backward pass is supplied by the
  // caller. The callback must only add into inputs recorded earlier on this
  // tape.
  std::vector<Var> record_custom(std::span<const double> values, CustomBackward backward);

  // Reverse sweep from a scalar root recorded on this tape.
  Adjoints backward(const Var& root) const;

  std::size_t size() const { return nodes_.size(); }
  std::size_t edge_count() const { return edge_input_.size(); }
  bool owns(const Var& v) const { return v.tape() == this && v.index() < nodes_.size(); }

  // Drops every node. Vars created before clear() become dangling.
  void clear();

 private:
  struct Node {
    std::uint32_t edge_begin;
    std::uint32_t edge_end;
  };
  struct CustomOp {
    std::uint32_t first_output;
    std::uint32_t output_count;
    CustomBackward backward;
  };

  std::uint32_t push_node();
  void check_input(const Var& v) const;

  std::vector<Node> nodes_;
  std::vector<std::uint32_t> edge_input_;
  std::vector<double> edge_partial_;
  std::vector<CustomOp> custom_ops_;
};

// Result of a backward pass: d(root)/d(node) for every node on the tape.
class Adjoints {
 public:
  // Constants have adjoint 0.
  double operator[](const Var& v) const;
  std::span<const double> raw() const { return adjoints_; }

 private:
  friend class Tape;
  Adjoints(const Tape* tape, std::vector<double> adjoints)
      : tape_(tape), adjoints_(std::move(adjoints)) {}
  const Tape* tape_;
  std::vector<double> adjoints_;
};

// Value and adjoint of a leaf after a backward pass.
struct DualValue {
  double value = 0.0;
  double adjoint = 0.0;
};

inline DualValue dual(const Var& v, const Adjoints& adjoints) {
  return {v.value(), adjoints[v]};
}

// ---- arithmetic ----

Var operator+(const Var& a, const Var& b);
Var operator-(const Var& a, const Var& b);
Var operator*(const Var& a, const Var& b);
Var operator/(const Var& a, const Var& b);
Var operator-(const Var& a);

inline Var& operator+=(Var& a, const Var& b) { return a = a + b; }
inline Var& operator-=(Var& a, const Var& b) { return a = a - b; }
inline Var& operator*=(Var& a, const Var& b) { return a = a * b; }
inline Var& operator/=(Var& a, const Var& b) { return a = a / b; }

// Comparisons look at values only.
inline bool operator<(const Var& a, const Var& b) { return a.value() < b.value(); }
inline bool operator>(const Var& a, const Var& b) { return a.value() > b.value(); }
inline bool operator<=(const Var& a, const Var& b) { return a.value() <= b.value(); }
inline bool operator>=(const Var& a, const Var& b) { return a.value() >= b.value(); }

Var sqrt(const Var& a);
Var exp(const Var& a);
Var log(const Var& a);
Var tanh(const Var& a);
Var sin(const Var& a);
Var cos(const Var& a);
Var abs(const Var& a);
Var min(const Var& a, const Var& b);
Var max(const Var& a, const Var& b);
Var clamp(const Var& a, double lo, double hi);
Var square(const Var& a);

// ---- small dense ops ----

Var sum(std::span<const Var> xs);
Var dot(std::span<const Var> a, std::span<const Var> b);
// sum_i coeffs[i] * xs[i] recorded as a single node.
Var linear_combination(std::span<const double> coeffs, std::span<const Var> xs);
// Euclidean norm recorded as a single node.
Var norm(std::span<const Var> xs);
// y = W x with W row-major (rows x cols) constant.
std::vector<Var> matvec(std::span<const double> w_row_major, std::size_t rows,
                        std::span<const Var> x);
std::vector<Var> softmax(std::span<const Var> xs);

// ---- gradient checking ----

using ScalarFunction = std::function<Var(Tape&, std::span<const Var>)>;

struct GradCheckResult {
  double max_relative_error = 0.0;
  std::vector<double> analytic;
  std::vector<double> numeric;
};

// max_i |analytic_i - central_i| / max(1, |central_i|). Throws NumericError if
// any evaluation is non-finite.
GradCheckResult grad_check(const ScalarFunction& f, std::span<const double> x, double h);

}  // namespace sdfal::ad
