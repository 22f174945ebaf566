#include "sdfal/autodiff.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

namespace sdfal::ad {

namespace {

Tape* common_tape(const Var& a, const Var& b) {
  Tape* ta = a.tape();
  Tape* tb = b.tape();
  if (ta != nullptr && tb != nullptr && ta != tb) {
    throw UsageError("autodiff: operands belong to different tapes");
  }
  return ta != nullptr ? ta : tb;
}

Tape* common_tape(std::span<const Var> xs) {
  Tape* tape = nullptr;
  for (const Var& x : xs) {
    if (x.tape() == nullptr) continue;
    if (tape != nullptr && tape != x.tape()) {
      throw UsageError("autodiff: operands belong to different tapes");
    }
    tape = x.tape();
  }
  return tape;
}

}  // namespace

void AdjointSink::add(const Var& input, double contribution) {
  if (input.is_constant()) return;
  if (input.tape() != tape_) {
    throw UsageError("autodiff: custom op wrote to a foreign tape");
  }
  (*adjoints_)[input.index()] += contribution;
}

std::uint32_t Tape::push_node() {
  if (nodes_.size() >= std::numeric_limits<std::uint32_t>::max()) {
    throw UsageError("autodiff: tape node limit exceeded");
  }
  const auto begin = static_cast<std::uint32_t>(edge_input_.size());
  nodes_.push_back({begin, begin});
  return static_cast<std::uint32_t>(nodes_.size() - 1);
}

void Tape::check_input(const Var& v) const {
  if (v.tape() != this || v.index() >= nodes_.size()) {
    throw UsageError("autodiff: input is not recorded on this tape");
  }
}

Var Tape::variable(double value) {
  const std::uint32_t idx = push_node();
  return Var(this, idx, value);
}

std::vector<Var> Tape::variables(std::span<const double> values) {
  std::vector<Var> out;
  out.reserve(values.size());
  for (double v : values) out.push_back(variable(v));
  return out;
}

Var Tape::record(double value, std::span<const Var> inputs, std::span<const double> partials) {
  bool any = false;
  for (const Var& in : inputs) {
    if (!in.is_constant()) {
      check_input(in);
      any = true;
    }
  }
  if (!any) return Var(value);
  const std::uint32_t idx = push_node();
  for (std::size_t i = 0; i < inputs.size(); ++i) {
    if (inputs[i].is_constant()) continue;
    edge_input_.push_back(inputs[i].index());
    edge_partial_.push_back(partials[i]);
  }
  nodes_[idx].edge_end = static_cast<std::uint32_t>(edge_input_.size());
  return Var(this, idx, value);
}

Var Tape::record(double value, const Var& a, double da) {
  if (a.is_constant()) return Var(value);
  check_input(a);
  const std::uint32_t idx = push_node();
  edge_input_.push_back(a.index());
  edge_partial_.push_back(da);
  nodes_[idx].edge_end = static_cast<std::uint32_t>(edge_input_.size());
  return Var(this, idx, value);
}

Var Tape::record(double value, const Var& a, double da, const Var& b, double db) {
  if (a.is_constant()) return record(value, b, db);
  if (b.is_constant()) return record(value, a, da);
  check_input(a);
  check_input(b);
  const std::uint32_t idx = push_node();
  edge_input_.push_back(a.index());
  edge_partial_.push_back(da);
  edge_input_.push_back(b.index());
  edge_partial_.push_back(db);
  nodes_[idx].edge_end = static_cast<std::uint32_t>(edge_input_.size());
  return Var(this, idx, value);
}

std::vector<Var> Tape::record_custom(std::span<const double> values, CustomBackward backward) {
  std::vector<Var> out;
  out.reserve(values.size());
  if (values.empty()) return out;
  const auto first = static_cast<std::uint32_t>(nodes_.size());
  for (double v : values) {
    const std::uint32_t idx = push_node();
    out.push_back(Var(this, idx, v));
  }
  custom_ops_.push_back({first, static_cast<std::uint32_t>(values.size()), std::move(backward)});
  return out;
}

Adjoints Tape::backward(const Var& root) const {
  if (root.is_constant() || root.tape() != this || root.index() >= nodes_.size()) {
    throw UsageError("autodiff: backward root is not recorded on this tape");
  }
  std::vector<double> adj(nodes_.size(), 0.0);
  adj[root.index()] = 1.0;
  AdjointSink sink(this, &adj);

  // Custom ops are stored in creation order; walk them backwards alongside
  // the node sweep and fire each one when the sweep reaches its first output.
  std::ptrdiff_t op = static_cast<std::ptrdiff_t>(custom_ops_.size()) - 1;
  for (std::int64_t i = root.index(); i >= 0; --i) {
    const auto idx = static_cast<std::uint32_t>(i);
    const double a = adj[idx];
    const Node& node = nodes_[idx];
    if (a != 0.0) {
      for (std::uint32_t e = node.edge_begin; e < node.edge_end; ++e) {
        adj[edge_input_[e]] += edge_partial_[e] * a;
      }
    }
    while (op >= 0 && custom_ops_[op].first_output > idx) --op;
    if (op >= 0 && custom_ops_[op].first_output == idx) {
      const CustomOp& c = custom_ops_[op];
      // Outputs past the root were never reached and still hold zero.
      std::span<const double> out_adj(adj.data() + c.first_output, c.output_count);
      bool any = false;
      for (double v : out_adj) any = any || v != 0.0;
      if (any) {
        // Copy: the callback writes into the same vector.
        std::vector<double> copy(out_adj.begin(), out_adj.end());
        c.backward(copy, sink);
      }
      --op;
    }
  }
  return Adjoints(this, std::move(adj));
}

void Tape::clear() {
  nodes_.clear();
  edge_input_.clear();
  edge_partial_.clear();
  custom_ops_.clear();
}

double Adjoints::operator[](const Var& v) const {
  if (v.is_constant()) return 0.0;
  if (v.tape() != tape_ || v.index() >= adjoints_.size()) {
    throw UsageError("autodiff: variable is not recorded on this tape");
  }
  return adjoints_[v.index()];
}

// ---- arithmetic ----

Var operator+(const Var& a, const Var& b) {
  Tape* t = common_tape(a, b);
  const double v = a.value() + b.value();
  return t ? t->record(v, a, 1.0, b, 1.0) : Var(v);
}

Var operator-(const Var& a, const Var& b) {
  Tape* t = common_tape(a, b);
  const double v = a.value() - b.value();
  return t ? t->record(v, a, 1.0, b, -1.0) : Var(v);
}

Var operator*(const Var& a, const Var& b) {
  Tape* t = common_tape(a, b);
  const double v = a.value() * b.value();
  return t ? t->record(v, a, b.value(), b, a.value()) : Var(v);
}

Var operator/(const Var& a, const Var& b) {
  Tape* t = common_tape(a, b);
  const double inv = 1.0 / b.value();
  const double v = a.value() * inv;
  return t ? t->record(v, a, inv, b, -v * inv) : Var(v);
}

Var operator-(const Var& a) {
  return a.tape() ? a.tape()->record(-a.value(), a, -1.0) : Var(-a.value());
}

Var sqrt(const Var& a) {
  const double v = std::sqrt(a.value());
  if (!a.tape()) return Var(v);
  return a.tape()->record(v, a, v > 0.0 ? 0.5 / v : 0.0);
}

Var exp(const Var& a) {
  const double v = std::exp(a.value());
  return a.tape() ? a.tape()->record(v, a, v) : Var(v);
}

Var log(const Var& a) {
  const double v = std::log(a.value());
  return a.tape() ? a.tape()->record(v, a, 1.0 / a.value()) : Var(v);
}

Var tanh(const Var& a) {
  const double v = std::tanh(a.value());
  return a.tape() ? a.tape()->record(v, a, 1.0 - v * v) : Var(v);
}

Var sin(const Var& a) {
  const double v = std::sin(a.value());
  return a.tape() ? a.tape()->record(v, a, std::cos(a.value())) : Var(v);
}

Var cos(const Var& a) {
  const double v = std::cos(a.value());
  return a.tape() ? a.tape()->record(v, a, -std::sin(a.value())) : Var(v);
}

Var abs(const Var& a) {
  const double v = std::abs(a.value());
  if (!a.tape()) return Var(v);
  return a.tape()->record(v, a, a.value() >= 0.0 ? 1.0 : -1.0);
}

Var min(const Var& a, const Var& b) {
  Tape* t = common_tape(a, b);
  const bool first = a.value() <= b.value();
  const double v = first ? a.value() : b.value();
  if (!t) return Var(v);
  return t->record(v, a, first ? 1.0 : 0.0, b, first ? 0.0 : 1.0);
}

Var max(const Var& a, const Var& b) {
  Tape* t = common_tape(a, b);
  const bool first = a.value() >= b.value();
  const double v = first ? a.value() : b.value();
  if (!t) return Var(v);
  return t->record(v, a, first ? 1.0 : 0.0, b, first ? 0.0 : 1.0);
}

Var clamp(const Var& a, double lo, double hi) { return min(max(a, Var(lo)), Var(hi)); }

Var square(const Var& a) {
  const double v = a.value() * a.value();
  return a.tape() ? a.tape()->record(v, a, 2.0 * a.value()) : Var(v);
}

// ---- small dense ops ----

Var sum(std::span<const Var> xs) {
  Tape* t = common_tape(xs);
  double v = 0.0;
  for (const Var& x : xs) v += x.value();
  if (!t) return Var(v);
  std::vector<double> ones(xs.size(), 1.0);
  return t->record(v, xs, ones);
}

Var dot(std::span<const Var> a, std::span<const Var> b) {
  if (a.size() != b.size()) throw UsageError("autodiff: dot size mismatch");
  Tape* t = common_tape(a);
  Tape* tb = common_tape(b);
  if (t && tb && t != tb) throw UsageError("autodiff: operands belong to different tapes");
  if (!t) t = tb;
  double v = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) v += a[i].value() * b[i].value();
  if (!t) return Var(v);
  std::vector<Var> inputs;
  std::vector<double> partials;
  inputs.reserve(2 * a.size());
  partials.reserve(2 * a.size());
  for (std::size_t i = 0; i < a.size(); ++i) {
    inputs.push_back(a[i]);
    partials.push_back(b[i].value());
    inputs.push_back(b[i]);
    partials.push_back(a[i].value());
  }
  return t->record(v, inputs, partials);
}

Var linear_combination(std::span<const double> coeffs, std::span<const Var> xs) {
  if (coeffs.size() != xs.size()) throw UsageError("autodiff: linear_combination size mismatch");
  Tape* t = common_tape(xs);
  double v = 0.0;
  for (std::size_t i = 0; i < xs.size(); ++i) v += coeffs[i] * xs[i].value();
  if (!t) return Var(v);
  return t->record(v, xs, coeffs);
}

Var norm(std::span<const Var> xs) {
  Tape* t = common_tape(xs);
  double ss = 0.0;
  for (const Var& x : xs) ss += x.value() * x.value();
  const double v = std::sqrt(ss);
  if (!t) return Var(v);
  std::vector<double> partials(xs.size(), 0.0);
  if (v > 0.0) {
    for (std::size_t i = 0; i < xs.size(); ++i) partials[i] = xs[i].value() / v;
  }
  return t->record(v, xs, partials);
}

std::vector<Var> matvec(std::span<const double> w, std::size_t rows, std::span<const Var> x) {
  const std::size_t cols = x.size();
  if (w.size() != rows * cols) throw UsageError("autodiff: matvec shape mismatch");
  std::vector<Var> out;
  out.reserve(rows);
  for (std::size_t r = 0; r < rows; ++r) {
    out.push_back(linear_combination(w.subspan(r * cols, cols), x));
  }
  return out;
}

std::vector<Var> softmax(std::span<const Var> xs) {
  Tape* t = common_tape(xs);
  const std::size_t n = xs.size();
  std::vector<double> w(n);
  double m = -std::numeric_limits<double>::infinity();
  for (const Var& x : xs) m = std::max(m, x.value());
  double total = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    w[i] = std::exp(xs[i].value() - m);
    total += w[i];
  }
  for (double& wi : w) wi /= total;
  std::vector<Var> out;
  out.reserve(n);
  std::vector<double> partials(n);
  for (std::size_t i = 0; i < n; ++i) {
    if (!t) {
      out.emplace_back(w[i]);
      continue;
    }
    for (std::size_t j = 0; j < n; ++j) partials[j] = w[i] * ((i == j ? 1.0 : 0.0) - w[j]);
    out.push_back(t->record(w[i], xs, partials));
  }
  return out;
}

// ---- gradient checking ----

GradCheckResult grad_check(const ScalarFunction& f, std::span<const double> x, double h) {
  if (!(h > 0.0)) throw UsageError("grad_check: step must be positive");
  GradCheckResult result;
  {
    Tape tape;
    std::vector<Var> leaves = tape.variables(x);
    const Var y = f(tape, leaves);
    if (!std::isfinite(y.value())) throw NumericError("grad_check: non-finite function value");
    if (y.is_constant()) {
      result.analytic.assign(x.size(), 0.0);
    } else {
      const Adjoints adj = tape.backward(y);
      for (const Var& leaf : leaves) result.analytic.push_back(adj[leaf]);
    }
  }
  std::vector<double> probe(x.begin(), x.end());
  auto eval = [&](std::span<const double> at) {
    Tape tape;
    std::vector<Var> consts(at.begin(), at.end());
    const double v = f(tape, consts).value();
    if (!std::isfinite(v)) throw NumericError("grad_check: non-finite function value");
    return v;
  };
  for (std::size_t i = 0; i < x.size(); ++i) {
    probe[i] = x[i] + h;
    const double fp = eval(probe);
    probe[i] = x[i] - h;
    const double fm = eval(probe);
    probe[i] = x[i];
    const double central = (fp - fm) / (2.0 * h);
    result.numeric.push_back(central);
    const double err = std::abs(result.analytic[i] - central) / std::max(1.0, std::abs(central));
    result.max_relative_error = std::max(result.max_relative_error, err);
  }
  return result;
}

}  // namespace sdfal::ad
