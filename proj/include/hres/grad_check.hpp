#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "hres/tape.hpp"

namespace hres {

/// A differentiable sub-graph: named parameters plus a function that builds a
/// scalar loss on a tape from an input and those parameters.
template <class T>
struct Fragment {
  using LossFn = std::function<Var(BasicGradTape<T>&, Var input, std::span<const Var> params)>;

  std::vector<std::string> names;
  std::vector<BasicTensor<T>> params;
  LossFn loss;
};

struct GradCheckReport {
  double max_relative_error = 0.0;
  std::string worst_parameter;
  std::size_t worst_index = 0;
  double analytic = 0.0;
  double numeric = 0.0;
  std::size_t checked = 0;
};

namespace detail {

template <class T>
double evaluate_fragment(const Fragment<T>& f, const BasicTensor<T>& input, BasicGradTape<T>& tape,
                         std::vector<Var>& params) {
  const Var in = tape.constant(input);
  params.clear();
  for (std::size_t i = 0; i < f.params.size(); ++i) params.push_back(tape.parameter(f.params[i], f.names[i]));
  const Var loss = f.loss(tape, in, params);
  if (tape.value(loss).size() != 1) throw std::invalid_argument("grad_check: fragment loss is not a scalar");
  tape.check_finite();
  return static_cast<double>(tape.value(loss)[0]);
}

}  // namespace detail

/// Compares tape gradients with central differences for every parameter
/// element. Relative error is |a - n| / max(|a|, |n|, 1e-8).
template <class T>
GradCheckReport grad_check(const Fragment<T>& fragment, const BasicTensor<T>& input, double epsilon) {
  if (!(epsilon > 0.0 && epsilon <= 1e-2)) throw std::invalid_argument("grad_check: epsilon must be in (0, 1e-2]");
  if (fragment.names.size() != fragment.params.size()) {
    throw std::invalid_argument("grad_check: parameter names and tensors differ in count");
  }

  std::vector<BasicTensor<T>> analytic;
  {
    BasicGradTape<T> tape(true);
    std::vector<Var> vars;
    const Var in = tape.constant(input);
    for (std::size_t i = 0; i < fragment.params.size(); ++i) {
      vars.push_back(tape.parameter(fragment.params[i], fragment.names[i]));
    }
    const Var loss = fragment.loss(tape, in, vars);
    tape.backward(loss);
    tape.check_finite();
    for (Var v : vars) analytic.push_back(tape.grad(v));
  }

  GradCheckReport report;
  Fragment<T> probe = fragment;
  std::vector<Var> scratch;
  for (std::size_t p = 0; p < probe.params.size(); ++p) {
    BasicTensor<T>& tensor = probe.params[p];
    for (std::size_t i = 0; i < tensor.size(); ++i) {
      const T saved = tensor[i];
      tensor[i] = static_cast<T>(static_cast<double>(saved) + epsilon);
      BasicGradTape<T> plus_tape(false);
      const double plus = detail::evaluate_fragment(probe, input, plus_tape, scratch);
      tensor[i] = static_cast<T>(static_cast<double>(saved) - epsilon);
      BasicGradTape<T> minus_tape(false);
      const double minus = detail::evaluate_fragment(probe, input, minus_tape, scratch);
      tensor[i] = saved;

      const double numeric = (plus - minus) / (2.0 * epsilon);
      const double a = static_cast<double>(analytic[p][i]);
      const double denom = std::max({std::abs(a), std::abs(numeric), 1e-8});
      const double rel = std::abs(a - numeric) / denom;
      ++report.checked;
      if (rel > report.max_relative_error || report.checked == 1) {
        report.max_relative_error = rel;
        report.worst_parameter = probe.names[p];
        report.worst_index = i;
        report.analytic = a;
        report.numeric = numeric;
      }
    }
  }
  return report;
}

}  // namespace hres
