#pragma once

#include <functional>
#include <span>
#include <string>
#include <vector>

#include "gmt/tape.hpp"

namespace gmt {

struct GradCheckEntry {
  std::string parameter;
  std::size_t index = 0;
  Real analytic = 0.0;
  Real numeric = 0.0;
  Real relative_error = 0.0;
};

struct GradCheckResult {
  Real max_relative_error = 0.0;
  std::string worst_parameter;
  std::size_t worst_index = 0;
  Real analytic = 0.0;
  Real numeric = 0.0;
  std::size_t checked = 0;
  std::vector<GradCheckEntry> entries;
};

/// Builds a scalar on the given tape from the current parameter values.
using ScalarFunction = std::function<Var(Tape&)>;

// Compares tape gradients of f against central differences (f(θ+h) - f(θ-h)) / 2h,
// element by element, with relative error |a - n| / max(|a|, |n|, 1e-8).
// f must not mutate state between evaluations. Throws DomainError when f is not finite.
GradCheckResult grad_check(const ScalarFunction& f, std::span<Parameter* const> params, Real h = 1e-5);

}  // namespace gmt
