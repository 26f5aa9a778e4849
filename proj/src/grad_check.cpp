#include "gmt/grad_check.hpp"

#include <algorithm>
#include <cmath>
#include <vector>

namespace gmt {

namespace {

Real evaluate(const ScalarFunction& f) {
  Tape tape;
  const Real v = f(tape).value().item();
  if (!std::isfinite(v)) throw DomainError("grad_check: objective is not finite");
  return v;
}

}  // namespace

GradCheckResult grad_check(const ScalarFunction& f, std::span<Parameter* const> params, Real h) {
  for (Parameter* p : params) p->zero_grad();
  {
    Tape tape;
    Var out = f(tape);
    if (!std::isfinite(out.value().item())) throw DomainError("grad_check: objective is not finite");
    tape.backward(out);
  }
  std::vector<Matrix> analytic;
  analytic.reserve(params.size());
  for (Parameter* p : params) analytic.push_back(p->grad);

  GradCheckResult result;
  for (std::size_t k = 0; k < params.size(); ++k) {
    Parameter& p = *params[k];
    for (std::size_t i = 0; i < p.value.size(); ++i) {
      const Real saved = p.value[i];
      p.value[i] = saved + h;
      const Real plus = evaluate(f);
      p.value[i] = saved - h;
      const Real minus = evaluate(f);
      p.value[i] = saved;
      const Real numeric = (plus - minus) / (2.0 * h);
      const Real a = analytic[k][i];
      const Real denom = std::max({std::abs(a), std::abs(numeric), 1e-8});
      const Real err = std::abs(a - numeric) / denom;
      ++result.checked;
      result.entries.push_back({p.name, i, a, numeric, err});
      if (err > result.max_relative_error || result.worst_parameter.empty()) {
        result.max_relative_error = err;
        result.worst_parameter = p.name;
        result.worst_index = i;
        result.analytic = a;
        result.numeric = numeric;
      }
    }
  }
  return result;
}

}  // namespace gmt
