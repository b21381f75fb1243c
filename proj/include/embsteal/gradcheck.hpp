#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "embsteal/autodiff.hpp"

namespace embsteal {

struct GradCheckFailure {
  std::string param;
  std::size_t index = 0;
  double analytic = 0.0;
  double numeric = 0.0;
};

struct GradCheckReport {
  std::size_t checked = 0;
  double max_error = 0.0;
  std::vector<GradCheckFailure> failures;

  bool ok() const { return failures.empty(); }
};

// Builds a scalar loss from the current parameter values on a fresh tape.
// Must be a deterministic function of the parameters.
using LossBuilder = std::function<Var(Tape&)>;

// Compares tape gradients against central differences for every coordinate
// of every parameter. Error per coordinate is |analytic - numeric| scaled by
// max(1, |numeric|).
inline GradCheckReport check_gradients(const LossBuilder& f, std::span<Parameter* const> params, double h = 1e-4,
                                       double tol = 1e-3) {
  for (Parameter* p : params) p->zero_grad();
  {
    Tape tape;
    Var loss = f(tape);
    tape.backward(loss);
  }
  auto eval = [&] {
    Tape tape;
    return f(tape).value()[0];
  };

  GradCheckReport report;
  for (Parameter* p : params) {
    for (std::size_t i = 0; i < p->value.size(); ++i) {
      const double saved = p->value[i];
      p->value[i] = saved + h;
      const double up = eval();
      p->value[i] = saved - h;
      const double down = eval();
      p->value[i] = saved;
      const double numeric = (up - down) / (2.0 * h);
      const double analytic = p->grad[i];
      const double err = std::abs(analytic - numeric) / std::max(1.0, std::abs(numeric));
      report.max_error = std::max(report.max_error, err);
      ++report.checked;
      if (!(err <= tol)) report.failures.push_back({p->name, i, analytic, numeric});
    }
  }
  return report;
}

}  // namespace embsteal
