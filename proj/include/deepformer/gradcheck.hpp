#pragma once

#include <cmath>
#include <string>
#include <vector>

#include "deepformer/errors.hpp"
#include "deepformer/tape.hpp"

namespace deepformer {

struct GradCheckReport {
  double max_rel_err = 0.0;
  std::string worst_param;
  size_t worst_index = 0;
  double worst_analytic = 0.0;
  double worst_numeric = 0.0;
  size_t elements_checked = 0;
};

// Central-difference check of the gradients already stored in param->grad.
// loss_fn() must re-evaluate the forward pass from the current parameter
// values (a non-recording tape is enough). Every element of every listed
// parameter is perturbed unless check_every > 1.
template <typename T, typename F>
GradCheckReport grad_check(const std::vector<Parameter<T>*>& params, F&& loss_fn,
                           double h, size_t check_every = 1) {
  if (!(h >= 1e-7 && h <= 1e-3)) {
    throw ConfigError("grad_check step must lie in [1e-7, 1e-3]");
  }
  if (check_every == 0) throw ConfigError("grad_check: check_every must be > 0");
  GradCheckReport rep;
  for (Parameter<T>* p : params) {
    for (size_t i = 0; i < p->value.numel(); i += check_every) {
      T saved = p->value[i];
      p->value[i] = saved + static_cast<T>(h);
      double f_plus = loss_fn();
      p->value[i] = saved - static_cast<T>(h);
      double f_minus = loss_fn();
      p->value[i] = saved;
      if (!std::isfinite(f_plus) || !std::isfinite(f_minus)) {
        throw DivergenceError("non-finite loss while perturbing " + p->name +
                              "[" + std::to_string(i) + "]");
      }
      double numeric = (f_plus - f_minus) / (2.0 * h);
      double analytic = static_cast<double>(p->grad[i]);
      double rel = std::abs(analytic - numeric) /
                   std::max(1e-8, std::abs(analytic) + std::abs(numeric));
      ++rep.elements_checked;
      if (rel > rep.max_rel_err) {
        rep.max_rel_err = rel;
        rep.worst_param = p->name;
        rep.worst_index = i;
        rep.worst_analytic = analytic;
        rep.worst_numeric = numeric;
      }
    }
  }
  return rep;
}

}  // namespace deepformer
