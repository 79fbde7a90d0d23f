#pragma once

#include <functional>
#include <string>
#include <vector>

#include "xmusic/tensor.hpp"

namespace xmusic {

struct GradCheckReport {
  double max_rel_error = 0.0;
  std::string worst_param;
  int worst_coord = -1;
  double analytic = 0.0;
  double central = 0.0;
};

// Central-difference check of analytic gradients.
//
// loss_fn computes a scalar loss from the current parameter values and
// accumulates dloss/dparam into each parameter's grad (typically by running a
// fresh tape forward and backward). The harness evaluates loss_fn twice at the
// starting point and requires bitwise-identical losses and gradients; a
// mismatch means the function is not pure and the check is invalid
// (std::runtime_error). h must lie in [1e-6, 1e-4].
//
// Relative error per coordinate is |analytic - central| / max(1, |central|);
// the report carries the max and its location. On return the parameters hold
// their original values and their analytic gradients.
GradCheckReport gradient_check(const std::function<double()>& loss_fn,
                               const std::vector<Parameter*>& params,
                               double h = 1e-5);

}  // namespace xmusic
