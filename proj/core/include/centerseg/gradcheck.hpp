#pragma once

#include <cstddef>
#include <functional>

#include "centerseg/tensor.hpp"

namespace centerseg {

struct GradCheckResult {
  double max_relative_error = 0.0;
  std::size_t worst_index = 0;
  double analytic = 0.0;  // at worst_index
  double numeric = 0.0;   // at worst_index
};

// Compares the tape gradient of the scalar function `f` at `x` against central
// differences (f(x + eps e_i) - f(x - eps e_i)) / 2 eps. Each component's
// error is |analytic - numeric| / (|analytic| + eps).
//
// `analytic_scale` multiplies the tape gradient before comparison; values
// other than 1 exist only to build negative controls.
template <typename T>
GradCheckResult finite_diff_check(const std::function<Tensor<T>(const Tensor<T>&)>& f,
                                  const Tensor<T>& x, T eps, double analytic_scale = 1.0);

}  // namespace centerseg
