#include "centerseg/gradcheck.hpp"

#include <cmath>
#include <vector>

#include "centerseg/error.hpp"

namespace centerseg {

template <typename T>
GradCheckResult finite_diff_check(const std::function<Tensor<T>(const Tensor<T>&)>& f,
                                  const Tensor<T>& x, T eps, double analytic_scale) {
  if (!(eps > T(0))) throw ContractError("finite_diff_check: eps must be positive");

  Tape<T>::local().clear();
  Tensor<T> probe = x.clone();
  probe.set_requires_grad(true);
  Tensor<T> value = f(probe);
  std::vector<T> analytic(probe.numel(), T(0));
  if (value.requires_grad()) {
    value.backward();
    const auto g = probe.grad();
    analytic.assign(g.begin(), g.end());
  }

  NoGradGuard<T> no_grad;
  GradCheckResult result;
  Tensor<T> shifted = x.clone();
  auto data = shifted.mutable_data();
  for (std::size_t i = 0; i < data.size(); ++i) {
    const T original = data[i];
    data[i] = original + eps;
    const double plus = static_cast<double>(f(shifted).item());
    data[i] = original - eps;
    const double minus = static_cast<double>(f(shifted).item());
    data[i] = original;
    const double numeric = (plus - minus) / (2.0 * static_cast<double>(eps));
    const double a = static_cast<double>(analytic[i]) * analytic_scale;
    const double err = std::abs(a - numeric) / (std::abs(a) + static_cast<double>(eps));
    if (i == 0 || err > result.max_relative_error) {
      result.max_relative_error = err;
      result.worst_index = i;
      result.analytic = a;
      result.numeric = numeric;
    }
  }
  return result;
}

template GradCheckResult finite_diff_check<float>(
    const std::function<Tensor<float>(const Tensor<float>&)>&, const Tensor<float>&, float,
    double);
template GradCheckResult finite_diff_check<double>(
    const std::function<Tensor<double>(const Tensor<double>&)>&, const Tensor<double>&, double,
    double);

}  // namespace centerseg
