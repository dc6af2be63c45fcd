#pragma once

#include <gtest/gtest.h>

#include <functional>
#include <vector>

#include "centerseg/gradcheck.hpp"
#include "centerseg/random.hpp"
#include "centerseg/tensor.hpp"

namespace centerseg::testing {

template <typename T = double>
Tensor<T> random_tensor(Rng& rng, Shape shape, double lo = -1.0, double hi = 1.0,
                        bool requires_grad = false) {
  std::vector<T> v(element_count(shape));
  for (auto& x : v) x = static_cast<T>(rng.uniform(lo, hi));
  return Tensor<T>(std::move(shape), std::move(v), requires_grad);
}

inline double max_grad_error(const std::function<Tensor<double>(const Tensor<double>&)>& f,
                             const Tensor<double>& x, double eps = 1e-5) {
  return finite_diff_check<double>(f, x, eps).max_relative_error;
}

inline void expect_near_vec(const std::vector<double>& a, const std::vector<double>& b,
                            double tol) {
  ASSERT_EQ(a.size(), b.size());
  for (std::size_t i = 0; i < a.size(); ++i) EXPECT_NEAR(a[i], b[i], tol) << "index " << i;
}

}  // namespace centerseg::testing
