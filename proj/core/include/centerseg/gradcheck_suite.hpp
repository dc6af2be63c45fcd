#pragma once

// Finite-difference check of every loss term on a small seeded instance:
// 2 classes, an 8x8 feature map with 6 channels, 2 prototypes per class and
// a 2x2 patch grid, in double precision. The differentiated variable is the
// feature map; the prototype terms see it through the batch prototypes.

#include <cstdint>
#include <string>
#include <vector>

namespace centerseg {

struct GradCheckTerm {
  std::string name;
  double max_relative_error = 0.0;
  double analytic = 0.0;  // at the worst component
  double numeric = 0.0;
  bool passed = false;
};

struct GradCheckReport {
  std::vector<GradCheckTerm> terms;  // ce, dice, pp1, pp2, fp1, fp2, total
  double threshold = 0.0;
  double seconds = 0.0;

  bool passed() const;
  std::string to_text() const;
};

// `analytic_scale` != 1 corrupts the analytic gradients (negative control).
GradCheckReport run_grad_check(std::uint64_t seed = 0, double threshold = 1e-3,
                               double analytic_scale = 1.0);

}  // namespace centerseg
