#pragma once

// Central finite-difference oracle shared by unit and acceptance tests.

#include <algorithm>
#include <cmath>
#include <functional>
#include <vector>

namespace nstaug::testing {

struct GradCheckResult {
  std::size_t checked = 0;
  std::size_t passed = 0;
  double worst = 0.0;

  double pass_fraction() const { return checked == 0 ? 1.0 : static_cast<double>(passed) / checked; }
};

/// Compares `analytic` with central differences of `loss` around `x`.
/// Coordinates are counted as passing when the relative error is within
/// `rel_tol`; an absolute floor `abs_floor` keeps near-zero entries sane.
inline GradCheckResult finite_difference_check(const std::function<double(const std::vector<double>&)>& loss,
                                               std::vector<double> x, const std::vector<double>& analytic,
                                               const std::vector<std::size_t>& coords, double h = 1e-5,
                                               double rel_tol = 1e-4, double abs_floor = 1e-7) {
  GradCheckResult r;
  for (std::size_t i : coords) {
    const double orig = x[i];
    x[i] = orig + h;
    const double up = loss(x);
    x[i] = orig - h;
    const double down = loss(x);
    x[i] = orig;
    const double fd = (up - down) / (2.0 * h);
    const double denom = std::max({std::abs(fd), std::abs(analytic[i]), abs_floor});
    const double err = std::abs(fd - analytic[i]) / denom;
    ++r.checked;
    if (err <= rel_tol) ++r.passed;
    r.worst = std::max(r.worst, err);
  }
  return r;
}

}  // namespace nstaug::testing
