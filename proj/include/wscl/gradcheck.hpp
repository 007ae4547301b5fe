#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <span>
#include <vector>

namespace wscl {

struct GradCheckResult {
  double max_relative_error = 0.0;
  std::size_t worst_index = 0;
  std::size_t checked = 0;
  // Coordinates whose one-sided differences disagree: the perturbation
  // straddles a ReLU or hinge kink, where no derivative exists.
  std::size_t kinks_skipped = 0;
};

// Relative error with an absolute floor so that entries whose true gradient
// is ~0 are judged on absolute scale.
inline double relative_error(double analytic, double numeric, double floor = 1e-6) {
  return std::abs(analytic - numeric) / std::max({std::abs(analytic), std::abs(numeric), floor});
}

// Compares `analytic` against central differences of `loss` around `theta`.
// `indices` selects which coordinates to perturb (all when empty). The loss
// is evaluated with theta temporarily modified in place and restored after.
inline GradCheckResult check_gradient(const std::function<double()>& loss, std::span<double> theta,
                                      std::span<const double> analytic, double eps = 1e-5,
                                      const std::vector<std::size_t>& indices = {}, bool skip_kinks = false) {
  GradCheckResult r;
  const double center = skip_kinks ? loss() : 0.0;
  auto probe = [&](std::size_t i) {
    const double saved = theta[i];
    theta[i] = saved + eps;
    const double up = loss();
    theta[i] = saved - eps;
    const double down = loss();
    theta[i] = saved;
    const double numeric = (up - down) / (2.0 * eps);
    if (skip_kinks) {
      const double fwd = (up - center) / eps;
      const double bwd = (center - down) / eps;
      // Smooth losses give fwd - bwd ~ eps * curvature; a kink gives a jump.
      if (std::abs(fwd - bwd) > 1e-4 + 1e-2 * std::max(std::abs(fwd), std::abs(bwd))) {
        ++r.kinks_skipped;
        return;
      }
    }
    const double err = relative_error(analytic[i], numeric);
    if (err > r.max_relative_error) {
      r.max_relative_error = err;
      r.worst_index = i;
    }
    ++r.checked;
  };
  if (indices.empty())
    for (std::size_t i = 0; i < theta.size(); ++i) probe(i);
  else
    for (std::size_t i : indices) probe(i);
  return r;
}

}  // namespace wscl
