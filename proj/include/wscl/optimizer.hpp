#pragma once

#include <cmath>
#include <span>
#include <string>
#include <vector>

#include "wscl/errors.hpp"

namespace wscl {

enum class OptimizerKind { sgd, adam };

inline OptimizerKind parse_optimizer(const std::string& s) {
  if (s == "sgd") return OptimizerKind::sgd;
  if (s == "adam") return OptimizerKind::adam;
  throw ConfigError("unknown optimizer '" + s + "'");
}

inline std::string to_string(OptimizerKind k) { return k == OptimizerKind::sgd ? "sgd" : "adam"; }

struct OptimizerState {
  OptimizerKind kind = OptimizerKind::sgd;
  double learning_rate = 0.1;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
  std::vector<double> first_moment;
  std::vector<double> second_moment;
  long step_count = 0;

  static OptimizerState sgd(double lr) { return with(OptimizerKind::sgd, lr); }
  static OptimizerState adam(double lr) { return with(OptimizerKind::adam, lr); }

 private:
  static OptimizerState with(OptimizerKind k, double lr) {
    OptimizerState s;
    s.kind = k;
    s.learning_rate = lr;
    return s;
  }
};

// One in-place update of params from grad. Aborts (throws) on a non-finite
// gradient entry before touching any parameter.
inline void optimizer_step(OptimizerState& state, std::span<double> params, std::span<const double> grad) {
  if (grad.size() != params.size())
    throw ConfigError("optimizer_step: gradient has " + std::to_string(grad.size()) + " entries, parameters " +
                      std::to_string(params.size()));
  for (std::size_t i = 0; i < grad.size(); ++i)
    if (!std::isfinite(grad[i]))
      throw NonFiniteError("non-finite gradient at parameter index " + std::to_string(i));

  if (state.kind == OptimizerKind::sgd) {
    for (std::size_t i = 0; i < params.size(); ++i) params[i] -= state.learning_rate * grad[i];
    ++state.step_count;
    return;
  }

  if (state.first_moment.size() != params.size()) {
    state.first_moment.assign(params.size(), 0.0);
    state.second_moment.assign(params.size(), 0.0);
  }
  ++state.step_count;
  const double t = static_cast<double>(state.step_count);
  const double c1 = 1.0 - std::pow(state.beta1, t);
  const double c2 = 1.0 - std::pow(state.beta2, t);
  for (std::size_t i = 0; i < params.size(); ++i) {
    double& m = state.first_moment[i];
    double& v = state.second_moment[i];
    m = state.beta1 * m + (1.0 - state.beta1) * grad[i];
    v = state.beta2 * v + (1.0 - state.beta2) * grad[i] * grad[i];
    params[i] -= state.learning_rate * (m / c1) / (std::sqrt(v / c2) + state.epsilon);
  }
}

}  // namespace wscl
