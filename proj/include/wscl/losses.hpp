#pragma once

#include <algorithm>
#include <cmath>
#include <span>
#include <vector>

#include "wscl/errors.hpp"
#include "wscl/random.hpp"
#include "wscl/tensor.hpp"

namespace wscl {

inline constexpr double kProbabilityFloor = 1e-12;

// A scalar loss and its gradient w.r.t. the tensor it was computed from
// (logits or embeddings). `active` is false for degenerate inputs where the
// term is defined as zero (empty set, no negatives available).
struct LossGrad {
  double value = 0.0;
  Tensor grad;
  bool active = true;
};

// Per-step objective components. CIC leaves the mining terms at zero.
struct LossBreakdown {
  double supervised = 0.0;     // L_S
  double unsupervised = 0.0;   // L_U
  double sup_mining = 0.0;     // L_SM
  double unsup_mining = 0.0;   // L_UM
  double lambda = 1.0;
  double mu = 1.0;
  bool skipped = false;  // no-op step: nothing to learn from

  double total() const { return supervised + lambda * unsupervised + sup_mining + mu * unsup_mining; }
};

inline double entropy(std::span<const double> p) {
  double h = 0.0;
  for (double v : p)
    if (v > 0.0) h -= v * std::log(v);
  return h;
}

// z_i^(1/tau) / sum_j z_j^(1/tau), computed in log space so that small
// temperatures do not underflow.
inline std::vector<double> sharpen(std::span<const double> z, double tau) {
  if (!(tau > 0.0)) throw ConfigError("sharpen: temperature must be > 0");
  if (z.empty()) throw ConfigError("sharpen: empty distribution");
  double mx = -INFINITY;
  for (double v : z) {
    if (!std::isfinite(v)) throw NonFiniteError("sharpen: non-finite entry");
    if (v < 0.0) throw ConfigError("sharpen: negative entry");
    if (v > 0.0) mx = std::max(mx, std::log(v) / tau);
  }
  if (mx == -INFINITY) throw ConfigError("sharpen: all-zero distribution");
  std::vector<double> out(z.size());
  double sum = 0.0;
  for (std::size_t i = 0; i < z.size(); ++i) {
    out[i] = z[i] > 0.0 ? std::exp(std::log(z[i]) / tau - mx) : 0.0;
    sum += out[i];
  }
  for (double& v : out) v /= sum;
  return out;
}

// Asymmetric mixing weight: the first operand always keeps at least half.
inline double mixup_weight(double zeta) { return std::max(zeta, 1.0 - zeta); }

inline std::vector<double> mixup(std::span<const double> x1, std::span<const double> x2, double zeta) {
  if (x1.size() != x2.size()) throw ConfigError("mixup: operands differ in size");
  const double w = mixup_weight(zeta);
  std::vector<double> out(x1.size());
  for (std::size_t i = 0; i < x1.size(); ++i) out[i] = w * x1[i] + (1.0 - w) * x2[i];
  return out;
}

inline double sample_mixup_zeta(double gamma, Rng& rng) {
  if (!(gamma > 0.0)) throw ConfigError("mixup: beta parameter must be > 0");
  return rng.beta(gamma, gamma);
}

inline std::vector<double> mixup(std::span<const double> x1, std::span<const double> x2, double gamma, Rng& rng) {
  return mixup(x1, x2, sample_mixup_zeta(gamma, rng));
}

// H(p, y) with p clamped from below.
inline double cross_entropy(std::span<const double> probs, std::size_t label) {
  return -std::log(std::max(probs[label], kProbabilityFloor));
}

// L_S: mean cross-entropy of softmax(logits) against integer labels.
inline LossGrad loss_supervised(const Tensor& logits, std::span<const int> labels) {
  LossGrad r;
  r.grad = Tensor(logits.shape());
  if (logits.rows() == 0) {
    r.active = false;
    return r;
  }
  if (labels.size() != logits.rows()) throw ConfigError("loss_supervised: label count does not match batch");
  const Tensor probs = softmax_rows(logits);
  const double inv_n = 1.0 / static_cast<double>(logits.rows());
  const double log_floor = std::log(kProbabilityFloor);
  for (std::size_t i = 0; i < logits.rows(); ++i) {
    const auto y = static_cast<std::size_t>(labels[i]);
    if (y >= logits.row_size()) throw ConfigError("loss_supervised: label out of range");
    auto z = logits.row(i);
    double mx = z[0];
    for (double v : z) mx = std::max(mx, v);
    double lse = 0.0;
    for (double v : z) lse += std::exp(v - mx);
    const double log_p = z[y] - mx - std::log(lse);
    r.value += -std::max(log_p, log_floor) * inv_n;
    if (log_p <= log_floor) continue;  // clamped: flat in theta
    auto g = r.grad.row(i);
    auto p = probs.row(i);
    for (std::size_t j = 0; j < g.size(); ++j) g[j] = (p[j] - (j == y ? 1.0 : 0.0)) * inv_n;
  }
  return r;
}

// L_U: mean squared L2 distance between (constant) soft targets and logits.
inline LossGrad loss_unsupervised(const Tensor& logits, const Tensor& targets) {
  LossGrad r;
  r.grad = Tensor(logits.shape());
  if (logits.rows() == 0) {
    r.active = false;
    return r;
  }
  if (targets.shape() != logits.shape()) throw ConfigError("loss_unsupervised: targets do not match logits");
  const double inv_n = 1.0 / static_cast<double>(logits.rows());
  for (std::size_t i = 0; i < logits.rows(); ++i) {
    auto h = logits.row(i);
    auto z = targets.row(i);
    auto g = r.grad.row(i);
    for (std::size_t j = 0; j < h.size(); ++j) {
      const double d = h[j] - z[j];
      r.value += d * d * inv_n;
      g[j] = 2.0 * d * inv_n;
    }
  }
  return r;
}

inline double unsup_mining_term(double alpha, double dist_negative) { return std::max(alpha - dist_negative, 0.0); }

inline double sup_mining_term(double beta, double dist_negative, double dist_positive) {
  return std::max(beta - dist_negative + dist_positive, 0.0);
}

// Row indices into an embedding tensor.
struct NegativePair {
  std::size_t anchor;
  std::size_t negative;
};

struct Triplet {
  std::size_t anchor;
  std::size_t positive;
  std::size_t negative;
};

namespace detail {
// Adds scale * d||e_a - e_b||^2 / d(e_a, e_b) into grad.
inline void accumulate_distance_grad(const Tensor& emb, Tensor& grad, std::size_t a, std::size_t b, double scale) {
  auto ea = emb.row(a);
  auto eb = emb.row(b);
  auto ga = grad.row(a);
  auto gb = grad.row(b);
  for (std::size_t j = 0; j < ea.size(); ++j) {
    const double d = 2.0 * (ea[j] - eb[j]) * scale;
    ga[j] += d;
    gb[j] -= d;
  }
}
}  // namespace detail

// L_UM: mean over pairs of max(alpha - D(anchor, negative), 0).
inline LossGrad loss_unsup_mining(const Tensor& emb, std::span<const NegativePair> pairs, double alpha) {
  LossGrad r;
  r.grad = Tensor(emb.shape());
  if (pairs.empty()) {
    r.active = false;
    return r;
  }
  const double inv_n = 1.0 / static_cast<double>(pairs.size());
  for (const auto& p : pairs) {
    const double dn = squared_distance(emb.row(p.anchor), emb.row(p.negative));
    const double term = unsup_mining_term(alpha, dn);
    if (term <= 0.0) continue;
    r.value += term * inv_n;
    detail::accumulate_distance_grad(emb, r.grad, p.anchor, p.negative, -inv_n);
  }
  return r;
}

// L_SM: mean over triplets of max(beta - D(a, n) + D(a, p), 0).
inline LossGrad loss_sup_mining(const Tensor& emb, std::span<const Triplet> triplets, double beta) {
  LossGrad r;
  r.grad = Tensor(emb.shape());
  if (triplets.empty()) {
    r.active = false;
    return r;
  }
  const double inv_n = 1.0 / static_cast<double>(triplets.size());
  for (const auto& t : triplets) {
    const double dn = squared_distance(emb.row(t.anchor), emb.row(t.negative));
    const double dp = squared_distance(emb.row(t.anchor), emb.row(t.positive));
    const double term = sup_mining_term(beta, dn, dp);
    if (term <= 0.0) continue;
    r.value += term * inv_n;
    detail::accumulate_distance_grad(emb, r.grad, t.anchor, t.negative, -inv_n);
    detail::accumulate_distance_grad(emb, r.grad, t.anchor, t.positive, inv_n);
  }
  return r;
}

}  // namespace wscl
