#pragma once

// Learnable magnitude reweighting of the reconstruction and distillation
// losses:
//
//   lambda_rec = e^alpha, lambda_kd = e^beta, r = lambda_rec / lambda_kd
//   s = sqrt(g_kd_ema / (g_rec_ema + eps))
//   L = (r / s) L_rec + (s / r) L_kd
//
// alpha and beta are trained with the model; the EMA buffers are refreshed
// from measured gradient norms every `refresh_interval` steps and are
// constants with respect to alpha and beta.

#include <cmath>
#include <cstdio>
#include <functional>
#include <string>
#include <utility>
#include <vector>

#include "qdr/tensor.hpp"

namespace qdr {

struct LmrOptions {
  double mu = 0.9;
  double epsilon = 1e-12;
  int refresh_interval = 50;
  double clip_norm = 1.0;
  int calibration_batches = 8;
  /// alpha/beta learning rate as a multiple of the model learning rate.
  double lr_multiplier = 10.0;
  /// Calibrate with fake quantization enabled on the student.
  bool calibrate_quantized = true;

  static double floor_value() { return std::log(1e-4); }

  void validate() const {
    if (!(mu >= 0 && mu < 1)) throw Error("lmr mu must be in [0, 1)");
    if (!(epsilon > 0)) throw Error("lmr epsilon must be positive");
    if (refresh_interval < 1) throw Error("lmr refresh interval must be >= 1");
    if (!(clip_norm > 0)) throw Error("lmr clip norm must be positive");
    if (calibration_batches < 1) throw Error("lmr calibration batches must be >= 1");
  }
};

struct LmrState {
  double alpha = 0;
  double beta = 0;
  double ema_g_rec = 0;
  double ema_g_kd = 0;
  LmrOptions options;
  long step = 0;
  bool initialized = false;
  /// Gradient-norm measurements taken so far (calibration + refreshes).
  long norm_computations = 0;
  long refreshes = 0;
  long skipped_refreshes = 0;
  /// Calibration saw no distillation gradient (e.g. a teacher identical to
  /// the student). The ratio is undefined, so the run stays reconstruction-only.
  bool kd_inactive = false;
  /// Gradients of the combined loss w.r.t. alpha and beta.
  double grad_alpha = 0;
  double grad_beta = 0;

  double lambda_rec() const { return std::exp(alpha); }
  double lambda_kd() const { return std::exp(beta); }
};

/// Effective loss weights at the current state.
struct LmrWeights {
  double s = 1;      // smoothed gradient ratio
  double r = 1;      // lambda_rec / lambda_kd
  double w_rec = 1;  // r / s
  double w_kd = 1;   // s / r
};

inline double smoothed_ratio(const LmrState& st) {
  return std::sqrt(st.ema_g_kd / (st.ema_g_rec + st.options.epsilon));
}

inline LmrWeights lmr_weights(const LmrState& st) {
  LmrWeights w;
  w.s = smoothed_ratio(st);
  w.r = std::exp(st.alpha - st.beta);
  if (st.kd_inactive) {
    w.w_rec = 1;
    w.w_kd = 0;
    return w;
  }
  w.w_rec = w.r / w.s;
  w.w_kd = w.s / w.r;
  return w;
}

/// Initializes alpha, beta and the EMA buffers from per-batch gradient norms
/// (inverse weighting: each loss is weighted by the other's mean norm).
inline LmrState lmr_init_from_norms(const std::vector<double>& g_rec,
                                    const std::vector<double>& g_kd, const LmrOptions& opt) {
  opt.validate();
  if (g_rec.empty() || g_rec.size() != g_kd.size())
    throw Error("lmr_init: need the same non-zero number of norms for both losses");
  double sum_rec = 0, sum_kd = 0;
  for (std::size_t i = 0; i < g_rec.size(); ++i) {
    // A zero reconstruction norm means nothing to train; a zero KD norm is
    // the degenerate self-teacher case handled below.
    const bool bad_rec = !std::isfinite(g_rec[i]) || g_rec[i] <= 0;
    if (bad_rec || !std::isfinite(g_kd[i]) || g_kd[i] < 0)
      throw Error("lmr_init: gradient norm of calibration batch " + std::to_string(i) +
                  " is " + (bad_rec ? "zero or non-finite" : "non-finite") + " (" +
                  std::to_string(bad_rec ? g_rec[i] : g_kd[i]) + ")");
    sum_rec += g_rec[i];
    sum_kd += g_kd[i];
  }
  const double n = static_cast<double>(g_rec.size());
  LmrState st;
  st.options = opt;
  st.ema_g_rec = sum_rec / n;
  st.ema_g_kd = sum_kd / n;
  st.initialized = true;
  st.norm_computations = static_cast<long>(g_rec.size());
  if (st.ema_g_kd == 0) {
    st.kd_inactive = true;
    st.alpha = st.beta = std::log(0.5);
    return st;
  }
  const double gamma = st.ema_g_rec + st.ema_g_kd;
  st.alpha = std::log(st.ema_g_kd / gamma);
  st.beta = std::log(st.ema_g_rec / gamma);
  return st;
}

/// `norms(i)` returns {||grad L_rec||, ||grad L_kd||} for calibration batch i.
template <typename NormSource>
LmrState lmr_init(NormSource&& norms, int n_batches, const LmrOptions& opt) {
  if (n_batches < 1) throw Error("lmr_init: n_batches must be >= 1");
  std::vector<double> g_rec, g_kd;
  for (int i = 0; i < n_batches; ++i) {
    const std::pair<double, double> g = norms(i);
    g_rec.push_back(g.first);
    g_kd.push_back(g.second);
  }
  LmrOptions o = opt;
  o.calibration_batches = n_batches;
  return lmr_init_from_norms(g_rec, g_kd, o);
}

/// Step t (1-based) recomputes gradient norms when t mod T_g == 0.
inline bool lmr_refresh_due(const LmrState& st, long t) {
  return t % st.options.refresh_interval == 0;
}

/// EMA update of both buffers. A non-finite or non-positive norm leaves the
/// buffers untouched and returns false.
inline bool lmr_refresh(LmrState& st, double g_rec_now, double g_kd_now) {
  ++st.norm_computations;
  if (!std::isfinite(g_rec_now) || !std::isfinite(g_kd_now) || g_rec_now <= 0 || g_kd_now <= 0) {
    ++st.skipped_refreshes;
    std::fprintf(stderr, "warning: lmr refresh skipped at step %ld (norms %g, %g)\n", st.step,
                 g_rec_now, g_kd_now);
    return false;
  }
  const double mu = st.options.mu;
  st.ema_g_rec = mu * st.ema_g_rec + (1 - mu) * g_rec_now;
  st.ema_g_kd = mu * st.ema_g_kd + (1 - mu) * g_kd_now;
  ++st.refreshes;
  return true;
}

struct LmrCombined {
  double total = 0;
  LmrWeights weights;
};

/// Combined loss; also stores d(total)/d(alpha) and d(total)/d(beta) in the
/// state (s is treated as a constant).
inline LmrCombined lmr_combine(LmrState& st, double l_rec, double l_kd) {
  if (!st.initialized) throw Error("lmr_combine: state is not initialized");
  if (!std::isfinite(l_rec) || !std::isfinite(l_kd) || l_rec < 0 || l_kd < 0)
    throw Error("lmr_combine: losses must be finite and non-negative");
  LmrCombined c;
  c.weights = lmr_weights(st);
  const double a = c.weights.w_rec * l_rec, b = c.weights.w_kd * l_kd;
  c.total = a + b;
  if (st.kd_inactive) {
    st.grad_alpha = st.grad_beta = 0;
    return c;
  }
  // d(r)/d(alpha) = r, d(1/r)/d(alpha) = -1/r; beta is the mirror image.
  st.grad_alpha = a - b;
  st.grad_beta = b - a;
  return c;
}

/// Rescales (grad_alpha, grad_beta) to norm at most c.
inline void lmr_clip_grads(LmrState& st) {
  const double norm = std::hypot(st.grad_alpha, st.grad_beta);
  const double c = st.options.clip_norm;
  if (norm > c) {
    st.grad_alpha *= c / norm;
    st.grad_beta *= c / norm;
  }
}

/// Applies the log(1e-4) floor after an optimizer step and advances the step
/// counter.
inline void lmr_post_step(LmrState& st) {
  const double fl = LmrOptions::floor_value();
  if (st.alpha < fl) st.alpha = fl;
  if (st.beta < fl) st.beta = fl;
  ++st.step;
}

// ---------------------------------------------------------------------------
// Baseline balancers

/// Reciprocal weighting with raw learnable lambdas (no log-space, no EMA):
/// L = (l_rec / l_kd) L_rec + (l_kd / l_rec) L_kd.
struct GorState {
  double lambda_rec = 1;
  double lambda_kd = 1;
  double grad_rec = 0;
  double grad_kd = 0;

  double combine(double l_rec, double l_kd) {
    const double r = lambda_rec / lambda_kd;
    grad_rec = l_rec / lambda_kd - lambda_kd * l_kd / (lambda_rec * lambda_rec);
    grad_kd = -lambda_rec * l_rec / (lambda_kd * lambda_kd) + l_kd / lambda_rec;
    return r * l_rec + l_kd / r;
  }
  double w_rec() const { return lambda_rec / lambda_kd; }
  double w_kd() const { return lambda_kd / lambda_rec; }
};

}  // namespace qdr
