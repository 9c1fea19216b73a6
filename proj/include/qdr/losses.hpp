#pragma once

#include <string>

#include "qdr/metrics.hpp"
#include "qdr/tensor.hpp"

namespace qdr {

enum class ReconLoss { l1, l1_plus_ssim };

inline const char* to_string(ReconLoss m) { return m == ReconLoss::l1 ? "l1" : "l1_plus_ssim"; }
inline ReconLoss parse_recon_loss(const std::string& s) {
  if (s == "l1") return ReconLoss::l1;
  if (s == "l1_plus_ssim") return ReconLoss::l1_plus_ssim;
  throw Error("unknown reconstruction loss '" + s + "'");
}

template <typename T>
struct LossValue {
  double value = 0;
  Tensor<T> grad;  // d(value)/d(pred)
};

/// Mean absolute error; the subgradient at 0 is 0.
template <typename T>
LossValue<T> l1_loss(const Tensor<T>& pred, const Tensor<T>& target) {
  pred.check_same(target, "l1_loss");
  LossValue<T> r{0, Tensor<T>(pred.shape())};
  const double inv = 1.0 / static_cast<double>(pred.size());
  double acc = 0;
  for (std::size_t i = 0; i < pred.size(); ++i) {
    const double d = static_cast<double>(pred[i]) - target[i];
    acc += std::abs(d);
    r.grad[i] = static_cast<T>(d > 0 ? inv : (d < 0 ? -inv : 0.0));
  }
  r.value = acc * inv;
  return r;
}

/// l1: MAE. l1_plus_ssim: MAE + (1 - SSIM), equal weights.
template <typename T>
LossValue<T> reconstruction_loss(const Tensor<T>& pred, const Tensor<T>& target, ReconLoss mode,
                                 const SsimOptions& opts = {}) {
  if (!all_finite(pred.values()) || !all_finite(target.values()))
    throw NonFiniteError("reconstruction_loss: non-finite input");
  LossValue<T> r = l1_loss(pred, target);
  if (mode == ReconLoss::l1_plus_ssim) {
    auto [s, g] = ssim_with_grad(pred, target, opts);
    r.value += 1.0 - s;
    for (std::size_t i = 0; i < r.grad.size(); ++i) r.grad[i] -= g[i];
  }
  return r;
}

/// mean((a - b)^2) and its gradient 2 (a - b) / N with respect to `a`.
template <typename T>
LossValue<T> mse_loss(const Tensor<T>& a, const Tensor<T>& b) {
  a.check_same(b, "mse_loss");
  LossValue<T> r{0, Tensor<T>(a.shape())};
  const double inv = 1.0 / static_cast<double>(a.size());
  double acc = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const double d = static_cast<double>(a[i]) - b[i];
    acc += d * d;
    r.grad[i] = static_cast<T>(2.0 * d * inv);
  }
  r.value = acc * inv;
  return r;
}

}  // namespace qdr
