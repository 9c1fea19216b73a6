#pragma once

// PSNR / SSIM on [0,1] images and FP32-recovery reporting.

#include <array>
#include <cmath>
#include <limits>
#include <numbers>
#include <vector>

#include "qdr/tensor.hpp"

namespace qdr {

/// SSIM constants and window.
struct SsimOptions {
  int window = 11;
  double sigma = 1.5;
  double k1 = 0.01;
  double k2 = 0.03;
  double dynamic_range = 1.0;

  double c1() const { return (k1 * dynamic_range) * (k1 * dynamic_range); }
  double c2() const { return (k2 * dynamic_range) * (k2 * dynamic_range); }
};

inline std::vector<double> gaussian_window(int size, double sigma) {
  std::vector<double> w(static_cast<std::size_t>(size));
  const double mid = (size - 1) / 2.0;
  double total = 0;
  for (int i = 0; i < size; ++i) {
    w[i] = std::exp(-(i - mid) * (i - mid) / (2 * sigma * sigma));
    total += w[i];
  }
  for (auto& v : w) v /= total;
  return w;
}

namespace detail {

/// 'valid' separable filtering of an h x w plane; output (h-k+1) x (w-k+1).
inline std::vector<double> filter_valid(const std::vector<double>& src, int h, int w,
                                        const std::vector<double>& win) {
  const int k = static_cast<int>(win.size());
  const int ho = h - k + 1, wo = w - k + 1;
  std::vector<double> tmp(static_cast<std::size_t>(h) * wo);
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < wo; ++x) {
      double acc = 0;
      for (int t = 0; t < k; ++t) acc += win[t] * src[static_cast<std::size_t>(y) * w + x + t];
      tmp[static_cast<std::size_t>(y) * wo + x] = acc;
    }
  std::vector<double> out(static_cast<std::size_t>(ho) * wo);
  for (int y = 0; y < ho; ++y)
    for (int x = 0; x < wo; ++x) {
      double acc = 0;
      for (int t = 0; t < k; ++t) acc += win[t] * tmp[static_cast<std::size_t>(y + t) * wo + x];
      out[static_cast<std::size_t>(y) * wo + x] = acc;
    }
  return out;
}

/// Adjoint of filter_valid: scatters an (h-k+1) x (w-k+1) map back to h x w.
inline std::vector<double> filter_valid_adjoint(const std::vector<double>& g, int h, int w,
                                                const std::vector<double>& win) {
  const int k = static_cast<int>(win.size());
  const int ho = h - k + 1, wo = w - k + 1;
  std::vector<double> tmp(static_cast<std::size_t>(h) * wo, 0.0);
  for (int y = 0; y < ho; ++y)
    for (int x = 0; x < wo; ++x) {
      const double v = g[static_cast<std::size_t>(y) * wo + x];
      for (int t = 0; t < k; ++t) tmp[static_cast<std::size_t>(y + t) * wo + x] += win[t] * v;
    }
  std::vector<double> out(static_cast<std::size_t>(h) * w, 0.0);
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < wo; ++x) {
      const double v = tmp[static_cast<std::size_t>(y) * wo + x];
      for (int t = 0; t < k; ++t) out[static_cast<std::size_t>(y) * w + x + t] += win[t] * v;
    }
  return out;
}

struct SsimPlane {
  double sum = 0;  // sum of the local SSIM map
  int positions = 0;
  std::vector<double> grad;  // d(sum)/d(pred), only when requested
};

template <typename T>
SsimPlane ssim_plane(const T* a, const T* b, int h, int w, const SsimOptions& o,
                     const std::vector<double>& win, bool want_grad) {
  const std::size_t n = static_cast<std::size_t>(h) * w;
  std::vector<double> x(n), y(n), xx(n), yy(n), xy(n);
  for (std::size_t i = 0; i < n; ++i) {
    x[i] = a[i];
    y[i] = b[i];
    xx[i] = x[i] * x[i];
    yy[i] = y[i] * y[i];
    xy[i] = x[i] * y[i];
  }
  const auto mx = filter_valid(x, h, w, win), my = filter_valid(y, h, w, win);
  const auto exx = filter_valid(xx, h, w, win), eyy = filter_valid(yy, h, w, win),
             exy = filter_valid(xy, h, w, win);
  const double c1 = o.c1(), c2 = o.c2();
  SsimPlane r;
  r.positions = static_cast<int>(mx.size());
  std::vector<double> g_mu, g_xx, g_xy;
  if (want_grad) {
    g_mu.resize(mx.size());
    g_xx.resize(mx.size());
    g_xy.resize(mx.size());
  }
  for (std::size_t i = 0; i < mx.size(); ++i) {
    const double sxx = exx[i] - mx[i] * mx[i];
    const double syy = eyy[i] - my[i] * my[i];
    const double sxy = exy[i] - mx[i] * my[i];
    const double a1 = 2 * mx[i] * my[i] + c1, a2 = 2 * sxy + c2;
    const double b1 = mx[i] * mx[i] + my[i] * my[i] + c1, b2 = sxx + syy + c2;
    const double s = (a1 * a2) / (b1 * b2);
    r.sum += s;
    if (want_grad) {
      g_mu[i] = s * (2 * my[i] / a1 - 2 * my[i] / a2 - 2 * mx[i] / b1 + 2 * mx[i] / b2);
      g_xx[i] = -s / b2;
      g_xy[i] = 2 * s / a2;
    }
  }
  if (want_grad) {
    const auto d_mu = filter_valid_adjoint(g_mu, h, w, win);
    const auto d_xx = filter_valid_adjoint(g_xx, h, w, win);
    const auto d_xy = filter_valid_adjoint(g_xy, h, w, win);
    r.grad.resize(n);
    for (std::size_t i = 0; i < n; ++i) r.grad[i] = d_mu[i] + 2 * x[i] * d_xx[i] + y[i] * d_xy[i];
  }
  return r;
}

}  // namespace detail

/// Mean local SSIM over every image and channel (11x11 Gaussian window,
/// valid region only).
template <typename T>
double ssim(const Tensor<T>& pred, const Tensor<T>& target, const SsimOptions& o = {}) {
  pred.check_same(target, "ssim");
  const Shape s = pred.shape();
  if (s.h < o.window || s.w < o.window)
    throw Error("ssim: image " + s.str() + " is smaller than the " + std::to_string(o.window) +
                "x" + std::to_string(o.window) + " window");
  const auto win = gaussian_window(o.window, o.sigma);
  double total = 0;
  long count = 0;
  for (int n = 0; n < s.n; ++n)
    for (int c = 0; c < s.c; ++c) {
      auto r = detail::ssim_plane(pred.plane(n, c), target.plane(n, c), s.h, s.w, o, win, false);
      total += r.sum;
      count += r.positions;
    }
  return total / static_cast<double>(count);
}

/// SSIM and its gradient with respect to `pred`.
template <typename T>
std::pair<double, Tensor<T>> ssim_with_grad(const Tensor<T>& pred, const Tensor<T>& target,
                                            const SsimOptions& o = {}) {
  pred.check_same(target, "ssim");
  const Shape s = pred.shape();
  if (s.h < o.window || s.w < o.window)
    throw Error("ssim: image " + s.str() + " is smaller than the window");
  const auto win = gaussian_window(o.window, o.sigma);
  std::vector<detail::SsimPlane> planes;
  planes.reserve(static_cast<std::size_t>(s.n) * s.c);
  double total = 0;
  long count = 0;
  for (int n = 0; n < s.n; ++n)
    for (int c = 0; c < s.c; ++c) {
      planes.push_back(
          detail::ssim_plane(pred.plane(n, c), target.plane(n, c), s.h, s.w, o, win, true));
      total += planes.back().sum;
      count += planes.back().positions;
    }
  Tensor<T> grad(s);
  std::size_t k = 0;
  for (int n = 0; n < s.n; ++n)
    for (int c = 0; c < s.c; ++c, ++k) {
      T* g = grad.plane(n, c);
      for (std::size_t i = 0; i < s.plane(); ++i)
        g[i] = static_cast<T>(planes[k].grad[i] / static_cast<double>(count));
    }
  return {total / static_cast<double>(count), std::move(grad)};
}

/// BT.601 luma of an RGB batch, shape (N, 1, H, W).
template <typename T>
Tensor<T> to_luma(const Tensor<T>& rgb) {
  const Shape s = rgb.shape();
  if (s.c != 3) throw Error("to_luma expects 3 channels");
  Tensor<T> y(Shape{s.n, 1, s.h, s.w});
  for (int n = 0; n < s.n; ++n) {
    const T *r = rgb.plane(n, 0), *g = rgb.plane(n, 1), *b = rgb.plane(n, 2);
    T* o = y.plane(n, 0);
    for (std::size_t i = 0; i < s.plane(); ++i)
      o[i] = static_cast<T>(0.299 * r[i] + 0.587 * g[i] + 0.114 * b[i]);
  }
  return y;
}

struct PsnrValue {
  double db = 0;
  /// Set when the images are identical (MSE = 0); db is then +inf.
  bool infinite = false;
};

template <typename T>
double mse(const Tensor<T>& a, const Tensor<T>& b) {
  a.check_same(b, "mse");
  double acc = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const double d = static_cast<double>(a[i]) - b[i];
    acc += d * d;
  }
  return acc / static_cast<double>(a.size());
}

/// 10 log10(peak^2 / MSE) over the whole tensor.
template <typename T>
PsnrValue psnr(const Tensor<T>& pred, const Tensor<T>& target, double peak = 1.0) {
  const double m = mse(pred, target);
  if (m == 0) return {std::numeric_limits<double>::infinity(), true};
  return {10.0 * std::log10(peak * peak / m), false};
}

struct EvalReport {
  double psnr_db = 0;
  double ssim = 0;
  int n_samples = 0;
  /// Number of samples whose prediction matched the target exactly.
  int n_identical = 0;
  bool psnr_infinite = false;
  double fp32_recovery_pct = std::numeric_limits<double>::quiet_NaN();
};

/// Accumulates per-image PSNR (mean over images with finite PSNR) and SSIM.
class EvalAccumulator {
public:
  explicit EvalAccumulator(bool luma = false) : luma_(luma) {}

  template <typename T>
  void add(const Tensor<T>& pred, const Tensor<T>& target) {
    pred.check_same(target, "evaluation");
    for (int n = 0; n < pred.shape().n; ++n) {
      Tensor<T> p = slice_sample(pred, n), t = slice_sample(target, n);
      if (luma_) {
        p = to_luma(p);
        t = to_luma(t);
      }
      const auto v = psnr(p, t);
      if (v.infinite)
        ++identical_;
      else
        psnr_sum_ += v.db;
      ssim_sum_ += ssim(p, t);
      ++count_;
    }
  }

  EvalReport report() const {
    EvalReport r;
    r.n_samples = count_;
    r.n_identical = identical_;
    const int finite = count_ - identical_;
    r.psnr_infinite = identical_ > 0 && finite == 0;
    r.psnr_db = finite > 0 ? psnr_sum_ / finite : std::numeric_limits<double>::infinity();
    r.ssim = count_ > 0 ? ssim_sum_ / count_ : 0;
    return r;
  }

private:
  bool luma_;
  double psnr_sum_ = 0;
  double ssim_sum_ = 0;
  int count_ = 0;
  int identical_ = 0;
};

/// Quantized PSNR as a percentage of the FP32 PSNR on the same evaluation set.
inline double recovery(const EvalReport& quant, const EvalReport& fp32) {
  if (quant.n_samples != fp32.n_samples)
    throw Error("recovery: reports cover different sample counts (" +
                std::to_string(quant.n_samples) + " vs " + std::to_string(fp32.n_samples) + ")");
  if (fp32.psnr_db == 0) throw Error("recovery: FP32 PSNR is zero");
  return 100.0 * quant.psnr_db / fp32.psnr_db;
}

}  // namespace qdr
