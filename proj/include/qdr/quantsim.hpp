#pragma once

// Simulated symmetric low-bit quantization with straight-through gradients.
//
// Integer range is symmetric, [-(2^(b-1)-1), 2^(b-1)-1]; -2^(b-1) is never
// produced, so the zero point is 0 everywhere. Rounding is half-to-even.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "qdr/tensor.hpp"

namespace qdr {

enum class WeightScheme { per_channel_symmetric };
enum class ActivationScheme { per_tensor_symmetric };
enum class CalibrationRule { max };

inline const char* to_string(WeightScheme) { return "per_channel_symmetric"; }
inline const char* to_string(ActivationScheme) { return "per_tensor_symmetric"; }
inline const char* to_string(CalibrationRule) { return "max"; }

/// Scale used for an all-zero slice so that division never sees 0.
inline constexpr double kZeroRangeScale = 1e-8;

struct QuantConfig {
  int bits = 8;
  WeightScheme weight_scheme = WeightScheme::per_channel_symmetric;
  ActivationScheme activation_scheme = ActivationScheme::per_tensor_symmetric;
  CalibrationRule calibration = CalibrationRule::max;
  /// Activation ranges are observed over this many batches, then frozen.
  int calibration_batches = 16;
  /// Quantize the [0,1] degradation maps with the fixed scale 1/qmax.
  bool quantize_gate_maps = true;

  void validate() const {
    if (bits != 2 && bits != 4 && bits != 8)
      throw Error("quant bits must be 2, 4 or 8, got " + std::to_string(bits));
    if (calibration_batches < 1) throw Error("calibration_batches must be >= 1");
  }
};

constexpr int qmax_for_bits(int bits) { return (1 << (bits - 1)) - 1; }

struct QuantParams {
  std::vector<double> scales;
  int bits = 8;
  /// Axis of the NCHW shape that indexes `scales`; -1 for per-tensor.
  int channel_axis = -1;

  int qmax() const { return qmax_for_bits(bits); }
  bool per_tensor() const { return channel_axis < 0; }
};

namespace detail {

inline int axis_extent(const Shape& s, int axis) {
  switch (axis) {
    case 0: return s.n;
    case 1: return s.c;
    case 2: return s.h;
    case 3: return s.w;
    default: throw Error("channel axis out of range: " + std::to_string(axis));
  }
}

/// Maps a flat NCHW index to its coordinate along `axis`.
struct AxisIndexer {
  std::size_t inner = 1;
  std::size_t extent = 1;

  AxisIndexer(const Shape& s, int axis) {
    const int dims[4] = {s.n, s.c, s.h, s.w};
    extent = static_cast<std::size_t>(dims[axis]);
    for (int d = axis + 1; d < 4; ++d) inner *= static_cast<std::size_t>(dims[d]);
  }
  std::size_t operator()(std::size_t flat) const { return (flat / inner) % extent; }
};

inline double quantize_scalar(double x, double scale, int qmax) {
  double q = std::nearbyint(x / scale);
  return std::clamp(q, -static_cast<double>(qmax), static_cast<double>(qmax));
}

}  // namespace detail

/// Max calibration: scale = max|x| / qmax over each channel (or the whole tensor).
template <typename T>
QuantParams calibrate_max(const Tensor<T>& x, bool per_channel, int channel_axis, int bits,
                          double zero_range_scale = kZeroRangeScale) {
  if (bits != 2 && bits != 4 && bits != 8)
    throw Error("calibrate_max: bits must be 2, 4 or 8");
  if (!all_finite(x.values())) throw NonFiniteError("calibrate_max: input contains NaN or Inf");
  QuantParams p;
  p.bits = bits;
  const double qmax = p.qmax();
  if (!per_channel) {
    const double m = static_cast<double>(max_abs(x.values()));
    p.scales = {m > 0 ? m / qmax : zero_range_scale};
    return p;
  }
  const int extent = detail::axis_extent(x.shape(), channel_axis);
  p.channel_axis = channel_axis;
  std::vector<double> maxima(static_cast<std::size_t>(extent), 0.0);
  detail::AxisIndexer idx(x.shape(), channel_axis);
  for (std::size_t i = 0; i < x.size(); ++i) {
    auto& m = maxima[idx(i)];
    m = std::max(m, std::abs(static_cast<double>(x[i])));
  }
  p.scales.resize(maxima.size());
  std::transform(maxima.begin(), maxima.end(), p.scales.begin(),
                 [&](double m) { return m > 0 ? m / qmax : zero_range_scale; });
  return p;
}

namespace detail {

template <typename T, typename Fn>
void for_each_scaled(const Tensor<T>& x, const QuantParams& p, Fn&& fn) {
  if (p.scales.empty()) throw Error("quant params are not calibrated");
  if (p.per_tensor()) {
    if (p.scales.size() != 1) throw Error("per-tensor params must carry exactly one scale");
    for (std::size_t i = 0; i < x.size(); ++i) fn(i, p.scales[0]);
    return;
  }
  if (static_cast<int>(p.scales.size()) != axis_extent(x.shape(), p.channel_axis))
    throw Error("scale count " + std::to_string(p.scales.size()) +
                " does not match channel extent of " + x.shape().str());
  AxisIndexer idx(x.shape(), p.channel_axis);
  for (std::size_t i = 0; i < x.size(); ++i) fn(i, p.scales[idx(i)]);
}

}  // namespace detail

/// clamp(round(x/s), -qmax, qmax) * s, broadcast over the channel axis.
template <typename T>
Tensor<T> fake_quantize(const Tensor<T>& x, const QuantParams& p) {
  Tensor<T> out(x.shape());
  const int qmax = p.qmax();
  detail::for_each_scaled(x, p, [&](std::size_t i, double s) {
    out[i] = static_cast<T>(detail::quantize_scalar(static_cast<double>(x[i]), s, qmax) * s);
  });
  return out;
}

/// Integer codes of x under p (what an integer kernel would consume).
template <typename T>
std::vector<std::int32_t> quantize_codes(const Tensor<T>& x, const QuantParams& p) {
  std::vector<std::int32_t> q(x.size());
  const int qmax = p.qmax();
  detail::for_each_scaled(x, p, [&](std::size_t i, double s) {
    q[i] = static_cast<std::int32_t>(detail::quantize_scalar(static_cast<double>(x[i]), s, qmax));
  });
  return q;
}

/// 1 where the straight-through estimator passes gradient (|x/s| <= qmax), else 0.
template <typename T>
std::vector<std::uint8_t> ste_mask(const Tensor<T>& x, const QuantParams& p) {
  std::vector<std::uint8_t> mask(x.size());
  const double qmax = p.qmax();
  detail::for_each_scaled(x, p, [&](std::size_t i, double s) {
    mask[i] = std::abs(static_cast<double>(x[i]) / s) <= qmax ? 1 : 0;
  });
  return mask;
}

template <typename T>
Tensor<T> ste_gradient(const Tensor<T>& upstream, const Tensor<T>& x, const QuantParams& p) {
  upstream.check_same(x, "ste_gradient");
  const auto mask = ste_mask(x, p);
  Tensor<T> g(x.shape());
  for (std::size_t i = 0; i < g.size(); ++i) g[i] = mask[i] ? upstream[i] : T{0};
  return g;
}

/// Per-channel weight quantizer. Scales are recomputed from the live weights
/// on every forward, so they always track the current FP values.
template <typename T>
class WeightQuantizer {
public:
  WeightQuantizer(int bits, int channel_axis) : bits_(bits), axis_(channel_axis) {}

  /// Returns the fake-quantized weights and records the STE mask.
  Tensor<T> apply(const Tensor<T>& w) {
    params_ = calibrate_max(w, true, axis_, bits_);
    mask_ = ste_mask(w, params_);
    return fake_quantize(w, params_);
  }
  /// Gradient w.r.t. the FP weights from the gradient w.r.t. the quantized ones.
  void backward_inplace(Tensor<T>& grad) const {
    for (std::size_t i = 0; i < grad.size(); ++i)
      if (!mask_[i]) grad[i] = T{0};
  }

  const QuantParams& params() const { return params_; }
  int bits() const { return bits_; }
  int channel_axis() const { return axis_; }

private:
  int bits_;
  int axis_;
  QuantParams params_;
  std::vector<std::uint8_t> mask_;
};

/// Per-tensor activation quantizer with a running-max range that is observed
/// for `calibration_batches` batches and then frozen.
template <typename T>
class ActivationQuantizer {
public:
  ActivationQuantizer(int bits, int calibration_batches)
      : bits_(bits), calibration_batches_(calibration_batches) {}

  /// `observe` allows the running max to grow while calibration is open. A
  /// quantizer that has never seen data always observes its first batch.
  Tensor<T> apply(const Tensor<T>& x, bool observe) {
    if (!frozen_ && (observe || batches_seen_ == 0)) {
      if (!all_finite(x.values())) throw NonFiniteError("activation contains NaN or Inf");
      running_max_ = std::max(running_max_, static_cast<double>(max_abs(x.values())));
      if (++batches_seen_ >= calibration_batches_) frozen_ = true;
    }
    params_ = current_params();
    mask_ = ste_mask(x, params_);
    return fake_quantize(x, params_);
  }
  void backward_inplace(Tensor<T>& grad) const {
    for (std::size_t i = 0; i < grad.size(); ++i)
      if (!mask_[i]) grad[i] = T{0};
  }

  QuantParams current_params() const {
    QuantParams p;
    p.bits = bits_;
    p.scales = {running_max_ > 0 ? running_max_ / qmax_for_bits(bits_) : kZeroRangeScale};
    return p;
  }

  bool frozen() const { return frozen_; }
  int batches_seen() const { return batches_seen_; }
  double running_max() const { return running_max_; }
  int bits() const { return bits_; }
  void restore(double running_max, int batches_seen, bool frozen) {
    running_max_ = running_max;
    batches_seen_ = batches_seen;
    frozen_ = frozen;
  }
  void reset() { restore(0.0, 0, false); }

private:
  int bits_;
  int calibration_batches_;
  double running_max_ = 0.0;
  int batches_seen_ = 0;
  bool frozen_ = false;
  QuantParams params_;
  std::vector<std::uint8_t> mask_;
};

/// Quantizer for outputs bounded in [0, 1]: fixed scale 1/qmax, no calibration.
template <typename T>
class FixedRangeQuantizer {
public:
  explicit FixedRangeQuantizer(int bits) {
    params_.bits = bits;
    params_.scales = {1.0 / qmax_for_bits(bits)};
  }
  Tensor<T> apply(const Tensor<T>& x) {
    mask_ = ste_mask(x, params_);
    return fake_quantize(x, params_);
  }
  void backward_inplace(Tensor<T>& grad) const {
    for (std::size_t i = 0; i < grad.size(); ++i)
      if (!mask_[i]) grad[i] = T{0};
  }
  const QuantParams& params() const { return params_; }

private:
  QuantParams params_;
  std::vector<std::uint8_t> mask_;
};

}  // namespace qdr
