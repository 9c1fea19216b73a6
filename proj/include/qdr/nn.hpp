#pragma once

// Layers with hand-written backward passes. Each layer caches what its
// backward needs during forward; backward accumulates parameter gradients
// and returns the input gradient. Backward may be called several times
// after one forward (it does not consume the caches).

#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <functional>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "qdr/quantsim.hpp"
#include "qdr/rng.hpp"
#include "qdr/tensor.hpp"

namespace qdr {

template <typename T>
struct Param {
  std::string name;
  Tensor<T> value;
  Tensor<T> grad;

  Param() = default;
  Param(std::string n, Shape s) : name(std::move(n)), value(s), grad(s) {}
  void zero_grad() { grad.zero(); }
};

template <typename T>
using ParamRefs = std::vector<Param<T>*>;

/// How a forward pass treats normalization statistics and activation ranges.
struct ForwardContext {
  bool batch_stats = false;           // BN normalizes with batch statistics
  bool update_running_stats = false;  // BN updates its running estimates
  bool observe_ranges = false;        // open activation quantizers may grow

  static ForwardContext train() { return {true, true, true}; }
  static ForwardContext eval() { return {false, false, false}; }
  /// Batch statistics without touching any stored state.
  static ForwardContext frozen_batch_stats() { return {true, false, false}; }
  static ForwardContext calibrate() { return {false, false, true}; }
};

enum class LayerKind { conv, conv_transpose, batchnorm, relu, sigmoid, avgpool, add, mul, linear };

inline const char* to_string(LayerKind k) {
  switch (k) {
    case LayerKind::conv: return "conv";
    case LayerKind::conv_transpose: return "conv_transpose";
    case LayerKind::batchnorm: return "batchnorm";
    case LayerKind::relu: return "relu";
    case LayerKind::sigmoid: return "sigmoid";
    case LayerKind::avgpool: return "avgpool";
    case LayerKind::add: return "add";
    case LayerKind::mul: return "mul";
    case LayerKind::linear: return "linear";
  }
  return "?";
}

struct LayerInfo {
  std::string name;
  LayerKind kind;
};

template <typename T>
using RowMatrix = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using MatMap = Eigen::Map<RowMatrix<T>>;
template <typename T>
using ConstMatMap = Eigen::Map<const RowMatrix<T>>;

/// Fan-in scaled normal init, std = sqrt(2 / fan_in).
template <typename T>
void init_fan_in_normal(Tensor<T>& w, int fan_in, Rng& rng) {
  const double std = std::sqrt(2.0 / fan_in);
  for (auto& v : w.values()) v = static_cast<T>(rng.normal(0.0, std));
}

/// Weight + input-activation fake quantizers shared by conv layers.
template <typename T>
struct LayerQuantizers {
  std::optional<WeightQuantizer<T>> weight;
  std::optional<ActivationQuantizer<T>> input;
  bool enabled = true;

  bool active() const { return enabled && weight.has_value(); }
};

template <typename T>
class Conv2d {
public:
  Conv2d() = default;
  Conv2d(std::string name, int in, int out, int kernel, int stride, bool bias)
      : name_(std::move(name)), in_(in), out_(out), k_(kernel), stride_(stride),
        pad_(kernel / 2), weight_(name_ + ".weight", Shape{out, in, kernel, kernel}) {
    if (bias) bias_.emplace(name_ + ".bias", Shape{out, 1, 1, 1});
  }

  void init(Rng& rng) {
    init_fan_in_normal(weight_.value, in_ * k_ * k_, rng);
    if (bias_) bias_->value.zero();
  }

  int out_size(int n) const { return (n + 2 * pad_ - k_) / stride_ + 1; }

  Tensor<T> forward(const Tensor<T>& x, const ForwardContext& ctx) {
    if (x.shape().c != in_)
      throw Error(name_ + ": expected " + std::to_string(in_) + " input channels, got " +
                  x.shape().str());
    if (quant_.active()) {
      x_used_ = quant_.input->apply(x, ctx.observe_ranges);
      w_used_ = quant_.weight->apply(weight_.value);
    } else {
      x_used_ = x;
      w_used_ = weight_.value;
    }
    const Shape xs = x.shape();
    const int ho = out_size(xs.h), wo = out_size(xs.w);
    Tensor<T> y(Shape{xs.n, out_, ho, wo});
    const int kdim = in_ * k_ * k_;
    const int cols = ho * wo;
    ConstMatMap<T> w(w_used_.data(), out_, kdim);
    AlignedVector<T> col;
    for (int n = 0; n < xs.n; ++n) {
      const T* colp = im2col(x_used_, n, ho, wo, col);
      ConstMatMap<T> c(colp, kdim, cols);
      MatMap<T> yo(y.plane(n, 0), out_, cols);
      yo.noalias() = w * c;
      if (bias_)
        for (int o = 0; o < out_; ++o) yo.row(o).array() += bias_->value[o];
    }
    return y;
  }

  Tensor<T> backward(const Tensor<T>& gy) {
    const Shape xs = x_used_.shape();
    const int ho = gy.shape().h, wo = gy.shape().w;
    const int kdim = in_ * k_ * k_;
    const int cols = ho * wo;
    Tensor<T> gx(xs);
    Tensor<T> gw(weight_.value.shape());
    MatMap<T> gwm(gw.data(), out_, kdim);
    ConstMatMap<T> w(w_used_.data(), out_, kdim);
    AlignedVector<T> col;
    RowMatrix<T> gcol(kdim, cols);
    for (int n = 0; n < xs.n; ++n) {
      ConstMatMap<T> g(gy.plane(n, 0), out_, cols);
      const T* colp = im2col(x_used_, n, ho, wo, col);
      ConstMatMap<T> c(colp, kdim, cols);
      gwm.noalias() += g * c.transpose();
      if (bias_)
        for (int o = 0; o < out_; ++o) bias_->grad[o] += g.row(o).sum();
      gcol.noalias() = w.transpose() * g;
      col2im(gcol.data(), gx, n, ho, wo);
    }
    if (quant_.active()) {
      quant_.weight->backward_inplace(gw);
      quant_.input->backward_inplace(gx);
    }
    weight_.grad += gw;
    return gx;
  }

  void attach_quantizers(const QuantConfig& cfg) {
    quant_.weight.emplace(cfg.bits, 0);
    quant_.input.emplace(cfg.bits, cfg.calibration_batches);
    quant_.enabled = true;
  }
  void detach_quantizers() { quant_ = {}; }
  LayerQuantizers<T>& quantizers() { return quant_; }
  const LayerQuantizers<T>& quantizers() const { return quant_; }

  void collect(ParamRefs<T>& out) {
    out.push_back(&weight_);
    if (bias_) out.push_back(&*bias_);
  }
  Param<T>& weight() { return weight_; }
  Param<T>* bias() { return bias_ ? &*bias_ : nullptr; }
  const std::string& name() const { return name_; }
  int in_channels() const { return in_; }
  int out_channels() const { return out_; }
  int kernel() const { return k_; }
  int stride() const { return stride_; }

private:
  // Output columns [lo, hi) whose input column ox*stride - pad + kx is in range.
  void valid_columns(int kx, int width, int wo, int& lo, int& hi) const {
    const int off = kx - pad_;
    lo = off >= 0 ? 0 : (-off + stride_ - 1) / stride_;
    hi = (width - 1 - off) < 0 ? 0 : (width - 1 - off) / stride_ + 1;
    hi = std::min(hi, wo);
    lo = std::min(lo, hi);
  }

  // Returns a pointer to the (in*k*k, ho*wo) patch matrix of sample n. For
  // 1x1 stride-1 kernels that is the sample itself.
  const T* im2col(const Tensor<T>& x, int n, int ho, int wo, AlignedVector<T>& col) const {
    const Shape xs = x.shape();
    if (k_ == 1 && stride_ == 1 && pad_ == 0) return x.plane(n, 0);
    col.resize(static_cast<std::size_t>(in_) * k_ * k_ * ho * wo);
    T* dst = col.data();
    for (int c = 0; c < in_; ++c) {
      const T* src = x.plane(n, c);
      for (int ky = 0; ky < k_; ++ky)
        for (int kx = 0; kx < k_; ++kx) {
          int lo, hi;
          valid_columns(kx, xs.w, wo, lo, hi);
          const int off = kx - pad_;
          for (int oy = 0; oy < ho; ++oy) {
            const int iy = oy * stride_ - pad_ + ky;
            T* row = dst + static_cast<std::size_t>(oy) * wo;
            if (iy < 0 || iy >= xs.h) {
              std::fill(row, row + wo, T{0});
              continue;
            }
            std::fill(row, row + lo, T{0});
            std::fill(row + hi, row + wo, T{0});
            const T* srow = src + static_cast<std::size_t>(iy) * xs.w + off;
            if (stride_ == 1) {
              std::copy(srow + lo, srow + hi, row + lo);
            } else {
              for (int ox = lo; ox < hi; ++ox) row[ox] = srow[ox * stride_];
            }
          }
          dst += static_cast<std::size_t>(ho) * wo;
        }
    }
    return col.data();
  }

  void col2im(const T* gcol, Tensor<T>& gx, int n, int ho, int wo) const {
    const Shape xs = gx.shape();
    if (k_ == 1 && stride_ == 1 && pad_ == 0) {
      T* dst = gx.plane(n, 0);
      for (std::size_t i = 0, e = static_cast<std::size_t>(in_) * ho * wo; i < e; ++i)
        dst[i] += gcol[i];
      return;
    }
    const T* src = gcol;
    for (int c = 0; c < in_; ++c) {
      T* dst = gx.plane(n, c);
      for (int ky = 0; ky < k_; ++ky)
        for (int kx = 0; kx < k_; ++kx) {
          int lo, hi;
          valid_columns(kx, xs.w, wo, lo, hi);
          const int off = kx - pad_;
          for (int oy = 0; oy < ho; ++oy) {
            const int iy = oy * stride_ - pad_ + ky;
            if (iy < 0 || iy >= xs.h) continue;
            const T* row = src + static_cast<std::size_t>(oy) * wo;
            T* drow = dst + static_cast<std::size_t>(iy) * xs.w + off;
            if (stride_ == 1) {
              for (int ox = lo; ox < hi; ++ox) drow[ox] += row[ox];
            } else {
              for (int ox = lo; ox < hi; ++ox) drow[ox * stride_] += row[ox];
            }
          }
          src += static_cast<std::size_t>(ho) * wo;
        }
    }
  }

  std::string name_;
  int in_ = 0, out_ = 0, k_ = 1, stride_ = 1, pad_ = 0;
  Param<T> weight_;
  std::optional<Param<T>> bias_;
  LayerQuantizers<T> quant_;
  Tensor<T> x_used_;
  Tensor<T> w_used_;
};

/// Transposed convolution with kernel == stride (non-overlapping upsampling).
/// Weight layout is (in, out, k, k); per-channel quantization runs along axis 1.
template <typename T>
class ConvTranspose2d {
public:
  ConvTranspose2d() = default;
  ConvTranspose2d(std::string name, int in, int out, int kernel)
      : name_(std::move(name)), in_(in), out_(out), k_(kernel),
        weight_(name_ + ".weight", Shape{in, out, kernel, kernel}),
        bias_(name_ + ".bias", Shape{out, 1, 1, 1}) {}

  void init(Rng& rng) {
    init_fan_in_normal(weight_.value, in_, rng);
    bias_.value.zero();
  }

  Tensor<T> forward(const Tensor<T>& x, const ForwardContext& ctx) {
    if (x.shape().c != in_)
      throw Error(name_ + ": expected " + std::to_string(in_) + " input channels, got " +
                  x.shape().str());
    if (quant_.active()) {
      x_used_ = quant_.input->apply(x, ctx.observe_ranges);
      w_used_ = quant_.weight->apply(weight_.value);
    } else {
      x_used_ = x;
      w_used_ = weight_.value;
    }
    const Shape xs = x.shape();
    const int hw = xs.h * xs.w;
    const int odim = out_ * k_ * k_;
    Tensor<T> y(Shape{xs.n, out_, xs.h * k_, xs.w * k_});
    ConstMatMap<T> w(w_used_.data(), in_, odim);
    RowMatrix<T> tmp(odim, hw);
    for (int n = 0; n < xs.n; ++n) {
      ConstMatMap<T> xm(x_used_.plane(n, 0), in_, hw);
      tmp.noalias() = w.transpose() * xm;
      for (int o = 0; o < out_; ++o) {
        T* dst = y.plane(n, o);
        const T b = bias_.value[o];
        for (int a = 0; a < k_; ++a)
          for (int bb = 0; bb < k_; ++bb) {
            const T* src = tmp.data() + static_cast<std::size_t>((o * k_ + a) * k_ + bb) * hw;
            for (int i = 0; i < xs.h; ++i)
              for (int j = 0; j < xs.w; ++j)
                dst[static_cast<std::size_t>(i * k_ + a) * y.shape().w + j * k_ + bb] =
                    src[i * xs.w + j] + b;
          }
      }
    }
    return y;
  }

  Tensor<T> backward(const Tensor<T>& gy) {
    const Shape xs = x_used_.shape();
    const int hw = xs.h * xs.w;
    const int odim = out_ * k_ * k_;
    Tensor<T> gx(xs);
    Tensor<T> gw(weight_.value.shape());
    MatMap<T> gwm(gw.data(), in_, odim);
    ConstMatMap<T> w(w_used_.data(), in_, odim);
    RowMatrix<T> tmp(odim, hw);
    for (int n = 0; n < xs.n; ++n) {
      for (int o = 0; o < out_; ++o) {
        const T* src = gy.plane(n, o);
        double bsum = 0;
        for (int a = 0; a < k_; ++a)
          for (int bb = 0; bb < k_; ++bb) {
            T* dst = tmp.data() + static_cast<std::size_t>((o * k_ + a) * k_ + bb) * hw;
            for (int i = 0; i < xs.h; ++i)
              for (int j = 0; j < xs.w; ++j) {
                const T v = src[static_cast<std::size_t>(i * k_ + a) * gy.shape().w + j * k_ + bb];
                dst[i * xs.w + j] = v;
                bsum += v;
              }
          }
        bias_.grad[o] += static_cast<T>(bsum);
      }
      ConstMatMap<T> xm(x_used_.plane(n, 0), in_, hw);
      gwm.noalias() += xm * tmp.transpose();
      MatMap<T> gxm(gx.plane(n, 0), in_, hw);
      gxm.noalias() = w * tmp;
    }
    if (quant_.active()) {
      quant_.weight->backward_inplace(gw);
      quant_.input->backward_inplace(gx);
    }
    weight_.grad += gw;
    return gx;
  }

  void attach_quantizers(const QuantConfig& cfg) {
    quant_.weight.emplace(cfg.bits, 1);
    quant_.input.emplace(cfg.bits, cfg.calibration_batches);
    quant_.enabled = true;
  }
  void detach_quantizers() { quant_ = {}; }
  LayerQuantizers<T>& quantizers() { return quant_; }
  const LayerQuantizers<T>& quantizers() const { return quant_; }

  void collect(ParamRefs<T>& out) {
    out.push_back(&weight_);
    out.push_back(&bias_);
  }
  Param<T>& weight() { return weight_; }
  const std::string& name() const { return name_; }
  int in_channels() const { return in_; }
  int out_channels() const { return out_; }

private:
  std::string name_;
  int in_ = 0, out_ = 0, k_ = 2;
  Param<T> weight_;
  Param<T> bias_;
  LayerQuantizers<T> quant_;
  Tensor<T> x_used_;
  Tensor<T> w_used_;
};

/// Running estimates follow running = momentum * running + (1 - momentum) * batch.
template <typename T>
class BatchNorm2d {
public:
  BatchNorm2d() = default;
  BatchNorm2d(std::string name, int channels, double momentum, double eps = 1e-5)
      : name_(std::move(name)), c_(channels), momentum_(momentum), eps_(eps),
        gamma_(name_ + ".gamma", Shape{channels, 1, 1, 1}),
        beta_(name_ + ".beta", Shape{channels, 1, 1, 1}),
        running_mean_(static_cast<std::size_t>(channels), 0.0),
        running_var_(static_cast<std::size_t>(channels), 1.0) {
    gamma_.value.fill(T{1});
  }

  Tensor<T> forward(const Tensor<T>& x, const ForwardContext& ctx) {
    const Shape s = x.shape();
    if (s.c != c_) throw Error(name_ + ": channel mismatch " + s.str());
    const std::size_t plane = s.plane();
    const double m = static_cast<double>(s.n) * plane;
    xhat_ = Tensor<T>(s);
    inv_std_.assign(static_cast<std::size_t>(c_), 0.0);
    batch_mode_ = ctx.batch_stats;
    Tensor<T> y(s);
    for (int c = 0; c < c_; ++c) {
      double mu, var;
      if (ctx.batch_stats) {
        double acc = 0;
        for (int n = 0; n < s.n; ++n) {
          const T* p = x.plane(n, c);
          for (std::size_t i = 0; i < plane; ++i) acc += p[i];
        }
        mu = acc / m;
        double sq = 0;
        for (int n = 0; n < s.n; ++n) {
          const T* p = x.plane(n, c);
          for (std::size_t i = 0; i < plane; ++i) sq += (p[i] - mu) * (p[i] - mu);
        }
        var = sq / m;
        if (ctx.update_running_stats) {
          const double unbiased = m > 1 ? sq / (m - 1) : var;
          running_mean_[c] = momentum_ * running_mean_[c] + (1 - momentum_) * mu;
          running_var_[c] = momentum_ * running_var_[c] + (1 - momentum_) * unbiased;
        }
      } else {
        mu = running_mean_[c];
        var = running_var_[c];
      }
      const double inv = 1.0 / std::sqrt(var + eps_);
      inv_std_[c] = inv;
      const double g = gamma_.value[c], b = beta_.value[c];
      for (int n = 0; n < s.n; ++n) {
        const T* p = x.plane(n, c);
        T* xh = xhat_.plane(n, c);
        T* q = y.plane(n, c);
        for (std::size_t i = 0; i < plane; ++i) {
          const double v = (p[i] - mu) * inv;
          xh[i] = static_cast<T>(v);
          q[i] = static_cast<T>(g * v + b);
        }
      }
    }
    return y;
  }

  Tensor<T> backward(const Tensor<T>& gy) {
    const Shape s = gy.shape();
    const std::size_t plane = s.plane();
    const double m = static_cast<double>(s.n) * plane;
    Tensor<T> gx(s);
    for (int c = 0; c < c_; ++c) {
      double sg = 0, sgx = 0;
      for (int n = 0; n < s.n; ++n) {
        const T* g = gy.plane(n, c);
        const T* xh = xhat_.plane(n, c);
        for (std::size_t i = 0; i < plane; ++i) {
          sg += g[i];
          sgx += static_cast<double>(g[i]) * xh[i];
        }
      }
      gamma_.grad[c] += static_cast<T>(sgx);
      beta_.grad[c] += static_cast<T>(sg);
      const double gamma = gamma_.value[c];
      const double inv = inv_std_[c];
      for (int n = 0; n < s.n; ++n) {
        const T* g = gy.plane(n, c);
        const T* xh = xhat_.plane(n, c);
        T* out = gx.plane(n, c);
        if (batch_mode_) {
          const double k = gamma * inv / m;
          for (std::size_t i = 0; i < plane; ++i)
            out[i] = static_cast<T>(k * (m * g[i] - sg - xh[i] * sgx));
        } else {
          for (std::size_t i = 0; i < plane; ++i) out[i] = static_cast<T>(gamma * inv * g[i]);
        }
      }
    }
    return gx;
  }

  void collect(ParamRefs<T>& out) {
    out.push_back(&gamma_);
    out.push_back(&beta_);
  }
  std::vector<double>& running_mean() { return running_mean_; }
  std::vector<double>& running_var() { return running_var_; }
  const std::string& name() const { return name_; }
  double momentum() const { return momentum_; }

private:
  std::string name_;
  int c_ = 0;
  double momentum_ = 0.8;
  double eps_ = 1e-5;
  Param<T> gamma_;
  Param<T> beta_;
  std::vector<double> running_mean_;
  std::vector<double> running_var_;
  Tensor<T> xhat_;
  std::vector<double> inv_std_;
  bool batch_mode_ = false;
};

template <typename T>
Tensor<T> relu(const Tensor<T>& x) {
  Tensor<T> y(x.shape());
  for (std::size_t i = 0; i < x.size(); ++i) y[i] = x[i] > T{0} ? x[i] : T{0};
  return y;
}

/// Gradient of relu given its output (or input; the sign pattern is the same).
template <typename T>
Tensor<T> relu_backward(const Tensor<T>& gy, const Tensor<T>& y) {
  Tensor<T> gx(gy.shape());
  for (std::size_t i = 0; i < gy.size(); ++i) gx[i] = y[i] > T{0} ? gy[i] : T{0};
  return gx;
}

template <typename T>
T sigmoid(T v) {
  return T{1} / (T{1} + std::exp(-v));
}

template <typename T>
Tensor<T> sigmoid(const Tensor<T>& x) {
  Tensor<T> y(x.shape());
  for (std::size_t i = 0; i < x.size(); ++i) y[i] = sigmoid(x[i]);
  return y;
}

template <typename T>
Tensor<T> sigmoid_backward(const Tensor<T>& gy, const Tensor<T>& y) {
  Tensor<T> gx(gy.shape());
  for (std::size_t i = 0; i < gy.size(); ++i) gx[i] = gy[i] * y[i] * (T{1} - y[i]);
  return gx;
}

/// Squeeze-and-excitation: pool -> 1x1 (C -> C/r) -> ReLU -> 1x1 (C/r -> C)
/// -> sigmoid -> channelwise scale.
template <typename T>
class SqueezeExcite {
public:
  SqueezeExcite() = default;
  SqueezeExcite(const std::string& name, int channels, int hidden)
      : c_(channels), reduce_(name + ".reduce", channels, hidden, 1, 1, true),
        expand_(name + ".expand", hidden, channels, 1, 1, true) {}

  void init(Rng& rng) {
    reduce_.init(rng);
    expand_.init(rng);
  }

  Tensor<T> forward(const Tensor<T>& x, const ForwardContext& ctx) {
    const Shape s = x.shape();
    x_ = x;
    Tensor<T> pooled(Shape{s.n, s.c, 1, 1});
    const std::size_t plane = s.plane();
    for (int n = 0; n < s.n; ++n)
      for (int c = 0; c < s.c; ++c) {
        const T* p = x.plane(n, c);
        double acc = 0;
        for (std::size_t i = 0; i < plane; ++i) acc += p[i];
        pooled(n, c, 0, 0) = static_cast<T>(acc / plane);
      }
    hidden_ = relu(reduce_.forward(pooled, ctx));
    gate_ = sigmoid(expand_.forward(hidden_, ctx));
    Tensor<T> y(s);
    for (int n = 0; n < s.n; ++n)
      for (int c = 0; c < s.c; ++c) {
        const T g = gate_(n, c, 0, 0);
        const T* p = x.plane(n, c);
        T* q = y.plane(n, c);
        for (std::size_t i = 0; i < plane; ++i) q[i] = p[i] * g;
      }
    return y;
  }

  Tensor<T> backward(const Tensor<T>& gy) {
    const Shape s = gy.shape();
    const std::size_t plane = s.plane();
    Tensor<T> gx(s);
    Tensor<T> ggate(gate_.shape());
    for (int n = 0; n < s.n; ++n)
      for (int c = 0; c < s.c; ++c) {
        const T g = gate_(n, c, 0, 0);
        const T* gp = gy.plane(n, c);
        const T* xp = x_.plane(n, c);
        T* out = gx.plane(n, c);
        double acc = 0;
        for (std::size_t i = 0; i < plane; ++i) {
          out[i] = gp[i] * g;
          acc += static_cast<double>(gp[i]) * xp[i];
        }
        ggate(n, c, 0, 0) = static_cast<T>(acc);
      }
    Tensor<T> gpool =
        reduce_.backward(relu_backward(expand_.backward(sigmoid_backward(ggate, gate_)), hidden_));
    for (int n = 0; n < s.n; ++n)
      for (int c = 0; c < s.c; ++c) {
        const T d = gpool(n, c, 0, 0) / static_cast<T>(plane);
        T* out = gx.plane(n, c);
        for (std::size_t i = 0; i < plane; ++i) out[i] += d;
      }
    return gx;
  }

  const Tensor<T>& last_gate() const { return gate_; }
  Conv2d<T>& reduce() { return reduce_; }
  Conv2d<T>& expand() { return expand_; }
  void collect(ParamRefs<T>& out) {
    reduce_.collect(out);
    expand_.collect(out);
  }

private:
  int c_ = 0;
  Conv2d<T> reduce_;
  Conv2d<T> expand_;
  Tensor<T> x_, hidden_, gate_;
};

/// x + SE(BN(Conv3x3(ReLU(BN(Conv3x3(x)))))).
template <typename T>
class ResBlockSE {
public:
  ResBlockSE() = default;
  ResBlockSE(const std::string& name, int channels, int se_hidden, double bn_momentum)
      : name_(name), conv1_(name + ".conv1", channels, channels, 3, 1, false),
        bn1_(name + ".bn1", channels, bn_momentum),
        conv2_(name + ".conv2", channels, channels, 3, 1, false),
        bn2_(name + ".bn2", channels, bn_momentum), se_(name + ".se", channels, se_hidden) {}

  void init(Rng& rng) {
    conv1_.init(rng);
    conv2_.init(rng);
    se_.init(rng);
  }

  Tensor<T> forward(const Tensor<T>& x, const ForwardContext& ctx) {
    h1_ = relu(bn1_.forward(conv1_.forward(x, ctx), ctx));
    Tensor<T> y = se_.forward(bn2_.forward(conv2_.forward(h1_, ctx), ctx), ctx);
    y += x;
    return y;
  }

  Tensor<T> backward(const Tensor<T>& gy) {
    Tensor<T> g = conv2_.backward(bn2_.backward(se_.backward(gy)));
    Tensor<T> gx = conv1_.backward(bn1_.backward(relu_backward(g, h1_)));
    gx += gy;
    return gx;
  }

  void collect(ParamRefs<T>& out) {
    conv1_.collect(out);
    bn1_.collect(out);
    conv2_.collect(out);
    bn2_.collect(out);
    se_.collect(out);
  }

  template <typename Fn>
  void for_each_conv(Fn&& fn) {
    fn(conv1_);
    fn(conv2_);
    fn(se_.reduce());
    fn(se_.expand());
  }
  template <typename Fn>
  void for_each_bn(Fn&& fn) {
    fn(bn1_);
    fn(bn2_);
  }
  void inventory(std::vector<LayerInfo>& out) const {
    out.push_back({name_ + ".conv1", LayerKind::conv});
    out.push_back({name_ + ".bn1", LayerKind::batchnorm});
    out.push_back({name_ + ".relu1", LayerKind::relu});
    out.push_back({name_ + ".conv2", LayerKind::conv});
    out.push_back({name_ + ".bn2", LayerKind::batchnorm});
    out.push_back({name_ + ".se.pool", LayerKind::avgpool});
    out.push_back({name_ + ".se.reduce", LayerKind::conv});
    out.push_back({name_ + ".se.relu", LayerKind::relu});
    out.push_back({name_ + ".se.expand", LayerKind::conv});
    out.push_back({name_ + ".se.sigmoid", LayerKind::sigmoid});
    out.push_back({name_ + ".se.scale", LayerKind::mul});
    out.push_back({name_ + ".shortcut", LayerKind::add});
  }

  Conv2d<T>& conv2() { return conv2_; }
  SqueezeExcite<T>& se() { return se_; }
  const std::string& name() const { return name_; }

private:
  std::string name_;
  Conv2d<T> conv1_;
  BatchNorm2d<T> bn1_;
  Conv2d<T> conv2_;
  BatchNorm2d<T> bn2_;
  SqueezeExcite<T> se_;
  Tensor<T> h1_;
};

}  // namespace qdr
