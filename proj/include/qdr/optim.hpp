#pragma once

#include <cmath>
#include <vector>

#include "qdr/nn.hpp"

namespace qdr {

struct AdamOptions {
  double lr = 1e-5;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

/// Adam without weight decay over a fixed list of parameters.
template <typename T>
class Adam {
public:
  Adam(ParamRefs<T> params, AdamOptions opt) : params_(std::move(params)), opt_(opt) {
    for (auto* p : params_) {
      m_.emplace_back(p->value.size(), 0.0);
      v_.emplace_back(p->value.size(), 0.0);
    }
  }

  void step() {
    ++t_;
    const double c1 = 1 - std::pow(opt_.beta1, static_cast<double>(t_));
    const double c2 = 1 - std::pow(opt_.beta2, static_cast<double>(t_));
    for (std::size_t k = 0; k < params_.size(); ++k) {
      auto& p = *params_[k];
      auto& m = m_[k];
      auto& v = v_[k];
      for (std::size_t i = 0; i < p.value.size(); ++i) {
        const double g = p.grad[i];
        m[i] = opt_.beta1 * m[i] + (1 - opt_.beta1) * g;
        v[i] = opt_.beta2 * v[i] + (1 - opt_.beta2) * g * g;
        const double update = opt_.lr * (m[i] / c1) / (std::sqrt(v[i] / c2) + opt_.eps);
        p.value[i] = static_cast<T>(p.value[i] - update);
      }
    }
  }

  long steps() const { return t_; }
  const AdamOptions& options() const { return opt_; }

private:
  ParamRefs<T> params_;
  AdamOptions opt_;
  std::vector<std::vector<double>> m_, v_;
  long t_ = 0;
};

/// Adam for a handful of scalars held outside any tensor (loss balancer
/// coefficients).
class ScalarAdam {
public:
  explicit ScalarAdam(std::size_t n, AdamOptions opt) : opt_(opt), m_(n, 0.0), v_(n, 0.0) {}

  /// values[i] -= adam(grads[i]).
  void step(std::vector<double*> values, const std::vector<double>& grads) {
    ++t_;
    const double c1 = 1 - std::pow(opt_.beta1, static_cast<double>(t_));
    const double c2 = 1 - std::pow(opt_.beta2, static_cast<double>(t_));
    for (std::size_t i = 0; i < values.size(); ++i) {
      m_[i] = opt_.beta1 * m_[i] + (1 - opt_.beta1) * grads[i];
      v_[i] = opt_.beta2 * v_[i] + (1 - opt_.beta2) * grads[i] * grads[i];
      *values[i] -= opt_.lr * (m_[i] / c1) / (std::sqrt(v_[i] / c2) + opt_.eps);
    }
  }

private:
  AdamOptions opt_;
  std::vector<double> m_, v_;
  long t_ = 0;
};

template <typename T>
double grad_norm(const ParamRefs<T>& params) {
  double s = 0;
  for (const auto* p : params) s += squared_norm(p->grad);
  return std::sqrt(s);
}

}  // namespace qdr
