#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <span>
#include <stdexcept>
#include <vector>

#include "mtp/numerics/tensor.hpp"

namespace mtp {

struct AdamWConfig {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.01;
};

struct AdamWState {
  std::vector<double> m, v;
  std::size_t step = 0;
};

// Decoupled weight decay: p -= lr * (m_hat / (sqrt(v_hat) + eps) + wd * p).
template <class Real>
void adamw_update(std::span<Real> param, std::span<const Real> grad, AdamWState& st,
                  double lr, const AdamWConfig& cfg) {
  if (param.size() != grad.size()) throw ShapeError("adamw: gradient shape mismatch");
  if (st.m.empty()) {
    st.m.assign(param.size(), 0.0);
    st.v.assign(param.size(), 0.0);
  }
  if (st.m.size() != param.size()) throw ShapeError("adamw: state shape mismatch");
  ++st.step;
  const double bc1 = 1.0 - std::pow(cfg.beta1, double(st.step));
  const double bc2 = 1.0 - std::pow(cfg.beta2, double(st.step));
  for (std::size_t i = 0; i < param.size(); ++i) {
    const double g = grad[i];
    st.m[i] = cfg.beta1 * st.m[i] + (1.0 - cfg.beta1) * g;
    st.v[i] = cfg.beta2 * st.v[i] + (1.0 - cfg.beta2) * g * g;
    const double mhat = st.m[i] / bc1, vhat = st.v[i] / bc2;
    const double p = param[i];
    param[i] = static_cast<Real>(p - lr * (mhat / (std::sqrt(vhat) + cfg.eps) + cfg.weight_decay * p));
  }
}

// Linear warmup to `lr`, flat afterwards.
inline double warmup_flat_lr(std::size_t step, double lr, std::size_t warmup) {
  if (warmup == 0) return lr;
  return lr * std::min(1.0, double(step + 1) / double(warmup));
}

template <class Real>
class AdamW {
 public:
  AdamW(std::vector<Tensor<Real>> params, AdamWConfig cfg)
      : params_(std::move(params)), state_(params_.size()), cfg_(cfg) {}

  // Only tensors that currently require a gradient and received one move.
  void step(double lr) {
    for (std::size_t i = 0; i < params_.size(); ++i) {
      auto& p = params_[i];
      if (!p.requires_grad() || !p.has_grad()) continue;
      adamw_update<Real>(p.mutable_data(), p.grad(), state_[i], lr, cfg_);
    }
  }

  void zero_grad() {
    for (auto& p : params_) p.zero_grad();
  }

  const std::vector<Tensor<Real>>& params() const { return params_; }

 private:
  std::vector<Tensor<Real>> params_;
  std::vector<AdamWState> state_;
  AdamWConfig cfg_;
};

}  // namespace mtp
