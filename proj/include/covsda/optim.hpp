#pragma once

#include <cmath>
#include <span>
#include <vector>

#include "covsda/errors.hpp"
#include "covsda/tensor.hpp"

namespace covsda {

struct AdamConfig {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 1e-5;
};

/// Adam with bias-corrected moments and decoupled weight decay.
class Adam {
 public:
  Adam(std::vector<Tensor*> params, AdamConfig cfg) : params_(std::move(params)), cfg_(cfg) {
    for (Tensor* p : params_) {
      m_.emplace_back(p->shape());
      v_.emplace_back(p->shape());
    }
  }

  void step(std::span<const Tensor> grads, double lr) {
    if (grads.size() != params_.size()) throw ShapeError("Adam::step: gradient count does not match parameter count");
    ++t_;
    const double c1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(t_));
    const double c2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(t_));
    for (std::size_t k = 0; k < params_.size(); ++k) {
      Tensor& p = *params_[k];
      const Tensor& g = grads[k];
      if (g.shape() != p.shape()) {
        throw ShapeError("Adam::step: gradient " + shape_string(g.shape()) + " vs parameter " + shape_string(p.shape()));
      }
      Tensor& m = m_[k];
      Tensor& v = v_[k];
      for (std::size_t i = 0; i < p.size(); ++i) {
        m[i] = cfg_.beta1 * m[i] + (1.0 - cfg_.beta1) * g[i];
        v[i] = cfg_.beta2 * v[i] + (1.0 - cfg_.beta2) * g[i] * g[i];
        const double update = (m[i] / c1) / (std::sqrt(v[i] / c2) + cfg_.eps);
        p[i] -= lr * (update + cfg_.weight_decay * p[i]);
      }
    }
  }

  long steps() const { return t_; }

 private:
  std::vector<Tensor*> params_;
  AdamConfig cfg_;
  std::vector<Tensor> m_, v_;
  long t_ = 0;
};

/// Learning rate after multiplying by `gamma` at every milestone <= epoch.
inline double step_lr(double base, std::span<const int> milestones, double gamma, int epoch) {
  double lr = base;
  for (int m : milestones)
    if (epoch >= m) lr *= gamma;
  return lr;
}

}  // namespace covsda
