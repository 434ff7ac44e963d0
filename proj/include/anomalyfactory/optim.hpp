#pragma once

#include <cmath>
#include <vector>

#include "anomalyfactory/netarch.hpp"

namespace af {

// Learning rate decays linearly from `base` at step 0 towards 0 at `total_steps`.
inline double linear_lr(double base, long step, long total_steps) {
  if (total_steps <= 0) return base;
  return base * (1.0 - static_cast<double>(step) / static_cast<double>(total_steps));
}

template <typename T>
class Adam {
 public:
  Adam(std::vector<NamedParam<T>> params, double beta1 = 0.5, double beta2 = 0.999, double eps = 1e-8)
      : params_(std::move(params)), beta1_(beta1), beta2_(beta2), eps_(eps) {
    for (const auto& p : params_) {
      m_.emplace_back(p.var.value().size(), 0.0);
      v_.emplace_back(p.var.value().size(), 0.0);
    }
  }

  void zero_grad() {
    for (auto& p : params_) p.var.zero_grad();
  }

  void step(double lr) {
    ++t_;
    const double c1 = 1.0 - std::pow(beta1_, static_cast<double>(t_));
    const double c2 = 1.0 - std::pow(beta2_, static_cast<double>(t_));
    for (std::size_t k = 0; k < params_.size(); ++k) {
      auto& var = params_[k].var;
      const auto& g = var.grad();
      if (g.size() != var.value().size()) continue;
      auto& w = var.mutable_value();
      auto& m = m_[k];
      auto& v = v_[k];
      for (std::size_t i = 0; i < w.size(); ++i) {
        const double gi = g[i];
        m[i] = beta1_ * m[i] + (1.0 - beta1_) * gi;
        v[i] = beta2_ * v[i] + (1.0 - beta2_) * gi * gi;
        w[i] -= static_cast<T>(lr * (m[i] / c1) / (std::sqrt(v[i] / c2) + eps_));
      }
    }
  }

  long steps_taken() const { return t_; }

 private:
  std::vector<NamedParam<T>> params_;
  std::vector<std::vector<double>> m_, v_;
  double beta1_, beta2_, eps_;
  long t_ = 0;
};

}  // namespace af
