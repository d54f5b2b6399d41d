#pragma once

#include <cmath>
#include <numbers>
#include <span>
#include <vector>

namespace einmemo {

// Adam over a flat parameter vector.
class Adam {
 public:
  explicit Adam(size_t n, double beta1 = 0.9, double beta2 = 0.999, double eps = 1e-8)
      : m_(n, 0.0), v_(n, 0.0), beta1_(beta1), beta2_(beta2), eps_(eps) {}

  // One update with learning rate lr; params and grads must have size n.
  template <typename T>
  void step(std::span<T> params, std::span<const double> grads, double lr) {
    ++t_;
    const double c1 = 1.0 - std::pow(beta1_, t_);
    const double c2 = 1.0 - std::pow(beta2_, t_);
    for (size_t i = 0; i < params.size(); ++i) {
      m_[i] = beta1_ * m_[i] + (1.0 - beta1_) * grads[i];
      v_[i] = beta2_ * v_[i] + (1.0 - beta2_) * grads[i] * grads[i];
      const double mhat = m_[i] / c1, vhat = v_[i] / c2;
      params[i] = static_cast<T>(static_cast<double>(params[i]) - lr * mhat / (std::sqrt(vhat) + eps_));
    }
  }

  long steps() const { return t_; }

 private:
  std::vector<double> m_, v_;
  double beta1_, beta2_, eps_;
  long t_ = 0;
};

// Cosine annealing with warm restarts, stepped once per epoch:
//   lr(e) = eta_min + (lr0 - eta_min) * (1 + cos(pi * t_cur / t_i)) / 2,
// with t_cur the epochs since the last restart and t_i the current period
// (t_i = t0 * t_mult^k).
inline double cosine_warm_restarts_lr(double lr0, int epoch, int t0, int t_mult = 1, double eta_min = 0.0) {
  int t_i = t0, t_cur = epoch;
  while (t_cur >= t_i) {
    t_cur -= t_i;
    t_i *= t_mult;
  }
  return eta_min + (lr0 - eta_min) * (1.0 + std::cos(std::numbers::pi * t_cur / t_i)) / 2.0;
}

}  // namespace einmemo
