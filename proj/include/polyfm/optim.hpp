#pragma once

#include <Eigen/Dense>
#include <cmath>
#include <numbers>

namespace polyfm {

struct AdamConfig {
  double learning_rate = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
};

/// Adam over a flat parameter vector.
class Adam {
 public:
  Adam(Eigen::Index n, AdamConfig cfg = {}) : cfg_(cfg), m_(Eigen::VectorXd::Zero(n)), v_(Eigen::VectorXd::Zero(n)) {}

  void step(Eigen::Ref<Eigen::VectorXd> params, const Eigen::VectorXd& grad, double learning_rate) {
    ++t_;
    m_ = cfg_.beta1 * m_ + (1.0 - cfg_.beta1) * grad;
    v_ = cfg_.beta2 * v_ + (1.0 - cfg_.beta2) * grad.cwiseProduct(grad);
    const double c1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(t_));
    const double c2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(t_));
    params.array() -= learning_rate * (m_.array() / c1) / ((v_.array() / c2).sqrt() + cfg_.epsilon);
  }

  void step(Eigen::Ref<Eigen::VectorXd> params, const Eigen::VectorXd& grad) { step(params, grad, cfg_.learning_rate); }

  long steps() const noexcept { return t_; }
  const AdamConfig& config() const noexcept { return cfg_; }

 private:
  AdamConfig cfg_;
  Eigen::VectorXd m_, v_;
  long t_ = 0;
};

/// Cosine decay from base to zero over total steps.
inline double cosine_lr(double base, long step, long total) {
  if (total <= 0) return base;
  const double frac = std::min(1.0, static_cast<double>(step) / static_cast<double>(total));
  return 0.5 * base * (1.0 + std::cos(std::numbers::pi * frac));
}

}  // namespace polyfm
