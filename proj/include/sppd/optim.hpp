#pragma once
// First-order optimizers over flat parameter vectors.
//
// Adam keeps per-coordinate first/second moment estimates with bias
// correction; SGD is the plain update.  Both are driven by the trainer one
// step() per minibatch.  clip_grad_norm rescales in place when the global
// L2 norm exceeds the cap and reports the pre-clip norm, which the training
// log records.  cosine_lr anneals from the base rate to zero over a fixed
// horizon; step indices past the horizon stay at zero rather than warping
// around.

#include <cmath>
#include <string>

#include "sppd/common.hpp"

namespace sppd {

struct AdamConfig {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

class Optimizer {
 public:
  virtual ~Optimizer() = default;
  // Applies one update of `grad` to `theta` at learning rate `lr`.
  virtual void step(vecd& theta, const vecd& grad, double lr) = 0;
  virtual void reset() = 0;
};

class Sgd final : public Optimizer {
 public:
  void step(vecd& theta, const vecd& grad, double lr) override {
    if (theta.size() != grad.size()) fail(errkind::param, "Sgd: theta/grad size mismatch");
    axpy(-lr, grad, theta);
  }
  void reset() override {}
};

class Adam final : public Optimizer {
 public:
  explicit Adam(const AdamConfig& cfg = {}) : cfg_(cfg) {}

  void step(vecd& theta, const vecd& grad, double lr) override {
    if (theta.size() != grad.size()) fail(errkind::param, "Adam: theta/grad size mismatch");
    if (m_.size() != theta.size()) {
      m_.assign(theta.size(), 0.0);
      v_.assign(theta.size(), 0.0);
      t_ = 0;
    }
    ++t_;
    const double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(t_));
    const double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(t_));
    for (std::size_t i = 0; i < theta.size(); ++i) {
      m_[i] = cfg_.beta1 * m_[i] + (1.0 - cfg_.beta1) * grad[i];
      v_[i] = cfg_.beta2 * v_[i] + (1.0 - cfg_.beta2) * grad[i] * grad[i];
      theta[i] -= lr * (m_[i] / bc1) / (std::sqrt(v_[i] / bc2) + cfg_.eps);
    }
  }

  void reset() override {
    m_.clear();
    v_.clear();
    t_ = 0;
  }

 private:
  AdamConfig cfg_;
  vecd m_, v_;
  long t_ = 0;
};

// Rescales grad in place to norm <= max_norm; returns the pre-clip L2 norm.
inline double clip_grad_norm(vecd& grad, double max_norm) {
  if (max_norm <= 0.0) fail(errkind::param, "clip_grad_norm: max_norm must be positive");
  double n = norm2(grad);
  if (std::isfinite(n) && n > max_norm) {
    double s = max_norm / n;
    for (double& g : grad) g *= s;
  }
  return n;
}

// Half-cosine decay from base_lr at t=0 to 0 at t=horizon.
inline double cosine_lr(double base_lr, long t, long horizon) {
  if (horizon < 1) fail(errkind::param, "cosine_lr: horizon must be >= 1");
  if (t < 0) fail(errkind::param, "cosine_lr: negative step index");
  if (t >= horizon) return 0.0;
  constexpr double pi = 3.14159265358979323846;
  return base_lr * 0.5 * (1.0 + std::cos(pi * static_cast<double>(t) / static_cast<double>(horizon)));
}

}  // namespace sppd
