#pragma once

#include <cmath>
#include <cstdint>
#include <vector>

#include "embsteal/autodiff.hpp"
#include "embsteal/encoder.hpp"
#include "embsteal/errors.hpp"

namespace embsteal {

struct AdamWConfig {
  double lr = 4e-5;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.01;
  std::size_t warmup_steps = 50;
};

// Linear ramp from 0 to lr over warmup_steps, then flat. Steps are 1-based.
inline double learning_rate_at(const AdamWConfig& cfg, std::uint64_t step) {
  if (cfg.warmup_steps == 0 || step >= cfg.warmup_steps) return cfg.lr;
  return cfg.lr * static_cast<double>(step) / static_cast<double>(cfg.warmup_steps);
}

// Decoupled weight decay: p ← p·(1 − lr·wd) − lr·m̂/(√v̂ + eps). Values are
// rounded back to f32 after every step.
class AdamW {
 public:
  AdamW(std::vector<Parameter*> params, AdamWConfig cfg) : params_(std::move(params)), cfg_(cfg) {
    for (Parameter* p : params_) {
      m_.emplace_back(p->value.shape());
      v_.emplace_back(p->value.shape());
    }
  }

  std::uint64_t steps() const { return t_; }
  const AdamWConfig& config() const { return cfg_; }

  void zero_grad() {
    for (Parameter* p : params_) p->zero_grad();
  }

  // Applies one update from the accumulated gradients; returns the lr used.
  double step() {
    ++t_;
    const double lr = learning_rate_at(cfg_, t_);
    const double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(t_));
    const double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(t_));
    for (std::size_t k = 0; k < params_.size(); ++k) {
      Parameter& p = *params_[k];
      if (p.grad.shape() != p.value.shape()) p.zero_grad();
      auto val = p.value.data();
      auto g = p.grad.data();
      auto m = m_[k].data();
      auto v = v_[k].data();
      for (std::size_t i = 0; i < val.size(); ++i) {
        m[i] = cfg_.beta1 * m[i] + (1.0 - cfg_.beta1) * g[i];
        v[i] = cfg_.beta2 * v[i] + (1.0 - cfg_.beta2) * g[i] * g[i];
        const double mhat = m[i] / bc1, vhat = v[i] / bc2;
        double x = val[i] * (1.0 - lr * cfg_.weight_decay);
        x -= lr * mhat / (std::sqrt(vhat) + cfg_.eps);
        if (!std::isfinite(x)) throw NumericError("optimizer produced a non-finite value in " + p.name);
        val[i] = static_cast<double>(static_cast<float>(x));
      }
    }
    return lr;
  }

 private:
  std::vector<Parameter*> params_;
  AdamWConfig cfg_;
  std::vector<Tensor> m_, v_;
  std::uint64_t t_ = 0;
};

}  // namespace embsteal
