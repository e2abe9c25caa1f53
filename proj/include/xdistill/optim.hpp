#pragma once

// AdamW with decoupled weight decay, global-norm clipping and the two learning
// rate schedules used by the distillation stages.

#include <cmath>
#include <numbers>
#include <string>
#include <vector>

#include "xdistill/autograd.hpp"

namespace xdistill {

struct AdamWConfig {
  double beta1 = 0.9;
  double beta2 = 0.95;
  double eps = 1e-8;
  double weight_decay = 0.1;
  double clip_norm = 1.0;  // <= 0 disables clipping
};

enum class ScheduleKind { warmup_cosine, constant };

struct LrSchedule {
  ScheduleKind kind = ScheduleKind::constant;
  double peak = 1e-3;  // the plateau for ScheduleKind::constant
  double floor = 1e-5;
  std::size_t warmup_steps = 0;
  std::size_t total_steps = 1;

  static LrSchedule constant_lr(double lr) { return {ScheduleKind::constant, lr, lr, 0, 1}; }
  static LrSchedule warmup_cosine(double peak, double floor, std::size_t warmup, std::size_t total) {
    return {ScheduleKind::warmup_cosine, peak, floor, warmup, total};
  }

  /// Learning rate for 0-based step `s`. Both kinds warm up linearly.
  double at(std::size_t s) const {
    if (s < warmup_steps) return peak * static_cast<double>(s + 1) / static_cast<double>(warmup_steps);
    if (kind == ScheduleKind::constant) return peak;
    const std::size_t span = total_steps > warmup_steps ? total_steps - warmup_steps : 1;
    const double p = std::min(1.0, static_cast<double>(s - warmup_steps) / static_cast<double>(span));
    return floor + 0.5 * (peak - floor) * (1.0 + std::cos(std::numbers::pi * p));
  }
};

inline const char* to_string(ScheduleKind k) { return k == ScheduleKind::constant ? "constant" : "warmup_cosine"; }

template <class T>
class AdamW {
 public:
  AdamW(std::vector<Var<T>> params, AdamWConfig cfg = {}) : params_(std::move(params)), cfg_(cfg) {
    for (auto& p : params_) {
      m_.emplace_back(p->value.shape());
      v_.emplace_back(p->value.shape());
    }
  }

  /// Global L2 norm of all present gradients.
  double grad_norm() const {
    double s = 0;
    for (auto& p : params_)
      if (!p->grad.empty())
        for (auto g : p->grad.storage()) s += static_cast<double>(g) * g;
    return std::sqrt(s);
  }

  /// One update at learning rate `lr`. Parameters without a gradient buffer
  /// are skipped entirely (no moment update, no decay). Clears gradients.
  /// Returns the pre-clip gradient norm.
  double step(double lr) {
    const double norm = grad_norm();
    if (!std::isfinite(norm)) throw NumericError("non-finite gradient norm");
    const double clip = (cfg_.clip_norm > 0 && norm > cfg_.clip_norm) ? cfg_.clip_norm / norm : 1.0;
    ++t_;
    const double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(t_));
    const double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(t_));
    for (std::size_t i = 0; i < params_.size(); ++i) {
      auto& p = params_[i];
      if (p->grad.empty()) continue;
      const bool decay = p->value.rank() >= 2;  // matrices only; norms and vectors are not decayed
      auto& m = m_[i];
      auto& v = v_[i];
      for (std::size_t j = 0; j < p->value.size(); ++j) {
        const double g = static_cast<double>(p->grad[j]) * clip;
        const double mj = cfg_.beta1 * m[j] + (1 - cfg_.beta1) * g;
        const double vj = cfg_.beta2 * v[j] + (1 - cfg_.beta2) * g * g;
        m[j] = static_cast<T>(mj);
        v[j] = static_cast<T>(vj);
        double w = static_cast<double>(p->value[j]);
        if (decay) w -= lr * cfg_.weight_decay * w;
        w -= lr * (mj / bc1) / (std::sqrt(vj / bc2) + cfg_.eps);
        p->value[j] = static_cast<T>(w);
      }
      p->zero_grad();
    }
    return norm;
  }

  void zero_grad() {
    for (auto& p : params_) p->zero_grad();
  }

  std::size_t steps_taken() const noexcept { return t_; }
  const std::vector<Var<T>>& params() const noexcept { return params_; }

 private:
  std::vector<Var<T>> params_;
  AdamWConfig cfg_;
  std::vector<Tensor<T>> m_, v_;
  std::size_t t_ = 0;
};

}  // namespace xdistill
