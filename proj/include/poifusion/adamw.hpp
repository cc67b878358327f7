#pragma once

// AdamW with decoupled weight decay, plus the optional one-cycle schedule.

#include <cmath>
#include <numbers>
#include <string>
#include <utility>
#include <vector>

#include "poifusion/tensor.hpp"

namespace poifusion {

struct NamedTensor {
  std::string name;
  Tensor tensor;
};

using ParameterList = std::vector<NamedTensor>;

struct AdamWConfig {
  double lr = 1e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.01;
};

class AdamW {
 public:
  explicit AdamW(AdamWConfig config) : config_(config) {
    if (!(config_.lr > 0.0)) throw std::invalid_argument("AdamW learning rate must be positive");
  }

  const AdamWConfig& config() const { return config_; }
  long step_count() const { return step_; }

  /// One update using the gradients currently stored on each parameter.
  /// `lr_override` > 0 replaces the configured rate for this step (schedules).
  void step(ParameterList& params, double lr_override = 0.0) {
    for (const NamedTensor& p : params) {
      for (double g : p.tensor.grad())
        if (!std::isfinite(g)) throw NumericError("non-finite gradient in parameter '" + p.name + "'");
    }
    if (first_.empty()) {
      for (const NamedTensor& p : params) {
        first_.emplace_back(p.tensor.numel(), 0.0);
        second_.emplace_back(p.tensor.numel(), 0.0);
      }
    }
    if (first_.size() != params.size()) throw DimensionError("AdamW: parameter list changed between steps");
    ++step_;
    const double lr = lr_override > 0.0 ? lr_override : config_.lr;
    const double bc1 = 1.0 - std::pow(config_.beta1, static_cast<double>(step_));
    const double bc2 = 1.0 - std::pow(config_.beta2, static_cast<double>(step_));
    for (std::size_t k = 0; k < params.size(); ++k) {
      Tensor& t = params[k].tensor;
      auto p = t.data();
      auto g = t.grad();
      auto& m = first_[k];
      auto& v = second_[k];
      if (m.size() != p.size()) throw DimensionError("AdamW: shape changed for '" + params[k].name + "'");
      if (g.empty()) continue;
      for (std::size_t i = 0; i < p.size(); ++i) {
        p[i] -= lr * config_.weight_decay * p[i];
        m[i] = config_.beta1 * m[i] + (1.0 - config_.beta1) * g[i];
        v[i] = config_.beta2 * v[i] + (1.0 - config_.beta2) * g[i] * g[i];
        const double mhat = m[i] / bc1;
        const double vhat = v[i] / bc2;
        p[i] -= lr * mhat / (std::sqrt(vhat) + config_.eps);
      }
    }
  }

 private:
  AdamWConfig config_;
  long step_ = 0;
  std::vector<std::vector<double>> first_;
  std::vector<std::vector<double>> second_;
};

/// One-cycle learning rate: cosine warm-up from max/div_factor to max over the
/// first `pct_start` of training, then cosine decay to max/final_div_factor.
inline double one_cycle_lr(long step, long total_steps, double max_lr, double pct_start = 0.3,
                           double div_factor = 25.0, double final_div_factor = 1e4) {
  if (total_steps <= 1) return max_lr;
  const double initial = max_lr / div_factor;
  const double final_lr = initial / final_div_factor;
  const double warm = std::max(1.0, pct_start * static_cast<double>(total_steps - 1));
  const double s = static_cast<double>(step);
  auto cos_interp = [](double from, double to, double frac) {
    return to + (from - to) * 0.5 * (1.0 + std::cos(std::numbers::pi * frac));
  };
  if (s <= warm) return cos_interp(initial, max_lr, s / warm);
  const double rest = static_cast<double>(total_steps - 1) - warm;
  return cos_interp(max_lr, final_lr, rest > 0.0 ? std::min(1.0, (s - warm) / rest) : 1.0);
}

}  // namespace poifusion
