#pragma once

#include <cmath>
#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "mvr/tensor.hpp"

namespace mvr {

struct AdamWConfig {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.98;
  double eps = 1e-8;
  double weight_decay = 0.01;
};

/// Decoupled-weight-decay Adam over a fixed parameter registry. Updates run
/// in registry order, elementwise, so steps are bit-deterministic. Biases
/// and norm gains are exempt from decay.
class AdamW {
 public:
  AdamW(std::vector<std::pair<std::string, Tensor>> params, AdamWConfig cfg)
      : cfg_(cfg) {
    for (auto& [name, t] : params) {
      const bool decay = name.find("bias") == std::string::npos &&
                         name.find("gain") == std::string::npos;
      slots_.push_back({t, std::vector<double>(t.numel(), 0.0),
                        std::vector<double>(t.numel(), 0.0), decay});
    }
  }

  void zero_grad() {
    for (Slot& s : slots_) s.param.zero_grad();
  }

  /// One update using the gradients currently on the registry tensors.
  void step(double lr_now) {
    ++t_;
    const double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(t_));
    const double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(t_));
    for (Slot& s : slots_) {
      double* x = s.param.data();
      const std::vector<double>& g = s.param.grad();
      bool any = false;
      for (double gv : g) any = any || (gv != 0.0);
      if (!any) continue;  // untouched parameter (e.g. a disabled decoder head)
      for (std::size_t i = 0; i < g.size(); ++i) {
        s.m[i] = cfg_.beta1 * s.m[i] + (1.0 - cfg_.beta1) * g[i];
        s.v[i] = cfg_.beta2 * s.v[i] + (1.0 - cfg_.beta2) * g[i] * g[i];
        const double mhat = s.m[i] / bc1;
        const double vhat = s.v[i] / bc2;
        double upd = mhat / (std::sqrt(vhat) + cfg_.eps);
        if (s.decay) upd += cfg_.weight_decay * x[i];
        x[i] -= lr_now * upd;
      }
    }
  }

  std::uint64_t steps_taken() const { return t_; }

 private:
  struct Slot {
    Tensor param;
    std::vector<double> m, v;
    bool decay;
  };
  std::vector<Slot> slots_;
  AdamWConfig cfg_;
  std::uint64_t t_ = 0;
};

/// Linear warmup to base_lr over warmup_ratio * total steps, then linear
/// decay to zero. `step` is 1-based.
inline double linear_warmup_decay_lr(double base_lr, std::uint64_t step, std::uint64_t total,
                                     double warmup_ratio) {
  if (total == 0) return base_lr;
  const std::uint64_t warmup =
      static_cast<std::uint64_t>(std::llround(warmup_ratio * static_cast<double>(total)));
  if (warmup > 0 && step <= warmup) {
    return base_lr * static_cast<double>(step) / static_cast<double>(warmup);
  }
  if (total <= warmup) return base_lr;
  const double remain = static_cast<double>(total - step);
  const double span = static_cast<double>(total - warmup);
  return base_lr * std::max(0.0, remain / span);
}

}  // namespace mvr
