#pragma once

// Adaptive-moment optimizer with decoupled weight decay. Moment buffers are
// keyed by parameter identity and persist across steps.

#include <cmath>
#include <span>
#include <string>
#include <unordered_map>
#include <vector>

#include "f2/tensor.hpp"

namespace f2 {

struct AdamWConfig {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.0;
};

template <class S>
class AdamWT {
 public:
  explicit AdamWT(AdamWConfig cfg = {}) : cfg_(cfg) {}

  const AdamWConfig& config() const { return cfg_; }

  // One update over all params at the given learning rate. `step` is the
  // 1-based global step used for bias correction.
  void step(std::span<TensorT<S>> params, double lr, int step,
            std::span<const std::string> names = {}) {
    if (step < 1) throw ValidationError("adamw_step: step must be >= 1");
    const double bc1 = 1.0 - std::pow(cfg_.beta1, step);
    const double bc2 = 1.0 - std::pow(cfg_.beta2, step);
    for (std::size_t pi = 0; pi < params.size(); ++pi) {
      TensorT<S>& p = params[pi];
      if (!p.has_grad()) {
        const std::string name = pi < names.size() ? names[pi] : ("#" + std::to_string(pi));
        throw ValidationError("adamw_step: parameter " + name + " has no gradient");
      }
      Slot& slot = slots_[p.impl()];
      if (slot.m.empty()) {
        slot.m.assign(p.numel(), 0.0);
        slot.v.assign(p.numel(), 0.0);
      }
      auto vals = p.values_mut();
      auto grads = p.grad();
      for (std::size_t i = 0; i < vals.size(); ++i) {
        const double g = static_cast<double>(grads[i]);
        slot.m[i] = cfg_.beta1 * slot.m[i] + (1.0 - cfg_.beta1) * g;
        slot.v[i] = cfg_.beta2 * slot.v[i] + (1.0 - cfg_.beta2) * g * g;
        const double mhat = slot.m[i] / bc1;
        const double vhat = slot.v[i] / bc2;
        const double update =
            mhat / (std::sqrt(vhat) + cfg_.eps) + cfg_.weight_decay * static_cast<double>(vals[i]);
        vals[i] = static_cast<S>(static_cast<double>(vals[i]) - lr * update);
        if (!std::isfinite(vals[i])) throw NumericError("adamw_step: non-finite parameter value");
      }
    }
  }

 private:
  struct Slot {
    std::vector<double> m, v;
  };
  AdamWConfig cfg_;
  std::unordered_map<detail::TensorImpl<S>*, Slot> slots_;
};

using AdamW = AdamWT<float>;

}  // namespace f2
