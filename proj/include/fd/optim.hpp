#pragma once

#include <cmath>
#include <vector>

#include "fd/tensor.hpp"

namespace fd {

struct AdamWHyper {
  double lr = 1.2e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.05;
};

template <typename S>
struct AdamWState {
  i64 step = 0;
  std::vector<S> m, v;
  AdamWHyper hyper;
};

// One decoupled-weight-decay Adam update. The decay multiplies the parameter
// directly and is not folded into the moment estimates; moments are
// bias-corrected. `lr` is the scheduled rate for this step.
template <typename S>
void adamw_step(TensorT<S>& param, const std::vector<S>& grad, AdamWState<S>& state, double lr) {
  auto& p = param.value();
  FD_CHECK(grad.size() == p.size(), "adamw_step: gradient shape mismatch");
  if (state.m.empty()) {
    state.m.assign(p.size(), S(0));
    state.v.assign(p.size(), S(0));
  }
  FD_CHECK(state.m.size() == p.size() && state.v.size() == p.size(), "adamw_step: state shape mismatch");
  for (S g : grad) FD_CHECK(std::isfinite(static_cast<double>(g)), "adamw_step: non-finite gradient");
  state.step += 1;
  const auto& h = state.hyper;
  const double bc1 = 1.0 - std::pow(h.beta1, static_cast<double>(state.step));
  const double bc2 = 1.0 - std::pow(h.beta2, static_cast<double>(state.step));
  for (size_t i = 0; i < p.size(); ++i) {
    const double g = grad[i];
    const double m = h.beta1 * state.m[i] + (1.0 - h.beta1) * g;
    const double v = h.beta2 * state.v[i] + (1.0 - h.beta2) * g * g;
    state.m[i] = static_cast<S>(m);
    state.v[i] = static_cast<S>(v);
    double x = p[i];
    x -= lr * h.weight_decay * x;
    x -= lr * (m / bc1) / (std::sqrt(v / bc2) + h.eps);
    p[i] = static_cast<S>(x);
  }
}

// Uniformly rescales gradients so their global L2 norm is at most max_norm.
// Returns the scale that was applied (1.0 when already within bounds).
template <typename S>
double clip_grad_norm(std::vector<TensorT<S>>& params, double max_norm) {
  FD_CHECK(max_norm > 0.0, "clip_grad_norm: max_norm must be positive");
  double sq = 0.0;
  for (auto& p : params) {
    if (!p.has_grad()) continue;
    for (S g : p.grad()) sq += static_cast<double>(g) * g;
  }
  const double norm = std::sqrt(sq);
  if (norm <= max_norm) return 1.0;
  const double s = max_norm / norm;
  for (auto& p : params) {
    if (!p.has_grad()) continue;
    for (auto& g : p.grad()) g = static_cast<S>(g * s);
  }
  return s;
}

struct LrSchedule {
  enum class Kind { CosineWithLinearWarmup };
  double peak_lr = 1.2e-3;
  double min_lr = 2e-5;
  i64 warmup_steps = 0;
  i64 total_steps = 1;
  Kind kind = Kind::CosineWithLinearWarmup;

  void validate() const {
    FD_CHECK(warmup_steps >= 0 && warmup_steps < total_steps, "lr schedule: need 0 <= warmup < total");
    FD_CHECK(min_lr <= peak_lr, "lr schedule: min_lr must not exceed peak_lr");
  }
};

// Linear ramp from 0 to peak over warmup_steps, then cosine decay to min_lr.
inline double cosine_warmup_lr(i64 step, const LrSchedule& sched) {
  sched.validate();
  FD_CHECK(step >= 0 && step <= sched.total_steps, "cosine_warmup_lr: step out of range");
  if (step < sched.warmup_steps)
    return sched.peak_lr * static_cast<double>(step) / static_cast<double>(sched.warmup_steps);
  const double t = static_cast<double>(step - sched.warmup_steps) /
                   static_cast<double>(sched.total_steps - sched.warmup_steps);
  return sched.min_lr + 0.5 * (sched.peak_lr - sched.min_lr) * (1.0 + std::cos(3.14159265358979323846 * t));
}

// Convenience wrapper over a parameter set: clips, steps and zeroes grads in
// one fixed registration order. lr_scale carries layer-wise decay factors.
template <typename S>
class AdamW {
 public:
  explicit AdamW(AdamWHyper hyper) : hyper_(hyper) {}

  void add_param(TensorT<S> p, double lr_scale = 1.0) {
    FD_CHECK(p.defined(), "AdamW: undefined parameter");
    Slot s;
    s.param = std::move(p);
    s.state.hyper = hyper_;
    s.lr_scale = lr_scale;
    slots_.push_back(std::move(s));
  }

  double clip(double max_norm) {
    std::vector<TensorT<S>> ps;
    ps.reserve(slots_.size());
    for (auto& s : slots_) ps.push_back(s.param);
    return clip_grad_norm(ps, max_norm);
  }

  void step(double lr) {
    for (auto& s : slots_) adamw_step(s.param, s.param.grad(), s.state, lr * s.lr_scale);
  }

  void zero_grad() {
    for (auto& s : slots_) s.param.zero_grad();
  }

  size_t param_count() const { return slots_.size(); }

 private:
  struct Slot {
    TensorT<S> param;
    AdamWState<S> state;
    double lr_scale = 1.0;
  };
  AdamWHyper hyper_;
  std::vector<Slot> slots_;
};

}  // namespace fd
