#pragma once

#include <cmath>
#include <cstdint>
#include <limits>
#include <numbers>
#include <span>
#include <vector>

#include "loretta/errors.hpp"
#include "loretta/model.hpp"

namespace loretta {

// Linear warmup from lr_start to lr_peak, then cosine decay to lr_final.
struct Schedule {
  double lr_start = 1e-7;
  double lr_peak = 6e-4;
  double lr_final = 6e-5;
  std::int64_t warmup_steps = 1500;
  std::int64_t total_steps = 10000;

  void validate() const {
    if (!(lr_start <= lr_peak) || !(lr_final <= lr_peak)) throw InputError("Schedule: lr_start/lr_final must be <= lr_peak");
    if (warmup_steps < 0 || warmup_steps >= total_steps) throw InputError("Schedule: need 0 <= warmup_steps < total_steps");
  }
};

inline double lr_at_step(const Schedule& s, std::int64_t t) {
  if (t < 0 || t > s.total_steps)
    throw InputError("lr_at_step: step " + std::to_string(t) + " outside [0, " + std::to_string(s.total_steps) + "]");
  if (t < s.warmup_steps)
    return s.lr_start + (s.lr_peak - s.lr_start) * static_cast<double>(t) / static_cast<double>(s.warmup_steps);
  if (t == s.total_steps) return s.lr_final;
  const double frac = static_cast<double>(t - s.warmup_steps) / static_cast<double>(s.total_steps - s.warmup_steps);
  return s.lr_final + (s.lr_peak - s.lr_final) * 0.5 * (1.0 + std::cos(std::numbers::pi * frac));
}

template <typename T>
double global_norm(std::span<const T> g) {
  double ss = 0;
  for (T v : g) ss += static_cast<double>(v) * static_cast<double>(v);
  return std::sqrt(ss);
}

// Rescales `g` in place so that its global L2 norm is at most max_norm.
// Returns the norm before clipping.
template <typename T>
double clip_grads(std::span<T> g, double max_norm) {
  const double norm = global_norm<T>(g);
  if (!std::isfinite(norm)) throw NumericalError("clip_grads: non-finite gradient norm");
  if (norm > max_norm) {
    const auto f = static_cast<T>(max_norm / norm);
    for (T& v : g) v *= f;
  }
  return norm;
}

struct AdamWConfig {
  double beta1 = 0.9;
  double beta2 = 0.95;
  double eps = 1e-8;
  double weight_decay = 0.1;
};

template <typename T>
struct OptimizerState {
  AlignedVector<T> m;
  AlignedVector<T> v;
  std::int64_t step = 0;

  OptimizerState() = default;
  explicit OptimizerState(std::size_t n) : m(n, T(0)), v(n, T(0)) {}
};

// One decoupled-weight-decay Adam update on a flat parameter span. `decay`
// toggles weight decay for this span.
template <typename T>
void adamw_update(std::span<T> theta, std::span<const T> g, std::span<T> m, std::span<T> v, std::int64_t t,
                  double lr, const AdamWConfig& cfg, bool decay) {
  const double bc1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(t));
  const double bc2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(t));
  const auto b1 = static_cast<T>(cfg.beta1), b2 = static_cast<T>(cfg.beta2);
  const auto decay_factor = static_cast<T>(1.0 - lr * cfg.weight_decay);
  for (std::size_t i = 0; i < theta.size(); ++i) {
    m[i] = b1 * m[i] + (T(1) - b1) * g[i];
    v[i] = b2 * v[i] + (T(1) - b2) * g[i] * g[i];
    const double mhat = static_cast<double>(m[i]) / bc1;
    const double vhat = static_cast<double>(v[i]) / bc2;
    if (decay) theta[i] *= decay_factor;
    theta[i] -= static_cast<T>(lr * mhat / (std::sqrt(vhat) + cfg.eps));
  }
}

// AdamW over all parameter tensors; decay applies to 2-D projections only.
template <typename T>
void adamw_step(Parameters<T>& params, const Gradients<T>& grads, OptimizerState<T>& st, double lr,
                const AdamWConfig& cfg) {
  const auto n = params.data().size();
  if (grads.data().size() != n) throw InputError("adamw_step: gradient shape mismatch");
  if (st.m.size() != n || st.v.size() != n) throw InputError("adamw_step: optimizer state shape mismatch");
  if (st.step == std::numeric_limits<std::int64_t>::max()) throw NumericalError("adamw_step: step counter overflow");
  ++st.step;
  for (const auto& t : params.layout().tensors()) {
    adamw_update<T>(params.span(t), grads.span(t), std::span<T>(st.m.data() + t.offset, t.size()),
                    std::span<T>(st.v.data() + t.offset, t.size()), st.step, lr, cfg, t.decays());
  }
}

}  // namespace loretta
