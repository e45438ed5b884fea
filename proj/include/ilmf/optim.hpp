#pragma once

#include <cmath>
#include <string>
#include <vector>

#include "ilmf/error.hpp"
#include "ilmf/tensor.hpp"

namespace ilmf {

struct AdamConfig {
  double beta1 = 0.9;
  double beta2 = 0.98;
  double epsilon = 1e-9;
  double peak_lr = 1e-3;
  int warmup_steps = 400;  // linear warmup, then inverse-sqrt decay
};

// lr(t) = peak * min(t / warmup, sqrt(warmup / t)); both branches meet at
// the peak rate when t == warmup.
inline double learning_rate(const AdamConfig& cfg, int64_t step) {
  if (step <= 0) return 0.0;
  const double t = static_cast<double>(step);
  const double w = static_cast<double>(std::max(cfg.warmup_steps, 1));
  return cfg.peak_lr * std::min(t / w, std::sqrt(w / t));
}

struct AdamState {
  int64_t step_count = 0;
  std::vector<std::vector<double>> first_moment;
  std::vector<std::vector<double>> second_moment;

  static AdamState init_for(const std::vector<Tensor>& params) {
    AdamState s;
    s.first_moment.reserve(params.size());
    s.second_moment.reserve(params.size());
    for (const Tensor& p : params) {
      s.first_moment.emplace_back(p.size(), 0.0);
      s.second_moment.emplace_back(p.size(), 0.0);
    }
    return s;
  }
};

// One Adam update with bias correction. `grads` holds one gradient array per
// parameter, in the same order. Parameters without an accumulated gradient
// this step pass an empty vector and are treated as zero-gradient.
inline void adam_step(std::vector<Tensor>& params,
                      const std::vector<const std::vector<double>*>& grads,
                      AdamState& state, const AdamConfig& cfg) {
  if (params.size() != grads.size() || params.size() != state.first_moment.size())
    throw DimensionError("adam_step: parameter/gradient/state counts disagree");
  state.step_count += 1;
  const double lr = learning_rate(cfg, state.step_count);
  const double bc1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(state.step_count));
  const double bc2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(state.step_count));
  for (size_t pi = 0; pi < params.size(); ++pi) {
    auto& p = params[pi].data();
    auto& m = state.first_moment[pi];
    auto& v = state.second_moment[pi];
    if (m.size() != p.size())
      throw DimensionError("adam_step: moment shape does not match parameter " +
                           std::to_string(pi));
    const std::vector<double>* g = grads[pi];
    if (g && g->size() != p.size())
      throw DimensionError("adam_step: gradient shape does not match parameter " +
                           std::to_string(pi));
    for (size_t i = 0; i < p.size(); ++i) {
      const double gi = g ? (*g)[i] : 0.0;
      m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * gi;
      v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * gi * gi;
      const double mhat = m[i] / bc1;
      const double vhat = v[i] / bc2;
      p[i] -= lr * mhat / (std::sqrt(vhat) + cfg.epsilon);
    }
  }
}

// Convenience for the common case: read gradients straight off the tensors.
inline void adam_step(std::vector<Tensor>& params, AdamState& state,
                      const AdamConfig& cfg) {
  std::vector<const std::vector<double>*> grads;
  grads.reserve(params.size());
  for (const Tensor& p : params)
    grads.push_back(p.has_grad() ? &p.grad() : nullptr);
  adam_step(params, grads, state, cfg);
}

}  // namespace ilmf
