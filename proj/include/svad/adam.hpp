#pragma once

#include <cmath>
#include <string>
#include <vector>

#include "svad/tensor.hpp"

namespace svad {

struct AdamConfig {
  double lr = 2e-4;
  double beta1 = 0.9, beta2 = 0.999;
  double weight_decay = 1e-5;  // coupled L2: added to the gradient before moments
  double eps = 1e-8;

  void validate() const {
    if (!(lr > 0)) throw ValidationError("adam: lr must be > 0");
    if (beta1 < 0 || beta1 >= 1 || beta2 < 0 || beta2 >= 1)
      throw ValidationError("adam: betas must lie in [0, 1)");
    if (weight_decay < 0) throw ValidationError("adam: weight_decay must be >= 0");
  }
};

struct AdamState {
  std::vector<std::vector<float>> m, v;  // aligned with the parameter registry
  int64_t step = 0;
};

inline AdamState make_adam_state(const std::vector<size_t>& param_sizes) {
  AdamState s;
  for (size_t n : param_sizes) {
    s.m.emplace_back(n, 0.0f);
    s.v.emplace_back(n, 0.0f);
  }
  return s;
}

// One update over the whole registry.  Standard bias-corrected Adam; the L2
// term enters the gradient (and therefore both moments), not the update.
inline void adam_step(const std::vector<Tensor*>& params, const std::vector<std::string>& names,
                      const std::vector<std::vector<float>>& grads, AdamState& state,
                      const AdamConfig& cfg) {
  if (params.size() != grads.size() || params.size() != state.m.size())
    throw ValidationError("adam_step: registry size mismatch");
  state.step += 1;
  const double bc1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(state.step));
  const double bc2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(state.step));
  for (size_t p = 0; p < params.size(); ++p) {
    Tensor& w = *params[p];
    const std::vector<float>& g = grads[p];
    if (g.size() != w.numel())
      throw ValidationError("adam_step: gradient size mismatch for " + names[p]);
    std::vector<float>& m = state.m[p];
    std::vector<float>& v = state.v[p];
    float* pw = w.mut();
    for (size_t i = 0; i < g.size(); ++i) {
      if (!std::isfinite(g[i]))
        throw NumericError("non-finite gradient in parameter " + names[p]);
      const double gi = static_cast<double>(g[i]) + cfg.weight_decay * static_cast<double>(pw[i]);
      m[i] = static_cast<float>(cfg.beta1 * m[i] + (1.0 - cfg.beta1) * gi);
      v[i] = static_cast<float>(cfg.beta2 * v[i] + (1.0 - cfg.beta2) * gi * gi);
      const double mhat = m[i] / bc1;
      const double vhat = v[i] / bc2;
      pw[i] = static_cast<float>(pw[i] - cfg.lr * mhat / (std::sqrt(vhat) + cfg.eps));
    }
  }
}

}  // namespace svad
