#pragma once

#include <cmath>
#include <span>
#include <vector>

#include "mapmatch/model/parameters.hpp"

namespace mapmatch::model {

struct AdamOptions {
  double lr = 7e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

template <typename T>
struct AdamState {
  std::vector<Mat<T>> m;
  std::vector<Mat<T>> v;
  long step = 0;
};

/// Bias-corrected Adam on a flat buffer. `step` is the 1-based step count.
template <typename T>
void adam_update(std::span<T> param, std::span<const T> grad, std::span<T> m, std::span<T> v,
                 long step, const AdamOptions& opt) {
  const double c1 = 1.0 - std::pow(opt.beta1, static_cast<double>(step));
  const double c2 = 1.0 - std::pow(opt.beta2, static_cast<double>(step));
  const T b1 = static_cast<T>(opt.beta1), b2 = static_cast<T>(opt.beta2);
  for (std::size_t i = 0; i < param.size(); ++i) {
    m[i] = b1 * m[i] + (T(1) - b1) * grad[i];
    v[i] = b2 * v[i] + (T(1) - b2) * grad[i] * grad[i];
    const double m_hat = static_cast<double>(m[i]) / c1;
    const double v_hat = static_cast<double>(v[i]) / c2;
    param[i] -= static_cast<T>(opt.lr * m_hat / (std::sqrt(v_hat) + opt.eps));
  }
}

/// One Adam step over every tensor whose `trainable` flag is set (all when
/// the flag list is empty). Frozen tensors and their state are not touched.
template <typename T>
void adam_step(ParameterStore<T>& params, const std::vector<Mat<T>>& grads, AdamState<T>& state,
               const AdamOptions& opt, const std::vector<bool>& trainable = {}) {
  if (state.m.empty()) {
    state.m = params.zeros_like();
    state.v = params.zeros_like();
  }
  ++state.step;
  for (std::size_t i = 0; i < params.size(); ++i) {
    if (!trainable.empty() && !trainable[i]) continue;
    Mat<T>& w = params[i];
    const auto n = static_cast<std::size_t>(w.size());
    adam_update<T>({w.data(), n}, {grads[i].data(), n}, {state.m[i].data(), n},
                   {state.v[i].data(), n}, state.step, opt);
  }
}

}  // namespace mapmatch::model
