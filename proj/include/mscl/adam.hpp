#pragma once

#include <cmath>
#include <map>
#include <string>

#include "mscl/tensor.hpp"

namespace mscl {

template <typename T>
using ParamSet = std::map<std::string, Tensor<T>>;

template <typename T>
struct AdamConfig {
  T lr = T(5e-4);
  T beta1 = T(0.9);
  T beta2 = T(0.999);
  T epsilon = T(1e-8);
};

// First/second moment buffers keyed by parameter name, shared step counter.
template <typename T>
struct AdamState {
  AdamConfig<T> config;
  std::int64_t step_count = 0;
  ParamSet<T> m;
  ParamSet<T> v;
};

// One bias-corrected Adam update, in place. Parameters without a gradient
// entry are treated as having zero gradient.
template <typename T>
void adam_step(ParamSet<T>& params, const ParamSet<T>& grads, AdamState<T>& state) {
  state.step_count += 1;
  const T bc1 = T(1) - std::pow(state.config.beta1, static_cast<T>(state.step_count));
  const T bc2 = T(1) - std::pow(state.config.beta2, static_cast<T>(state.step_count));
  for (auto& [name, p] : params) {
    auto mit = state.m.find(name);
    if (mit == state.m.end()) {
      mit = state.m.emplace(name, Tensor<T>::zeros(p.shape())).first;
      state.v.emplace(name, Tensor<T>::zeros(p.shape()));
    }
    Tensor<T>& m = mit->second;
    Tensor<T>& v = state.v.at(name);
    if (!m.same_shape(p)) {
      throw ShapeError("adam_step: state for '" + name + "' has shape " +
                       shape_string(m.shape()) + ", parameter has " + shape_string(p.shape()));
    }
    const auto git = grads.find(name);
    const Tensor<T>* g = git == grads.end() ? nullptr : &git->second;
    if (g != nullptr && !g->same_shape(p)) {
      throw ShapeError("adam_step: gradient for '" + name + "' has shape " +
                       shape_string(g->shape()) + ", parameter has " + shape_string(p.shape()));
    }
    for (std::size_t i = 0; i < p.numel(); ++i) {
      const T gi = g ? g->at(i) : T(0);
      m.at(i) = state.config.beta1 * m.at(i) + (T(1) - state.config.beta1) * gi;
      v.at(i) = state.config.beta2 * v.at(i) + (T(1) - state.config.beta2) * gi * gi;
      const T mhat = m.at(i) / bc1;
      const T vhat = v.at(i) / bc2;
      p.at(i) -= state.config.lr * mhat / (std::sqrt(vhat) + state.config.epsilon);
    }
  }
}

}  // namespace mscl
