#pragma once

#include <functional>
#include <vector>

#include "mscl/tape.hpp"

namespace mscl {

// Builds a scalar loss from one tape var per input tensor.
template <typename T>
using LossBuilder = std::function<Var(Tape<T>&, const std::vector<Var>&)>;

// Central finite-difference check of the tape's analytic gradients.
// Returns max over all input coordinates of
//   |analytic - numeric| / max(1e-12, |analytic| + |numeric|).
// Coordinates where both values sit below the central-difference noise floor
// (cancellation error ~ eps*|f|/h, far above 1e-12 for h=1e-5) cannot be
// measured by this estimator and count as exact agreement.
inline constexpr double kGradCheckNoiseFloor = 1e-8;

template <typename T>
double grad_check(const LossBuilder<T>& build, std::vector<Tensor<T>> inputs, T h) {
  if (h <= T(0)) throw ContractError("grad_check: step h must be positive");

  const auto eval = [&](const std::vector<Tensor<T>>& points) -> T {
    Tape<T> tp;
    std::vector<Var> vars;
    vars.reserve(points.size());
    for (const auto& p : points) vars.push_back(tp.constant(p));
    const Var loss = build(tp, vars);
    if (tp.value(loss).numel() != 1) throw ContractError("grad_check: loss must be scalar");
    return tp.value(loss).at(0);
  };

  // Analytic gradients.
  Tape<T> tp;
  std::vector<Var> vars;
  vars.reserve(inputs.size());
  for (auto& x : inputs) {
    Tensor<T> leaf = x;
    leaf.set_requires_grad(true);
    vars.push_back(tp.leaf(std::move(leaf)));
  }
  const Var loss = build(tp, vars);
  const Gradients<T> grads = tp.backward(loss);

  double worst = 0.0;
  std::vector<Tensor<T>> probe = inputs;
  for (std::size_t t = 0; t < inputs.size(); ++t) {
    const Tensor<T>& analytic = grads.at(vars[t]);
    for (std::size_t i = 0; i < inputs[t].numel(); ++i) {
      const T orig = probe[t].at(i);
      probe[t].at(i) = orig + h;
      const T fp = eval(probe);
      probe[t].at(i) = orig - h;
      const T fm = eval(probe);
      probe[t].at(i) = orig;
      const double numeric = (static_cast<double>(fp) - static_cast<double>(fm)) /
                             (2.0 * static_cast<double>(h));
      const double a = static_cast<double>(analytic.at(i));
      if (std::abs(a) < kGradCheckNoiseFloor && std::abs(numeric) < kGradCheckNoiseFloor) continue;
      const double err = std::abs(a - numeric) / std::max(1e-12, std::abs(a) + std::abs(numeric));
      worst = std::max(worst, err);
    }
  }
  return worst;
}

// Single-input convenience form.
template <typename T>
double grad_check(const std::function<Var(Tape<T>&, Var)>& build, const Tensor<T>& x, T h) {
  return grad_check<T>(
      [&build](Tape<T>& tp, const std::vector<Var>& vars) { return build(tp, vars[0]); },
      std::vector<Tensor<T>>{x}, h);
}

}  // namespace mscl
