#pragma once

#include <cstdint>
#include <vector>

#include "mscl/rng.hpp"
#include "mscl/tensor.hpp"

namespace mscl::testing {

template <typename T>
Tensor<T> random_tensor(std::vector<std::size_t> shape, Rng& rng, double scale = 1.0) {
  Tensor<T> t(std::move(shape));
  for (std::size_t i = 0; i < t.numel(); ++i) t.at(i) = static_cast<T>(scale * rng.gaussian());
  return t;
}

inline bool approx(double a, double b, double tol) { return std::abs(a - b) <= tol; }

}  // namespace mscl::testing
