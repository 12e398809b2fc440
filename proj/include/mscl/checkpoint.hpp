#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <string>

#include "mscl/adam.hpp"
#include "mscl/tensor.hpp"

namespace mscl {

// Named-tensor container format, version 1:
//   magic "MSCL", version u32 LE, then per tensor:
//   name length u32 LE, UTF-8 name, ndim u32 LE, dims u32 LE each,
//   payload f32 LE row-major.
// Tensors are written in lexicographic name order.
inline constexpr std::uint32_t kCheckpointVersion = 1;

using NamedTensors = std::map<std::string, Tensor<float>>;

void save_checkpoint(const std::filesystem::path& path, const NamedTensors& tensors);
NamedTensors load_checkpoint(const std::filesystem::path& path);

template <typename T>
NamedTensors to_named_f32(const ParamSet<T>& params, const std::string& prefix = "") {
  NamedTensors out;
  for (const auto& [name, t] : params) out.emplace(prefix + name, t.template cast<float>());
  return out;
}

template <typename T>
ParamSet<T> from_named_f32(const NamedTensors& tensors, const std::string& prefix = "") {
  ParamSet<T> out;
  for (const auto& [name, t] : tensors) {
    if (name.rfind(prefix, 0) == 0) out.emplace(name.substr(prefix.size()), t.template cast<T>());
  }
  return out;
}

}  // namespace mscl
