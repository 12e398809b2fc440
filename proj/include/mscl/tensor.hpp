#pragma once

#include <cmath>
#include <cstddef>
#include <numeric>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include "mscl/error.hpp"

namespace mscl {

inline std::string shape_string(const std::vector<std::size_t>& shape) {
  std::ostringstream os;
  os << "[";
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "x" : "") << shape[i];
  os << "]";
  return os.str();
}

// Dense row-major tensor of 32- or 64-bit floats. All elements are finite:
// construction from a data buffer rejects NaN/Inf, and in debug builds every
// op output is re-checked (MSCL_FINITE_CHECKS forces the checks on).
template <typename T>
class Tensor {
  static_assert(std::is_floating_point_v<T>);

 public:
  Tensor() = default;

  explicit Tensor(std::vector<std::size_t> shape)
      : shape_(std::move(shape)), data_(checked_numel(shape_), T(0)) {}

  Tensor(std::vector<std::size_t> shape, std::vector<T> data, bool requires_grad = false)
      : shape_(std::move(shape)), data_(std::move(data)), requires_grad_(requires_grad) {
    if (data_.size() != checked_numel(shape_)) {
      throw ShapeError("tensor data length " + std::to_string(data_.size()) +
                       " does not match shape " + shape_string(shape_));
    }
    for (const T v : data_) {
      if (!std::isfinite(v)) throw ContractError("tensor constructed with non-finite value");
    }
  }

  static Tensor scalar(T v) { return Tensor({1}, {v}); }
  static Tensor zeros(std::vector<std::size_t> shape) { return Tensor(std::move(shape)); }
  static Tensor full(std::vector<std::size_t> shape, T v) {
    Tensor t(std::move(shape));
    for (T& x : t.data_) x = v;
    return t;
  }

  const std::vector<std::size_t>& shape() const { return shape_; }
  std::size_t ndim() const { return shape_.size(); }
  std::size_t dim(std::size_t i) const { return shape_.at(i); }
  std::size_t numel() const { return data_.size(); }
  bool empty() const { return data_.empty(); }

  std::span<T> data() { return data_; }
  std::span<const T> data() const { return data_; }

  T& at(std::size_t i) { return data_[i]; }
  const T& at(std::size_t i) const { return data_[i]; }
  T& at(std::size_t i, std::size_t j) { return data_[i * shape_[1] + j]; }
  const T& at(std::size_t i, std::size_t j) const { return data_[i * shape_[1] + j]; }
  T& at(std::size_t c, std::size_t y, std::size_t x) {
    return data_[(c * shape_[1] + y) * shape_[2] + x];
  }
  const T& at(std::size_t c, std::size_t y, std::size_t x) const {
    return data_[(c * shape_[1] + y) * shape_[2] + x];
  }
  T& at(std::size_t o, std::size_t c, std::size_t y, std::size_t x) {
    return data_[((o * shape_[1] + c) * shape_[2] + y) * shape_[3] + x];
  }
  const T& at(std::size_t o, std::size_t c, std::size_t y, std::size_t x) const {
    return data_[((o * shape_[1] + c) * shape_[2] + y) * shape_[3] + x];
  }

  bool requires_grad() const { return requires_grad_; }
  Tensor& set_requires_grad(bool b) {
    requires_grad_ = b;
    return *this;
  }

  bool same_shape(const Tensor& other) const { return shape_ == other.shape_; }

  bool operator==(const Tensor& other) const {
    return shape_ == other.shape_ && data_ == other.data_;
  }

  bool all_finite() const {
    for (const T v : data_)
      if (!std::isfinite(v)) return false;
    return true;
  }

  template <typename U>
  Tensor<U> cast() const {
    std::vector<U> out(data_.size());
    for (std::size_t i = 0; i < data_.size(); ++i) out[i] = static_cast<U>(data_[i]);
    return Tensor<U>(shape_, std::move(out), requires_grad_);
  }

 private:
  static std::size_t checked_numel(const std::vector<std::size_t>& shape) {
    std::size_t n = 1;
    for (std::size_t d : shape) {
      if (d == 0) throw ShapeError("tensor dimension must be positive, got shape " + shape_string(shape));
      n *= d;
    }
    return n;
  }

  std::vector<std::size_t> shape_;
  std::vector<T> data_;
  bool requires_grad_ = false;
};

#if !defined(NDEBUG) || defined(MSCL_FINITE_CHECKS)
template <typename T>
inline void debug_check_finite(const Tensor<T>& t, const char* op) {
  if (!t.all_finite()) throw ContractError(std::string("non-finite value produced by ") + op);
}
#else
template <typename T>
inline void debug_check_finite(const Tensor<T>&, const char*) {}
#endif

}  // namespace mscl
