#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <span>
#include <unordered_map>
#include <vector>

#include "mscl/tensor.hpp"

namespace mscl {

// Handle to a value recorded on a Tape. Only meaningful for the tape that
// produced it.
struct Var {
  std::size_t id = static_cast<std::size_t>(-1);
  bool valid() const { return id != static_cast<std::size_t>(-1); }
};

template <typename T>
struct Gradients {
  // One entry per requires_grad leaf; leaves the loss never touched map to
  // zero tensors of the leaf's shape.
  std::unordered_map<std::size_t, Tensor<T>> by_id;

  const Tensor<T>& at(Var v) const {
    auto it = by_id.find(v.id);
    if (it == by_id.end()) {
      throw ContractError("no gradient recorded for this var (not a requires_grad leaf?)");
    }
    return it->second;
  }
};

// Reverse-mode autodiff tape. Values are stored in recording order, so every
// node's inputs precede its output; the backward pass walks the node list
// exactly once in reverse. Single-writer while recording.
template <typename T>
class Tape {
 public:
  struct BackwardCtx {
    const std::vector<Tensor<T>>& values;
    std::vector<Tensor<T>>& grads;
    const std::vector<char>& needs_grad;
  };
  using BackwardFn = std::function<void(BackwardCtx&)>;

  Var leaf(Tensor<T> value) {
    const bool rg = value.requires_grad();
    values_.push_back(std::move(value));
    needs_grad_.push_back(rg ? 1 : 0);
    is_leaf_.push_back(1);
    degenerate_.push_back(0);
    return Var{values_.size() - 1};
  }

  Var constant(Tensor<T> value) {
    value.set_requires_grad(false);
    return leaf(std::move(value));
  }

  // Id the next recorded value will get; ops capture it in backward closures.
  std::size_t next_id() const { return values_.size(); }

  // Records an op output together with its backward rule.
  Var record(Tensor<T> value, const std::vector<Var>& inputs, BackwardFn backward,
             bool degenerate = false) {
    bool needs = false;
    for (const Var v : inputs) needs = needs || needs_grad_[v.id] != 0;
    values_.push_back(std::move(value));
    needs_grad_.push_back(needs ? 1 : 0);
    is_leaf_.push_back(0);
    degenerate_.push_back(degenerate ? 1 : 0);
    if (needs) nodes_.push_back(Node{std::move(backward)});
    return Var{values_.size() - 1};
  }

  const Tensor<T>& value(Var v) const { return values_[v.id]; }
  std::size_t size() const { return values_.size(); }

  // True when the op that produced this value hit a defined-but-degenerate
  // input (zero vector in l2_normalize / cosine_similarity).
  bool degenerate(Var v) const { return degenerate_[v.id] != 0; }

  // Reverse accumulation from a scalar loss. Returns gradients for every
  // requires_grad leaf recorded on the tape.
  Gradients<T> backward(Var loss) const {
    if (values_[loss.id].numel() != 1) {
      throw ContractError("backward requires a scalar loss, got shape " +
                          shape_string(values_[loss.id].shape()));
    }
    std::vector<Tensor<T>> grads(values_.size());
    for (std::size_t i = 0; i < values_.size(); ++i) {
      if (needs_grad_[i]) grads[i] = Tensor<T>::zeros(values_[i].shape());
    }
    if (needs_grad_[loss.id]) {
      grads[loss.id].at(0) = T(1);
      BackwardCtx ctx{values_, grads, needs_grad_};
      for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) (it->backward)(ctx);
    }
    Gradients<T> out;
    for (std::size_t i = 0; i < values_.size(); ++i) {
      if (is_leaf_[i] && values_[i].requires_grad()) {
        out.by_id.emplace(i, grads[i].empty() ? Tensor<T>::zeros(values_[i].shape())
                                              : std::move(grads[i]));
      }
    }
    return out;
  }

 private:
  struct Node {
    BackwardFn backward;
  };
  std::vector<Tensor<T>> values_;
  std::vector<char> needs_grad_;
  std::vector<char> is_leaf_;
  std::vector<char> degenerate_;
  std::vector<Node> nodes_;
};

namespace detail {

template <typename T>
inline void require_same_shape(const Tensor<T>& a, const Tensor<T>& b, const char* op) {
  if (!a.same_shape(b)) {
    throw ShapeError(std::string(op) + ": shapes " + shape_string(a.shape()) + " and " +
                     shape_string(b.shape()) + " do not match");
  }
}

template <typename T>
inline void require_vector(const Tensor<T>& a, const char* op) {
  if (a.ndim() != 1) {
    throw ShapeError(std::string(op) + ": expected a vector, got shape " +
                     shape_string(a.shape()));
  }
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Elementwise and scalar ops
// ---------------------------------------------------------------------------

template <typename T>
Var add(Tape<T>& tp, Var a, Var b) {
  const auto& x = tp.value(a);
  const auto& y = tp.value(b);
  detail::require_same_shape(x, y, "add");
  Tensor<T> out(x.shape());
  for (std::size_t i = 0; i < out.numel(); ++i) out.at(i) = x.at(i) + y.at(i);
  debug_check_finite(out, "add");
  const std::size_t ai = a.id, bi = b.id, oi = tp.next_id();
  return tp.record(std::move(out), {a, b}, [ai, bi, oi](auto& ctx) {
    const auto& g = ctx.grads[oi];
    if (ctx.needs_grad[ai])
      for (std::size_t i = 0; i < g.numel(); ++i) ctx.grads[ai].at(i) += g.at(i);
    if (ctx.needs_grad[bi])
      for (std::size_t i = 0; i < g.numel(); ++i) ctx.grads[bi].at(i) += g.at(i);
  });
}

template <typename T>
Var sub(Tape<T>& tp, Var a, Var b) {
  const auto& x = tp.value(a);
  const auto& y = tp.value(b);
  detail::require_same_shape(x, y, "sub");
  Tensor<T> out(x.shape());
  for (std::size_t i = 0; i < out.numel(); ++i) out.at(i) = x.at(i) - y.at(i);
  debug_check_finite(out, "sub");
  const std::size_t ai = a.id, bi = b.id, oi = tp.next_id();
  return tp.record(std::move(out), {a, b}, [ai, bi, oi](auto& ctx) {
    const auto& g = ctx.grads[oi];
    if (ctx.needs_grad[ai])
      for (std::size_t i = 0; i < g.numel(); ++i) ctx.grads[ai].at(i) += g.at(i);
    if (ctx.needs_grad[bi])
      for (std::size_t i = 0; i < g.numel(); ++i) ctx.grads[bi].at(i) -= g.at(i);
  });
}

template <typename T>
Var mul(Tape<T>& tp, Var a, Var b) {
  const auto& x = tp.value(a);
  const auto& y = tp.value(b);
  detail::require_same_shape(x, y, "mul");
  Tensor<T> out(x.shape());
  for (std::size_t i = 0; i < out.numel(); ++i) out.at(i) = x.at(i) * y.at(i);
  debug_check_finite(out, "mul");
  const std::size_t ai = a.id, bi = b.id, oi = tp.next_id();
  return tp.record(std::move(out), {a, b}, [ai, bi, oi](auto& ctx) {
    const auto& g = ctx.grads[oi];
    const auto& xv = ctx.values[ai];
    const auto& yv = ctx.values[bi];
    if (ctx.needs_grad[ai])
      for (std::size_t i = 0; i < g.numel(); ++i) ctx.grads[ai].at(i) += g.at(i) * yv.at(i);
    if (ctx.needs_grad[bi])
      for (std::size_t i = 0; i < g.numel(); ++i) ctx.grads[bi].at(i) += g.at(i) * xv.at(i);
  });
}

template <typename T>
Var scale(Tape<T>& tp, Var a, T c) {
  const auto& x = tp.value(a);
  Tensor<T> out(x.shape());
  for (std::size_t i = 0; i < out.numel(); ++i) out.at(i) = x.at(i) * c;
  debug_check_finite(out, "scale");
  const std::size_t ai = a.id, oi = tp.next_id();
  return tp.record(std::move(out), {a}, [ai, oi, c](auto& ctx) {
    const auto& g = ctx.grads[oi];
    if (ctx.needs_grad[ai])
      for (std::size_t i = 0; i < g.numel(); ++i) ctx.grads[ai].at(i) += g.at(i) * c;
  });
}

template <typename T>
Var add_const(Tape<T>& tp, Var a, T c) {
  const auto& x = tp.value(a);
  Tensor<T> out(x.shape());
  for (std::size_t i = 0; i < out.numel(); ++i) out.at(i) = x.at(i) + c;
  debug_check_finite(out, "add_const");
  const std::size_t ai = a.id, oi = tp.next_id();
  return tp.record(std::move(out), {a}, [ai, oi](auto& ctx) {
    const auto& g = ctx.grads[oi];
    if (ctx.needs_grad[ai])
      for (std::size_t i = 0; i < g.numel(); ++i) ctx.grads[ai].at(i) += g.at(i);
  });
}

// Multiplies every element of `a` by the scalar recorded in `s`.
template <typename T>
Var mul_scalar(Tape<T>& tp, Var a, Var s) {
  const auto& x = tp.value(a);
  const auto& sv = tp.value(s);
  if (sv.numel() != 1) {
    throw ShapeError("mul_scalar: scalar operand has shape " + shape_string(sv.shape()));
  }
  const T c = sv.at(0);
  Tensor<T> out(x.shape());
  for (std::size_t i = 0; i < out.numel(); ++i) out.at(i) = x.at(i) * c;
  debug_check_finite(out, "mul_scalar");
  const std::size_t ai = a.id, si = s.id, oi = tp.next_id();
  return tp.record(std::move(out), {a, s}, [ai, si, oi](auto& ctx) {
    const auto& g = ctx.grads[oi];
    const auto& xv = ctx.values[ai];
    const T c2 = ctx.values[si].at(0);
    if (ctx.needs_grad[ai])
      for (std::size_t i = 0; i < g.numel(); ++i) ctx.grads[ai].at(i) += g.at(i) * c2;
    if (ctx.needs_grad[si]) {
      T acc = 0;
      for (std::size_t i = 0; i < g.numel(); ++i) acc += g.at(i) * xv.at(i);
      ctx.grads[si].at(0) += acc;
    }
  });
}

template <typename T>
Var relu(Tape<T>& tp, Var a) {
  const auto& x = tp.value(a);
  Tensor<T> out(x.shape());
  for (std::size_t i = 0; i < out.numel(); ++i) out.at(i) = x.at(i) > T(0) ? x.at(i) : T(0);
  debug_check_finite(out, "relu");
  const std::size_t ai = a.id, oi = tp.next_id();
  return tp.record(std::move(out), {a}, [ai, oi](auto& ctx) {
    if (!ctx.needs_grad[ai]) return;
    const auto& g = ctx.grads[oi];
    const auto& xv = ctx.values[ai];
    for (std::size_t i = 0; i < g.numel(); ++i)
      if (xv.at(i) > T(0)) ctx.grads[ai].at(i) += g.at(i);
  });
}

// log(1 + exp(x)), evaluated stably.
template <typename T>
Var softplus(Tape<T>& tp, Var a) {
  const auto& x = tp.value(a);
  Tensor<T> out(x.shape());
  for (std::size_t i = 0; i < out.numel(); ++i) {
    const T v = x.at(i);
    out.at(i) = std::max(v, T(0)) + std::log1p(std::exp(-std::abs(v)));
  }
  debug_check_finite(out, "softplus");
  const std::size_t ai = a.id, oi = tp.next_id();
  return tp.record(std::move(out), {a}, [ai, oi](auto& ctx) {
    if (!ctx.needs_grad[ai]) return;
    const auto& g = ctx.grads[oi];
    const auto& xv = ctx.values[ai];
    for (std::size_t i = 0; i < g.numel(); ++i) {
      const T s = T(1) / (T(1) + std::exp(-xv.at(i)));
      ctx.grads[ai].at(i) += g.at(i) * s;
    }
  });
}

// ---------------------------------------------------------------------------
// Reductions and vector ops
// ---------------------------------------------------------------------------

template <typename T>
Var sum(Tape<T>& tp, Var a) {
  const auto& x = tp.value(a);
  T acc = 0;
  for (std::size_t i = 0; i < x.numel(); ++i) acc += x.at(i);
  const std::size_t ai = a.id, oi = tp.next_id();
  return tp.record(Tensor<T>::scalar(acc), {a}, [ai, oi](auto& ctx) {
    if (!ctx.needs_grad[ai]) return;
    const T g = ctx.grads[oi].at(0);
    for (std::size_t i = 0; i < ctx.grads[ai].numel(); ++i) ctx.grads[ai].at(i) += g;
  });
}

template <typename T>
Var mean(Tape<T>& tp, Var a) {
  const auto& x = tp.value(a);
  T acc = 0;
  for (std::size_t i = 0; i < x.numel(); ++i) acc += x.at(i);
  const T inv = T(1) / static_cast<T>(x.numel());
  const std::size_t ai = a.id, oi = tp.next_id();
  return tp.record(Tensor<T>::scalar(acc * inv), {a}, [ai, oi, inv](auto& ctx) {
    if (!ctx.needs_grad[ai]) return;
    const T g = ctx.grads[oi].at(0) * inv;
    for (std::size_t i = 0; i < ctx.grads[ai].numel(); ++i) ctx.grads[ai].at(i) += g;
  });
}

template <typename T>
Var dot(Tape<T>& tp, Var a, Var b) {
  const auto& u = tp.value(a);
  const auto& v = tp.value(b);
  detail::require_vector(u, "dot");
  detail::require_same_shape(u, v, "dot");
  T acc = 0;
  for (std::size_t i = 0; i < u.numel(); ++i) acc += u.at(i) * v.at(i);
  const std::size_t ai = a.id, bi = b.id, oi = tp.next_id();
  return tp.record(Tensor<T>::scalar(acc), {a, b}, [ai, bi, oi](auto& ctx) {
    const T g = ctx.grads[oi].at(0);
    const auto& uv = ctx.values[ai];
    const auto& vv = ctx.values[bi];
    if (ctx.needs_grad[ai])
      for (std::size_t i = 0; i < uv.numel(); ++i) ctx.grads[ai].at(i) += g * vv.at(i);
    if (ctx.needs_grad[bi])
      for (std::size_t i = 0; i < vv.numel(); ++i) ctx.grads[bi].at(i) += g * uv.at(i);
  });
}

// Collects scalar vars into one vector value.
template <typename T>
Var pack(Tape<T>& tp, const std::vector<Var>& scalars) {
  if (scalars.empty()) throw ContractError("pack: empty input");
  Tensor<T> out({scalars.size()});
  for (std::size_t i = 0; i < scalars.size(); ++i) {
    const auto& s = tp.value(scalars[i]);
    if (s.numel() != 1) {
      throw ShapeError("pack: input " + std::to_string(i) + " has shape " +
                       shape_string(s.shape()) + ", expected a scalar");
    }
    out.at(i) = s.at(0);
  }
  std::vector<std::size_t> ids(scalars.size());
  for (std::size_t i = 0; i < scalars.size(); ++i) ids[i] = scalars[i].id;
  const std::size_t oi = tp.next_id();
  return tp.record(std::move(out), scalars, [ids, oi](auto& ctx) {
    const auto& g = ctx.grads[oi];
    for (std::size_t i = 0; i < ids.size(); ++i)
      if (ctx.needs_grad[ids[i]]) ctx.grads[ids[i]].at(0) += g.at(i);
  });
}

// Extracts element `index` of a vector as a scalar.
template <typename T>
Var slice_scalar(Tape<T>& tp, Var a, std::size_t index) {
  const auto& x = tp.value(a);
  detail::require_vector(x, "slice_scalar");
  if (index >= x.numel()) {
    throw ShapeError("slice_scalar: index " + std::to_string(index) + " out of range for " +
                     shape_string(x.shape()));
  }
  const std::size_t ai = a.id, oi = tp.next_id();
  return tp.record(Tensor<T>::scalar(x.at(index)), {a}, [ai, oi, index](auto& ctx) {
    if (ctx.needs_grad[ai]) ctx.grads[ai].at(index) += ctx.grads[oi].at(0);
  });
}

// log sum exp over a vector, max-shifted; gradient is the softmax of the input.
template <typename T>
Var logsumexp(Tape<T>& tp, Var a) {
  const auto& x = tp.value(a);
  detail::require_vector(x, "logsumexp");
  T m = x.at(0);
  for (std::size_t i = 1; i < x.numel(); ++i) m = std::max(m, x.at(i));
  T acc = 0;
  for (std::size_t i = 0; i < x.numel(); ++i) acc += std::exp(x.at(i) - m);
  const std::size_t ai = a.id, oi = tp.next_id();
  return tp.record(Tensor<T>::scalar(m + std::log(acc)), {a}, [ai, oi](auto& ctx) {
    if (!ctx.needs_grad[ai]) return;
    const T g = ctx.grads[oi].at(0);
    const auto& xv = ctx.values[ai];
    T m2 = xv.at(0);
    for (std::size_t i = 1; i < xv.numel(); ++i) m2 = std::max(m2, xv.at(i));
    T z = 0;
    for (std::size_t i = 0; i < xv.numel(); ++i) z += std::exp(xv.at(i) - m2);
    for (std::size_t i = 0; i < xv.numel(); ++i)
      ctx.grads[ai].at(i) += g * std::exp(xv.at(i) - m2) / z;
  });
}

// x / ||x||2 for vectors; a zero vector maps to zero and flags the output as
// degenerate (query via tape.degenerate).
template <typename T>
Var l2_normalize(Tape<T>& tp, Var a) {
  const auto& x = tp.value(a);
  detail::require_vector(x, "l2_normalize");
  T nsq = 0;
  for (std::size_t i = 0; i < x.numel(); ++i) nsq += x.at(i) * x.at(i);
  const T n = std::sqrt(nsq);
  const bool degenerate = n == T(0);
  Tensor<T> out(x.shape());
  if (!degenerate)
    for (std::size_t i = 0; i < x.numel(); ++i) out.at(i) = x.at(i) / n;
  debug_check_finite(out, "l2_normalize");
  const std::size_t ai = a.id, oi = tp.next_id();
  return tp.record(
      std::move(out), {a},
      [ai, oi, n, degenerate](auto& ctx) {
        if (!ctx.needs_grad[ai] || degenerate) return;
        const auto& g = ctx.grads[oi];
        const auto& y = ctx.values[oi];
        T gy = 0;
        for (std::size_t i = 0; i < g.numel(); ++i) gy += g.at(i) * y.at(i);
        for (std::size_t i = 0; i < g.numel(); ++i)
          ctx.grads[ai].at(i) += (g.at(i) - y.at(i) * gy) / n;
      },
      degenerate);
}

// dot(u,v) / (||u|| ||v||). If either vector has zero norm the result is 0 and
// the output is flagged degenerate; the gradient there is defined as zero.
template <typename T>
Var cosine_similarity(Tape<T>& tp, Var a, Var b) {
  const auto& u = tp.value(a);
  const auto& v = tp.value(b);
  detail::require_vector(u, "cosine_similarity");
  detail::require_same_shape(u, v, "cosine_similarity");
  T uu = 0, vv = 0, uv = 0;
  for (std::size_t i = 0; i < u.numel(); ++i) {
    uu += u.at(i) * u.at(i);
    vv += v.at(i) * v.at(i);
    uv += u.at(i) * v.at(i);
  }
  const T nu = std::sqrt(uu), nv = std::sqrt(vv);
  const bool degenerate = nu == T(0) || nv == T(0);
  const T s = degenerate ? T(0) : uv / (nu * nv);
  const std::size_t ai = a.id, bi = b.id, oi = tp.next_id();
  return tp.record(
      Tensor<T>::scalar(s), {a, b},
      [ai, bi, oi, nu, nv, s, degenerate](auto& ctx) {
        if (degenerate) return;
        const T g = ctx.grads[oi].at(0);
        const auto& uv2 = ctx.values[ai];
        const auto& vv2 = ctx.values[bi];
        if (ctx.needs_grad[ai])
          for (std::size_t i = 0; i < uv2.numel(); ++i)
            ctx.grads[ai].at(i) += g * (vv2.at(i) / (nu * nv) - s * uv2.at(i) / (nu * nu));
        if (ctx.needs_grad[bi])
          for (std::size_t i = 0; i < vv2.numel(); ++i)
            ctx.grads[bi].at(i) += g * (uv2.at(i) / (nu * nv) - s * vv2.at(i) / (nv * nv));
      },
      degenerate);
}

// ---------------------------------------------------------------------------
// Linear algebra
// ---------------------------------------------------------------------------

// x[n x p] * W[p x q] + b[q] -> [n x q]
template <typename T>
Var affine(Tape<T>& tp, Var xv, Var wv, Var bv) {
  const auto& x = tp.value(xv);
  const auto& w = tp.value(wv);
  const auto& b = tp.value(bv);
  if (x.ndim() != 2 || w.ndim() != 2 || x.dim(1) != w.dim(0)) {
    throw ShapeError("affine: x " + shape_string(x.shape()) + " does not conform with W " +
                     shape_string(w.shape()));
  }
  if (b.ndim() != 1 || b.dim(0) != w.dim(1)) {
    throw ShapeError("affine: bias " + shape_string(b.shape()) + " does not match W " +
                     shape_string(w.shape()));
  }
  const std::size_t n = x.dim(0), p = x.dim(1), q = w.dim(1);
  Tensor<T> out({n, q});
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < q; ++j) out.at(i, j) = b.at(j);
    for (std::size_t k = 0; k < p; ++k) {
      const T xv_ = x.at(i, k);
      for (std::size_t j = 0; j < q; ++j) out.at(i, j) += xv_ * w.at(k, j);
    }
  }
  debug_check_finite(out, "affine");
  const std::size_t xi = xv.id, wi = wv.id, bi = bv.id, oi = tp.next_id();
  return tp.record(std::move(out), {xv, wv, bv}, [xi, wi, bi, oi, n, p, q](auto& ctx) {
    const auto& g = ctx.grads[oi];
    const auto& x2 = ctx.values[xi];
    const auto& w2 = ctx.values[wi];
    if (ctx.needs_grad[xi]) {
      auto& gx = ctx.grads[xi];
      for (std::size_t i = 0; i < n; ++i)
        for (std::size_t k = 0; k < p; ++k) {
          T acc = 0;
          for (std::size_t j = 0; j < q; ++j) acc += g.at(i, j) * w2.at(k, j);
          gx.at(i, k) += acc;
        }
    }
    if (ctx.needs_grad[wi]) {
      auto& gw = ctx.grads[wi];
      for (std::size_t k = 0; k < p; ++k)
        for (std::size_t i = 0; i < n; ++i) {
          const T xv2 = x2.at(i, k);
          for (std::size_t j = 0; j < q; ++j) gw.at(k, j) += xv2 * g.at(i, j);
        }
    }
    if (ctx.needs_grad[bi]) {
      auto& gb = ctx.grads[bi];
      for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < q; ++j) gb.at(j) += g.at(i, j);
    }
  });
}

// M[m x n] * x[n] -> [m]
template <typename T>
Var matvec(Tape<T>& tp, Var mv, Var xv) {
  const auto& m = tp.value(mv);
  const auto& x = tp.value(xv);
  if (m.ndim() != 2 || x.ndim() != 1 || m.dim(1) != x.dim(0)) {
    throw ShapeError("matvec: M " + shape_string(m.shape()) + " does not conform with x " +
                     shape_string(x.shape()));
  }
  const std::size_t rows = m.dim(0), cols = m.dim(1);
  Tensor<T> out({rows});
  for (std::size_t i = 0; i < rows; ++i) {
    T acc = 0;
    for (std::size_t j = 0; j < cols; ++j) acc += m.at(i, j) * x.at(j);
    out.at(i) = acc;
  }
  debug_check_finite(out, "matvec");
  const std::size_t mi = mv.id, xi = xv.id, oi = tp.next_id();
  return tp.record(std::move(out), {mv, xv}, [mi, xi, oi, rows, cols](auto& ctx) {
    const auto& g = ctx.grads[oi];
    const auto& m2 = ctx.values[mi];
    const auto& x2 = ctx.values[xi];
    if (ctx.needs_grad[mi])
      for (std::size_t i = 0; i < rows; ++i)
        for (std::size_t j = 0; j < cols; ++j) ctx.grads[mi].at(i, j) += g.at(i) * x2.at(j);
    if (ctx.needs_grad[xi])
      for (std::size_t j = 0; j < cols; ++j) {
        T acc = 0;
        for (std::size_t i = 0; i < rows; ++i) acc += g.at(i) * m2.at(i, j);
        ctx.grads[xi].at(j) += acc;
      }
  });
}

template <typename T>
Var reshape(Tape<T>& tp, Var a, std::vector<std::size_t> shape) {
  const auto& x = tp.value(a);
  std::size_t n = 1;
  for (std::size_t d : shape) n *= d;
  if (n != x.numel()) {
    throw ShapeError("reshape: cannot view " + shape_string(x.shape()) + " as " +
                     shape_string(shape));
  }
  Tensor<T> out(shape);
  for (std::size_t i = 0; i < n; ++i) out.at(i) = x.at(i);
  const std::size_t ai = a.id, oi = tp.next_id();
  return tp.record(std::move(out), {a}, [ai, oi](auto& ctx) {
    if (!ctx.needs_grad[ai]) return;
    const auto& g = ctx.grads[oi];
    for (std::size_t i = 0; i < g.numel(); ++i) ctx.grads[ai].at(i) += g.at(i);
  });
}

// ---------------------------------------------------------------------------
// Softmax
// ---------------------------------------------------------------------------

// Softmax over the last axis of a vector or matrix, max-shifted for stability.
template <typename T>
Var softmax_row(Tape<T>& tp, Var a) {
  const auto& x = tp.value(a);
  if (x.ndim() != 1 && x.ndim() != 2) {
    throw ShapeError("softmax_row: expected vector or matrix, got " + shape_string(x.shape()));
  }
  const std::size_t rows = x.ndim() == 2 ? x.dim(0) : 1;
  const std::size_t cols = x.ndim() == 2 ? x.dim(1) : x.dim(0);
  Tensor<T> out(x.shape());
  for (std::size_t r = 0; r < rows; ++r) {
    const T* xr = x.data().data() + r * cols;
    T* yr = out.data().data() + r * cols;
    T m = xr[0];
    for (std::size_t j = 1; j < cols; ++j) m = std::max(m, xr[j]);
    T z = 0;
    for (std::size_t j = 0; j < cols; ++j) {
      yr[j] = std::exp(xr[j] - m);
      z += yr[j];
    }
    for (std::size_t j = 0; j < cols; ++j) yr[j] /= z;
  }
  debug_check_finite(out, "softmax_row");
  const std::size_t ai = a.id, oi = tp.next_id();
  return tp.record(std::move(out), {a}, [ai, oi, rows, cols](auto& ctx) {
    if (!ctx.needs_grad[ai]) return;
    const auto& g = ctx.grads[oi];
    const auto& y = ctx.values[oi];
    for (std::size_t r = 0; r < rows; ++r) {
      const T* gr = g.data().data() + r * cols;
      const T* yr = y.data().data() + r * cols;
      T gy = 0;
      for (std::size_t j = 0; j < cols; ++j) gy += gr[j] * yr[j];
      for (std::size_t j = 0; j < cols; ++j)
        ctx.grads[ai].at(r * cols + j) += yr[j] * (gr[j] - gy);
    }
  });
}

// ---------------------------------------------------------------------------
// Convolution and pooling (single image, CHW layout)
// ---------------------------------------------------------------------------

inline std::size_t conv_out_dim(std::size_t in, std::size_t k, std::size_t stride,
                                std::size_t padding) {
  return (in + 2 * padding - k) / stride + 1;
}

namespace detail {

// Output range [lo, hi) for which in = out*stride + k - padding stays inside
// [0, limit). Keeps the hot conv loops branch-free.
inline void conv_valid_range(std::size_t out_dim, std::size_t k, std::size_t stride,
                             std::size_t padding, std::size_t limit, std::size_t& lo,
                             std::size_t& hi) {
  lo = padding > k ? (padding - k + stride - 1) / stride : 0;
  const std::size_t last_in = limit - 1 + padding;
  hi = k > last_in ? 0 : std::min(out_dim, last_in >= k ? (last_in - k) / stride + 1 : 0);
  if (lo > hi) lo = hi;
}

}  // namespace detail

// Cross-correlation of x[Cin x H x W] with K[Cout x Cin x k x k].
template <typename T>
Var conv2d(Tape<T>& tp, Var xv, Var kv, std::size_t stride, std::size_t padding) {
  const auto& x = tp.value(xv);
  const auto& k = tp.value(kv);
  if (x.ndim() != 3 || k.ndim() != 4 || x.dim(0) != k.dim(1) || k.dim(2) != k.dim(3)) {
    throw ShapeError("conv2d: input " + shape_string(x.shape()) + " does not conform with kernel " +
                     shape_string(k.shape()));
  }
  if (stride < 1) throw ContractError("conv2d: stride must be >= 1");
  const std::size_t cin = x.dim(0), h = x.dim(1), w = x.dim(2);
  const std::size_t cout = k.dim(0), ks = k.dim(2);
  if (ks > h + 2 * padding || ks > w + 2 * padding) {
    throw ShapeError("conv2d: kernel " + shape_string(k.shape()) + " larger than padded input " +
                     shape_string(x.shape()));
  }
  const std::size_t oh = conv_out_dim(h, ks, stride, padding);
  const std::size_t ow = conv_out_dim(w, ks, stride, padding);
  Tensor<T> out({cout, oh, ow});
  {
    const T* xd = x.data().data();
    const T* kd = k.data().data();
    T* od = out.data().data();
    for (std::size_t co = 0; co < cout; ++co) {
      for (std::size_t ci = 0; ci < cin; ++ci) {
        for (std::size_t ky = 0; ky < ks; ++ky) {
          std::size_t oy_lo, oy_hi;
          detail::conv_valid_range(oh, ky, stride, padding, h, oy_lo, oy_hi);
          for (std::size_t kx = 0; kx < ks; ++kx) {
            const T kval = kd[((co * cin + ci) * ks + ky) * ks + kx];
            if (kval == T(0)) continue;
            std::size_t ox_lo, ox_hi;
            detail::conv_valid_range(ow, kx, stride, padding, w, ox_lo, ox_hi);
            const std::ptrdiff_t shift =
                static_cast<std::ptrdiff_t>(kx) - static_cast<std::ptrdiff_t>(padding);
            for (std::size_t oy = oy_lo; oy < oy_hi; ++oy) {
              const std::size_t iy = oy * stride + ky - padding;
              const T* in_row = xd + (ci * h + iy) * w;
              T* out_row = od + (co * oh + oy) * ow;
              if (stride == 1) {
                for (std::size_t ox = ox_lo; ox < ox_hi; ++ox) {
                  out_row[ox] += kval * in_row[static_cast<std::ptrdiff_t>(ox) + shift];
                }
              } else {
                for (std::size_t ox = ox_lo; ox < ox_hi; ++ox) {
                  out_row[ox] += kval * in_row[static_cast<std::ptrdiff_t>(ox * stride) + shift];
                }
              }
            }
          }
        }
      }
    }
  }
  debug_check_finite(out, "conv2d");
  const std::size_t xi = xv.id, ki = kv.id, oi = tp.next_id();
  return tp.record(std::move(out), {xv, kv},
                   [xi, ki, oi, stride, padding, cin, h, w, cout, ks, oh, ow](auto& ctx) {
                     const bool nx = ctx.needs_grad[xi], nk = ctx.needs_grad[ki];
                     if (!nx && !nk) return;
                     const T* gd = ctx.grads[oi].data().data();
                     const T* xd = ctx.values[xi].data().data();
                     const T* kd = ctx.values[ki].data().data();
                     T* gx = nx ? ctx.grads[xi].data().data() : nullptr;
                     T* gk = nk ? ctx.grads[ki].data().data() : nullptr;
                     for (std::size_t co = 0; co < cout; ++co) {
                       for (std::size_t ci = 0; ci < cin; ++ci) {
                         for (std::size_t ky = 0; ky < ks; ++ky) {
                           std::size_t oy_lo, oy_hi;
                           detail::conv_valid_range(oh, ky, stride, padding, h, oy_lo, oy_hi);
                           for (std::size_t kx = 0; kx < ks; ++kx) {
                             const T kval = kd[((co * cin + ci) * ks + ky) * ks + kx];
                             std::size_t ox_lo, ox_hi;
                             detail::conv_valid_range(ow, kx, stride, padding, w, ox_lo, ox_hi);
                             const std::ptrdiff_t shift = static_cast<std::ptrdiff_t>(kx) -
                                                          static_cast<std::ptrdiff_t>(padding);
                             T kacc = 0;
                             for (std::size_t oy = oy_lo; oy < oy_hi; ++oy) {
                               const std::size_t iy = oy * stride + ky - padding;
                               const T* g_row = gd + (co * oh + oy) * ow;
                               const std::size_t row = (ci * h + iy) * w;
                               if (stride == 1) {
                                 const T* x_row = xd + row;
                                 if (nx) {
                                   T* gx_row = gx + row;
                                   for (std::size_t ox = ox_lo; ox < ox_hi; ++ox) {
                                     gx_row[static_cast<std::ptrdiff_t>(ox) + shift] +=
                                         g_row[ox] * kval;
                                   }
                                 }
                                 if (nk) {
                                   for (std::size_t ox = ox_lo; ox < ox_hi; ++ox) {
                                     kacc += g_row[ox] * x_row[static_cast<std::ptrdiff_t>(ox) + shift];
                                   }
                                 }
                               } else {
                                 for (std::size_t ox = ox_lo; ox < ox_hi; ++ox) {
                                   const std::size_t ix = static_cast<std::size_t>(
                                       static_cast<std::ptrdiff_t>(row + ox * stride) + shift);
                                   if (nx) gx[ix] += g_row[ox] * kval;
                                   if (nk) kacc += g_row[ox] * xd[ix];
                                 }
                               }
                             }
                             if (nk) gk[((co * cin + ci) * ks + ky) * ks + kx] += kacc;
                           }
                         }
                       }
                     }
                   });
}

// Adds b[c] to every pixel of channel c.
template <typename T>
Var bias_channels(Tape<T>& tp, Var xv, Var bv) {
  const auto& x = tp.value(xv);
  const auto& b = tp.value(bv);
  if (x.ndim() != 3 || b.ndim() != 1 || b.dim(0) != x.dim(0)) {
    throw ShapeError("bias_channels: input " + shape_string(x.shape()) + " vs bias " +
                     shape_string(b.shape()));
  }
  const std::size_t c = x.dim(0), hw = x.dim(1) * x.dim(2);
  Tensor<T> out(x.shape());
  for (std::size_t ch = 0; ch < c; ++ch) {
    const T bval = b.at(ch);
    for (std::size_t i = 0; i < hw; ++i) out.at(ch * hw + i) = x.at(ch * hw + i) + bval;
  }
  debug_check_finite(out, "bias_channels");
  const std::size_t xi = xv.id, bi = bv.id, oi = tp.next_id();
  return tp.record(std::move(out), {xv, bv}, [xi, bi, oi, c, hw](auto& ctx) {
    const auto& g = ctx.grads[oi];
    if (ctx.needs_grad[xi])
      for (std::size_t i = 0; i < g.numel(); ++i) ctx.grads[xi].at(i) += g.at(i);
    if (ctx.needs_grad[bi])
      for (std::size_t ch = 0; ch < c; ++ch) {
        T acc = 0;
        for (std::size_t i = 0; i < hw; ++i) acc += g.at(ch * hw + i);
        ctx.grads[bi].at(ch) += acc;
      }
  });
}

// Max pooling; gradient routes to the first maximum in each window.
template <typename T>
Var max_pool2d(Tape<T>& tp, Var xv, std::size_t window, std::size_t stride) {
  const auto& x = tp.value(xv);
  if (x.ndim() != 3) {
    throw ShapeError("max_pool2d: expected C x H x W input, got " + shape_string(x.shape()));
  }
  if (window < 1 || stride < 1) throw ContractError("max_pool2d: window and stride must be >= 1");
  const std::size_t c = x.dim(0), h = x.dim(1), w = x.dim(2);
  if (window > h || window > w) {
    throw ShapeError("max_pool2d: window " + std::to_string(window) + " does not fit input " +
                     shape_string(x.shape()));
  }
  const std::size_t oh = (h - window) / stride + 1;
  const std::size_t ow = (w - window) / stride + 1;
  Tensor<T> out({c, oh, ow});
  std::vector<std::size_t> argmax(c * oh * ow);
  for (std::size_t ch = 0; ch < c; ++ch)
    for (std::size_t oy = 0; oy < oh; ++oy)
      for (std::size_t ox = 0; ox < ow; ++ox) {
        T best = x.at(ch, oy * stride, ox * stride);
        std::size_t best_idx = (ch * h + oy * stride) * w + ox * stride;
        for (std::size_t ky = 0; ky < window; ++ky)
          for (std::size_t kx = 0; kx < window; ++kx) {
            const T v = x.at(ch, oy * stride + ky, ox * stride + kx);
            if (v > best) {
              best = v;
              best_idx = (ch * h + oy * stride + ky) * w + ox * stride + kx;
            }
          }
        out.at(ch, oy, ox) = best;
        argmax[(ch * oh + oy) * ow + ox] = best_idx;
      }
  debug_check_finite(out, "max_pool2d");
  const std::size_t xi = xv.id, oi = tp.next_id();
  return tp.record(std::move(out), {xv}, [xi, oi, argmax](auto& ctx) {
    if (!ctx.needs_grad[xi]) return;
    const auto& g = ctx.grads[oi];
    for (std::size_t i = 0; i < g.numel(); ++i) ctx.grads[xi].at(argmax[i]) += g.at(i);
  });
}

// C x H x W -> per-channel means [C].
template <typename T>
Var global_avg_pool(Tape<T>& tp, Var xv) {
  const auto& x = tp.value(xv);
  if (x.ndim() != 3) {
    throw ShapeError("global_avg_pool: expected C x H x W input, got " + shape_string(x.shape()));
  }
  const std::size_t c = x.dim(0), hw = x.dim(1) * x.dim(2);
  Tensor<T> out({c});
  for (std::size_t ch = 0; ch < c; ++ch) {
    T acc = 0;
    for (std::size_t i = 0; i < hw; ++i) acc += x.at(ch * hw + i);
    out.at(ch) = acc / static_cast<T>(hw);
  }
  debug_check_finite(out, "global_avg_pool");
  const std::size_t xi = xv.id, oi = tp.next_id();
  return tp.record(std::move(out), {xv}, [xi, oi, c, hw](auto& ctx) {
    if (!ctx.needs_grad[xi]) return;
    const auto& g = ctx.grads[oi];
    const T inv = T(1) / static_cast<T>(hw);
    for (std::size_t ch = 0; ch < c; ++ch) {
      const T gv = g.at(ch) * inv;
      for (std::size_t i = 0; i < hw; ++i) ctx.grads[xi].at(ch * hw + i) += gv;
    }
  });
}

}  // namespace mscl
