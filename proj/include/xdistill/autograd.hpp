#pragma once

// Define-by-run reverse-mode differentiation. Every differentiable op takes the
// Tape explicitly; an op is recorded only when at least one input requires a
// gradient, so inference code runs through the same functions at no cost.

#include <functional>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "xdistill/tensor.hpp"

namespace xdistill {

template <class T>
struct Node {
  Tensor<T> value;
  Tensor<T> grad;  // allocated lazily, same shape as value
  bool requires_grad = false;

  Tensor<T>& grad_buffer() {
    if (grad.empty()) grad = Tensor<T>(value.shape());
    return grad;
  }
  void zero_grad() { grad = Tensor<T>(); }
  const Shape& shape() const { return value.shape(); }
};

template <class T>
using Var = std::shared_ptr<Node<T>>;

template <class T>
Var<T> make_var(Tensor<T> value, bool requires_grad = false) {
  auto n = std::make_shared<Node<T>>();
  n->value = std::move(value);
  n->requires_grad = requires_grad;
  return n;
}

template <class T>
Var<T> constant(Tensor<T> value) {
  return make_var(std::move(value), false);
}

template <class T>
class Tape {
 public:
  using BackwardFn = std::function<void(const Tensor<T>& grad_out)>;

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  /// Wraps an op result. Records `fn` only if any input requires a gradient.
  Var<T> record(Tensor<T> out, std::initializer_list<Var<T>> inputs, BackwardFn fn) {
    return record(std::move(out), std::vector<Var<T>>(inputs), std::move(fn));
  }

  Var<T> record(Tensor<T> out, const std::vector<Var<T>>& inputs, BackwardFn fn) {
    if (check_finite_ && !out.all_finite())
      throw NumericError("non-finite value produced by a differentiable op (shape " + shape_str(out.shape()) + ")");
    bool needs = false;
    for (auto& v : inputs) needs = needs || (v && v->requires_grad);
    auto result = make_var(std::move(out), needs);
    if (needs) entries_.push_back(Entry{result, std::move(fn)});
    return result;
  }

  /// Reverse replay from a scalar loss. Consumes the tape.
  void backward(const Var<T>& loss) {
    if (loss->value.size() != 1)
      throw ContractError("backward() requires a scalar loss, got shape " + shape_str(loss->value.shape()));
    if (!loss->requires_grad) {
      entries_.clear();
      return;
    }
    loss->grad_buffer()[0] += T(1);
    visited_ = 0;
    for (auto it = entries_.rbegin(); it != entries_.rend(); ++it) {
      ++visited_;
      auto& out = it->output;
      if (out->grad.empty()) continue;
      it->fn(out->grad);
    }
    entries_.clear();
  }

  std::size_t size() const noexcept { return entries_.size(); }
  std::size_t last_backward_visits() const noexcept { return visited_; }
  void set_check_finite(bool on) noexcept { check_finite_ = on; }

 private:
  struct Entry {
    Var<T> output;
    BackwardFn fn;
  };
  std::vector<Entry> entries_;
  std::size_t visited_ = 0;
  bool check_finite_ = true;
};

/// Adds `g` into the gradient buffer of `v` when it tracks gradients.
template <class T>
inline void accumulate_grad(const Var<T>& v, const Tensor<T>& g) {
  if (!v || !v->requires_grad) return;
  auto& buf = v->grad_buffer();
  for (std::size_t i = 0; i < g.size(); ++i) buf[i] += g[i];
}

template <class T>
inline bool tracks(const Var<T>& v) {
  return v && v->requires_grad;
}

// ---------------------------------------------------------------------------
// Elementwise and structural ops
// ---------------------------------------------------------------------------

namespace detail {

enum class Bcast { same, leading, scalar };

template <class T>
Bcast broadcast_kind(const Tensor<T>& a, const Tensor<T>& b, const char* op) {
  if (a.shape() == b.shape()) return Bcast::same;
  if (b.size() == 1) return Bcast::scalar;
  const auto& as = a.shape();
  const auto& bs = b.shape();
  if (bs.size() < as.size() && std::equal(bs.rbegin(), bs.rend(), as.rbegin())) return Bcast::leading;
  throw DimensionError(std::string(op) + ": cannot broadcast " + shape_str(bs) + " onto " + shape_str(as));
}

// Reduce a full-shape gradient back to the broadcast operand's shape.
template <class T>
Tensor<T> reduce_to(const Tensor<T>& g, const Shape& target, Bcast kind) {
  if (kind == Bcast::same) return g;
  Tensor<T> r(target);
  if (kind == Bcast::scalar) {
    T s = 0;
    for (std::size_t i = 0; i < g.size(); ++i) s += g[i];
    r[0] = s;
    return r;
  }
  const std::size_t n = r.size();
  for (std::size_t i = 0; i < g.size(); ++i) r[i % n] += g[i];
  return r;
}

template <class T>
inline T b_at(const Tensor<T>& b, Bcast kind, std::size_t i) {
  switch (kind) {
    case Bcast::same: return b[i];
    case Bcast::scalar: return b[0];
    default: return b[i % b.size()];
  }
}

}  // namespace detail

template <class T>
Var<T> add(Tape<T>& tape, const Var<T>& a, const Var<T>& b) {
  auto kind = detail::broadcast_kind(a->value, b->value, "add");
  Tensor<T> out = a->value;
  for (std::size_t i = 0; i < out.size(); ++i) out[i] += detail::b_at(b->value, kind, i);
  Shape bshape = b->value.shape();
  return tape.record(std::move(out), {a, b}, [a, b, kind, bshape](const Tensor<T>& g) {
    accumulate_grad(a, g);
    if (tracks(b)) accumulate_grad(b, detail::reduce_to(g, bshape, kind));
  });
}

template <class T>
Var<T> sub(Tape<T>& tape, const Var<T>& a, const Var<T>& b) {
  auto kind = detail::broadcast_kind(a->value, b->value, "sub");
  Tensor<T> out = a->value;
  for (std::size_t i = 0; i < out.size(); ++i) out[i] -= detail::b_at(b->value, kind, i);
  Shape bshape = b->value.shape();
  return tape.record(std::move(out), {a, b}, [a, b, kind, bshape](const Tensor<T>& g) {
    accumulate_grad(a, g);
    if (tracks(b)) {
      Tensor<T> neg = detail::reduce_to(g, bshape, kind);
      for (auto& v : neg.storage()) v = -v;
      accumulate_grad(b, neg);
    }
  });
}

template <class T>
Var<T> mul(Tape<T>& tape, const Var<T>& a, const Var<T>& b) {
  auto kind = detail::broadcast_kind(a->value, b->value, "mul");
  Tensor<T> out = a->value;
  for (std::size_t i = 0; i < out.size(); ++i) out[i] *= detail::b_at(b->value, kind, i);
  Shape bshape = b->value.shape();
  return tape.record(std::move(out), {a, b}, [a, b, kind, bshape](const Tensor<T>& g) {
    if (tracks(a)) {
      Tensor<T> ga(g.shape());
      for (std::size_t i = 0; i < g.size(); ++i) ga[i] = g[i] * detail::b_at(b->value, kind, i);
      accumulate_grad(a, ga);
    }
    if (tracks(b)) {
      Tensor<T> gb(g.shape());
      for (std::size_t i = 0; i < g.size(); ++i) gb[i] = g[i] * a->value[i];
      accumulate_grad(b, detail::reduce_to(gb, bshape, kind));
    }
  });
}

template <class T>
Var<T> scale(Tape<T>& tape, const Var<T>& a, T c) {
  Tensor<T> out = a->value;
  for (auto& v : out.storage()) v *= c;
  return tape.record(std::move(out), {a}, [a, c](const Tensor<T>& g) {
    Tensor<T> ga = g;
    for (auto& v : ga.storage()) v *= c;
    accumulate_grad(a, ga);
  });
}

template <class T>
Var<T> add_scalar(Tape<T>& tape, const Var<T>& a, T c) {
  Tensor<T> out = a->value;
  for (auto& v : out.storage()) v += c;
  return tape.record(std::move(out), {a}, [a](const Tensor<T>& g) { accumulate_grad(a, g); });
}

template <class T>
Var<T> sigmoid(Tape<T>& tape, const Var<T>& a) {
  Tensor<T> out = a->value;
  for (auto& v : out.storage()) v = T(1) / (T(1) + std::exp(-v));
  Tensor<T> y = out;
  return tape.record(std::move(out), {a}, [a, y = std::move(y)](const Tensor<T>& g) {
    Tensor<T> ga(g.shape());
    for (std::size_t i = 0; i < g.size(); ++i) ga[i] = g[i] * y[i] * (T(1) - y[i]);
    accumulate_grad(a, ga);
  });
}

/// log σ(x), computed without overflow.
template <class T>
Var<T> log_sigmoid(Tape<T>& tape, const Var<T>& a) {
  Tensor<T> out = a->value;
  for (auto& v : out.storage()) v = v >= 0 ? -std::log1p(std::exp(-v)) : v - std::log1p(std::exp(v));
  return tape.record(std::move(out), {a}, [a](const Tensor<T>& g) {
    Tensor<T> ga(g.shape());
    for (std::size_t i = 0; i < g.size(); ++i) {
      T x = a->value[i];
      ga[i] = g[i] / (T(1) + std::exp(x));  // 1 - σ(x)
    }
    accumulate_grad(a, ga);
  });
}

template <class T>
Var<T> exp(Tape<T>& tape, const Var<T>& a) {
  Tensor<T> out = a->value;
  for (auto& v : out.storage()) v = std::exp(v);
  Tensor<T> y = out;
  return tape.record(std::move(out), {a}, [a, y = std::move(y)](const Tensor<T>& g) {
    Tensor<T> ga(g.shape());
    for (std::size_t i = 0; i < g.size(); ++i) ga[i] = g[i] * y[i];
    accumulate_grad(a, ga);
  });
}

template <class T>
Var<T> log(Tape<T>& tape, const Var<T>& a) {
  Tensor<T> out = a->value;
  for (auto& v : out.storage()) {
    if (!(v > 0)) throw NumericError("log of non-positive value");
    v = std::log(v);
  }
  return tape.record(std::move(out), {a}, [a](const Tensor<T>& g) {
    Tensor<T> ga(g.shape());
    for (std::size_t i = 0; i < g.size(); ++i) ga[i] = g[i] / a->value[i];
    accumulate_grad(a, ga);
  });
}

/// x·σ(x)
template <class T>
Var<T> silu(Tape<T>& tape, const Var<T>& a) {
  Tensor<T> out = a->value;
  for (auto& v : out.storage()) v = v / (T(1) + std::exp(-v));
  return tape.record(std::move(out), {a}, [a](const Tensor<T>& g) {
    Tensor<T> ga(g.shape());
    for (std::size_t i = 0; i < g.size(); ++i) {
      T x = a->value[i];
      T s = T(1) / (T(1) + std::exp(-x));
      ga[i] = g[i] * s * (T(1) + x * (T(1) - s));
    }
    accumulate_grad(a, ga);
  });
}

template <class T>
Var<T> reshape(Tape<T>& tape, const Var<T>& a, Shape shape) {
  Tensor<T> out = a->value.reshaped(std::move(shape));
  Shape orig = a->value.shape();
  return tape.record(std::move(out), {a}, [a, orig](const Tensor<T>& g) { accumulate_grad(a, g.reshaped(orig)); });
}

/// Repeats a vector [n] into [m×n] (explicit leading-axis broadcast).
template <class T>
Var<T> broadcast_rows(Tape<T>& tape, const Var<T>& v, std::size_t m) {
  const std::size_t n = v->value.size();
  Tensor<T> out(Shape{m, n});
  for (std::size_t i = 0; i < m; ++i) std::copy(v->value.data(), v->value.data() + n, out.data() + i * n);
  return tape.record(std::move(out), {v}, [v, m, n](const Tensor<T>& g) {
    Tensor<T> gv(v->value.shape());
    for (std::size_t i = 0; i < m; ++i)
      for (std::size_t j = 0; j < n; ++j) gv[j] += g[i * n + j];
    accumulate_grad(v, gv);
  });
}

template <class T>
Var<T> transpose(Tape<T>& tape, const Var<T>& a) {
  if (a->value.rank() != 2) throw DimensionError("transpose expects rank 2, got " + shape_str(a->value.shape()));
  const std::size_t m = a->value.dim(0), n = a->value.dim(1);
  Tensor<T> out(Shape{n, m});
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) out[j * m + i] = a->value[i * n + j];
  return tape.record(std::move(out), {a}, [a, m, n](const Tensor<T>& g) {
    Tensor<T> ga(Shape{m, n});
    for (std::size_t i = 0; i < m; ++i)
      for (std::size_t j = 0; j < n; ++j) ga[i * n + j] = g[j * m + i];
    accumulate_grad(a, ga);
  });
}

template <class T>
Var<T> matmul(Tape<T>& tape, const Var<T>& a, const Var<T>& b) {
  const auto& av = a->value;
  const auto& bv = b->value;
  if (av.rank() != 2 || bv.rank() != 2 || av.dim(1) != bv.dim(0))
    throw DimensionError("matmul shape mismatch: " + shape_str(av.shape()) + " x " + shape_str(bv.shape()));
  const std::size_t m = av.dim(0), k = av.dim(1), n = bv.dim(1);
  Tensor<T> out(Shape{m, n});
  kernels::gemm_nn(m, k, n, av.data(), bv.data(), out.data(), false);
  return tape.record(std::move(out), {a, b}, [a, b, m, k, n](const Tensor<T>& g) {
    if (tracks(a)) {
      auto& ga = a->grad_buffer();
      kernels::gemm_nt(m, n, k, g.data(), b->value.data(), ga.data(), true);
    }
    if (tracks(b)) {
      auto& gb = b->grad_buffer();
      kernels::gemm_tn(k, m, n, a->value.data(), g.data(), gb.data(), true);
    }
  });
}

/// Inner (dot) product of two equal-shape tensors, returned as a scalar.
template <class T>
Var<T> dot(Tape<T>& tape, const Var<T>& a, const Var<T>& b) {
  if (a->value.shape() != b->value.shape())
    throw DimensionError("dot shape mismatch: " + shape_str(a->value.shape()) + " vs " + shape_str(b->value.shape()));
  T s = 0;
  for (std::size_t i = 0; i < a->value.size(); ++i) s += a->value[i] * b->value[i];
  return tape.record(Tensor<T>::scalar(s), {a, b}, [a, b](const Tensor<T>& g) {
    const T go = g[0];
    if (tracks(a)) {
      Tensor<T> ga = b->value;
      for (auto& v : ga.storage()) v *= go;
      accumulate_grad(a, ga);
    }
    if (tracks(b)) {
      Tensor<T> gb = a->value;
      for (auto& v : gb.storage()) v *= go;
      accumulate_grad(b, gb);
    }
  });
}

/// a[m] ⊗ b[n] -> [m×n]
template <class T>
Var<T> outer(Tape<T>& tape, const Var<T>& a, const Var<T>& b) {
  const std::size_t m = a->value.size(), n = b->value.size();
  Tensor<T> out(Shape{m, n});
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) out[i * n + j] = a->value[i] * b->value[j];
  return tape.record(std::move(out), {a, b}, [a, b, m, n](const Tensor<T>& g) {
    if (tracks(a)) {
      Tensor<T> ga(a->value.shape());
      for (std::size_t i = 0; i < m; ++i) ga[i] = kernels::dot(g.data() + i * n, b->value.data(), n);
      accumulate_grad(a, ga);
    }
    if (tracks(b)) {
      Tensor<T> gb(b->value.shape());
      for (std::size_t i = 0; i < m; ++i) kernels::axpy(a->value[i], g.data() + i * n, gb.data(), n);
      accumulate_grad(b, gb);
    }
  });
}

template <class T>
Var<T> sum(Tape<T>& tape, const Var<T>& a) {
  T s = 0;
  for (auto v : a->value.storage()) s += v;
  Shape sh = a->value.shape();
  return tape.record(Tensor<T>::scalar(s), {a}, [a, sh](const Tensor<T>& g) { accumulate_grad(a, Tensor<T>(sh, g[0])); });
}

template <class T>
Var<T> mean(Tape<T>& tape, const Var<T>& a) {
  return scale(tape, sum(tape, a), T(1) / static_cast<T>(a->value.size()));
}

/// Sum over the last axis: [..., n] -> [...].
template <class T>
Var<T> sum_last(Tape<T>& tape, const Var<T>& a) {
  const std::size_t n = a->value.cols(), m = a->value.rows();
  Shape s = a->value.shape();
  s.pop_back();
  if (s.empty()) s = {1};
  Tensor<T> out(s);
  for (std::size_t i = 0; i < m; ++i) {
    T acc = 0;
    for (std::size_t j = 0; j < n; ++j) acc += a->value[i * n + j];
    out[i] = acc;
  }
  return tape.record(std::move(out), {a}, [a, m, n](const Tensor<T>& g) {
    Tensor<T> ga(a->value.shape());
    for (std::size_t i = 0; i < m; ++i)
      for (std::size_t j = 0; j < n; ++j) ga[i * n + j] = g[i];
    accumulate_grad(a, ga);
  });
}

/// Softmax over the last axis, max-subtracted.
template <class T>
Var<T> softmax(Tape<T>& tape, const Var<T>& a) {
  const std::size_t n = a->value.cols(), m = a->value.rows();
  Tensor<T> out = a->value;
  for (std::size_t i = 0; i < m; ++i) kernels::softmax_inplace(out.data() + i * n, n);
  Tensor<T> y = out;
  return tape.record(std::move(out), {a}, [a, y = std::move(y), m, n](const Tensor<T>& g) {
    Tensor<T> ga(y.shape());
    for (std::size_t i = 0; i < m; ++i) {
      const T* yi = y.data() + i * n;
      const T* gi = g.data() + i * n;
      T s = kernels::dot(yi, gi, n);
      for (std::size_t j = 0; j < n; ++j) ga[i * n + j] = yi[j] * (gi[j] - s);
    }
    accumulate_grad(a, ga);
  });
}

/// Rows of `table` selected by `ids` (embedding lookup): [V×D] -> [n×D].
template <class T>
Var<T> gather_rows(Tape<T>& tape, const Var<T>& table, std::span<const std::uint32_t> ids) {
  const std::size_t rows = table->value.dim(0), d = table->value.cols();
  Tensor<T> out(Shape{ids.size(), d});
  for (std::size_t i = 0; i < ids.size(); ++i) {
    if (ids[i] >= rows)
      throw ContractError("gather index " + std::to_string(ids[i]) + " out of range " + std::to_string(rows));
    std::copy_n(table->value.data() + ids[i] * d, d, out.data() + i * d);
  }
  std::vector<std::uint32_t> idx(ids.begin(), ids.end());
  return tape.record(std::move(out), {table}, [table, idx = std::move(idx), d](const Tensor<T>& g) {
    auto& gt = table->grad_buffer();
    for (std::size_t i = 0; i < idx.size(); ++i) kernels::axpy(T(1), g.data() + i * d, gt.data() + idx[i] * d, d);
  });
}

/// Columns [begin, end) of a 2-D tensor.
template <class T>
Var<T> slice_cols(Tape<T>& tape, const Var<T>& a, std::size_t begin, std::size_t end) {
  const std::size_t m = a->value.rows(), n = a->value.cols();
  if (begin >= end || end > n) throw DimensionError("slice_cols range out of bounds for " + shape_str(a->value.shape()));
  const std::size_t w = end - begin;
  Tensor<T> out(Shape{m, w});
  for (std::size_t i = 0; i < m; ++i) std::copy_n(a->value.data() + i * n + begin, w, out.data() + i * w);
  return tape.record(std::move(out), {a}, [a, m, n, w, begin](const Tensor<T>& g) {
    auto& ga = a->grad_buffer();
    for (std::size_t i = 0; i < m; ++i) kernels::axpy(T(1), g.data() + i * w, ga.data() + i * n + begin, w);
  });
}

template <class T>
Var<T> concat_cols(Tape<T>& tape, const std::vector<Var<T>>& parts) {
  if (parts.empty()) throw ContractError("concat_cols of empty list");
  const std::size_t m = parts[0]->value.rows();
  std::size_t n = 0;
  for (auto& p : parts) {
    if (p->value.rows() != m) throw DimensionError("concat_cols row mismatch");
    n += p->value.cols();
  }
  Tensor<T> out(Shape{m, n});
  std::size_t off = 0;
  for (auto& p : parts) {
    const std::size_t w = p->value.cols();
    for (std::size_t i = 0; i < m; ++i) std::copy_n(p->value.data() + i * w, w, out.data() + i * n + off);
    off += w;
  }
  return tape.record(std::move(out), parts, [parts, m, n](const Tensor<T>& g) {
    std::size_t off = 0;
    for (auto& p : parts) {
      const std::size_t w = p->value.cols();
      if (tracks(p)) {
        auto& gp = p->grad_buffer();
        for (std::size_t i = 0; i < m; ++i) kernels::axpy(T(1), g.data() + i * n + off, gp.data() + i * w, w);
      }
      off += w;
    }
  });
}

/// RMS normalization over the last axis with a learned gain.
template <class T>
Var<T> rmsnorm(Tape<T>& tape, const Var<T>& x, const Var<T>& gain, T eps = T(1e-6)) {
  const std::size_t m = x->value.rows(), n = x->value.cols();
  if (gain->value.size() != n)
    throw DimensionError("rmsnorm gain " + shape_str(gain->value.shape()) + " vs input " + shape_str(x->value.shape()));
  Tensor<T> out(x->value.shape());
  std::vector<T> inv(m);
  for (std::size_t i = 0; i < m; ++i) {
    const T* xi = x->value.data() + i * n;
    T ms = kernels::dot(xi, xi, n) / static_cast<T>(n);
    inv[i] = T(1) / std::sqrt(ms + eps);
    for (std::size_t j = 0; j < n; ++j) out[i * n + j] = xi[j] * inv[i] * gain->value[j];
  }
  return tape.record(std::move(out), {x, gain}, [x, gain, inv = std::move(inv), m, n](const Tensor<T>& g) {
    if (tracks(gain)) {
      auto& gg = gain->grad_buffer();
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j) gg[j] += g[i * n + j] * x->value[i * n + j] * inv[i];
    }
    if (tracks(x)) {
      auto& gx = x->grad_buffer();
      for (std::size_t i = 0; i < m; ++i) {
        const T* xi = x->value.data() + i * n;
        T s = 0;
        for (std::size_t j = 0; j < n; ++j) s += g[i * n + j] * gain->value[j] * xi[j];
        const T r = inv[i];
        const T c = s * r * r * r / static_cast<T>(n);
        for (std::size_t j = 0; j < n; ++j) gx[i * n + j] += g[i * n + j] * gain->value[j] * r - xi[j] * c;
      }
    }
  });
}

/// Mean next-token cross-entropy over rows of `logits` [T×V] whose target is
/// not `ignore`. Uses log-sum-exp with max subtraction.
template <class T>
Var<T> cross_entropy(Tape<T>& tape, const Var<T>& logits, std::span<const std::uint32_t> targets,
                     std::uint32_t ignore = UINT32_MAX) {
  const std::size_t m = logits->value.rows(), v = logits->value.cols();
  if (targets.size() != m) throw DimensionError("cross_entropy: targets length does not match logits rows");
  Tensor<T> probs(logits->value.shape());
  T loss = 0;
  std::size_t count = 0;
  for (std::size_t i = 0; i < m; ++i) {
    T* p = probs.data() + i * v;
    std::copy_n(logits->value.data() + i * v, v, p);
    if (targets[i] == ignore) continue;
    if (targets[i] >= v) throw ContractError("cross_entropy target out of range");
    T mx = *std::max_element(p, p + v);
    T s = 0;
    for (std::size_t j = 0; j < v; ++j) s += std::exp(p[j] - mx);
    const T lse = mx + std::log(s);
    loss += lse - p[targets[i]];
    for (std::size_t j = 0; j < v; ++j) p[j] = std::exp(p[j] - lse);
    ++count;
  }
  if (count == 0) throw ContractError("cross_entropy: no target positions");
  loss /= static_cast<T>(count);
  std::vector<std::uint32_t> tg(targets.begin(), targets.end());
  return tape.record(Tensor<T>::scalar(loss), {logits},
                     [logits, probs = std::move(probs), tg = std::move(tg), m, v, count, ignore](const Tensor<T>& g) {
                       auto& gl = logits->grad_buffer();
                       const T c = g[0] / static_cast<T>(count);
                       for (std::size_t i = 0; i < m; ++i) {
                         if (tg[i] == ignore) continue;
                         for (std::size_t j = 0; j < v; ++j) gl[i * v + j] += c * probs[i * v + j];
                         gl[i * v + tg[i]] -= c;
                       }
                     });
}

}  // namespace xdistill
