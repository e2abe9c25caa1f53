#pragma once

// Sequence mixers: scaled softmax attention (full and sliding-window with sink
// tokens), linear attention, the mLSTM cell in recurrent and chunkwise-parallel
// form, softmax feature maps, rotary embeddings and the gated hybrid that fuses
// an mLSTM branch with an SWA branch through a per-head scalar output gate.
//
// Layouts: per-token activations are rows of width n_heads*d_head, head h
// occupying columns [h*d_head, (h+1)*d_head). Gate pre-activations are [T x H].

#include <cmath>
#include <cstdint>
#include <limits>
#include <optional>
#include <string>
#include <vector>

#include "xdistill/autograd.hpp"

namespace xdistill {

enum class GateInputMode { concat_qkv, layer_input };
enum class MixerKind { softmax_full, swa_only, linear_attn, mlstm_only, hybrid };

inline const char* to_string(GateInputMode m) { return m == GateInputMode::concat_qkv ? "concat_qkv" : "layer_input"; }

inline GateInputMode gate_input_mode_from_string(const std::string& s) {
  if (s == "concat_qkv") return GateInputMode::concat_qkv;
  if (s == "layer_input") return GateInputMode::layer_input;
  throw ConfigError("unknown gate_input_mode '" + s + "'");
}

inline const char* to_string(MixerKind k) {
  switch (k) {
    case MixerKind::softmax_full: return "softmax_full";
    case MixerKind::swa_only: return "swa_only";
    case MixerKind::linear_attn: return "linear_attn";
    case MixerKind::mlstm_only: return "mlstm_only";
    case MixerKind::hybrid: return "hybrid";
  }
  return "?";
}

inline MixerKind mixer_kind_from_string(const std::string& s) {
  for (auto k : {MixerKind::softmax_full, MixerKind::swa_only, MixerKind::linear_attn, MixerKind::mlstm_only,
                 MixerKind::hybrid})
    if (s == to_string(k)) return k;
  throw ConfigError("unknown mixer_kind '" + s + "'");
}

inline bool uses_attention(MixerKind k) {
  return k == MixerKind::softmax_full || k == MixerKind::swa_only || k == MixerKind::hybrid;
}
inline bool uses_recurrence(MixerKind k) {
  return k == MixerKind::linear_attn || k == MixerKind::mlstm_only || k == MixerKind::hybrid;
}
inline bool uses_input_forget_gates(MixerKind k) { return k == MixerKind::mlstm_only || k == MixerKind::hybrid; }
inline bool uses_output_gate(MixerKind k) { return k == MixerKind::hybrid; }

struct MixerConfig {
  std::size_t d_model = 128;
  std::size_t n_heads = 4;
  std::size_t d_qk = 32;
  std::size_t d_v = 32;
  std::size_t window = 64;
  std::size_t n_sinks = 4;
  std::size_t chunk_size = 64;
  double rope_base = 10000.0;
  GateInputMode gate_input_mode = GateInputMode::concat_qkv;
  // Fixed (non-learned) gate offsets: i = exp(0) = 1 and sigmoid(4.59512) = 0.99.
  double input_gate_bias = 0.0;
  double forget_gate_bias = 4.59511985013459;
  double eps_den = 1e-12;

  std::size_t qk_width() const { return n_heads * d_qk; }
  std::size_t v_width() const { return n_heads * d_v; }
  std::size_t gate_width() const {
    return gate_input_mode == GateInputMode::concat_qkv ? 2 * d_qk + d_v : d_model;
  }

  void validate() const {
    XD_REQUIRE(d_model > 0 && n_heads > 0 && d_qk > 0 && d_v > 0, ConfigError, "mixer dimensions must be positive");
    XD_REQUIRE(window >= 1, ConfigError, "window must be >= 1");
    XD_REQUIRE(chunk_size >= 1, ConfigError, "chunk_size must be >= 1");
    XD_REQUIRE(d_qk % 2 == 0, ConfigError, "d_qk must be even for rotary embeddings, got " + std::to_string(d_qk));
    XD_REQUIRE(rope_base > 1.0, ConfigError, "rope_base must exceed 1");
    XD_REQUIRE(eps_den > 0.0, ConfigError, "eps_den must be positive");
  }
};

constexpr std::size_t kUnboundedWindow = std::numeric_limits<std::size_t>::max() / 4;

// ---------------------------------------------------------------------------
// Rotary position embedding
// ---------------------------------------------------------------------------

namespace kernels {

/// Rotates each (2i, 2i+1) pair of every head by pos * base^(-2i/d).
/// `sign` = -1 applies the inverse rotation.
template <class T>
void rope_row(T* x, std::size_t n_heads, std::size_t d, std::size_t pos, double base, int sign = 1) {
  if (d % 2 != 0) throw ConfigError("rotary embedding requires an even head dimension, got " + std::to_string(d));
  for (std::size_t i = 0; i < d / 2; ++i) {
    const double theta = std::pow(base, -2.0 * static_cast<double>(i) / static_cast<double>(d));
    const double ang = static_cast<double>(pos) * theta;
    const T c = static_cast<T>(std::cos(ang));
    const T s = static_cast<T>(sign * std::sin(ang));
    for (std::size_t h = 0; h < n_heads; ++h) {
      T* p = x + h * d + 2 * i;
      const T a = p[0], b = p[1];
      p[0] = a * c - b * s;
      p[1] = a * s + b * c;
    }
  }
}

}  // namespace kernels

/// Applies RoPE to q and k (rows are positions start_pos, start_pos+1, ...).
template <class T>
std::pair<Tensor<T>, Tensor<T>> apply_rope(Tensor<T> q, Tensor<T> k, std::size_t n_heads, std::size_t d,
                                           double base, std::size_t start_pos = 0) {
  for (std::size_t t = 0; t < q.rows(); ++t) kernels::rope_row(q.data() + t * q.cols(), n_heads, d, start_pos + t, base);
  for (std::size_t t = 0; t < k.rows(); ++t) kernels::rope_row(k.data() + t * k.cols(), n_heads, d, start_pos + t, base);
  return {std::move(q), std::move(k)};
}

template <class T>
Var<T> rope(Tape<T>& tape, const Var<T>& x, std::size_t n_heads, std::size_t d, double base,
            std::size_t start_pos = 0) {
  Tensor<T> out = x->value;
  const std::size_t w = out.cols();
  if (w != n_heads * d) throw DimensionError("rope: row width " + std::to_string(w) + " != heads*d");
  for (std::size_t t = 0; t < out.rows(); ++t) kernels::rope_row(out.data() + t * w, n_heads, d, start_pos + t, base);
  return tape.record(std::move(out), {x}, [x, n_heads, d, base, start_pos, w](const Tensor<T>& g) {
    Tensor<T> gx = g;
    for (std::size_t t = 0; t < gx.rows(); ++t) kernels::rope_row(gx.data() + t * w, n_heads, d, start_pos + t, base, -1);
    accumulate_grad(x, gx);
  });
}

// ---------------------------------------------------------------------------
// Per-head linear maps, feature maps and gates
// ---------------------------------------------------------------------------

/// x [T x H*d] times per-head M [H x d x e] -> [T x H*e].
template <class T>
Var<T> head_linear(Tape<T>& tape, const Var<T>& x, const Var<T>& m) {
  const auto& ms = m->value.shape();
  if (ms.size() != 3) throw DimensionError("head_linear expects [H x d x e] weights, got " + shape_str(ms));
  const std::size_t H = ms[0], d = ms[1], e = ms[2], T_ = x->value.rows();
  if (x->value.cols() != H * d)
    throw DimensionError("head_linear: input " + shape_str(x->value.shape()) + " vs weights " + shape_str(ms));
  Tensor<T> out(Shape{T_, H * e});
  for (std::size_t t = 0; t < T_; ++t)
    for (std::size_t h = 0; h < H; ++h)
      kernels::gemm_nn(1, d, e, x->value.data() + t * H * d + h * d, m->value.data() + h * d * e,
                       out.data() + t * H * e + h * e, false);
  return tape.record(std::move(out), {x, m}, [x, m, H, d, e, T_](const Tensor<T>& g) {
    if (tracks(x)) {
      auto& gx = x->grad_buffer();
      for (std::size_t t = 0; t < T_; ++t)
        for (std::size_t h = 0; h < H; ++h)
          kernels::gemm_nt(1, e, d, g.data() + t * H * e + h * e, m->value.data() + h * d * e,
                           gx.data() + t * H * d + h * d, true);
    }
    if (tracks(m)) {
      auto& gm = m->grad_buffer();
      for (std::size_t t = 0; t < T_; ++t)
        for (std::size_t h = 0; h < H; ++h) {
          const T* xr = x->value.data() + t * H * d + h * d;
          const T* gr = g.data() + t * H * e + h * e;
          for (std::size_t i = 0; i < d; ++i) kernels::axpy(xr[i], gr, gm.data() + h * d * e + i * e, e);
        }
    }
  });
}

/// Softmax over each head's feature block.
template <class T>
Var<T> head_softmax(Tape<T>& tape, const Var<T>& x, std::size_t n_heads) {
  const Shape orig = x->value.shape();
  const std::size_t d = x->value.cols() / n_heads;
  auto r = reshape(tape, x, Shape{x->value.rows() * n_heads, d});
  return reshape(tape, softmax(tape, r), orig);
}

/// Head-wise feature map phi(x) = softmax(x M_h) over the feature axis.
template <class T>
Var<T> feature_map(Tape<T>& tape, const Var<T>& x, const Var<T>& m, std::size_t n_heads) {
  return head_softmax(tape, head_linear(tape, x, m), n_heads);
}

/// Gate pre-activations from the concatenated head inputs [q_h k_h v_h]:
/// out[t,h] = [q_th, k_th, v_th] . w[h]. Weights are [H x (2 d_qk + d_v)].
template <class T>
Var<T> head_gate(Tape<T>& tape, const Var<T>& q, const Var<T>& k, const Var<T>& v, const Var<T>& w,
                 std::size_t n_heads) {
  const std::size_t T_ = q->value.rows(), H = n_heads;
  const std::size_t dq = q->value.cols() / H, dv = v->value.cols() / H;
  const std::size_t G = 2 * dq + dv;
  if (w->value.size() != H * G)
    throw DimensionError("head_gate: weights " + shape_str(w->value.shape()) + " do not match [H x (2dqk+dv)]");
  Tensor<T> out(Shape{T_, H});
  for (std::size_t t = 0; t < T_; ++t)
    for (std::size_t h = 0; h < H; ++h) {
      const T* wh = w->value.data() + h * G;
      out[t * H + h] = kernels::dot(q->value.data() + t * H * dq + h * dq, wh, dq) +
                       kernels::dot(k->value.data() + t * H * dq + h * dq, wh + dq, dq) +
                       kernels::dot(v->value.data() + t * H * dv + h * dv, wh + 2 * dq, dv);
    }
  return tape.record(std::move(out), {q, k, v, w}, [q, k, v, w, T_, H, dq, dv, G](const Tensor<T>& g) {
    for (std::size_t t = 0; t < T_; ++t)
      for (std::size_t h = 0; h < H; ++h) {
        const T gt = g[t * H + h];
        const T* wh = w->value.data() + h * G;
        if (tracks(q)) kernels::axpy(gt, wh, q->grad_buffer().data() + t * H * dq + h * dq, dq);
        if (tracks(k)) kernels::axpy(gt, wh + dq, k->grad_buffer().data() + t * H * dq + h * dq, dq);
        if (tracks(v)) kernels::axpy(gt, wh + 2 * dq, v->grad_buffer().data() + t * H * dv + h * dv, dv);
        if (tracks(w)) {
          T* gw = w->grad_buffer().data() + h * G;
          kernels::axpy(gt, q->value.data() + t * H * dq + h * dq, gw, dq);
          kernels::axpy(gt, k->value.data() + t * H * dq + h * dq, gw + dq, dq);
          kernels::axpy(gt, v->value.data() + t * H * dv + h * dv, gw + 2 * dq, dv);
        }
      }
  });
}

/// Per-head convex fusion: out_h = o_h * a_h + (1 - o_h) * b_h, o is [T x H].
template <class T>
Var<T> head_mix(Tape<T>& tape, const Var<T>& o, const Var<T>& a, const Var<T>& b, std::size_t n_heads) {
  const std::size_t T_ = a->value.rows(), W = a->value.cols(), d = W / n_heads;
  if (b->value.shape() != a->value.shape() || o->value.size() != T_ * n_heads)
    throw DimensionError("head_mix shape mismatch");
  Tensor<T> out(a->value.shape());
  for (std::size_t t = 0; t < T_; ++t)
    for (std::size_t h = 0; h < n_heads; ++h) {
      const T g = o->value[t * n_heads + h];
      for (std::size_t j = 0; j < d; ++j) {
        const std::size_t i = t * W + h * d + j;
        out[i] = g * a->value[i] + (T(1) - g) * b->value[i];
      }
    }
  return tape.record(std::move(out), {o, a, b}, [o, a, b, T_, W, d, n_heads](const Tensor<T>& gr) {
    for (std::size_t t = 0; t < T_; ++t)
      for (std::size_t h = 0; h < n_heads; ++h) {
        const T g = o->value[t * n_heads + h];
        T go = 0;
        for (std::size_t j = 0; j < d; ++j) {
          const std::size_t i = t * W + h * d + j;
          go += gr[i] * (a->value[i] - b->value[i]);
          if (tracks(a)) a->grad_buffer()[i] += gr[i] * g;
          if (tracks(b)) b->grad_buffer()[i] += gr[i] * (T(1) - g);
        }
        if (tracks(o)) o->grad_buffer()[t * n_heads + h] += go;
      }
  });
}

// ---------------------------------------------------------------------------
// Scaled softmax attention
// ---------------------------------------------------------------------------

namespace kernels {

/// Single-query attention over n stored rows visited in the given order.
/// key(i)/val(i) return pointers to the head slices of stored row i.
template <class T, class KeyAt, class ValAt>
void attend(const T* q, std::size_t dqk, std::size_t dv, std::size_t n, KeyAt key, ValAt val, T* out,
            std::vector<T>& w) {
  const T scale = T(1) / std::sqrt(static_cast<T>(dqk));
  w.resize(n);
  T mx = -std::numeric_limits<T>::infinity();
  for (std::size_t i = 0; i < n; ++i) {
    w[i] = dot(q, key(i), dqk) * scale;
    mx = std::max(mx, w[i]);
  }
  T sum = 0;
  for (std::size_t i = 0; i < n; ++i) {
    w[i] = std::exp(w[i] - mx);
    sum += w[i];
  }
  std::fill(out, out + dv, T(0));
  for (std::size_t i = 0; i < n; ++i) axpy(w[i] / sum, val(i), out, dv);
  OpCounter::add_mixing(static_cast<std::uint64_t>(n) * (dqk + dv));
}

/// Positions visible to query t (0-based): sinks s < n_sinks and the last
/// `window` positions, causally. Writes them in increasing order into `idx`.
inline void visible_positions(std::size_t t, std::size_t window, std::size_t n_sinks, std::vector<std::size_t>& idx) {
  idx.clear();
  const std::size_t ws = t + 1 > window ? t + 1 - window : 0;
  for (std::size_t s = 0; s < std::min(n_sinks, ws); ++s) idx.push_back(s);
  for (std::size_t s = ws; s <= t; ++s) idx.push_back(s);
}

template <class T>
struct AttentionDims {
  std::size_t T_, H, dqk, dv, window, n_sinks;
};

template <class T>
void attention_forward(const T* q, const T* k, const T* v, T* out, const AttentionDims<T>& a) {
  std::vector<std::size_t> idx;
  std::vector<T> w;
  const std::size_t qs = a.H * a.dqk, vs = a.H * a.dv;
  for (std::size_t t = 0; t < a.T_; ++t) {
    visible_positions(t, a.window, a.n_sinks, idx);
    for (std::size_t h = 0; h < a.H; ++h) {
      attend(
          q + t * qs + h * a.dqk, a.dqk, a.dv, idx.size(), [&](std::size_t i) { return k + idx[i] * qs + h * a.dqk; },
          [&](std::size_t i) { return v + idx[i] * vs + h * a.dv; }, out + t * vs + h * a.dv, w);
    }
  }
}

template <class T>
void attention_backward(const T* q, const T* k, const T* v, const T* gout, T* gq, T* gk, T* gv,
                        const AttentionDims<T>& a) {
  std::vector<std::size_t> idx;
  std::vector<T> p, dp;
  const std::size_t qs = a.H * a.dqk, vs = a.H * a.dv;
  const T scale = T(1) / std::sqrt(static_cast<T>(a.dqk));
  for (std::size_t t = 0; t < a.T_; ++t) {
    visible_positions(t, a.window, a.n_sinks, idx);
    const std::size_t n = idx.size();
    p.resize(n);
    dp.resize(n);
    for (std::size_t h = 0; h < a.H; ++h) {
      const T* qt = q + t * qs + h * a.dqk;
      const T* gt = gout + t * vs + h * a.dv;
      T mx = -std::numeric_limits<T>::infinity();
      for (std::size_t i = 0; i < n; ++i) {
        p[i] = dot(qt, k + idx[i] * qs + h * a.dqk, a.dqk) * scale;
        mx = std::max(mx, p[i]);
      }
      T sum = 0;
      for (std::size_t i = 0; i < n; ++i) {
        p[i] = std::exp(p[i] - mx);
        sum += p[i];
      }
      T avg = 0;
      for (std::size_t i = 0; i < n; ++i) {
        p[i] /= sum;
        dp[i] = dot(gt, v + idx[i] * vs + h * a.dv, a.dv);
        avg += p[i] * dp[i];
      }
      for (std::size_t i = 0; i < n; ++i) {
        const std::size_t s = idx[i];
        if (gv) axpy(p[i], gt, gv + s * vs + h * a.dv, a.dv);
        const T ds = p[i] * (dp[i] - avg) * scale;
        if (gq) axpy(ds, k + s * qs + h * a.dqk, gq + t * qs + h * a.dqk, a.dqk);
        if (gk) axpy(ds, qt, gk + s * qs + h * a.dqk, a.dqk);
      }
      OpCounter::add_mixing(static_cast<std::uint64_t>(n) * 2 * (a.dqk + a.dv));
    }
  }
}

}  // namespace kernels

/// Causal scaled softmax attention for all heads in parallel mode. Each query
/// sees the first `n_sinks` positions and the last `window` positions
/// (window >= T gives full attention). Cost is O(T * (window + n_sinks)).
template <class T>
Var<T> causal_attention(Tape<T>& tape, const Var<T>& q, const Var<T>& k, const Var<T>& v, std::size_t n_heads,
                        std::size_t window = kUnboundedWindow, std::size_t n_sinks = 0) {
  const std::size_t T_ = q->value.rows();
  if (k->value.shape() != q->value.shape() || v->value.rows() != T_)
    throw DimensionError("causal_attention: q " + shape_str(q->value.shape()) + ", k " + shape_str(k->value.shape()) +
                         ", v " + shape_str(v->value.shape()));
  kernels::AttentionDims<T> dims{T_, n_heads, q->value.cols() / n_heads, v->value.cols() / n_heads, window, n_sinks};
  Tensor<T> out(Shape{T_, v->value.cols()});
  kernels::attention_forward(q->value.data(), k->value.data(), v->value.data(), out.data(), dims);
  return tape.record(std::move(out), {q, k, v}, [q, k, v, dims](const Tensor<T>& g) {
    kernels::attention_backward(q->value.data(), k->value.data(), v->value.data(), g.data(),
                                tracks(q) ? q->grad_buffer().data() : nullptr,
                                tracks(k) ? k->grad_buffer().data() : nullptr,
                                tracks(v) ? v->grad_buffer().data() : nullptr, dims);
  });
}

// ---------------------------------------------------------------------------
// Decoding caches
// ---------------------------------------------------------------------------

/// Full KV cache: grows by one row per step.
template <class T>
class KVCache {
 public:
  KVCache() = default;
  KVCache(std::size_t n_heads, std::size_t d_qk, std::size_t d_v) : H_(n_heads), dqk_(d_qk), dv_(d_v) {}

  void append(std::span<const T> k, std::span<const T> v) {
    if (k.size() != H_ * dqk_ || v.size() != H_ * dv_) throw DimensionError("KVCache::append row width mismatch");
    keys_.insert(keys_.end(), k.begin(), k.end());
    values_.insert(values_.end(), v.begin(), v.end());
    ++t_;
  }

  std::size_t length() const noexcept { return t_; }
  const T* key(std::size_t s, std::size_t h) const { return keys_.data() + s * H_ * dqk_ + h * dqk_; }
  const T* value(std::size_t s, std::size_t h) const { return values_.data() + s * H_ * dv_ + h * dv_; }
  std::size_t live_scalars() const noexcept { return keys_.size() + values_.size(); }
  std::size_t n_heads() const noexcept { return H_; }
  std::size_t d_qk() const noexcept { return dqk_; }
  std::size_t d_v() const noexcept { return dv_; }

 private:
  std::size_t H_ = 0, dqk_ = 0, dv_ = 0, t_ = 0;
  std::vector<T> keys_, values_;
};

/// Sliding-window cache with immutable sink entries and a ring buffer of the
/// most recent `window` non-sink entries.
template <class T>
class SWACache {
 public:
  SWACache() = default;
  SWACache(std::size_t n_heads, std::size_t d_qk, std::size_t d_v, std::size_t window, std::size_t n_sinks)
      : H_(n_heads), dqk_(d_qk), dv_(d_v), W_(window), S_(n_sinks),
        ring_k_(window * n_heads * d_qk), ring_v_(window * n_heads * d_v), ring_pos_(window) {
    if (window == 0) throw ConfigError("SWACache window must be >= 1");
  }

  void append(std::span<const T> k, std::span<const T> v) {
    if (k.size() != H_ * dqk_ || v.size() != H_ * dv_) throw DimensionError("SWACache::append row width mismatch");
    if (sink_pos_.size() < S_) {
      sink_k_.insert(sink_k_.end(), k.begin(), k.end());
      sink_v_.insert(sink_v_.end(), v.begin(), v.end());
      sink_pos_.push_back(t_);
    } else {
      const std::size_t slot = (ring_start_ + ring_count_) % W_;
      std::size_t dst = slot;
      if (ring_count_ == W_) {  // evict oldest non-sink entry
        dst = ring_start_;
        ring_start_ = (ring_start_ + 1) % W_;
      } else {
        ++ring_count_;
      }
      std::copy(k.begin(), k.end(), ring_k_.begin() + dst * H_ * dqk_);
      std::copy(v.begin(), v.end(), ring_v_.begin() + dst * H_ * dv_);
      ring_pos_[dst] = t_;
    }
    ++t_;
  }

  /// Tokens seen so far.
  std::size_t length() const noexcept { return t_; }
  /// Entries currently stored (sinks + ring).
  std::size_t size() const noexcept { return sink_pos_.size() + ring_count_; }

  // Entry i in chronological order: sinks first, then the ring oldest-first.
  const T* key(std::size_t i, std::size_t h) const {
    if (i < sink_pos_.size()) return sink_k_.data() + i * H_ * dqk_ + h * dqk_;
    return ring_k_.data() + ring_slot(i - sink_pos_.size()) * H_ * dqk_ + h * dqk_;
  }
  const T* value(std::size_t i, std::size_t h) const {
    if (i < sink_pos_.size()) return sink_v_.data() + i * H_ * dv_ + h * dv_;
    return ring_v_.data() + ring_slot(i - sink_pos_.size()) * H_ * dv_ + h * dv_;
  }
  std::size_t position(std::size_t i) const {
    return i < sink_pos_.size() ? sink_pos_[i] : ring_pos_[ring_slot(i - sink_pos_.size())];
  }

  /// Scalars held by live entries (the ring is preallocated but only occupied
  /// slots count, matching the analytic footprint).
  std::size_t live_scalars() const noexcept { return size() * H_ * (dqk_ + dv_); }
  std::size_t window() const noexcept { return W_; }
  std::size_t n_sinks() const noexcept { return S_; }

 private:
  std::size_t ring_slot(std::size_t j) const { return (ring_start_ + j) % W_; }

  std::size_t H_ = 0, dqk_ = 0, dv_ = 0, W_ = 1, S_ = 0, t_ = 0;
  std::vector<T> sink_k_, sink_v_;
  std::vector<std::size_t> sink_pos_;
  std::vector<T> ring_k_, ring_v_;
  std::vector<std::size_t> ring_pos_;
  std::size_t ring_start_ = 0, ring_count_ = 0;
};

/// Constant-size mLSTM / linear-attention state: per head S [d_qk x d_v],
/// normalizer z [d_qk] and log-space stabilizer m.
template <class T>
struct MLSTMState {
  std::size_t n_heads = 0, d_qk = 0, d_v = 0;
  std::vector<T> S, z, m;
  std::size_t steps = 0;

  MLSTMState() = default;
  MLSTMState(std::size_t h, std::size_t dqk, std::size_t dv)
      : n_heads(h), d_qk(dqk), d_v(dv), S(h * dqk * dv, T(0)), z(h * dqk, T(0)), m(h, T(0)) {}

  T* S_head(std::size_t h) { return S.data() + h * d_qk * d_v; }
  const T* S_head(std::size_t h) const { return S.data() + h * d_qk * d_v; }
  T* z_head(std::size_t h) { return z.data() + h * d_qk; }
  const T* z_head(std::size_t h) const { return z.data() + h * d_qk; }

  std::size_t live_scalars() const noexcept { return S.size() + z.size() + m.size(); }
  bool all_finite() const {
    auto fin = [](const std::vector<T>& x) { return std::all_of(x.begin(), x.end(), [](T v) { return std::isfinite(v); }); };
    return fin(S) && fin(z) && fin(m);
  }
};

/// h = softmax(q K^T / sqrt(d_qk)) V for every head of one query row.
template <class T>
void softmax_attention(std::span<const T> q, const KVCache<T>& cache, std::span<T> out) {
  if (cache.length() == 0) throw ContractError("softmax_attention on an empty cache");
  std::vector<T> w;
  const std::size_t H = cache.n_heads(), dqk = cache.d_qk(), dv = cache.d_v();
  for (std::size_t h = 0; h < H; ++h)
    kernels::attend(
        q.data() + h * dqk, dqk, dv, cache.length(), [&](std::size_t i) { return cache.key(i, h); },
        [&](std::size_t i) { return cache.value(i, h); }, out.data() + h * dv, w);
}

/// Softmax attention over exactly the sink entries and the current window.
template <class T>
void swa_attention(std::span<const T> q, const SWACache<T>& cache, std::size_t n_heads, std::size_t d_qk,
                   std::size_t d_v, std::span<T> out) {
  if (cache.size() == 0) throw ContractError("swa_attention on an empty cache");
  std::vector<T> w;
  for (std::size_t h = 0; h < n_heads; ++h)
    kernels::attend(
        q.data() + h * d_qk, d_qk, d_v, cache.size(), [&](std::size_t i) { return cache.key(i, h); },
        [&](std::size_t i) { return cache.value(i, h); }, out.data() + h * d_v, w);
}

// ---------------------------------------------------------------------------
// Linear attention and mLSTM, recurrent form
// ---------------------------------------------------------------------------

/// One head: S += phi_k (x) v, z += phi_k, h = phi_q S / max(phi_q . z, eps).
template <class T>
void linear_attention_step(T* S, T* z, const T* phi_q, const T* phi_k, const T* v, std::size_t dqk, std::size_t dv,
                           T* h, T eps_den = T(1e-12)) {
  for (std::size_t i = 0; i < dqk; ++i) {
    kernels::axpy(phi_k[i], v, S + i * dv, dv);
    z[i] += phi_k[i];
  }
  const T den = std::max(kernels::dot(phi_q, z, dqk), eps_den);
  kernels::vecmat(phi_q, S, h, dqk, dv);
  for (std::size_t j = 0; j < dv; ++j) h[j] /= den;
  OpCounter::add_mixing(static_cast<std::uint64_t>(dqk) * dv * 2 + 2 * dqk);
}

inline double log_sigmoid_value(double x) { return x >= 0 ? -std::log1p(std::exp(-x)) : x - std::log1p(std::exp(x)); }

/// One head of the stabilized mLSTM recurrence. `i_pre` is the log input gate
/// (i = exp(i_pre)); `f_pre` is the forget pre-activation (f = sigmoid(f_pre)).
///   m' = max(log f + m, i_pre)
///   S' = e^{log f + m - m'} S + e^{i_pre - m'} phi_k (x) v      (z analogous)
///   h  = phi_q S' / max(|phi_q . z'|, eps * e^{-m'})
template <class T>
void mlstm_step(T* S, T* z, T& m, const T* phi_q, const T* phi_k, const T* v, T i_pre, T f_pre, std::size_t dqk,
                std::size_t dv, T* h, T eps_den = T(1e-12)) {
  const T logf = static_cast<T>(log_sigmoid_value(static_cast<double>(f_pre)));
  const T m_new = std::max(logf + m, i_pre);
  const T decay = std::exp(logf + m - m_new);
  const T write = std::exp(i_pre - m_new);
  for (std::size_t i = 0; i < dqk; ++i) {
    T* Si = S + i * dv;
    const T wk = write * phi_k[i];
    for (std::size_t j = 0; j < dv; ++j) Si[j] = decay * Si[j] + wk * v[j];
    z[i] = decay * z[i] + wk;
  }
  m = m_new;
  const T den = std::max(std::abs(kernels::dot(phi_q, z, dqk)), eps_den * std::exp(-m_new));
  kernels::vecmat(phi_q, S, h, dqk, dv);
  for (std::size_t j = 0; j < dv; ++j) h[j] /= den;
  OpCounter::add_mixing(static_cast<std::uint64_t>(dqk) * dv * 2 + 2 * dqk);
}

// ---------------------------------------------------------------------------
// mLSTM, chunkwise-parallel form
// ---------------------------------------------------------------------------

namespace kernels {

/// Strided view of one head inside [T x H*d] buffers.
template <class T>
struct HeadView {
  const T* base;
  std::size_t stride;
  const T* row(std::size_t t) const { return base + t * stride; }
};

/// Chunkwise mLSTM for one head. Within a chunk the contribution of earlier
/// positions is a causal quadratic form; across chunks the state (C, n, m) is
/// carried exactly as the recurrence would carry it. `i_pre`/`log_f` may be
/// null, meaning i = f = 1 (plain linear attention). Writes h rows, the
/// per-position stabilizer m_t, the signed denominator and the applied
/// denominator; updates the state in place to the state after position T-1.
template <class T>
void mlstm_chunkwise_head(HeadView<T> q, HeadView<T> k, HeadView<T> v, const T* i_pre, const T* log_f,
                          std::size_t i_stride, std::size_t T_, std::size_t dqk, std::size_t dv, std::size_t chunk,
                          T* C, T* n, T& m, T* h, std::size_t h_stride, T* m_out, T* den_out, T* denom_out, T eps) {
  std::vector<T> b, logw, qk, num(dv), qC(dv);
  for (std::size_t t0 = 0; t0 < T_; t0 += chunk) {
    const std::size_t L = std::min(chunk, T_ - t0);
    b.assign(L, T(0));
    T acc = 0;
    for (std::size_t j = 0; j < L; ++j) {
      acc += log_f ? log_f[(t0 + j) * i_stride] : T(0);
      b[j] = acc;
    }
    auto ig = [&](std::size_t j) { return i_pre ? i_pre[(t0 + j) * i_stride] : T(0); };
    const T m_prev = m;
    logw.resize(L);
    qk.resize(L);
    for (std::size_t j = 0; j < L; ++j) {
      const T* qj = q.row(t0 + j);
      const T inter = b[j] + m_prev;
      T mj = inter;
      for (std::size_t s = 0; s <= j; ++s) {
        logw[s] = b[j] - b[s] + ig(s);
        mj = std::max(mj, logw[s]);
      }
      const T a = std::exp(inter - mj);
      vecmat(qj, C, qC.data(), dqk, dv);
      T den = a * dot(qj, n, dqk);
      for (std::size_t c = 0; c < dv; ++c) num[c] = a * qC[c];
      for (std::size_t s = 0; s <= j; ++s) {
        const T w = std::exp(logw[s] - mj) * dot(qj, k.row(t0 + s), dqk);
        den += w;
        axpy(w, v.row(t0 + s), num.data(), dv);
      }
      OpCounter::add_mixing(static_cast<std::uint64_t>(j + 1) * (dqk + dv) + dqk * (dv + 1));
      const T denom = std::max(std::abs(den), eps * std::exp(-mj));
      T* hj = h + (t0 + j) * h_stride;
      for (std::size_t c = 0; c < dv; ++c) hj[c] = num[c] / denom;
      if (m_out) m_out[t0 + j] = mj;
      if (den_out) den_out[t0 + j] = den;
      if (denom_out) denom_out[t0 + j] = denom;
    }
    // carry the state to the end of the chunk
    const T bL = b[L - 1];
    T m_new = bL + m_prev;
    for (std::size_t s = 0; s < L; ++s) m_new = std::max(m_new, bL - b[s] + ig(s));
    const T decay = std::exp(bL + m_prev - m_new);
    for (std::size_t i = 0; i < dqk * dv; ++i) C[i] *= decay;
    for (std::size_t i = 0; i < dqk; ++i) n[i] *= decay;
    for (std::size_t s = 0; s < L; ++s) {
      const T w = std::exp(bL - b[s] + ig(s) - m_new);
      const T* ks = k.row(t0 + s);
      const T* vs = v.row(t0 + s);
      for (std::size_t i = 0; i < dqk; ++i) {
        axpy(w * ks[i], vs, C + i * dv, dv);
        n[i] += w * ks[i];
      }
    }
    OpCounter::add_mixing(static_cast<std::uint64_t>(L) * dqk * (dv + 1));
    m = m_new;
  }
}

}  // namespace kernels

template <class T>
struct MLSTMParallelResult {
  Tensor<T> h;            // [T x H*d_v]
  MLSTMState<T> state;    // state after the last position
  Tensor<T> m;            // [T x H] stabilizer per position
  Tensor<T> den;          // [T x H] signed denominator phi_q . z
  Tensor<T> denom;        // [T x H] applied denominator
};

/// Chunkwise-parallel mLSTM over a whole sequence for all heads. `i_pre` and
/// `f_pre` are [T x H] gate pre-activations, or empty for i = f = 1.
template <class T>
MLSTMParallelResult<T> mlstm_parallel(const Tensor<T>& phi_q, const Tensor<T>& phi_k, const Tensor<T>& v,
                                      const Tensor<T>* i_pre, const Tensor<T>* f_pre, std::size_t n_heads,
                                      std::size_t chunk, T eps_den = T(1e-12),
                                      const MLSTMState<T>* initial = nullptr) {
  const std::size_t T_ = phi_q.rows(), H = n_heads, dqk = phi_q.cols() / H, dv = v.cols() / H;
  if (phi_k.shape() != phi_q.shape() || v.rows() != T_)
    throw DimensionError("mlstm_parallel: phi_q " + shape_str(phi_q.shape()) + ", phi_k " + shape_str(phi_k.shape()) +
                         ", v " + shape_str(v.shape()));
  if (chunk == 0) throw ConfigError("chunk_size must be >= 1");
  if ((i_pre == nullptr) != (f_pre == nullptr)) throw ContractError("mlstm_parallel: supply both gates or neither");
  Tensor<T> logf;
  if (f_pre) {
    if (f_pre->size() != T_ * H || i_pre->size() != T_ * H) throw DimensionError("mlstm_parallel: gate shape");
    logf = Tensor<T>(Shape{T_, H});
    for (std::size_t i = 0; i < logf.size(); ++i) logf[i] = static_cast<T>(log_sigmoid_value((*f_pre)[i]));
  }
  MLSTMParallelResult<T> r{Tensor<T>(Shape{T_, H * dv}),
                           initial ? *initial : MLSTMState<T>(H, dqk, dv),
                           Tensor<T>(Shape{T_, H}), Tensor<T>(Shape{T_, H}), Tensor<T>(Shape{T_, H})};
  std::vector<T> mcol(T_), dcol(T_), dncol(T_);
  for (std::size_t h = 0; h < H; ++h) {
    kernels::HeadView<T> qv{phi_q.data() + h * dqk, H * dqk}, kv{phi_k.data() + h * dqk, H * dqk},
        vv{v.data() + h * dv, H * dv};
    kernels::mlstm_chunkwise_head(qv, kv, vv, i_pre ? i_pre->data() + h : nullptr, f_pre ? logf.data() + h : nullptr,
                                  H, T_, dqk, dv, chunk, r.state.S_head(h), r.state.z_head(h), r.state.m[h],
                                  r.h.data() + h * dv, H * dv, mcol.data(), dcol.data(), dncol.data(), eps_den);
    for (std::size_t t = 0; t < T_; ++t) {
      r.m[t * H + h] = mcol[t];
      r.den[t * H + h] = dcol[t];
      r.denom[t * H + h] = dncol[t];
    }
  }
  r.state.steps += T_;
  return r;
}

namespace kernels {

/// Gradient of the mLSTM read for one head in its quadratic (attention-like)
/// form, with the stabilizer treated as a constant. The output is invariant to
/// the stabilizer whenever the floor is inactive, so this is the exact
/// gradient of the chunkwise forward pass that produced (m, den, denom, h).
template <class T>
void mlstm_backward_head(HeadView<T> q, HeadView<T> k, HeadView<T> v, const T* i_pre, const T* log_f,
                         std::size_t gstride, std::size_t T_, std::size_t dqk, std::size_t dv, const T* m,
                         const T* den, const T* denom, const T* h, std::size_t hstride, const T* gh, T* gq, T* gk,
                         T* gv, T* g_i, T* g_logf, T eps) {
  std::vector<T> F(T_), dF(T_, T(0));
  T acc = 0;
  for (std::size_t t = 0; t < T_; ++t) {
    acc += log_f ? log_f[t * gstride] : T(0);
    F[t] = acc;
  }
  auto ig = [&](std::size_t s) { return i_pre ? i_pre[s * gstride] : T(0); };
  std::vector<T> dnum(dv);
  for (std::size_t t = 0; t < T_; ++t) {
    const T* ght = gh + t * hstride;
    const T* ht = h + t * hstride;
    const T mt = m[t * gstride];
    const T dn = denom[t * gstride];
    for (std::size_t c = 0; c < dv; ++c) dnum[c] = ght[c] / dn;
    const bool floored = std::abs(den[t * gstride]) < eps * std::exp(-mt);
    const T sgn = den[t * gstride] < 0 ? T(-1) : T(1);
    const T dden = floored ? T(0) : -dot(ght, ht, dv) / dn * sgn;
    const T* qt = q.row(t);
    for (std::size_t s = 0; s <= t; ++s) {
      const T logd = F[t] - F[s] + ig(s) - mt;
      const T D = std::exp(logd);
      const T* ks = k.row(s);
      const T* vs = v.row(s);
      const T qk = dot(qt, ks, dqk);
      const T A = qk * D;
      const T dA = dot(dnum.data(), vs, dv) + dden;
      if (gv) axpy(A, dnum.data(), gv + s * hstride, dv);
      const T dqk_ = dA * D;
      if (gq) axpy(dqk_, ks, gq + t * (q.stride), dqk);
      if (gk) axpy(dqk_, qt, gk + s * (k.stride), dqk);
      const T dlogd = dA * A;
      if (g_i) g_i[s * gstride] += dlogd;
      dF[t] += dlogd;
      dF[s] -= dlogd;
    }
    OpCounter::add_mixing(static_cast<std::uint64_t>(t + 1) * 2 * (dqk + dv));
  }
  if (g_logf) {
    T run = 0;
    for (std::size_t r = T_; r-- > 0;) {
      run += dF[r];
      g_logf[r * gstride] += run;
    }
  }
}

}  // namespace kernels

/// Differentiable chunkwise-parallel mLSTM over all heads, starting from the
/// zero state. Gates may be null (i = f = 1: causal linear attention).
template <class T>
Var<T> mlstm(Tape<T>& tape, const Var<T>& phi_q, const Var<T>& phi_k, const Var<T>& v, const Var<T>& i_pre,
             const Var<T>& f_pre, std::size_t n_heads, std::size_t chunk, T eps_den,
             MLSTMState<T>* final_state = nullptr, Tensor<T>* m_trace = nullptr) {
  auto res = mlstm_parallel(phi_q->value, phi_k->value, v->value, i_pre ? &i_pre->value : nullptr,
                            f_pre ? &f_pre->value : nullptr, n_heads, chunk, eps_den);
  if (final_state) *final_state = res.state;
  if (m_trace) *m_trace = res.m;
  std::vector<Var<T>> inputs{phi_q, phi_k, v};
  if (i_pre) inputs.push_back(i_pre);
  if (f_pre) inputs.push_back(f_pre);
  Tensor<T> hval = res.h;
  return tape.record(
      std::move(hval), inputs,
      [phi_q, phi_k, v, i_pre, f_pre, n_heads, eps_den, m = std::move(res.m), den = std::move(res.den),
       denom = std::move(res.denom), h = std::move(res.h)](const Tensor<T>& g) {
        const std::size_t T_ = phi_q->value.rows(), H = n_heads;
        const std::size_t dqk = phi_q->value.cols() / H, dv = v->value.cols() / H;
        Tensor<T> logf, glogf;
        if (f_pre) {
          logf = Tensor<T>(Shape{T_, H});
          for (std::size_t i = 0; i < logf.size(); ++i) logf[i] = static_cast<T>(log_sigmoid_value(f_pre->value[i]));
          glogf = Tensor<T>(Shape{T_, H});
        }
        T* gi = tracks(i_pre) ? i_pre->grad_buffer().data() : nullptr;
        for (std::size_t hh = 0; hh < H; ++hh) {
          kernels::HeadView<T> qv{phi_q->value.data() + hh * dqk, H * dqk}, kv{phi_k->value.data() + hh * dqk, H * dqk},
              vv{v->value.data() + hh * dv, H * dv};
          kernels::mlstm_backward_head(
              qv, kv, vv, i_pre ? i_pre->value.data() + hh : nullptr, f_pre ? logf.data() + hh : nullptr, H, T_, dqk,
              dv, m.data() + hh, den.data() + hh, denom.data() + hh, h.data() + hh * dv, H * dv, g.data() + hh * dv,
              tracks(phi_q) ? phi_q->grad_buffer().data() + hh * dqk : nullptr,
              tracks(phi_k) ? phi_k->grad_buffer().data() + hh * dqk : nullptr,
              tracks(v) ? v->grad_buffer().data() + hh * dv : nullptr, gi ? gi + hh : nullptr,
              f_pre ? glogf.data() + hh : nullptr, eps_den);
        }
        if (tracks(f_pre)) {
          auto& gf = f_pre->grad_buffer();
          for (std::size_t i = 0; i < gf.size(); ++i) {
            const T s = T(1) / (T(1) + std::exp(f_pre->value[i]));  // d log sigma / dx = 1 - sigma
            gf[i] += glogf[i] * s;
          }
        }
      });
}

// ---------------------------------------------------------------------------
// Layer-level mixer: parameters, parallel forward and single-step decode
// ---------------------------------------------------------------------------

/// One layer's mixer parameters. Pointers absent for a given kind stay null.
/// Shapes: wq/wk [d_model x H*d_qk], wv [d_model x H*d_v], wo [H*d_v x d_model],
/// phi_q/phi_k [H x d_qk x d_qk], gate_* [H x gate_width].
template <class T>
struct MixerParams {
  Var<T> wq, wk, wv, wo;
  Var<T> phi_q, phi_k;
  Var<T> gate_i, gate_f, gate_o;
};

struct MixerOptions {
  std::optional<double> force_output_gate;  // overrides o_t when set
};

template <class T>
struct MixerTrace {
  Tensor<T> k_rot, v;            // post-RoPE keys and values (cache prefill)
  MLSTMState<T> state;           // recurrent state after the sequence
  Tensor<T> output_gate;         // [T x H] when the kind has an output gate
};

template <class T>
struct MixerForward {
  Var<T> pre_out;  // fused head outputs before W_out [T x H*d_v]
  Var<T> out;      // after W_out [T x d_model]
};

template <class T>
std::tuple<Var<T>, Var<T>, Var<T>> project_qkv(Tape<T>& tape, const Var<T>& x, const MixerParams<T>& p) {
  return {matmul(tape, x, p.wq), matmul(tape, x, p.wk), matmul(tape, x, p.wv)};
}

template <class T>
Var<T> gate_preact(Tape<T>& tape, const Var<T>& x, const Var<T>& q, const Var<T>& k, const Var<T>& v,
                   const Var<T>& w, const MixerConfig& cfg) {
  if (cfg.gate_input_mode == GateInputMode::concat_qkv) return head_gate(tape, q, k, v, w, cfg.n_heads);
  return matmul(tape, x, transpose(tape, w));
}

/// o_t = sigmoid(gate_input . w_og), one scalar per head.
template <class T>
Var<T> output_gate(Tape<T>& tape, const Var<T>& x, const Var<T>& q, const Var<T>& k, const Var<T>& v,
                   const Var<T>& w_og, const MixerConfig& cfg) {
  return sigmoid(tape, gate_preact(tape, x, q, k, v, w_og, cfg));
}

/// Parallel-mode forward of one mixer over a whole sequence.
template <class T>
MixerForward<T> mixer_forward(Tape<T>& tape, const Var<T>& x, const MixerParams<T>& p, const MixerConfig& cfg,
                              MixerKind kind, const MixerOptions& opts = {}, MixerTrace<T>* trace = nullptr) {
  const std::size_t H = cfg.n_heads, T_ = x->value.rows();
  auto [q, k, v] = project_qkv(tape, x, p);
  auto qr = rope(tape, q, H, cfg.d_qk, cfg.rope_base);
  auto kr = rope(tape, k, H, cfg.d_qk, cfg.rope_base);
  if (trace) {
    trace->k_rot = kr->value;
    trace->v = v->value;
  }

  Var<T> local, global;
  if (uses_attention(kind)) {
    const bool full = kind == MixerKind::softmax_full;
    local = causal_attention(tape, qr, kr, v, H, full ? kUnboundedWindow : cfg.window, full ? 0 : cfg.n_sinks);
  }
  if (uses_recurrence(kind)) {
    auto fq = feature_map(tape, qr, p.phi_q, H);
    auto fk = feature_map(tape, kr, p.phi_k, H);
    Var<T> ipre, fpre;
    if (uses_input_forget_gates(kind)) {
      ipre = add_scalar(tape, gate_preact(tape, x, q, k, v, p.gate_i, cfg), static_cast<T>(cfg.input_gate_bias));
      fpre = add_scalar(tape, gate_preact(tape, x, q, k, v, p.gate_f, cfg), static_cast<T>(cfg.forget_gate_bias));
    }
    global = mlstm(tape, fq, fk, v, ipre, fpre, H, cfg.chunk_size, static_cast<T>(cfg.eps_den),
                   trace ? &trace->state : nullptr);
  }

  Var<T> fused;
  if (kind == MixerKind::hybrid) {
    Var<T> o;
    if (opts.force_output_gate) {
      o = constant(Tensor<T>(Shape{T_, H}, static_cast<T>(*opts.force_output_gate)));
    } else {
      o = output_gate(tape, x, q, k, v, p.gate_o, cfg);
    }
    if (trace) trace->output_gate = o->value;
    fused = head_mix(tape, o, global, local, H);
  } else {
    fused = local ? local : global;
  }
  return {fused, matmul(tape, fused, p.wo)};
}

/// Per-layer decoding cache; which members are live depends on the kind.
template <class T>
struct LayerCache {
  KVCache<T> kv;
  SWACache<T> swa;
  MLSTMState<T> state;

  LayerCache() = default;
  LayerCache(const MixerConfig& cfg, MixerKind kind) {
    if (kind == MixerKind::softmax_full) kv = KVCache<T>(cfg.n_heads, cfg.d_qk, cfg.d_v);
    if (kind == MixerKind::swa_only || kind == MixerKind::hybrid)
      swa = SWACache<T>(cfg.n_heads, cfg.d_qk, cfg.d_v, cfg.window, cfg.n_sinks);
    if (uses_recurrence(kind)) state = MLSTMState<T>(cfg.n_heads, cfg.d_qk, cfg.d_v);
  }

  std::size_t live_scalars() const { return kv.live_scalars() + swa.live_scalars() + state.live_scalars(); }
};

/// Merged gate projection M [d_model x H] with x.M == [q k v].w per head.
template <class T>
Tensor<T> merge_gate_projection(const Tensor<T>& wq, const Tensor<T>& wk, const Tensor<T>& wv, const Tensor<T>& w_gate,
                                const MixerConfig& cfg) {
  if (cfg.gate_input_mode != GateInputMode::concat_qkv)
    throw ContractError("merge_gate_projection requires gate_input_mode = concat_qkv");
  const std::size_t D = wq.dim(0), H = cfg.n_heads, dq = cfg.d_qk, dv = cfg.d_v, G = 2 * dq + dv;
  if (w_gate.size() != H * G) throw DimensionError("merge_gate_projection: gate weights " + shape_str(w_gate.shape()));
  Tensor<T> M(Shape{D, H});
  for (std::size_t r = 0; r < D; ++r)
    for (std::size_t h = 0; h < H; ++h) {
      const T* w = w_gate.data() + h * G;
      T s = kernels::dot(wq.data() + r * H * dq + h * dq, w, dq) + kernels::dot(wk.data() + r * H * dq + h * dq, w + dq, dq) +
            kernels::dot(wv.data() + r * H * dv + h * dv, w + 2 * dq, dv);
      M[r * H + h] = s;
    }
  return M;
}

/// Gate projections folded into x-space, used by the decode path.
template <class T>
struct MergedGates {
  Tensor<T> i, f, o;  // [d_model x H] each, empty when unused
};

namespace detail {

template <class T>
void row_times(const T* x, const Tensor<T>& w, T* out) {
  kernels::gemm_nn(1, w.dim(0), w.dim(1), x, w.data(), out, false);
}

template <class T>
void head_gate_row(const T* q, const T* k, const T* v, const Tensor<T>& w, const MixerConfig& cfg, T* out) {
  const std::size_t dq = cfg.d_qk, dv = cfg.d_v, G = 2 * dq + dv;
  for (std::size_t h = 0; h < cfg.n_heads; ++h) {
    const T* wh = w.data() + h * G;
    out[h] = kernels::dot(q + h * dq, wh, dq) + kernels::dot(k + h * dq, wh + dq, dq) + kernels::dot(v + h * dv, wh + 2 * dq, dv);
  }
}

template <class T>
void gate_row(const T* x, const T* q, const T* k, const T* v, const Tensor<T>& w, const Tensor<T>* merged,
              const MixerConfig& cfg, T* out) {
  if (merged && !merged->empty()) {
    row_times(x, *merged, out);
  } else if (cfg.gate_input_mode == GateInputMode::concat_qkv) {
    head_gate_row(q, k, v, w, cfg, out);
  } else {
    const std::size_t D = cfg.d_model;
    for (std::size_t h = 0; h < cfg.n_heads; ++h) out[h] = kernels::dot(x, w.data() + h * D, D);
  }
}

template <class T>
void feature_row(const T* x, const Tensor<T>& m, std::size_t H, std::size_t d, T* out) {
  for (std::size_t h = 0; h < H; ++h) {
    kernels::gemm_nn(1, d, d, x + h * d, m.data() + h * d * d, out + h * d, false);
    kernels::softmax_inplace(out + h * d, d);
  }
}

}  // namespace detail

/// Single-token decode step of one mixer layer at absolute position `pos`:
/// project, RoPE, run the branches the kind uses on the same q/k/v, fuse with
/// the output gate and apply W_out. Advances every live cache exactly once.
template <class T>
std::vector<T> mixer_step(std::span<const T> x, const MixerParams<T>& p, const MixerConfig& cfg, MixerKind kind,
                          LayerCache<T>& cache, std::size_t pos, const MixerOptions& opts = {},
                          const MergedGates<T>* merged = nullptr, std::vector<T>* gate_out = nullptr) {
  const std::size_t H = cfg.n_heads, dq = cfg.d_qk, dv = cfg.d_v, D = cfg.d_model;
  if (x.size() != D) throw DimensionError("mixer_step: input width " + std::to_string(x.size()));
  if (kind == MixerKind::hybrid && cache.swa.length() != cache.state.steps)
    throw ContractError("hybrid cache desync: SWA cache at " + std::to_string(cache.swa.length()) +
                        " tokens, mLSTM state at " + std::to_string(cache.state.steps));
  std::vector<T> q(H * dq), k(H * dq), v(H * dv);
  detail::row_times(x.data(), p.wq->value, q.data());
  detail::row_times(x.data(), p.wk->value, k.data());
  detail::row_times(x.data(), p.wv->value, v.data());
  std::vector<T> qr = q, kr = k;
  kernels::rope_row(qr.data(), H, dq, pos, cfg.rope_base);
  kernels::rope_row(kr.data(), H, dq, pos, cfg.rope_base);

  std::vector<T> local(H * dv), global(H * dv);
  if (kind == MixerKind::softmax_full) {
    cache.kv.append(kr, v);
    softmax_attention<T>(qr, cache.kv, local);
  } else if (kind == MixerKind::swa_only || kind == MixerKind::hybrid) {
    cache.swa.append(kr, v);
    swa_attention<T>(qr, cache.swa, H, dq, dv, local);
  }

  if (uses_recurrence(kind)) {
    std::vector<T> fq(H * dq), fk(H * dq);
    detail::feature_row(qr.data(), p.phi_q->value, H, dq, fq.data());
    detail::feature_row(kr.data(), p.phi_k->value, H, dq, fk.data());
    std::vector<T> ig(H, T(0)), fg(H, T(0));
    const bool gated = uses_input_forget_gates(kind);
    if (gated) {
      detail::gate_row(x.data(), q.data(), k.data(), v.data(), p.gate_i->value, merged ? &merged->i : nullptr, cfg,
                       ig.data());
      detail::gate_row(x.data(), q.data(), k.data(), v.data(), p.gate_f->value, merged ? &merged->f : nullptr, cfg,
                       fg.data());
    }
    auto& st = cache.state;
    for (std::size_t h = 0; h < H; ++h) {
      if (gated) {
        mlstm_step(st.S_head(h), st.z_head(h), st.m[h], fq.data() + h * dq, fk.data() + h * dq, v.data() + h * dv,
                   ig[h] + static_cast<T>(cfg.input_gate_bias), fg[h] + static_cast<T>(cfg.forget_gate_bias), dq, dv,
                   global.data() + h * dv, static_cast<T>(cfg.eps_den));
      } else {
        linear_attention_step(st.S_head(h), st.z_head(h), fq.data() + h * dq, fk.data() + h * dq, v.data() + h * dv,
                              dq, dv, global.data() + h * dv, static_cast<T>(cfg.eps_den));
      }
    }
    ++st.steps;
    if (!st.all_finite()) throw NumericError("mLSTM state became non-finite at position " + std::to_string(pos));
  }

  std::vector<T> fused(H * dv);
  if (kind == MixerKind::hybrid) {
    std::vector<T> o(H);
    if (opts.force_output_gate) {
      std::fill(o.begin(), o.end(), static_cast<T>(*opts.force_output_gate));
    } else {
      detail::gate_row(x.data(), q.data(), k.data(), v.data(), p.gate_o->value, merged ? &merged->o : nullptr, cfg,
                       o.data());
      for (auto& g : o) g = T(1) / (T(1) + std::exp(-g));
    }
    if (gate_out) *gate_out = o;
    for (std::size_t h = 0; h < H; ++h)
      for (std::size_t j = 0; j < dv; ++j) {
        const std::size_t i = h * dv + j;
        fused[i] = o[h] * global[i] + (T(1) - o[h]) * local[i];
      }
  } else {
    fused = uses_attention(kind) ? local : global;
  }
  std::vector<T> out(D);
  detail::row_times(fused.data(), p.wo->value, out.data());
  return out;
}

/// The gated hybrid's decode step (mixer_step for MixerKind::hybrid).
template <class T>
std::vector<T> hybrid_step(std::span<const T> x, const MixerParams<T>& p, const MixerConfig& cfg, LayerCache<T>& cache,
                           std::size_t pos, const MixerOptions& opts = {}, const MergedGates<T>* merged = nullptr) {
  return mixer_step(x, p, cfg, MixerKind::hybrid, cache, pos, opts, merged);
}

}  // namespace xdistill
