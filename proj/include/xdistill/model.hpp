#pragma once

// Decoder stacks: token embedding -> L pre-norm residual blocks (mixer, then
// SwiGLU MLP) -> final RMS norm -> unembedding. The teacher uses full softmax
// attention; students swap the mixer while keeping every other weight.

#include <nlohmann/json.hpp>

#include <functional>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "xdistill/checkpoint.hpp"
#include "xdistill/corpus.hpp"
#include "xdistill/mixers.hpp"
#include "xdistill/optim.hpp"
#include "xdistill/rng.hpp"

namespace xdistill {

struct ModelConfig {
  std::size_t vocab_size = 256;
  std::size_t d_model = 128;
  std::size_t n_layers = 4;
  std::size_t n_heads = 4;
  std::size_t d_qk = 32;
  std::size_t d_v = 32;
  std::size_t mlp_hidden = 512;
  std::size_t max_seq_len = 512;
  MixerKind mixer_kind = MixerKind::softmax_full;
  std::size_t window = 64;
  std::size_t n_sinks = 4;
  std::size_t chunk_size = 64;
  double rope_base = 10000.0;
  GateInputMode gate_input_mode = GateInputMode::concat_qkv;
  double input_gate_bias = 0.0;
  double forget_gate_bias = 4.59511985013459;
  double eps_den = 1e-12;
  double norm_eps = 1e-6;

  MixerConfig mixer() const {
    MixerConfig m;
    m.d_model = d_model;
    m.n_heads = n_heads;
    m.d_qk = d_qk;
    m.d_v = d_v;
    m.window = window;
    m.n_sinks = n_sinks;
    m.chunk_size = chunk_size;
    m.rope_base = rope_base;
    m.gate_input_mode = gate_input_mode;
    m.input_gate_bias = input_gate_bias;
    m.forget_gate_bias = forget_gate_bias;
    m.eps_den = eps_den;
    return m;
  }

  void validate() const {
    XD_REQUIRE(vocab_size >= 2 && n_layers >= 1 && mlp_hidden >= 1 && max_seq_len >= 1, ConfigError,
               "model dimensions must be positive");
    mixer().validate();
  }

  bool operator==(const ModelConfig&) const = default;
};

inline void to_json(nlohmann::json& j, const ModelConfig& c) {
  j = {{"vocab_size", c.vocab_size},
       {"d_model", c.d_model},
       {"n_layers", c.n_layers},
       {"n_heads", c.n_heads},
       {"d_qk", c.d_qk},
       {"d_v", c.d_v},
       {"mlp_hidden", c.mlp_hidden},
       {"max_seq_len", c.max_seq_len},
       {"mixer_kind", to_string(c.mixer_kind)},
       {"window", c.window},
       {"n_sinks", c.n_sinks},
       {"chunk_size", c.chunk_size},
       {"rope_base", c.rope_base},
       {"gate_input_mode", to_string(c.gate_input_mode)},
       {"input_gate_bias", c.input_gate_bias},
       {"forget_gate_bias", c.forget_gate_bias},
       {"eps_den", c.eps_den},
       {"norm_eps", c.norm_eps}};
}

inline void from_json(const nlohmann::json& j, ModelConfig& c) {
  detail::StrictReader r(j, "model");
  std::string kind = to_string(c.mixer_kind), mode = to_string(c.gate_input_mode);
  r.get("vocab_size", c.vocab_size)
      .get("d_model", c.d_model)
      .get("n_layers", c.n_layers)
      .get("n_heads", c.n_heads)
      .get("d_qk", c.d_qk)
      .get("d_v", c.d_v)
      .get("mlp_hidden", c.mlp_hidden)
      .get("max_seq_len", c.max_seq_len)
      .get("mixer_kind", kind)
      .get("window", c.window)
      .get("n_sinks", c.n_sinks)
      .get("chunk_size", c.chunk_size)
      .get("rope_base", c.rope_base)
      .get("gate_input_mode", mode)
      .get("input_gate_bias", c.input_gate_bias)
      .get("forget_gate_bias", c.forget_gate_bias)
      .get("eps_den", c.eps_den)
      .get("norm_eps", c.norm_eps);
  r.finish();
  c.mixer_kind = mixer_kind_from_string(kind);
  c.gate_input_mode = gate_input_mode_from_string(mode);
}

inline std::string layer_prefix(std::size_t l) { return "layers." + std::to_string(l) + "."; }

/// Parameters introduced by linearization (feature maps and gates).
inline bool is_new_param(const std::string& name) {
  return name.find(".mixer.phi_") != std::string::npos || name.find(".mixer.gate_") != std::string::npos;
}
inline bool is_mixer_param(const std::string& name) { return name.find(".mixer.") != std::string::npos; }

enum class FreezeSet { new_params_only, mixers_only, full };

inline const char* to_string(FreezeSet f) {
  switch (f) {
    case FreezeSet::new_params_only: return "new_params_only";
    case FreezeSet::mixers_only: return "mixers_only";
    case FreezeSet::full: return "full";
  }
  return "?";
}
inline FreezeSet freeze_set_from_string(const std::string& s) {
  for (auto f : {FreezeSet::new_params_only, FreezeSet::mixers_only, FreezeSet::full})
    if (s == to_string(f)) return f;
  throw ConfigError("unknown freeze_set '" + s + "'");
}

/// Whether parameter `name` is trainable under freeze set `f`.
inline bool trainable_under(FreezeSet f, const std::string& name) {
  switch (f) {
    case FreezeSet::new_params_only: return is_new_param(name);
    case FreezeSet::mixers_only: return is_mixer_param(name);
    case FreezeSet::full: return true;
  }
  return false;
}

/// Names and shapes of every parameter of an architecture, sorted by name.
inline std::map<std::string, Shape> parameter_shapes(const ModelConfig& c) {
  std::map<std::string, Shape> s;
  const std::size_t D = c.d_model, H = c.n_heads, G = c.mixer().gate_width();
  s["embed"] = {c.vocab_size, D};
  s["final_norm"] = {D};
  s["unembed"] = {D, c.vocab_size};
  for (std::size_t l = 0; l < c.n_layers; ++l) {
    const auto p = layer_prefix(l);
    s[p + "norm1"] = {D};
    s[p + "norm2"] = {D};
    s[p + "mixer.wq"] = {D, H * c.d_qk};
    s[p + "mixer.wk"] = {D, H * c.d_qk};
    s[p + "mixer.wv"] = {D, H * c.d_v};
    s[p + "mixer.wo"] = {H * c.d_v, D};
    if (uses_recurrence(c.mixer_kind)) {
      s[p + "mixer.phi_q"] = {H, c.d_qk, c.d_qk};
      s[p + "mixer.phi_k"] = {H, c.d_qk, c.d_qk};
    }
    if (uses_input_forget_gates(c.mixer_kind)) {
      s[p + "mixer.gate_i"] = {H, G};
      s[p + "mixer.gate_f"] = {H, G};
    }
    if (uses_output_gate(c.mixer_kind)) s[p + "mixer.gate_o"] = {H, G};
    s[p + "mlp.w_gate"] = {D, c.mlp_hidden};
    s[p + "mlp.w_up"] = {D, c.mlp_hidden};
    s[p + "mlp.w_down"] = {c.mlp_hidden, D};
  }
  return s;
}

template <class T>
class Model {
 public:
  ModelConfig cfg;
  std::map<std::string, Var<T>> params;
  nlohmann::json lineage = nlohmann::json::object();

  /// Fresh model: projections ~ N(0, 1/fan_in), residual output projections
  /// additionally scaled by 1/sqrt(2L), norms = 1, feature maps = identity,
  /// gate weights = 0.
  static Model init(const ModelConfig& cfg, std::uint64_t seed) {
    cfg.validate();
    Model m;
    m.cfg = cfg;
    Rng rng(seed);
    const double resid = 1.0 / std::sqrt(2.0 * static_cast<double>(cfg.n_layers));
    for (auto& [name, shape] : parameter_shapes(cfg)) {
      Tensor<T> t(shape);
      if (name == "embed") {
        t = rng.normal_tensor<T>(shape, 1.0);
      } else if (shape.size() == 1) {
        t.fill(T(1));
      } else if (name.find(".phi_") != std::string::npos) {
        set_identity_heads(t);
      } else if (name.find(".gate_") != std::string::npos) {
        // zeros
      } else {
        double sd = 1.0 / std::sqrt(static_cast<double>(shape[0]));
        if (name.ends_with("mixer.wo") || name.ends_with("mlp.w_down")) sd *= resid;
        t = rng.normal_tensor<T>(shape, sd);
      }
      m.params.emplace(name, make_var(std::move(t), false));
    }
    m.lineage = {{"init_seed", seed}};
    return m;
  }

  static void set_identity_heads(Tensor<T>& t) {
    t.fill(T(0));
    const std::size_t H = t.dim(0), d = t.dim(1);
    for (std::size_t h = 0; h < H; ++h)
      for (std::size_t i = 0; i < d; ++i) t[h * d * d + i * d + i] = T(1);
  }

  const Var<T>& p(const std::string& name) const {
    auto it = params.find(name);
    if (it == params.end()) throw ContractError("model has no parameter '" + name + "'");
    return it->second;
  }

  MixerParams<T> mixer_params(std::size_t l) const {
    const auto pre = layer_prefix(l) + "mixer.";
    auto opt = [&](const char* n) {
      auto it = params.find(pre + n);
      return it == params.end() ? Var<T>{} : it->second;
    };
    return {p(pre + "wq"), p(pre + "wk"), p(pre + "wv"), p(pre + "wo"), opt("phi_q"), opt("phi_k"),
            opt("gate_i"), opt("gate_f"), opt("gate_o")};
  }

  std::size_t parameter_count() const {
    std::size_t n = 0;
    for (auto& [k, v] : params) n += v->value.size();
    return n;
  }

  /// Marks parameters selected by `pred` as trainable and all others frozen.
  void set_trainable(const std::function<bool(const std::string&)>& pred) {
    for (auto& [name, v] : params) {
      v->requires_grad = pred(name);
      v->zero_grad();
    }
  }

  std::vector<Var<T>> trainable() const {
    std::vector<Var<T>> out;
    for (auto& [name, v] : params)
      if (v->requires_grad) out.push_back(v);
    return out;
  }

  Model clone() const {
    Model m;
    m.cfg = cfg;
    m.lineage = lineage;
    for (auto& [name, v] : params) m.params.emplace(name, make_var(v->value, v->requires_grad));
    return m;
  }

  template <class U>
  Model<U> cast() const {
    Model<U> m;
    m.cfg = cfg;
    m.lineage = lineage;
    for (auto& [name, v] : params) m.params.emplace(name, make_var(v->value.template cast<U>(), false));
    return m;
  }

  Checkpoint to_checkpoint() const {
    Checkpoint c;
    c.config = cfg;
    c.lineage = lineage;
    c.dtype = dtype_of<T>();
    for (auto& [name, v] : params) c.tensors.emplace(name, v->value.template cast<double>());
    return c;
  }

  /// Rebuilds a model, requiring every parameter of the configured
  /// architecture to be present exactly once with the right shape.
  static Model from_checkpoint(const Checkpoint& c) {
    Model m;
    try {
      m.cfg = c.config.get<ModelConfig>();
    } catch (const nlohmann::json::exception& e) {
      throw IoError(std::string("checkpoint config unreadable: ") + e.what());
    }
    m.cfg.validate();
    m.lineage = c.lineage;
    auto shapes = parameter_shapes(m.cfg);
    for (auto& [name, shape] : shapes) {
      auto it = c.tensors.find(name);
      if (it == c.tensors.end()) throw ContractError("checkpoint is missing parameter '" + name + "'");
      if (it->second.shape() != shape)
        throw DimensionError("parameter '" + name + "' has shape " + shape_str(it->second.shape()) + ", expected " +
                             shape_str(shape));
      m.params.emplace(name, make_var(it->second.template cast<T>(), false));
    }
    for (auto& [name, t] : c.tensors)
      if (!shapes.count(name)) throw ContractError("checkpoint has unexpected tensor '" + name + "'");
    return m;
  }
};

// ---------------------------------------------------------------------------
// Parallel-mode forward
// ---------------------------------------------------------------------------

struct ForwardOptions {
  MixerOptions mixer;
  bool capture = false;
};

template <class T>
struct LayerCapture {
  Tensor<T> mixer_input;   // normalized block input fed to the mixer [T x d_model]
  Tensor<T> mixer_output;  // fused head outputs before W_out [T x H*d_v]
  MixerTrace<T> trace;
};

template <class T>
struct ForwardResult {
  Var<T> logits;
  std::vector<LayerCapture<T>> layers;
};

template <class T>
Var<T> mlp(Tape<T>& tape, const Var<T>& x, const Model<T>& m, std::size_t l) {
  const auto pre = layer_prefix(l) + "mlp.";
  auto g = silu(tape, matmul(tape, x, m.p(pre + "w_gate")));
  auto u = matmul(tape, x, m.p(pre + "w_up"));
  return matmul(tape, mul(tape, g, u), m.p(pre + "w_down"));
}

inline void check_tokens(std::span<const std::uint32_t> tokens, const ModelConfig& c) {
  if (tokens.empty()) throw ContractError("empty token sequence");
  if (tokens.size() > c.max_seq_len)
    throw ContractError("sequence length " + std::to_string(tokens.size()) + " exceeds max_seq_len " +
                        std::to_string(c.max_seq_len));
  for (auto t : tokens)
    if (t >= c.vocab_size)
      throw ContractError("token id " + std::to_string(t) + " >= vocab_size " + std::to_string(c.vocab_size));
}

template <class T>
ForwardResult<T> forward(Tape<T>& tape, const Model<T>& m, std::span<const std::uint32_t> tokens,
                         const ForwardOptions& opts = {}) {
  const auto& c = m.cfg;
  check_tokens(tokens, c);
  const auto mc = c.mixer();
  const T eps = static_cast<T>(c.norm_eps);
  ForwardResult<T> r;
  auto x = gather_rows(tape, m.p("embed"), tokens);
  for (std::size_t l = 0; l < c.n_layers; ++l) {
    const auto pre = layer_prefix(l);
    auto xn = rmsnorm(tape, x, m.p(pre + "norm1"), eps);
    LayerCapture<T> cap;
    auto mix = mixer_forward(tape, xn, m.mixer_params(l), mc, c.mixer_kind, opts.mixer, opts.capture ? &cap.trace : nullptr);
    if (opts.capture) {
      cap.mixer_input = xn->value;
      cap.mixer_output = mix.pre_out->value;
      r.layers.push_back(std::move(cap));
    }
    auto h = add(tape, x, mix.out);
    x = add(tape, h, mlp(tape, rmsnorm(tape, h, m.p(pre + "norm2"), eps), m, l));
  }
  r.logits = matmul(tape, rmsnorm(tape, x, m.p("final_norm"), eps), m.p("unembed"));
  return r;
}

/// Inference-only logits [T x vocab].
template <class T>
Tensor<T> logits(const Model<T>& m, std::span<const std::uint32_t> tokens, const ForwardOptions& opts = {}) {
  Tape<T> tape;
  return forward(tape, m, tokens, opts).logits->value;
}

/// Mean next-token cross-entropy over all positions of the given sequences.
template <class T>
double eval_ce(const Model<T>& m, const std::vector<Sequence>& seqs, const ForwardOptions& opts = {}) {
  double total = 0;
  std::size_t n = 0;
  for (auto& s : seqs) {
    auto lg = logits(m, std::span<const std::uint32_t>(s.tokens.data(), s.tokens.size() - 1), opts);
    for (std::size_t t = 0; t + 1 < s.tokens.size(); ++t) {
      const T* row = lg.data() + t * lg.cols();
      const double mx = *std::max_element(row, row + lg.cols());
      double z = 0;
      for (std::size_t j = 0; j < lg.cols(); ++j) z += std::exp(static_cast<double>(row[j]) - mx);
      total += mx + std::log(z) - static_cast<double>(row[s.tokens[t + 1]]);
      ++n;
    }
  }
  return n ? total / static_cast<double>(n) : 0.0;
}

/// Fraction of next tokens that are the argmax prediction.
template <class T>
double next_token_accuracy(const Model<T>& m, const std::vector<Sequence>& seqs, const ForwardOptions& opts = {}) {
  std::size_t hit = 0, n = 0;
  for (auto& s : seqs) {
    auto lg = logits(m, std::span<const std::uint32_t>(s.tokens.data(), s.tokens.size() - 1), opts);
    for (std::size_t t = 0; t + 1 < s.tokens.size(); ++t, ++n) {
      const T* row = lg.data() + t * lg.cols();
      hit += static_cast<std::uint32_t>(std::max_element(row, row + lg.cols()) - row) == s.tokens[t + 1];
    }
  }
  return n ? static_cast<double>(hit) / static_cast<double>(n) : 0.0;
}

/// Fraction of planted recall answers predicted correctly (argmax at the
/// query key position).
template <class T>
double recall_accuracy(const Model<T>& m, const std::vector<Sequence>& seqs, const std::vector<RecallPair>& pairs,
                       const ForwardOptions& opts = {}) {
  if (pairs.empty()) return 0.0;
  std::map<std::size_t, std::vector<const RecallPair*>> by_seq;
  for (auto& p : pairs) by_seq[p.seq].push_back(&p);
  std::size_t hit = 0;
  for (auto& [si, ps] : by_seq) {
    auto& tok = seqs.at(si).tokens;
    auto lg = logits(m, std::span<const std::uint32_t>(tok.data(), tok.size()), opts);
    for (auto* p : ps) {
      const T* row = lg.data() + (p->answer_pos - 1) * lg.cols();
      const auto pred = static_cast<std::uint32_t>(std::max_element(row, row + lg.cols()) - row);
      hit += pred == p->value;
    }
  }
  return static_cast<double>(hit) / static_cast<double>(pairs.size());
}

// ---------------------------------------------------------------------------
// Recurrent decoding
// ---------------------------------------------------------------------------

namespace detail {

template <class T>
void rmsnorm_row(const T* x, const Tensor<T>& g, T* out, std::size_t n, T eps) {
  const T inv = T(1) / std::sqrt(kernels::dot(x, x, n) / static_cast<T>(n) + eps);
  for (std::size_t j = 0; j < n; ++j) out[j] = x[j] * inv * g[j];
}

}  // namespace detail

/// One sequence's decoding state: per-layer caches plus the next position.
/// Prefill runs the parallel forward and seeds the caches from it; each step
/// then consumes one token.
template <class T>
class DecodeSession {
 public:
  explicit DecodeSession(const Model<T>& m, MixerOptions opts = {}, bool merge_gates = true)
      : m_(m), opts_(opts), mc_(m.cfg.mixer()) {
    for (std::size_t l = 0; l < m.cfg.n_layers; ++l) {
      caches_.emplace_back(mc_, m.cfg.mixer_kind);
      MergedGates<T> g;
      if (merge_gates && mc_.gate_input_mode == GateInputMode::concat_qkv && uses_recurrence(m.cfg.mixer_kind)) {
        auto p = m.mixer_params(l);
        if (p.gate_i) g.i = merge_gate_projection(p.wq->value, p.wk->value, p.wv->value, p.gate_i->value, mc_);
        if (p.gate_f) g.f = merge_gate_projection(p.wq->value, p.wk->value, p.wv->value, p.gate_f->value, mc_);
        if (p.gate_o) g.o = merge_gate_projection(p.wq->value, p.wk->value, p.wv->value, p.gate_o->value, mc_);
      }
      merged_.push_back(std::move(g));
    }
  }

  /// Encodes `tokens` in parallel mode; returns the logits after the last one.
  std::vector<T> prefill(std::span<const std::uint32_t> tokens) {
    if (pos_ != 0) throw ContractError("prefill on a session that already holds tokens");
    Tape<T> tape;
    ForwardOptions fo{opts_, true};
    auto r = forward(tape, m_, tokens, fo);
    const std::size_t n = tokens.size();
    for (std::size_t l = 0; l < m_.cfg.n_layers; ++l) {
      auto& tr = r.layers[l].trace;
      auto& cache = caches_[l];
      for (std::size_t t = 0; t < n; ++t) {
        if (m_.cfg.mixer_kind == MixerKind::softmax_full) cache.kv.append(tr.k_rot.row(t), tr.v.row(t));
        if (m_.cfg.mixer_kind == MixerKind::swa_only || m_.cfg.mixer_kind == MixerKind::hybrid)
          cache.swa.append(tr.k_rot.row(t), tr.v.row(t));
      }
      if (uses_recurrence(m_.cfg.mixer_kind)) cache.state = tr.state;
    }
    pos_ = n;
    const auto& lg = r.logits->value;
    return std::vector<T>(lg.data() + (n - 1) * lg.cols(), lg.data() + n * lg.cols());
  }

  /// Consumes one token at the next position; returns its logits.
  std::vector<T> step(std::uint32_t token) {
    const auto& c = m_.cfg;
    if (token >= c.vocab_size) throw ContractError("token id " + std::to_string(token) + " >= vocab_size");
    if (c.mixer_kind == MixerKind::softmax_full && pos_ >= c.max_seq_len)
      throw ContractError("teacher context overflow: position " + std::to_string(pos_) + " >= max_seq_len " +
                          std::to_string(c.max_seq_len));
    const std::size_t D = c.d_model;
    const T eps = static_cast<T>(c.norm_eps);
    const auto& emb = m_.p("embed")->value;
    std::vector<T> x(emb.data() + token * D, emb.data() + (token + 1) * D), xn(D);
    std::vector<T> g(c.mlp_hidden), u(c.mlp_hidden), y(D);
    for (std::size_t l = 0; l < c.n_layers; ++l) {
      const auto pre = layer_prefix(l);
      detail::rmsnorm_row(x.data(), m_.p(pre + "norm1")->value, xn.data(), D, eps);
      auto mo = mixer_step<T>(xn, m_.mixer_params(l), mc_, c.mixer_kind, caches_[l], pos_, opts_, &merged_[l]);
      for (std::size_t j = 0; j < D; ++j) x[j] += mo[j];
      detail::rmsnorm_row(x.data(), m_.p(pre + "norm2")->value, xn.data(), D, eps);
      kernels::gemm_nn(1, D, c.mlp_hidden, xn.data(), m_.p(pre + "mlp.w_gate")->value.data(), g.data(), false);
      kernels::gemm_nn(1, D, c.mlp_hidden, xn.data(), m_.p(pre + "mlp.w_up")->value.data(), u.data(), false);
      for (std::size_t j = 0; j < c.mlp_hidden; ++j) g[j] = g[j] / (T(1) + std::exp(-g[j])) * u[j];
      kernels::gemm_nn(1, c.mlp_hidden, D, g.data(), m_.p(pre + "mlp.w_down")->value.data(), y.data(), false);
      for (std::size_t j = 0; j < D; ++j) x[j] += y[j];
    }
    detail::rmsnorm_row(x.data(), m_.p("final_norm")->value, xn.data(), D, eps);
    std::vector<T> out(c.vocab_size);
    kernels::gemm_nn(1, D, c.vocab_size, xn.data(), m_.p("unembed")->value.data(), out.data(), false);
    ++pos_;
    return out;
  }

  std::size_t position() const noexcept { return pos_; }
  std::vector<LayerCache<T>>& caches() noexcept { return caches_; }
  const std::vector<LayerCache<T>>& caches() const noexcept { return caches_; }

  /// Scalars currently held by all caches and states.
  std::size_t cache_scalars() const {
    std::size_t n = 0;
    for (auto& c : caches_) n += c.live_scalars();
    return n;
  }

  /// Marks `n` positions as already consumed (used after filling caches
  /// directly, e.g. by the latency benchmark).
  void advance(std::size_t n) { pos_ += n; }

 private:
  const Model<T>& m_;
  MixerOptions opts_;
  MixerConfig mc_;
  std::vector<LayerCache<T>> caches_;
  std::vector<MergedGates<T>> merged_;
  std::size_t pos_ = 0;
};

struct Sampling {
  double temperature = 0.0;  // 0 = greedy
  std::uint64_t seed = 0;
};

/// Index of the largest logit; ties go to the lowest index.
template <class T>
std::uint32_t argmax_token(std::span<const T> logits) {
  std::size_t best = 0;
  for (std::size_t i = 1; i < logits.size(); ++i)
    if (logits[i] > logits[best]) best = i;
  return static_cast<std::uint32_t>(best);
}

template <class T>
std::uint32_t sample_token(std::span<const T> logits, const Sampling& s, Rng& rng) {
  if (s.temperature <= 0.0) return argmax_token(logits);
  const double mx = static_cast<double>(*std::max_element(logits.begin(), logits.end()));
  std::vector<double> w(logits.size());
  for (std::size_t i = 0; i < w.size(); ++i) w[i] = std::exp((static_cast<double>(logits[i]) - mx) / s.temperature);
  return static_cast<std::uint32_t>(rng.categorical(w));
}

/// Prefill in parallel mode, then `n_new` recurrent steps.
template <class T>
TokenSeq generate(const Model<T>& m, const TokenSeq& prompt, std::size_t n_new, const Sampling& s = {},
                  const MixerOptions& opts = {}) {
  if (prompt.empty()) throw ContractError("generate requires a non-empty prompt");
  if (m.cfg.mixer_kind == MixerKind::softmax_full && prompt.size() + n_new > m.cfg.max_seq_len)
    throw ContractError("teacher context overflow: " + std::to_string(prompt.size() + n_new) + " > max_seq_len " +
                        std::to_string(m.cfg.max_seq_len));
  TokenSeq out = prompt;
  if (n_new == 0) return out;
  DecodeSession<T> sess(m, opts);
  Rng rng(s.seed);
  auto lg = sess.prefill(prompt);
  for (std::size_t i = 0; i < n_new; ++i) {
    const auto tok = sample_token<T>(lg, s, rng);
    out.push_back(tok);
    if (i + 1 < n_new) lg = sess.step(tok);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Student initialization and teacher training
// ---------------------------------------------------------------------------

/// Student with the teacher's embeddings, projections, MLPs and norms copied
/// verbatim; feature maps start at identity, gate weights at zero (i = 1,
/// f = 0.99 via the fixed biases, o = 0.5).
template <class T>
Model<T> init_student_from_teacher(const Model<T>& teacher, const ModelConfig& student_cfg) {
  student_cfg.validate();
  const auto& tc = teacher.cfg;
  const auto& sc = student_cfg;
  if (tc.vocab_size != sc.vocab_size || tc.d_model != sc.d_model || tc.n_layers != sc.n_layers ||
      tc.n_heads != sc.n_heads || tc.d_qk != sc.d_qk || tc.d_v != sc.d_v || tc.mlp_hidden != sc.mlp_hidden)
    throw DimensionError("student config does not share the teacher's shapes");
  Model<T> s;
  s.cfg = sc;
  for (auto& [name, shape] : parameter_shapes(sc)) {
    auto it = teacher.params.find(name);
    if (it != teacher.params.end()) {
      if (it->second->value.shape() != shape) throw DimensionError("shape mismatch for '" + name + "'");
      s.params.emplace(name, make_var(it->second->value, false));
      continue;
    }
    Tensor<T> t(shape);
    if (name.find(".phi_") != std::string::npos) Model<T>::set_identity_heads(t);
    s.params.emplace(name, make_var(std::move(t), false));
  }
  s.lineage = {{"teacher_hash", teacher.to_checkpoint().hash()}, {"stage", "init"}};
  return s;
}

/// n_layers * n_heads * (2 d_qk^2 + 3 (2 d_qk + d_v)) for the concat gate input.
inline std::size_t new_parameter_count(const ModelConfig& c) {
  std::size_t n = 0;
  for (auto& [name, shape] : parameter_shapes(c))
    if (is_new_param(name)) n += numel(shape);
  return n;
}

struct TrainConfig {
  std::size_t steps = 2000;
  std::size_t batch = 8;
  LrSchedule schedule = LrSchedule::warmup_cosine(3e-3, 1e-4, 100, 2000);
  AdamWConfig adamw;
  std::uint64_t seed = 1;
  std::size_t log_every = 0;  // 0 disables progress logging
};

struct TrainReport {
  std::vector<double> losses;  // per step
  double final_loss = 0;
  double eval_ce = 0;
  double uniform_ce = 0;
};

/// Batch indices for step `s`: a seeded shuffle per epoch.
class BatchSampler {
 public:
  BatchSampler(std::size_t n, std::uint64_t seed) : n_(n), rng_(seed) { reshuffle(); }
  std::vector<std::size_t> next(std::size_t b) {
    std::vector<std::size_t> out;
    while (out.size() < b) {
      if (pos_ == order_.size()) reshuffle();
      out.push_back(order_[pos_++]);
    }
    return out;
  }

 private:
  void reshuffle() {
    order_.resize(n_);
    for (std::size_t i = 0; i < n_; ++i) order_[i] = i;
    for (std::size_t i = n_; i > 1; --i) std::swap(order_[i - 1], order_[rng_.below(i)]);
    pos_ = 0;
  }
  std::size_t n_;
  Rng rng_;
  std::vector<std::size_t> order_;
  std::size_t pos_ = 0;
};

/// Next-token cross-entropy training of a teacher from scratch.
template <class T>
Model<T> train_teacher(const ModelConfig& cfg, const Dataset& data, const TrainConfig& tc, TrainReport* report = nullptr,
                       std::uint64_t init_seed = 1, const std::function<void(const std::string&)>& log = {}) {
  if (cfg.mixer_kind != MixerKind::softmax_full) throw ConfigError("the teacher must use mixer_kind softmax_full");
  if (data.train.empty()) throw ContractError("training split is empty");
  auto m = Model<T>::init(cfg, init_seed);
  m.set_trainable([](const std::string&) { return true; });
  AdamW<T> opt(m.trainable(), tc.adamw);
  BatchSampler sampler(data.train.size(), tc.seed);
  TrainReport rep;
  for (std::size_t step = 0; step < tc.steps; ++step) {
    double loss_sum = 0;
    for (auto idx : sampler.next(tc.batch)) {
      const auto& tok = data.train[idx].tokens;
      Tape<T> tape;
      auto r = forward(tape, m, std::span<const std::uint32_t>(tok.data(), tok.size() - 1));
      auto loss = cross_entropy(tape, r.logits, std::span<const std::uint32_t>(tok.data() + 1, tok.size() - 1));
      const double lv = static_cast<double>(loss->value.item());
      if (!std::isfinite(lv))
        throw NumericError("teacher training diverged at step " + std::to_string(step) + " (loss " + std::to_string(lv) + ")");
      loss_sum += lv;
      tape.backward(scale(tape, loss, static_cast<T>(1.0 / static_cast<double>(tc.batch))));
    }
    opt.step(tc.schedule.at(step));
    rep.losses.push_back(loss_sum / static_cast<double>(tc.batch));
    if (log && tc.log_every && (step + 1) % tc.log_every == 0)
      log("step " + std::to_string(step + 1) + " loss " + std::to_string(rep.losses.back()));
  }
  m.set_trainable([](const std::string&) { return false; });
  rep.final_loss = rep.losses.empty() ? 0.0 : rep.losses.back();
  rep.eval_ce = data.eval.empty() ? 0.0 : eval_ce(m, data.eval);
  rep.uniform_ce = std::log(static_cast<double>(cfg.vocab_size));
  m.lineage = {{"init_seed", init_seed}, {"train_seed", tc.seed}, {"steps", tc.steps}, {"dataset_hash", data.hash()}};
  if (report) *report = rep;
  return m;
}

}  // namespace xdistill
