#pragma once

// Built-in correctness checks run by `xdistill selftest` and `grad-check`:
// reduction identities between mixers, chunkwise/recurrent agreement, and
// finite-difference gradients through every fused op and both stage losses.

#include <cmath>
#include <functional>
#include <limits>
#include <string>
#include <vector>

#include "xdistill/distill.hpp"
#include "xdistill/gradcheck.hpp"

namespace xdistill {

struct CheckResult {
  std::string name;
  double value = 0;  // max abs difference or max relative gradient error
  double tol = 0;
  bool pass = false;
};

inline nlohmann::json to_json_value(const std::vector<CheckResult>& rs) {
  nlohmann::json a = nlohmann::json::array();
  for (auto& r : rs) a.push_back({{"name", r.name}, {"value", r.value}, {"tol", r.tol}, {"pass", r.pass}});
  return a;
}

namespace selfcheck {

using Td = Tensor<double>;
using V = Var<double>;

inline CheckResult make(std::string name, double value, double tol) {
  return {std::move(name), value, tol, std::isfinite(value) && value < tol};
}

inline Td feature_rows(Rng& rng, std::size_t T, std::size_t H, std::size_t d) {
  Td x = rng.uniform_tensor<double>({T, H * d}, -1.5, 1.5);
  for (std::size_t t = 0; t < T; ++t)
    for (std::size_t h = 0; h < H; ++h) kernels::softmax_inplace(x.data() + t * H * d + h * d, d);
  return x;
}

// Plain causal softmax attention, one position at a time.
inline Td reference_attention(const Td& q, const Td& k, const Td& v, std::size_t H) {
  const std::size_t T = q.rows(), dq = q.cols() / H, dv = v.cols() / H;
  Td out(Shape{T, H * dv});
  for (std::size_t h = 0; h < H; ++h)
    for (std::size_t t = 0; t < T; ++t) {
      std::vector<double> w(t + 1);
      double mx = -std::numeric_limits<double>::infinity();
      for (std::size_t s = 0; s <= t; ++s) {
        double l = 0;
        for (std::size_t i = 0; i < dq; ++i) l += q.at(t, h * dq + i) * k.at(s, h * dq + i);
        w[s] = l / std::sqrt(static_cast<double>(dq));
        mx = std::max(mx, w[s]);
      }
      double z = 0;
      for (auto& x : w) z += (x = std::exp(x - mx));
      for (std::size_t s = 0; s <= t; ++s)
        for (std::size_t j = 0; j < dv; ++j) out.at(t, h * dv + j) += w[s] / z * v.at(s, h * dv + j);
    }
  return out;
}

// Causal linear attention in its quadratic form.
inline Td reference_linear_attention(const Td& fq, const Td& fk, const Td& v, std::size_t H) {
  const std::size_t T = fq.rows(), dq = fq.cols() / H, dv = v.cols() / H;
  Td out(Shape{T, H * dv});
  for (std::size_t h = 0; h < H; ++h)
    for (std::size_t t = 0; t < T; ++t) {
      double den = 0;
      std::vector<double> num(dv, 0.0);
      for (std::size_t s = 0; s <= t; ++s) {
        double a = 0;
        for (std::size_t i = 0; i < dq; ++i) a += fq.at(t, h * dq + i) * fk.at(s, h * dq + i);
        den += a;
        for (std::size_t j = 0; j < dv; ++j) num[j] += a * v.at(s, h * dv + j);
      }
      for (std::size_t j = 0; j < dv; ++j) out.at(t, h * dv + j) = num[j] / den;
    }
  return out;
}

inline Td recurrent_mlstm(const Td& fq, const Td& fk, const Td& v, const Td& ip, const Td& fp, std::size_t H) {
  const std::size_t T = fq.rows(), dq = fq.cols() / H, dv = v.cols() / H;
  Td out(Shape{T, H * dv});
  MLSTMState<double> st(H, dq, dv);
  for (std::size_t t = 0; t < T; ++t)
    for (std::size_t h = 0; h < H; ++h)
      mlstm_step(st.S_head(h), st.z_head(h), st.m[h], fq.data() + t * H * dq + h * dq, fk.data() + t * H * dq + h * dq,
                 v.data() + t * H * dv + h * dv, ip[t * H + h], fp[t * H + h], dq, dv, out.data() + t * H * dv + h * dv);
  return out;
}

inline ModelConfig small_model(MixerKind kind) {
  ModelConfig c;
  c.vocab_size = 24;
  c.d_model = 8;
  c.n_layers = 2;
  c.n_heads = 2;
  c.d_qk = 4;
  c.d_v = 3;
  c.mlp_hidden = 12;
  c.max_seq_len = 64;
  c.mixer_kind = kind;
  c.window = 4;
  c.n_sinks = 2;
  c.chunk_size = 4;
  return c;
}

inline TokenSeq random_tokens(std::size_t n, std::size_t vocab, std::uint64_t seed) {
  Rng rng(seed);
  TokenSeq t(n);
  for (auto& x : t) x = static_cast<std::uint32_t>(rng.below(vocab));
  return t;
}

inline void jitter(Model<double>& m, std::uint64_t seed, double sd, bool new_only) {
  Rng rng(seed);
  for (auto& [n, v] : m.params) {
    if (new_only && !is_new_param(n)) continue;
    auto noise = rng.normal_tensor<double>(v->value.shape(), sd);
    for (std::size_t i = 0; i < noise.size(); ++i) v->value[i] += noise[i];
  }
}

}  // namespace selfcheck

/// Reduction identities and chunkwise/recurrent agreement, 64-bit.
inline std::vector<CheckResult> identity_checks(std::uint64_t seed = 1) {
  using namespace selfcheck;
  std::vector<CheckResult> out;
  Rng rng(seed);
  const std::size_t H = 2, d = 4, dv = 3;

  double swa = 0;
  for (std::size_t T : {1u, 7u, 33u, 128u}) {
    auto q = rng.uniform_tensor<double>({T, H * d}, -2, 2), k = rng.uniform_tensor<double>({T, H * d}, -2, 2);
    auto v = rng.uniform_tensor<double>({T, H * dv}, -1, 1);
    Tape<double> tape;
    auto a = causal_attention(tape, constant(q), constant(k), constant(v), H, T, 0);
    swa = std::max(swa, max_abs_diff(a->value, reference_attention(q, k, v, H)));
  }
  out.push_back(make("swa_full_window_equals_softmax", swa, 1e-10));

  double lin = 0;
  for (std::size_t T : {1u, 9u, 40u}) {
    auto fq = feature_rows(rng, T, H, d), fk = feature_rows(rng, T, H, d);
    auto v = rng.uniform_tensor<double>({T, H * dv}, -1, 1);
    Td ip(Shape{T, H}, 0.0), fp(Shape{T, H}, std::numeric_limits<double>::infinity());
    auto ref = reference_linear_attention(fq, fk, v, H);
    lin = std::max(lin, max_abs_diff(mlstm_parallel(fq, fk, v, &ip, &fp, H, 8).h, ref));
    lin = std::max(lin, max_abs_diff(mlstm_parallel<double>(fq, fk, v, nullptr, nullptr, H, 8).h, ref));
  }
  out.push_back(make("mlstm_unit_gates_equals_linear_attention", lin, 1e-10));

  double chunk_err = 0;
  for (std::size_t T : {1u, 5u, 17u, 64u}) {
    auto fq = feature_rows(rng, T, H, d), fk = feature_rows(rng, T, H, d);
    auto v = rng.uniform_tensor<double>({T, H * dv}, -1, 1);
    auto ip = rng.uniform_tensor<double>({T, H}, -3, 3), fp = rng.uniform_tensor<double>({T, H}, -2, 5);
    auto rec = recurrent_mlstm(fq, fk, v, ip, fp, H);
    for (std::size_t c : {std::size_t{1}, std::size_t{3}, std::size_t{4}, std::size_t{8}, T})
      chunk_err = std::max(chunk_err, max_abs_diff(mlstm_parallel(fq, fk, v, &ip, &fp, H, c).h, rec));
  }
  out.push_back(make("chunkwise_equals_recurrent", chunk_err, 1e-10));

  auto teacher = Model<double>::init(small_model(MixerKind::softmax_full), seed + 10);
  auto sc = small_model(MixerKind::hybrid);
  sc.window = sc.max_seq_len;
  auto student = init_student_from_teacher(teacher, sc);
  jitter(student, seed + 11, 0.5, true);
  auto tok = random_tokens(40, sc.vocab_size, seed + 12);
  ForwardOptions closed;
  closed.mixer.force_output_gate = 0.0;
  out.push_back(make("hybrid_closed_gate_equals_teacher",
                     max_abs_diff(logits(student, tok, closed), logits(teacher, tok)), 1e-10));
  out.push_back(make("hybrid_closed_gate_equals_teacher_f32",
                     max_abs_diff(logits(student.cast<float>(), tok, closed), logits(teacher.cast<float>(), tok)), 1e-5));

  double dec = 0;
  for (auto kind : {MixerKind::softmax_full, MixerKind::swa_only, MixerKind::linear_attn, MixerKind::mlstm_only,
                    MixerKind::hybrid}) {
    auto m = Model<double>::init(small_model(kind), seed + 20);
    jitter(m, seed + 21, 0.3, true);
    auto par = logits(m, tok);
    DecodeSession<double> s(m);
    for (std::size_t t = 0; t < tok.size(); ++t) {
      auto row = s.step(tok[t]);
      for (std::size_t j = 0; j < row.size(); ++j) dec = std::max(dec, std::abs(row[j] - par.at(t, j)));
    }
  }
  out.push_back(make("parallel_equals_decode", dec, 1e-10));
  return out;
}

/// Finite-difference checks (relative error) for each fused op, every mixer
/// kind, and the Stage I and Stage II losses, 64-bit.
inline std::vector<CheckResult> gradient_checks(std::uint64_t seed = 1, double tol = 1e-4) {
  using namespace selfcheck;
  using Fn = std::function<V(Tape<double>&, const std::vector<V>&)>;
  std::vector<CheckResult> out;
  Rng rng(seed);
  auto leaf = [&](Shape s, double lo = -2, double hi = 2) { return make_var(rng.uniform_tensor<double>(std::move(s), lo, hi), true); };
  auto proj_w = std::make_shared<std::map<Shape, Td>>();
  // a fixed random projection turns any output into a scalar
  auto proj = [proj_w, seed](Tape<double>& t, const V& x) {
    auto it = proj_w->find(x->value.shape());
    if (it == proj_w->end()) {
      Rng r(seed + 999);
      it = proj_w->emplace(x->value.shape(), r.uniform_tensor<double>(x->value.shape(), -1, 1)).first;
    }
    return dot(t, x, constant(it->second));
  };
  auto run = [&](const std::string& name, Fn f, std::vector<V> in, std::size_t max_elems = 48) {
    out.push_back(make(name, grad_check<double>(f, std::move(in), 1e-5, max_elems).max_rel_error, tol));
  };

  run("rope", [&](auto& t, auto& v) { return proj(t, rope(t, v[0], 2, 4, 10000.0, 3)); }, {leaf({5, 8})});
  run("feature_map", [&](auto& t, auto& v) { return proj(t, feature_map(t, v[0], v[1], 2)); },
      {leaf({3, 8}), leaf({2, 4, 4})});
  run("head_gate", [&](auto& t, auto& v) { return proj(t, head_gate(t, v[0], v[1], v[2], v[3], 2)); },
      {leaf({3, 8}), leaf({3, 8}), leaf({3, 6}), leaf({2, 11})});
  run("head_mix", [&](auto& t, auto& v) { return proj(t, head_mix(t, sigmoid(t, v[0]), v[1], v[2], 2)); },
      {leaf({3, 2}), leaf({3, 6}), leaf({3, 6})});
  run("causal_attention", [&](auto& t, auto& v) { return proj(t, causal_attention(t, v[0], v[1], v[2], 2)); },
      {leaf({7, 8}), leaf({7, 8}), leaf({7, 6})});
  run("banded_attention_with_sinks",
      [&](auto& t, auto& v) { return proj(t, causal_attention(t, v[0], v[1], v[2], 2, 3, 2)); },
      {leaf({11, 8}), leaf({11, 8}), leaf({11, 6})});
  run("mlstm_gated",
      [&](auto& t, auto& v) {
        return proj(t, mlstm(t, head_softmax(t, v[0], 2), head_softmax(t, v[1], 2), v[2], v[3], v[4], 2, 3, 1e-12));
      },
      {leaf({10, 8}), leaf({10, 8}), leaf({10, 6}), leaf({10, 2}), leaf({10, 2}, -2, 4)});
  run("mlstm_ungated",
      [&](auto& t, auto& v) {
        return proj(t, mlstm(t, head_softmax(t, v[0], 2), head_softmax(t, v[1], 2), v[2], V{}, V{}, 2, 4, 1e-12));
      },
      {leaf({9, 8}), leaf({9, 8}), leaf({9, 6})});

  for (auto kind : {MixerKind::softmax_full, MixerKind::swa_only, MixerKind::linear_attn, MixerKind::mlstm_only,
                    MixerKind::hybrid}) {
    auto m = Model<double>::init(small_model(kind), seed + 30);
    jitter(m, seed + 31, 0.4, true);
    auto mc = m.cfg.mixer();
    auto p = m.mixer_params(0);
    auto x = make_var(rng.uniform_tensor<double>({9, mc.d_model}, -2, 2), true);
    std::vector<V> in{x};
    for (auto& [n, v] : m.params)
      if (n.starts_with("layers.0.mixer.")) in.push_back(v);
    run(std::string("mixer_") + to_string(kind),
        [&, p](auto& t, auto& v) { return proj(t, mixer_forward(t, v[0], p, mc, kind).out); }, in);
  }

  auto tcfg = small_model(MixerKind::softmax_full);
  auto teacher = Model<double>::init(tcfg, seed + 40);
  jitter(teacher, seed + 41, 0.2, false);
  auto student = init_student_from_teacher(teacher, small_model(MixerKind::hybrid));
  jitter(student, seed + 42, 0.3, true);
  auto tok = random_tokens(20, tcfg.vocab_size, seed + 43);

  auto tg = capture_alignment_targets(teacher, tok);
  std::vector<V> s1;
  for (auto& [n, v] : student.params)
    if (n.starts_with("layers.1.mixer.") && is_new_param(n)) s1.push_back(v);
  run("stage1_alignment_loss",
      [&](auto& t, auto&) { return layer_alignment_loss(t, student, 1, tg.inputs[1], tg.outputs[1]); }, s1, 24);

  const std::size_t k = 8;
  auto tl = logits(teacher, tok);
  std::vector<std::uint32_t> ids;
  std::vector<float> tv;
  for (std::size_t r = 0; r < tl.rows(); ++r) {
    std::vector<double> row(tl.data() + r * tl.cols(), tl.data() + (r + 1) * tl.cols());
    for (auto i : top_k_ids<double>(row, k)) {
      ids.push_back(i);
      tv.push_back(static_cast<float>(row[i]));
    }
  }
  std::vector<V> s2;
  for (auto& [n, v] : student.params) s2.push_back(v);
  run("stage2_distill_loss", [&](auto& t, auto&) { return distill_loss(t, student, tok, ids.data(), tv.data(), k, 0.9, 0.1); },
      s2, 6);
  return out;
}

}  // namespace xdistill
