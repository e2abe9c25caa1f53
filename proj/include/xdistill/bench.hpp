#pragma once

// Inference cost: exact cache accounting, instrumented operation counts, and
// wall-clock decode/prefill timings (median of repeats after warmups).

#include <algorithm>
#include <chrono>
#include <cmath>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "xdistill/evalkit.hpp"
#include "xdistill/model.hpp"

namespace xdistill {

/// Scalars held by all decode caches after `t` tokens.
inline std::size_t cache_accounting(const ModelConfig& c, std::size_t t) {
  const std::size_t L = c.n_layers, H = c.n_heads, kv = c.d_qk + c.d_v;
  std::size_t per_layer = 0;
  if (c.mixer_kind == MixerKind::softmax_full) per_layer += t * H * kv;
  if (uses_attention(c.mixer_kind) && c.mixer_kind != MixerKind::softmax_full)
    per_layer += std::min(t, c.window + c.n_sinks) * H * kv;
  if (uses_recurrence(c.mixer_kind)) per_layer += H * (c.d_qk * c.d_v + c.d_qk + 1);
  return L * per_layer;
}

/// Puts `sess` in the state it would have after `t` tokens, using random
/// cache contents instead of a prefill. Cheap for any t.
template <class T>
void fill_synthetic(DecodeSession<T>& sess, const ModelConfig& c, std::size_t t, std::uint64_t seed) {
  if (sess.position() != 0) throw ContractError("fill_synthetic needs a fresh session");
  Rng rng(seed);
  const std::size_t H = c.n_heads;
  std::vector<T> k(H * c.d_qk), v(H * c.d_v);
  for (auto& cache : sess.caches()) {
    const bool kv = c.mixer_kind == MixerKind::softmax_full;
    const bool swa = uses_attention(c.mixer_kind) && !kv;
    if (kv || swa) {
      for (std::size_t i = 0; i < t; ++i) {
        for (auto& x : k) x = static_cast<T>(rng.normal());
        for (auto& x : v) x = static_cast<T>(rng.normal());
        if (kv)
          cache.kv.append(k, v);
        else
          cache.swa.append(k, v);
      }
    }
    if (uses_recurrence(c.mixer_kind)) {
      for (auto& x : cache.state.S) x = static_cast<T>(0.1 * rng.normal());
      for (auto& x : cache.state.z) x = static_cast<T>(0.1 + 0.1 * rng.uniform());
      cache.state.steps = t;
    }
  }
  sess.advance(t);
}

/// Mixing operations (attention reads, recurrent updates) of one decode step
/// at position t.
template <class T>
std::uint64_t step_mixing_ops(const Model<T>& m, std::size_t t, std::uint64_t seed = 1) {
  DecodeSession<T> sess(m);
  fill_synthetic(sess, m.cfg, t, seed);
  OpCounter::reset();
  sess.step(1);
  return OpCounter::mixing();
}

/// Mixing operations of a parallel forward over `n` tokens.
template <class T>
std::uint64_t prefill_mixing_ops(const Model<T>& m, std::size_t n, std::uint64_t seed = 1) {
  Rng rng(seed);
  TokenSeq tok(n);
  for (auto& x : tok) x = static_cast<std::uint32_t>(rng.below(m.cfg.vocab_size));
  OpCounter::reset();
  logits(m, tok);
  return OpCounter::mixing();
}

/// Least-squares slope of log(y) against log(x).
inline double loglog_slope(const std::vector<double>& x, const std::vector<double>& y) {
  if (x.size() != y.size() || x.size() < 2) throw ContractError("loglog_slope needs two or more points");
  double mx = 0, my = 0;
  const double n = static_cast<double>(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) {
    mx += std::log(x[i]) / n;
    my += std::log(y[i]) / n;
  }
  double sxy = 0, sxx = 0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    sxy += (std::log(x[i]) - mx) * (std::log(y[i]) - my);
    sxx += (std::log(x[i]) - mx) * (std::log(x[i]) - mx);
  }
  return sxy / sxx;
}

// ---------------------------------------------------------------------------
// Timed runs
// ---------------------------------------------------------------------------

enum class BenchMode { prefill, generate };

inline const char* to_string(BenchMode m) { return m == BenchMode::prefill ? "prefill" : "generate"; }
inline BenchMode bench_mode_from_string(const std::string& s) {
  if (s == "prefill") return BenchMode::prefill;
  if (s == "generate") return BenchMode::generate;
  throw ConfigError("unknown bench mode '" + s + "'");
}

struct BenchScenario {
  BenchMode mode = BenchMode::generate;
  std::size_t batch = 1;    // B
  std::size_t context = 0;  // C: prompt length for prefill
  std::size_t gen = 16;     // G: decode steps timed per checkpoint
  std::vector<std::size_t> checkpoints{256, 512, 1024, 2048, 4096};
};

struct BenchRow {
  BenchMode mode;
  std::string model;
  std::size_t B, C, G, t;
  double step_latency_s;
  std::size_t cache_scalars;
  double throughput_tps;
  std::size_t warmups_run = 0, repeats_run = 0;
};

struct BenchOptions {
  std::size_t warmups = 3;
  std::size_t repeats = 5;
  std::uint64_t seed = 1;
  double min_timed_s = 50e-6;  // widen G until one timed run lasts this long
  std::size_t max_widen = 64;
};

namespace detail {

inline double seconds_since(std::chrono::steady_clock::time_point a) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - a).count();
}

}  // namespace detail

/// Runs each scenario on `m`; generate mode reports the median per-step
/// latency of B sequences at each checkpoint t, prefill mode the median time
/// of a parallel forward over C tokens for each of B sequences.
template <class T>
std::vector<BenchRow> run_bench(const Model<T>& m, const std::string& label, const std::vector<BenchScenario>& scenarios,
                                const BenchOptions& opt = {}) {
  if (opt.repeats == 0) throw ConfigError("bench repeats must be positive");
  std::vector<BenchRow> rows;
  for (auto& sc : scenarios) {
    if (sc.batch == 0) throw ConfigError("bench batch must be positive");
    if (sc.mode == BenchMode::prefill) {
      if (sc.context == 0 || sc.context > m.cfg.max_seq_len)
        throw ConfigError("prefill context must be in [1, max_seq_len]");
      Rng rng(opt.seed);
      std::vector<TokenSeq> prompts(sc.batch, TokenSeq(sc.context));
      for (auto& p : prompts)
        for (auto& x : p) x = static_cast<std::uint32_t>(rng.below(m.cfg.vocab_size));
      auto run = [&] {
        for (auto& p : prompts) {
          DecodeSession<T> s(m);
          s.prefill(p);
        }
      };
      BenchRow r{sc.mode, label, sc.batch, sc.context, 0, sc.context, 0, cache_accounting(m.cfg, sc.context), 0};
      for (std::size_t w = 0; w < opt.warmups; ++w, ++r.warmups_run) run();
      std::vector<double> times;
      for (std::size_t i = 0; i < opt.repeats; ++i, ++r.repeats_run) {
        auto t0 = std::chrono::steady_clock::now();
        run();
        times.push_back(detail::seconds_since(t0));
      }
      r.step_latency_s = median(times);
      r.throughput_tps = static_cast<double>(sc.batch * sc.context) / r.step_latency_s;
      rows.push_back(r);
      continue;
    }
    for (std::size_t t : sc.checkpoints) {
      if (m.cfg.mixer_kind == MixerKind::softmax_full && t + sc.gen * opt.max_widen > m.cfg.max_seq_len)
        throw ConfigError("teacher max_seq_len too small for checkpoint " + std::to_string(t));
      std::vector<DecodeSession<T>> filled;
      for (std::size_t b = 0; b < sc.batch; ++b) {
        filled.emplace_back(m);
        fill_synthetic(filled.back(), m.cfg, t, opt.seed + b);
      }
      std::size_t steps = std::max<std::size_t>(1, sc.gen);
      auto run = [&](std::size_t n) {
        std::vector<DecodeSession<T>> sess(filled);
        auto t0 = std::chrono::steady_clock::now();
        for (std::size_t i = 0; i < n; ++i)
          for (auto& s : sess) s.step(static_cast<std::uint32_t>(i % m.cfg.vocab_size));
        return detail::seconds_since(t0);
      };
      BenchRow r{sc.mode, label, sc.batch, 0, steps, t, 0, cache_accounting(m.cfg, t), 0};
      for (std::size_t w = 0; w < opt.warmups; ++w, ++r.warmups_run) run(steps);
      while (run(steps) < opt.min_timed_s && steps < sc.gen * opt.max_widen) steps *= 2;
      r.G = steps;
      std::vector<double> per_step;
      for (std::size_t i = 0; i < opt.repeats; ++i, ++r.repeats_run) per_step.push_back(run(steps) / static_cast<double>(steps));
      r.step_latency_s = median(per_step);
      r.throughput_tps = static_cast<double>(sc.batch) / r.step_latency_s;
      rows.push_back(r);
    }
  }
  return rows;
}

inline std::string bench_csv(const std::vector<BenchRow>& rows) {
  std::ostringstream os;
  os.precision(9);
  os << "mode,model,B,C,G,t,step_latency_s,cache_scalars,throughput_tps\n";
  for (auto& r : rows)
    os << to_string(r.mode) << ',' << r.model << ',' << r.B << ',' << r.C << ',' << r.G << ',' << r.t << ','
       << r.step_latency_s << ',' << r.cache_scalars << ',' << r.throughput_tps << '\n';
  return os.str();
}

}  // namespace xdistill
