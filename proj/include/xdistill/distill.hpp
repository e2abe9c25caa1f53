#pragma once

// Stage I (per-layer hidden-state alignment against teacher-forced mixer
// inputs) and Stage II (γ·CE + β·top-k KL against precomputed teacher
// targets).

#include <nlohmann/json.hpp>

#include <algorithm>
#include <filesystem>
#include <functional>
#include <numeric>
#include <optional>
#include <string>
#include <vector>

#include "xdistill/model.hpp"

namespace xdistill {

// ---------------------------------------------------------------------------
// Alignment targets
// ---------------------------------------------------------------------------

template <class T>
struct AlignmentTargets {
  std::vector<Tensor<T>> inputs;   // per layer: normalized mixer input [T x d_model]
  std::vector<Tensor<T>> outputs;  // per layer: pre-projection attention output [T x H*d_v]
};

/// One teacher forward; nothing is recorded for differentiation.
template <class T>
AlignmentTargets<T> capture_alignment_targets(const Model<T>& teacher, std::span<const std::uint32_t> tokens) {
  Tape<T> tape;
  auto r = forward(tape, teacher, tokens, ForwardOptions{{}, true});
  AlignmentTargets<T> a;
  for (auto& l : r.layers) {
    a.inputs.push_back(std::move(l.mixer_input));
    a.outputs.push_back(std::move(l.mixer_output));
  }
  return a;
}

/// Σ_t ‖h_t − ĥ_t‖² for one layer, with the student mixer fed the teacher's
/// layer input.
template <class T>
Var<T> layer_alignment_loss(Tape<T>& tape, const Model<T>& student, std::size_t layer, const Tensor<T>& input,
                            const Tensor<T>& target, const MixerOptions& opts = {}) {
  auto x = constant(input);
  auto mix = mixer_forward(tape, x, student.mixer_params(layer), student.cfg.mixer(), student.cfg.mixer_kind, opts);
  auto d = sub(tape, mix.pre_out, constant(target));
  return sum(tape, mul(tape, d, d));
}

struct AlignmentLoss {
  std::vector<double> per_layer;  // mean over sequences of Σ_t ‖·‖²
  double total = 0;
};

template <class T>
AlignmentLoss alignment_loss(const Model<T>& student, const Model<T>& teacher, const std::vector<Sequence>& seqs,
                             const MixerOptions& opts = {}) {
  AlignmentLoss r;
  r.per_layer.assign(student.cfg.n_layers, 0.0);
  for (auto& s : seqs) {
    auto tg = capture_alignment_targets(teacher, s.tokens);
    for (std::size_t l = 0; l < student.cfg.n_layers; ++l) {
      Tape<T> tape;
      r.per_layer[l] += static_cast<double>(layer_alignment_loss(tape, student, l, tg.inputs[l], tg.outputs[l], opts)->value.item());
    }
  }
  for (auto& v : r.per_layer) {
    v /= static_cast<double>(std::max<std::size_t>(1, seqs.size()));
    r.total += v;
  }
  return r;
}

// ---------------------------------------------------------------------------
// Configs
// ---------------------------------------------------------------------------

struct AlignConfig {
  std::size_t steps = 500;
  std::size_t batch = 8;
  LrSchedule schedule = LrSchedule::warmup_cosine(1e-2, 1e-5, 25, 500);
  AdamWConfig adamw;
  std::uint64_t seed = 1;
  FreezeSet freeze_set = FreezeSet::new_params_only;
  std::vector<std::size_t> layer_order;  // empty = 0..L-1
};

struct DistillConfig {
  double gamma = 0.9;
  double beta = 0.1;
  std::size_t k = 256;
  FreezeSet freeze_set = FreezeSet::full;
  LrSchedule schedule = LrSchedule::constant_lr(1e-5);
  std::size_t steps = 500;
  std::size_t batch = 8;
  std::uint64_t seed = 1;
  AdamWConfig adamw;
  std::string domain;  // empty = all training sequences, else a stream kind

  void validate() const {
    XD_REQUIRE(gamma >= 0 && beta >= 0, ConfigError, "gamma and beta must be nonnegative");
    XD_REQUIRE(k >= 1, ConfigError, "k must be positive");
    XD_REQUIRE(batch >= 1, ConfigError, "batch must be positive");
    if (!domain.empty()) stream_kind_from_string(domain);
  }
};

struct StageReport {
  std::vector<double> losses;
  std::vector<double> grad_norms;
  double initial_eval = 0;
  double final_eval = 0;
};

namespace detail {

template <class T>
std::map<std::string, Tensor<T>> frozen_snapshot(const Model<T>& m) {
  std::map<std::string, Tensor<T>> s;
  for (auto& [n, v] : m.params)
    if (!v->requires_grad) s.emplace(n, v->value);
  return s;
}

template <class T>
void verify_frozen(const Model<T>& m, const std::map<std::string, Tensor<T>>& snap) {
  for (auto& [n, t] : snap)
    if (!(m.p(n)->value == t)) throw ContractError("frozen parameter '" + n + "' was modified");
}

inline void check_finite_loss(double v, std::size_t step, const char* stage) {
  if (!std::isfinite(v))
    throw NumericError(std::string(stage) + " diverged at step " + std::to_string(step) + " (loss " + std::to_string(v) + ")");
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Stage I
// ---------------------------------------------------------------------------

/// Trains φ and the gate weights so each student mixer reproduces the
/// teacher's attention output on the teacher's own layer inputs. Layers have
/// separate optimizers, clipping and losses, so they are fully independent.
template <class T>
Model<T> stage1_align(const Model<T>& student_in, const Model<T>& teacher, const Dataset& data, const AlignConfig& cfg,
                      StageReport* report = nullptr, const std::function<void(const std::string&)>& log = {}) {
  if (cfg.freeze_set != FreezeSet::new_params_only)
    throw ConfigError("stage I trains only the new parameters (freeze_set new_params_only)");
  if (data.train.empty()) throw ContractError("training split is empty");
  auto student = student_in.clone();
  const std::size_t L = student.cfg.n_layers;
  student.set_trainable([](const std::string& n) { return is_new_param(n); });
  auto snap = detail::frozen_snapshot(student);

  std::vector<std::size_t> order = cfg.layer_order;
  if (order.empty()) {
    order.resize(L);
    std::iota(order.begin(), order.end(), 0);
  }
  XD_REQUIRE(order.size() == L, ConfigError, "layer_order must list every layer once");

  std::vector<AdamW<T>> opts;
  for (std::size_t l = 0; l < L; ++l) {
    std::vector<Var<T>> ps;
    const auto pre = layer_prefix(l);
    for (auto& [n, v] : student.params)
      if (v->requires_grad && n.starts_with(pre)) ps.push_back(v);
    opts.emplace_back(std::move(ps), cfg.adamw);
  }

  StageReport rep;
  std::vector<Sequence> probe(data.eval.begin(), data.eval.begin() + std::min<std::size_t>(data.eval.size(), 16));
  if (!probe.empty()) rep.initial_eval = alignment_loss(student, teacher, probe).total;

  BatchSampler sampler(data.train.size(), cfg.seed);
  const T inv_batch = static_cast<T>(1.0 / static_cast<double>(cfg.batch));
  for (std::size_t step = 0; step < cfg.steps; ++step) {
    std::vector<AlignmentTargets<T>> batch;
    for (auto idx : sampler.next(cfg.batch)) batch.push_back(capture_alignment_targets(teacher, data.train[idx].tokens));
    double loss = 0, gn = 0;
    for (auto l : order) {
      for (auto& tg : batch) {
        Tape<T> tape;
        auto ll = layer_alignment_loss(tape, student, l, tg.inputs[l], tg.outputs[l]);
        loss += static_cast<double>(ll->value.item()) / static_cast<double>(cfg.batch);
        if (tracks(ll)) tape.backward(scale(tape, ll, inv_batch));
      }
      gn += std::pow(opts[l].step(cfg.schedule.at(step)), 2);
    }
    detail::check_finite_loss(loss, step, "stage I");
    rep.losses.push_back(loss);
    rep.grad_norms.push_back(std::sqrt(gn));
    if (log && (step + 1) % 50 == 0) log("align step " + std::to_string(step + 1) + " loss " + std::to_string(loss));
  }
  detail::verify_frozen(student, snap);
  student.set_trainable([](const std::string&) { return false; });
  if (!probe.empty()) rep.final_eval = alignment_loss(student, teacher, probe).total;
  auto lin = student_in.lineage;
  lin["stage"] = "align";
  lin["parent_hash"] = student_in.to_checkpoint().hash();
  lin["align_seed"] = cfg.seed;
  lin["align_steps"] = cfg.steps;
  student.lineage = lin;
  if (report) *report = rep;
  return student;
}

// ---------------------------------------------------------------------------
// Teacher targets
// ---------------------------------------------------------------------------

/// Top-k teacher logits for every position of every training sequence.
/// File: u64 LE header length, header JSON, then per position k u32 ids
/// followed by k f32 logits, little-endian.
struct TeacherTargets {
  std::size_t k = 0;
  std::size_t vocab_size = 0;
  std::size_t seq_len = 0;
  std::size_t n_sequences = 0;
  std::string teacher_hash;
  std::string dataset_hash;
  std::vector<std::uint32_t> ids;
  std::vector<float> logits;

  std::size_t n_positions() const { return n_sequences * seq_len; }
  const std::uint32_t* ids_at(std::size_t seq, std::size_t pos = 0) const { return ids.data() + (seq * seq_len + pos) * k; }
  const float* logits_at(std::size_t seq, std::size_t pos = 0) const {
    return logits.data() + (seq * seq_len + pos) * k;
  }

  std::vector<std::uint8_t> serialize() const {
    nlohmann::json h = {{"k", k},
                        {"vocab_size", vocab_size},
                        {"teacher_hash", teacher_hash},
                        {"dataset_hash", dataset_hash},
                        {"n_positions", n_positions()},
                        {"n_sequences", n_sequences},
                        {"seq_len", seq_len}};
    const std::string hs = h.dump();
    std::vector<std::uint8_t> out;
    out.reserve(8 + hs.size() + n_positions() * k * 8);
    put_le<std::uint64_t>(out, hs.size());
    out.insert(out.end(), hs.begin(), hs.end());
    for (std::size_t p = 0; p < n_positions(); ++p) {
      for (std::size_t j = 0; j < k; ++j) put_le<std::uint32_t>(out, ids[p * k + j]);
      for (std::size_t j = 0; j < k; ++j) put_le<float>(out, logits[p * k + j]);
    }
    return out;
  }

  static TeacherTargets deserialize(const std::vector<std::uint8_t>& b) {
    if (b.size() < 8) throw IoError("targets file truncated (no header)");
    const auto hl = get_le<std::uint64_t>(b.data());
    if (8 + hl > b.size()) throw IoError("targets file truncated (header)");
    TeacherTargets t;
    try {
      auto h = nlohmann::json::parse(b.begin() + 8, b.begin() + 8 + static_cast<std::ptrdiff_t>(hl));
      t.k = h.at("k");
      t.vocab_size = h.at("vocab_size");
      t.teacher_hash = h.at("teacher_hash");
      t.dataset_hash = h.at("dataset_hash");
      t.n_sequences = h.at("n_sequences");
      t.seq_len = h.at("seq_len");
      if (h.at("n_positions").get<std::size_t>() != t.n_positions()) throw IoError("targets header is inconsistent");
    } catch (const nlohmann::json::exception& e) {
      throw IoError(std::string("malformed targets header: ") + e.what());
    }
    const std::size_t n = t.n_positions() * t.k;
    if (b.size() != 8 + hl + n * 8) throw IoError("targets file size does not match its header");
    t.ids.resize(n);
    t.logits.resize(n);
    const std::uint8_t* p = b.data() + 8 + hl;
    for (std::size_t q = 0; q < t.n_positions(); ++q) {
      for (std::size_t j = 0; j < t.k; ++j, p += 4) {
        t.ids[q * t.k + j] = get_le<std::uint32_t>(p);
        if (t.ids[q * t.k + j] >= t.vocab_size) throw IoError("targets file holds an out-of-range token id");
      }
      for (std::size_t j = 0; j < t.k; ++j, p += 4) t.logits[q * t.k + j] = get_le<float>(p);
    }
    return t;
  }

  void save(const std::filesystem::path& p) const { write_file_atomic(p, serialize()); }
  static TeacherTargets load(const std::filesystem::path& p) { return deserialize(read_file(p)); }
  std::string hash() const { return sha256_hex(serialize()); }
};

/// Ids of the k largest entries of `row`, largest first, ties to the lower id.
template <class T>
std::vector<std::uint32_t> top_k_ids(std::span<const T> row, std::size_t k) {
  std::vector<std::uint32_t> idx(row.size());
  std::iota(idx.begin(), idx.end(), 0u);
  std::partial_sort(idx.begin(), idx.begin() + static_cast<std::ptrdiff_t>(k), idx.end(),
                    [&](std::uint32_t a, std::uint32_t b) { return row[a] > row[b] || (row[a] == row[b] && a < b); });
  idx.resize(k);
  return idx;
}

template <class T>
TeacherTargets precompute_teacher_targets(const Model<T>& teacher, const Dataset& data, std::size_t k) {
  if (k < 1 || k > teacher.cfg.vocab_size)
    throw ConfigError("k = " + std::to_string(k) + " must lie in [1, vocab_size]");
  if (data.train.empty()) throw ContractError("training split is empty");
  TeacherTargets t;
  t.k = k;
  t.vocab_size = teacher.cfg.vocab_size;
  t.seq_len = data.spec.seq_len;
  t.n_sequences = data.train.size();
  t.teacher_hash = teacher.to_checkpoint().hash();
  t.dataset_hash = data.hash();
  t.ids.resize(t.n_positions() * k);
  t.logits.resize(t.n_positions() * k);
  for (std::size_t s = 0; s < data.train.size(); ++s) {
    auto lg = logits(teacher, data.train[s].tokens);
    for (std::size_t p = 0; p < t.seq_len; ++p) {
      auto row = lg.row(p);
      auto ids = top_k_ids<T>(row, k);
      for (std::size_t j = 0; j < k; ++j) {
        t.ids[(s * t.seq_len + p) * k + j] = ids[j];
        t.logits[(s * t.seq_len + p) * k + j] = static_cast<float>(row[ids[j]]);
      }
    }
  }
  return t;
}

// ---------------------------------------------------------------------------
// Sparse KL
// ---------------------------------------------------------------------------

inline constexpr double kKlFloor = 1e-12;

namespace detail {

/// Softmax of `n` values in double.
template <class U>
std::vector<double> softmax_of(const U* x, std::size_t n) {
  std::vector<double> p(n);
  double mx = -std::numeric_limits<double>::infinity();
  for (std::size_t i = 0; i < n; ++i) mx = std::max(mx, static_cast<double>(x[i]));
  double z = 0;
  for (std::size_t i = 0; i < n; ++i) z += p[i] = std::exp(static_cast<double>(x[i]) - mx);
  for (auto& v : p) v /= z;
  return p;
}

}  // namespace detail

/// KL(p_T ‖ p_S) with both distributions renormalized over the teacher's
/// top-k id set; p_S is floored at 1e-12 inside the log. Rows whose true
/// divergence is zero can round to -1e-17; the result is clamped at 0.
template <class T, class U>
double sparse_kl_row(const std::uint32_t* ids, const U* teacher_logits, std::size_t k, const T* student_row) {
  std::vector<double> s(k);
  for (std::size_t j = 0; j < k; ++j) s[j] = static_cast<double>(student_row[ids[j]]);
  auto p = detail::softmax_of(teacher_logits, k);
  auto q = detail::softmax_of(s.data(), k);
  double kl = 0;
  for (std::size_t j = 0; j < k; ++j)
    if (p[j] > 0) kl += p[j] * (std::log(p[j]) - std::log(std::max(q[j], kKlFloor)));
  return std::max(kl, 0.0);
}

/// Mean of sparse_kl_row over the rows of `logits` [T x V]; `ids` and
/// `teacher_logits` hold k entries per row.
template <class T, class U>
Var<T> sparse_kl(Tape<T>& tape, const Var<T>& logits, const std::uint32_t* ids, const U* teacher_logits, std::size_t k) {
  const std::size_t m = logits->value.rows(), v = logits->value.cols();
  if (k > v) throw DimensionError("sparse_kl: k exceeds vocabulary");
  double total = 0;
  // per row and slot: dKL/ds_j = P_u·q_j − p_j·[q_j unfloored], P_u = mass of unfloored p
  std::vector<T> g(m * k);
  for (std::size_t r = 0; r < m; ++r) {
    const std::uint32_t* id = ids + r * k;
    const T* row = logits->value.data() + r * v;
    for (std::size_t j = 0; j < k; ++j)
      if (id[j] >= v) throw ContractError("sparse_kl: target id out of range");
    std::vector<double> s(k);
    for (std::size_t j = 0; j < k; ++j) s[j] = static_cast<double>(row[id[j]]);
    auto p = detail::softmax_of(teacher_logits + r * k, k);
    auto q = detail::softmax_of(s.data(), k);
    double pu = 0, kl = 0;
    for (std::size_t j = 0; j < k; ++j) {
      const bool fl = q[j] < kKlFloor;
      if (p[j] > 0) kl += p[j] * (std::log(p[j]) - std::log(fl ? kKlFloor : q[j]));
      if (!fl) pu += p[j];
    }
    total += std::max(kl, 0.0);
    for (std::size_t j = 0; j < k; ++j) g[r * k + j] = static_cast<T>(pu * q[j] - (q[j] < kKlFloor ? 0.0 : p[j]));
  }
  std::vector<std::uint32_t> idv(ids, ids + m * k);
  return tape.record(Tensor<T>::scalar(static_cast<T>(total / static_cast<double>(m))), {logits},
                     [logits, g = std::move(g), idv = std::move(idv), m, v, k](const Tensor<T>& go) {
                       auto& gl = logits->grad_buffer();
                       const T c = go[0] / static_cast<T>(m);
                       for (std::size_t r = 0; r < m; ++r)
                         for (std::size_t j = 0; j < k; ++j) gl[r * v + idv[r * k + j]] += c * g[r * k + j];
                     });
}

// ---------------------------------------------------------------------------
// Stage II
// ---------------------------------------------------------------------------

/// γ·CE(next token) + β·sparse KL for one sequence; terms with zero weight
/// are not built. Returns a null Var when both weights are zero.
template <class T>
Var<T> distill_loss(Tape<T>& tape, const Model<T>& student, std::span<const std::uint32_t> tokens,
                    const std::uint32_t* ids, const float* teacher_logits, std::size_t k, double gamma, double beta) {
  if (gamma == 0 && beta == 0) return {};
  auto r = forward(tape, student, tokens);
  Var<T> loss;
  if (gamma != 0) {
    std::vector<std::uint32_t> tg(tokens.begin() + 1, tokens.end());
    tg.push_back(UINT32_MAX);
    loss = scale(tape, cross_entropy(tape, r.logits, tg), static_cast<T>(gamma));
  }
  if (beta != 0) {
    auto kl = scale(tape, sparse_kl(tape, r.logits, ids, teacher_logits, k), static_cast<T>(beta));
    loss = loss ? add(tape, loss, kl) : kl;
  }
  return loss;
}

/// Indices of training sequences belonging to `domain` (all when empty).
inline std::vector<std::size_t> domain_indices(const Dataset& data, const std::string& domain) {
  std::vector<std::size_t> idx;
  for (std::size_t i = 0; i < data.train.size(); ++i)
    if (domain.empty() || to_string(data.train[i].kind) == domain) idx.push_back(i);
  if (idx.empty()) throw ContractError("no training sequences in domain '" + domain + "'");
  return idx;
}

template <class T>
Model<T> stage2_distill(const Model<T>& student_in, const Dataset& data, const TeacherTargets& targets,
                        const DistillConfig& cfg, StageReport* report = nullptr,
                        const std::function<void(const std::string&)>& log = {}) {
  cfg.validate();
  if (targets.dataset_hash != data.hash()) throw ContractError("targets file was computed on a different dataset");
  const auto th = student_in.lineage.value("teacher_hash", std::string());
  if (!th.empty() && th != targets.teacher_hash)
    throw ContractError("targets file teacher hash " + targets.teacher_hash.substr(0, 12) +
                        " does not match the student's teacher " + th.substr(0, 12));
  if (cfg.k != targets.k) throw ConfigError("distill k = " + std::to_string(cfg.k) + " but targets store k = " + std::to_string(targets.k));
  if (targets.vocab_size != student_in.cfg.vocab_size || targets.n_sequences != data.train.size() ||
      targets.seq_len != data.spec.seq_len)
    throw DimensionError("targets file shape does not match the dataset/student");

  auto student = student_in.clone();
  student.set_trainable([&](const std::string& n) { return trainable_under(cfg.freeze_set, n); });
  auto snap = detail::frozen_snapshot(student);
  AdamW<T> opt(student.trainable(), cfg.adamw);
  const auto pool = domain_indices(data, cfg.domain);
  BatchSampler sampler(pool.size(), cfg.seed);
  StageReport rep;
  const T inv_batch = static_cast<T>(1.0 / static_cast<double>(cfg.batch));
  for (std::size_t step = 0; step < cfg.steps; ++step) {
    double loss = 0;
    for (auto bi : sampler.next(cfg.batch)) {
      const auto si = pool[bi];
      Tape<T> tape;
      auto l = distill_loss(tape, student, data.train[si].tokens, targets.ids_at(si), targets.logits_at(si), targets.k,
                            cfg.gamma, cfg.beta);
      if (!l) continue;
      loss += static_cast<double>(l->value.item()) / static_cast<double>(cfg.batch);
      if (tracks(l)) tape.backward(scale(tape, l, inv_batch));
    }
    detail::check_finite_loss(loss, step, "stage II");
    rep.grad_norms.push_back(opt.step(cfg.schedule.at(step)));
    rep.losses.push_back(loss);
    if (log && (step + 1) % 50 == 0) log("distill step " + std::to_string(step + 1) + " loss " + std::to_string(loss));
  }
  detail::verify_frozen(student, snap);
  student.set_trainable([](const std::string&) { return false; });
  auto lin = student_in.lineage;
  lin["stage"] = "distill";
  lin["parent_hash"] = student_in.to_checkpoint().hash();
  lin["targets_hash"] = targets.hash();
  lin["distill_seed"] = cfg.seed;
  lin["distill_steps"] = cfg.steps;
  lin["gamma"] = cfg.gamma;
  lin["beta"] = cfg.beta;
  lin["domain"] = cfg.domain.empty() ? "all" : cfg.domain;
  student.lineage = lin;
  if (report) *report = rep;
  return student;
}

}  // namespace xdistill
