#pragma once

// Run configuration: one JSON document covering every pipeline stage.
// Unknown keys are rejected; `key.path=value` overrides are applied to the
// JSON before it is read.

#include <nlohmann/json.hpp>

#include <cstdlib>
#include <filesystem>
#include <string>
#include <vector>

#include "xdistill/bench.hpp"
#include "xdistill/distill.hpp"
#include "xdistill/merge.hpp"

namespace xdistill {

inline void to_json(nlohmann::json& j, const LrSchedule& s) {
  j = {{"kind", to_string(s.kind)},
       {"peak", s.peak},
       {"floor", s.floor},
       {"warmup_steps", s.warmup_steps},
       {"total_steps", s.total_steps}};
}
inline void from_json(const nlohmann::json& j, LrSchedule& s) {
  detail::StrictReader r(j, "schedule");
  std::string kind = to_string(s.kind);
  r.get("kind", kind).get("peak", s.peak).get("floor", s.floor).get("warmup_steps", s.warmup_steps).get("total_steps", s.total_steps);
  r.finish();
  if (kind == "constant")
    s.kind = ScheduleKind::constant;
  else if (kind == "warmup_cosine")
    s.kind = ScheduleKind::warmup_cosine;
  else
    throw ConfigError("unknown schedule kind '" + kind + "'");
}

inline void to_json(nlohmann::json& j, const AdamWConfig& a) {
  j = {{"beta1", a.beta1}, {"beta2", a.beta2}, {"eps", a.eps}, {"weight_decay", a.weight_decay}, {"clip_norm", a.clip_norm}};
}
inline void from_json(const nlohmann::json& j, AdamWConfig& a) {
  detail::StrictReader r(j, "adamw");
  r.get("beta1", a.beta1).get("beta2", a.beta2).get("eps", a.eps).get("weight_decay", a.weight_decay).get("clip_norm", a.clip_norm);
  r.finish();
}

inline void to_json(nlohmann::json& j, const TrainConfig& t) {
  j = {{"steps", t.steps}, {"batch", t.batch}, {"schedule", t.schedule}, {"adamw", t.adamw}, {"seed", t.seed}, {"log_every", t.log_every}};
}
inline void from_json(const nlohmann::json& j, TrainConfig& t) {
  detail::StrictReader r(j, "teacher_train");
  r.get("steps", t.steps).get("batch", t.batch).get("schedule", t.schedule).get("adamw", t.adamw).get("seed", t.seed).get("log_every", t.log_every);
  r.finish();
}

inline void to_json(nlohmann::json& j, const AlignConfig& a) {
  j = {{"steps", a.steps},   {"batch", a.batch},         {"schedule", a.schedule},
       {"adamw", a.adamw},   {"seed", a.seed},           {"freeze_set", to_string(a.freeze_set)},
       {"layer_order", a.layer_order}};
}
inline void from_json(const nlohmann::json& j, AlignConfig& a) {
  detail::StrictReader r(j, "align");
  std::string fs = to_string(a.freeze_set);
  r.get("steps", a.steps).get("batch", a.batch).get("schedule", a.schedule).get("adamw", a.adamw).get("seed", a.seed);
  r.get("freeze_set", fs).get("layer_order", a.layer_order);
  r.finish();
  a.freeze_set = freeze_set_from_string(fs);
}

inline void to_json(nlohmann::json& j, const DistillConfig& d) {
  j = {{"gamma", d.gamma}, {"beta", d.beta},   {"k", d.k},         {"freeze_set", to_string(d.freeze_set)},
       {"schedule", d.schedule}, {"steps", d.steps}, {"batch", d.batch}, {"seed", d.seed},
       {"adamw", d.adamw}, {"domain", d.domain}};
}
inline void from_json(const nlohmann::json& j, DistillConfig& d) {
  detail::StrictReader r(j, "distill");
  std::string fs = to_string(d.freeze_set);
  r.get("gamma", d.gamma).get("beta", d.beta).get("k", d.k).get("freeze_set", fs).get("schedule", d.schedule);
  r.get("steps", d.steps).get("batch", d.batch).get("seed", d.seed).get("adamw", d.adamw).get("domain", d.domain);
  r.finish();
  d.freeze_set = freeze_set_from_string(fs);
  d.validate();
}

inline void to_json(nlohmann::json& j, const BenchScenario& s) {
  j = {{"mode", to_string(s.mode)}, {"batch", s.batch}, {"context", s.context}, {"gen", s.gen}, {"checkpoints", s.checkpoints}};
}
inline void from_json(const nlohmann::json& j, BenchScenario& s) {
  detail::StrictReader r(j, "bench.scenarios[]");
  std::string mode = to_string(s.mode);
  r.get("mode", mode).get("batch", s.batch).get("context", s.context).get("gen", s.gen).get("checkpoints", s.checkpoints);
  r.finish();
  s.mode = bench_mode_from_string(mode);
}

struct MergeEntry {
  std::string path;
  double weight = 0;
};

struct MergeSection {
  std::vector<MergeEntry> experts;  // relative paths resolve against output_dir
  std::string normalization = "auto";
};

struct BenchSection {
  ModelConfig model;  // teacher-shaped; the student variant swaps mixer_kind
  std::vector<BenchScenario> scenarios;
  std::size_t warmups = 3;
  std::size_t repeats = 5;
  std::vector<std::size_t> op_lengths{256, 512, 1024, 2048, 4096};

  BenchSection() {
    model.vocab_size = 64;
    model.d_model = 32;
    model.n_layers = 2;
    model.n_heads = 2;
    model.d_qk = 16;
    model.d_v = 16;
    model.mlp_hidden = 64;
    model.max_seq_len = 4096 + 1024;
    model.window = 64;
    model.chunk_size = 64;
    BenchScenario g;
    BenchScenario p;
    p.mode = BenchMode::prefill;
    p.context = 1024;
    p.checkpoints.clear();
    scenarios = {g, p};
  }
};

struct RunConfig {
  std::uint64_t seed = 1;
  std::string output_dir = "runs/default";
  CorpusSpec corpus;
  ModelConfig teacher;
  nlohmann::json student = {{"mixer_kind", "hybrid"}};  // overrides applied to the teacher config
  TrainConfig teacher_train;
  AlignConfig align;
  DistillConfig distill;
  MergeSection merge;
  BenchSection bench;
  std::size_t probe_sequences = 128;

  ModelConfig student_config() const {
    nlohmann::json j = teacher;
    j.merge_patch(student);
    auto c = j.get<ModelConfig>();
    c.validate();
    return c;
  }

  void validate() const {
    corpus.validate();
    teacher.validate();
    XD_REQUIRE(teacher.mixer_kind == MixerKind::softmax_full, ConfigError, "teacher.mixer_kind must be softmax_full");
    XD_REQUIRE(teacher.vocab_size == corpus.vocab_size, ConfigError, "teacher.vocab_size must equal corpus.vocab_size");
    XD_REQUIRE(corpus.seq_len <= teacher.max_seq_len, ConfigError, "corpus.seq_len exceeds teacher.max_seq_len");
    const auto s = student_config();
    XD_REQUIRE(s.vocab_size == teacher.vocab_size && s.d_model == teacher.d_model && s.n_layers == teacher.n_layers &&
                   s.n_heads == teacher.n_heads && s.d_qk == teacher.d_qk && s.d_v == teacher.d_v &&
                   s.mlp_hidden == teacher.mlp_hidden,
               ConfigError, "student overrides may not change the teacher's dimensions");
    distill.validate();
  }
};

inline void to_json(nlohmann::json& j, const RunConfig& c) {
  nlohmann::json experts = nlohmann::json::array();
  for (auto& e : c.merge.experts) experts.push_back({{"path", e.path}, {"weight", e.weight}});
  j = {{"seed", c.seed},
       {"output_dir", c.output_dir},
       {"corpus", c.corpus},
       {"teacher", c.teacher},
       {"student", c.student},
       {"teacher_train", c.teacher_train},
       {"align", c.align},
       {"distill", c.distill},
       {"merge", {{"experts", experts}, {"normalization", c.merge.normalization}}},
       {"bench",
        {{"model", c.bench.model},
         {"scenarios", c.bench.scenarios},
         {"warmups", c.bench.warmups},
         {"repeats", c.bench.repeats},
         {"op_lengths", c.bench.op_lengths}}},
       {"probe_sequences", c.probe_sequences}};
}

inline void from_json(const nlohmann::json& j, RunConfig& c) {
  detail::StrictReader r(j, "config");
  r.get("seed", c.seed).get("output_dir", c.output_dir).get("corpus", c.corpus).get("teacher", c.teacher);
  r.get("student", c.student).get("teacher_train", c.teacher_train).get("align", c.align).get("distill", c.distill);
  r.get("probe_sequences", c.probe_sequences);
  const auto& m = r.sub("merge");
  if (!m.empty()) {
    detail::StrictReader mr(m, "merge");
    nlohmann::json experts = nlohmann::json::array();
    mr.get("experts", experts).get("normalization", c.merge.normalization);
    mr.finish();
    c.merge.experts.clear();
    for (auto& e : experts) {
      detail::StrictReader er(e, "merge.experts[]");
      MergeEntry me;
      er.get("path", me.path).get("weight", me.weight);
      er.finish();
      c.merge.experts.push_back(me);
    }
    merge_normalization_from_string(c.merge.normalization);
  }
  const auto& b = r.sub("bench");
  if (!b.empty()) {
    detail::StrictReader br(b, "bench");
    br.get("model", c.bench.model).get("scenarios", c.bench.scenarios).get("warmups", c.bench.warmups);
    br.get("repeats", c.bench.repeats).get("op_lengths", c.bench.op_lengths);
    br.finish();
  }
  r.finish();
  if (!c.student.is_object()) throw ConfigError("config.student must be an object");
}

/// Sets `dotted.key` in `j` to `value`, parsed as JSON when possible and as a
/// string otherwise. Intermediate objects must already exist.
inline void apply_override(nlohmann::json& j, const std::string& assignment) {
  const auto eq = assignment.find('=');
  if (eq == std::string::npos || eq == 0) throw ConfigError("override '" + assignment + "' is not key=value");
  const std::string key = assignment.substr(0, eq), raw = assignment.substr(eq + 1);
  nlohmann::json value;
  try {
    value = nlohmann::json::parse(raw);
  } catch (const nlohmann::json::parse_error&) {
    value = raw;
  }
  nlohmann::json* cur = &j;
  std::size_t start = 0;
  while (true) {
    const auto dot = key.find('.', start);
    const std::string part = key.substr(start, dot == std::string::npos ? std::string::npos : dot - start);
    if (part.empty()) throw ConfigError("override key '" + key + "' has an empty component");
    if (!cur->is_object()) throw ConfigError("override key '" + key + "' descends into a non-object");
    if (dot == std::string::npos) {
      (*cur)[part] = value;
      return;
    }
    cur = &(*cur)[part];
    if (cur->is_null()) *cur = nlohmann::json::object();
    start = dot + 1;
  }
}

/// Reads a config file (or defaults when `path` is empty), applies
/// overrides, then the XDISTILL_OUTPUT_DIR environment variable.
inline RunConfig load_run_config(const std::filesystem::path& path, const std::vector<std::string>& overrides) {
  nlohmann::json j = RunConfig{};
  if (!path.empty()) {
    nlohmann::json file;
    try {
      file = nlohmann::json::parse(read_text(path));
    } catch (const nlohmann::json::parse_error& e) {
      throw ConfigError("config " + path.string() + " is not valid JSON: " + e.what());
    }
    // validate the file on its own so unknown keys are reported against it
    file.get<RunConfig>();
    j.merge_patch(file);
  }
  for (auto& o : overrides) apply_override(j, o);
  auto c = j.get<RunConfig>();
  if (const char* env = std::getenv("XDISTILL_OUTPUT_DIR"); env && *env) c.output_dir = env;
  c.validate();
  return c;
}

}  // namespace xdistill
