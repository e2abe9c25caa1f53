#pragma once

#include "xdistill/distill.hpp"

namespace xdistill::testing {

inline ModelConfig tiny_config(MixerKind kind) {
  ModelConfig c;
  c.vocab_size = 24;
  c.d_model = 8;
  c.n_layers = 2;
  c.n_heads = 2;
  c.d_qk = 4;
  c.d_v = 3;
  c.mlp_hidden = 12;
  c.max_seq_len = 32;
  c.mixer_kind = kind;
  c.window = 4;
  c.n_sinks = 2;
  c.chunk_size = 4;
  return c;
}

inline Dataset tiny_dataset(std::uint64_t seed = 3) {
  CorpusSpec cs;
  cs.vocab_size = 24;
  cs.seq_len = 28;
  cs.n_sequences = 12;
  cs.n_eval = 4;
  cs.window = 4;
  cs.n_keys = 4;
  cs.n_values = 4;
  cs.ngram_len = 3;
  cs.seed = seed;
  return generate_corpus(cs);
}

template <class T>
void perturb(Model<T>& m, std::uint64_t seed, double sd, bool new_only = false) {
  Rng rng(seed);
  for (auto& [n, v] : m.params) {
    if (new_only && !is_new_param(n)) continue;
    auto noise = rng.normal_tensor<T>(v->value.shape(), sd);
    for (std::size_t i = 0; i < noise.size(); ++i) v->value[i] += noise[i];
  }
}

/// A small trained teacher and its hybrid student, shared by several tests.
template <class T>
struct TinyPipeline {
  Dataset data = tiny_dataset();
  Model<T> teacher;
  Model<T> student;

  explicit TinyPipeline(MixerKind kind = MixerKind::hybrid, std::size_t teacher_steps = 20) {
    TrainConfig tc;
    tc.steps = teacher_steps;
    tc.batch = 4;
    tc.schedule = LrSchedule::warmup_cosine(1e-2, 1e-3, 4, teacher_steps);
    teacher = train_teacher<T>(tiny_config(MixerKind::softmax_full), data, tc);
    student = init_student_from_teacher(teacher, tiny_config(kind));
  }
};

}  // namespace xdistill::testing
