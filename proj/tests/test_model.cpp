#include <gtest/gtest.h>

#include <cmath>

#include "xdistill/gradcheck.hpp"
#include "xdistill/model.hpp"

using namespace xdistill;

namespace {

ModelConfig tiny(MixerKind kind) {
  ModelConfig c;
  c.vocab_size = 20;
  c.d_model = 8;
  c.n_layers = 2;
  c.n_heads = 2;
  c.d_qk = 4;
  c.d_v = 3;
  c.mlp_hidden = 12;
  c.max_seq_len = 40;
  c.mixer_kind = kind;
  c.window = 4;
  c.n_sinks = 2;
  c.chunk_size = 4;
  return c;
}

TokenSeq random_tokens(std::size_t n, std::size_t vocab, std::uint64_t seed) {
  Rng rng(seed);
  TokenSeq t(n);
  for (auto& x : t) x = static_cast<std::uint32_t>(rng.below(vocab));
  return t;
}

// Perturbs every parameter so that gates and feature maps are not at their
// identity/zero initialization.
template <class T>
void perturb(Model<T>& m, std::uint64_t seed, double sd = 0.3) {
  Rng rng(seed);
  for (auto& [n, v] : m.params) {
    auto noise = rng.normal_tensor<T>(v->value.shape(), sd);
    for (std::size_t i = 0; i < noise.size(); ++i) v->value[i] += noise[i];
  }
}

const MixerKind kAllKinds[] = {MixerKind::softmax_full, MixerKind::swa_only, MixerKind::linear_attn,
                               MixerKind::mlstm_only, MixerKind::hybrid};

}  // namespace

TEST(ModelConfig, JsonRoundTripAndStrictness) {
  auto c = tiny(MixerKind::hybrid);
  c.gate_input_mode = GateInputMode::layer_input;
  nlohmann::json j = c;
  EXPECT_EQ(j.get<ModelConfig>(), c);
  j["d_modle"] = 3;
  EXPECT_THROW(j.get<ModelConfig>(), ConfigError);
  EXPECT_THROW(nlohmann::json({{"mixer_kind", "transformer"}}).get<ModelConfig>(), ConfigError);
}

TEST(ModelParams, NewParameterCountFormula) {
  for (std::size_t L : {1u, 3u})
    for (std::size_t H : {1u, 2u, 4u}) {
      auto c = tiny(MixerKind::hybrid);
      c.n_layers = L;
      c.n_heads = H;
      c.d_qk = 6;
      c.d_v = 5;
      EXPECT_EQ(new_parameter_count(c), L * H * (2 * 6 * 6 + 3 * (2 * 6 + 5)));
    }
  EXPECT_EQ(new_parameter_count(tiny(MixerKind::softmax_full)), 0u);
  EXPECT_EQ(new_parameter_count(tiny(MixerKind::swa_only)), 0u);
  EXPECT_EQ(new_parameter_count(tiny(MixerKind::linear_attn)), 2u * 2 * (2 * 16));
}

TEST(ModelParams, StudentSharesEverythingButNewParams) {
  auto t = Model<double>::init(tiny(MixerKind::softmax_full), 1);
  auto s = init_student_from_teacher(t, tiny(MixerKind::hybrid));
  std::size_t shared = 0;
  for (auto& [n, v] : s.params) {
    if (is_new_param(n)) {
      EXPECT_FALSE(t.params.count(n)) << n;
      continue;
    }
    ++shared;
    EXPECT_EQ(v->value, t.p(n)->value) << n;
  }
  EXPECT_EQ(shared, t.params.size());
  EXPECT_EQ(s.parameter_count() - t.parameter_count(), new_parameter_count(s.cfg));
  EXPECT_EQ(s.lineage["teacher_hash"], t.to_checkpoint().hash());
  auto wrong = tiny(MixerKind::hybrid);
  wrong.d_v = 4;
  EXPECT_THROW(init_student_from_teacher(t, wrong), DimensionError);
}

TEST(ModelParams, FreezeSets) {
  EXPECT_TRUE(trainable_under(FreezeSet::new_params_only, "layers.0.mixer.gate_o"));
  EXPECT_TRUE(trainable_under(FreezeSet::new_params_only, "layers.1.mixer.phi_k"));
  EXPECT_FALSE(trainable_under(FreezeSet::new_params_only, "layers.0.mixer.wq"));
  EXPECT_TRUE(trainable_under(FreezeSet::mixers_only, "layers.0.mixer.wq"));
  EXPECT_FALSE(trainable_under(FreezeSet::mixers_only, "layers.0.mlp.w_up"));
  EXPECT_TRUE(trainable_under(FreezeSet::full, "embed"));
  EXPECT_THROW(freeze_set_from_string("most"), ConfigError);
}

TEST(ModelCheckpoint, RoundTripPreservesLogits) {
  for (auto kind : kAllKinds) {
    auto m = Model<double>::init(tiny(kind), 3);
    perturb(m, 4);
    auto back = Model<double>::from_checkpoint(Checkpoint::deserialize(m.to_checkpoint().serialize()));
    auto tok = random_tokens(9, 20, 5);
    EXPECT_EQ(logits(back, tok), logits(m, tok)) << to_string(kind);
    EXPECT_EQ(back.to_checkpoint().hash(), m.to_checkpoint().hash());
  }
}

TEST(ModelCheckpoint, ParameterSetValidated) {
  auto m = Model<float>::init(tiny(MixerKind::hybrid), 3);
  auto c = m.to_checkpoint();
  auto missing = c;
  missing.tensors.erase("layers.1.mixer.gate_o");
  EXPECT_THROW(Model<float>::from_checkpoint(missing), ContractError);
  auto extra = c;
  extra.tensors["layers.9.mlp.w_up"] = Tensor<double>(Shape{1});
  EXPECT_THROW(Model<float>::from_checkpoint(extra), ContractError);
  auto reshaped = c;
  reshaped.tensors["unembed"] = Tensor<double>(Shape{8, 21});
  EXPECT_THROW(Model<float>::from_checkpoint(reshaped), DimensionError);
}

TEST(ModelForward, RejectsBadTokens) {
  auto m = Model<double>::init(tiny(MixerKind::hybrid), 3);
  TokenSeq bad{1, 2, 20};
  EXPECT_THROW(logits(m, bad), ContractError);
  EXPECT_THROW(logits(m, TokenSeq{}), ContractError);
  EXPECT_THROW(logits(m, TokenSeq(41, 1)), ContractError);
}

TEST(ModelForward, StudentWithClosedGateAndFullWindowMatchesTeacher) {
  auto tc = tiny(MixerKind::softmax_full);
  auto t = Model<double>::init(tc, 11);
  perturb(t, 12, 0.1);
  auto sc = tiny(MixerKind::hybrid);
  sc.window = 64;
  auto s = init_student_from_teacher(t, sc);
  perturb(s, 13);  // perturbs shared weights too; copy them back
  for (auto& [n, v] : t.params) s.params.at(n)->value = v->value;
  auto tok = random_tokens(30, 20, 14);
  ForwardOptions fo;
  fo.mixer.force_output_gate = 0.0;
  EXPECT_LT(max_abs_diff(logits(s, tok, fo), logits(t, tok)), 1e-10);
  auto tf = t.cast<float>();
  auto sf = s.cast<float>();
  EXPECT_LT(max_abs_diff(logits(sf, tok, fo), logits(tf, tok)), 1e-5);
}

TEST(ModelForward, SinksDoNotChangeTeacherButChangeSWA) {
  auto tok = random_tokens(20, 20, 2);
  auto a = tiny(MixerKind::swa_only), b = a;
  b.n_sinks = 0;
  auto ma = Model<double>::init(a, 1), mb = Model<double>::init(b, 1);
  EXPECT_GT(max_abs_diff(logits(ma, tok), logits(mb, tok)), 1e-6);
}

TEST(ModelDecode, ParallelMatchesRecurrentForEveryKind) {
  for (auto kind : kAllKinds)
    for (auto mode : {GateInputMode::concat_qkv, GateInputMode::layer_input})
      for (bool merge : {false, true}) {
        auto c = tiny(kind);
        c.gate_input_mode = mode;
        auto m = Model<double>::init(c, 21);
        perturb(m, 22);
        auto tok = random_tokens(19, 20, 23);
        auto full = logits(m, tok);
        for (std::size_t split : {1u, 6u}) {
          DecodeSession<double> sess(m, {}, merge);
          auto lg = sess.prefill(std::span<const std::uint32_t>(tok.data(), split));
          for (std::size_t t = split;; ++t) {
            for (std::size_t j = 0; j < lg.size(); ++j)
              ASSERT_NEAR(lg[j], full.at(t - 1, j), 1e-10) << to_string(kind) << " t=" << t << " split=" << split;
            if (t == tok.size()) break;
            lg = sess.step(tok[t]);
          }
          EXPECT_EQ(sess.position(), tok.size());
        }
      }
}

TEST(ModelDecode, CacheFootprint) {
  auto c = tiny(MixerKind::hybrid);
  auto m = Model<double>::init(c, 1);
  DecodeSession<double> sess(m);
  auto tok = random_tokens(30, 20, 1);
  sess.prefill(tok);
  const std::size_t per_layer = (c.window + c.n_sinks) * c.n_heads * (c.d_qk + c.d_v) +
                                c.n_heads * (c.d_qk * c.d_v + c.d_qk + 1);
  EXPECT_EQ(sess.cache_scalars(), c.n_layers * per_layer);
}

TEST(ModelDecode, GreedyMatchesFullRecomputation) {
  for (auto kind : {MixerKind::softmax_full, MixerKind::hybrid}) {
    auto m = Model<double>::init(tiny(kind), 31);
    perturb(m, 32);
    TokenSeq prompt = random_tokens(5, 20, 33);
    auto out = generate(m, prompt, 12);
    ASSERT_EQ(out.size(), 17u);
    TokenSeq ref = prompt;
    while (ref.size() < 17) {
      auto lg = logits(m, ref);
      ref.push_back(argmax_token<double>(lg.row(lg.rows() - 1)));
    }
    EXPECT_EQ(out, ref) << to_string(kind);
  }
}

TEST(ModelDecode, ArgmaxTiesGoToLowestIndex) {
  std::vector<double> v{0.5, 2.0, -1.0, 2.0};
  EXPECT_EQ(argmax_token<double>(v), 1u);
}

TEST(ModelDecode, SamplingIsSeeded) {
  auto m = Model<double>::init(tiny(MixerKind::hybrid), 41);
  TokenSeq prompt{1, 2, 3};
  Sampling s{1.0, 9};
  EXPECT_EQ(generate(m, prompt, 10, s), generate(m, prompt, 10, s));
}

TEST(ModelDecode, TeacherOverflowIsAnError) {
  auto m = Model<double>::init(tiny(MixerKind::softmax_full), 1);
  EXPECT_THROW(generate(m, TokenSeq(30, 1), 11), ContractError);
  EXPECT_NO_THROW(generate(m, TokenSeq(30, 1), 10));
  DecodeSession<double> sess(m);
  sess.prefill(TokenSeq(40, 1));
  EXPECT_THROW(sess.step(1), ContractError);
  // students are not bounded by max_seq_len at decode time
  auto s = Model<double>::init(tiny(MixerKind::hybrid), 1);
  EXPECT_EQ(generate(s, TokenSeq(30, 1), 20).size(), 50u);
}

TEST(ModelGrad, WholeModelFiniteDifferences) {
  for (auto kind : {MixerKind::softmax_full, MixerKind::hybrid}) {
    auto m = Model<double>::init(tiny(kind), 51);
    perturb(m, 52, 0.2);
    auto tok = random_tokens(11, 20, 53);
    std::vector<Var<double>> inputs;
    for (auto& [n, v] : m.params) inputs.push_back(v);
    auto f = [&](Tape<double>& tape, const std::vector<Var<double>>&) {
      auto r = forward(tape, m, std::span<const std::uint32_t>(tok.data(), 10));
      return cross_entropy(tape, r.logits, std::span<const std::uint32_t>(tok.data() + 1, 10));
    };
    auto res = grad_check<double>(f, inputs, 1e-5, 8);
    EXPECT_LT(res.max_rel_error, 1e-5) << to_string(kind) << " worst " << res.worst;
  }
}

TEST(TrainTeacher, LearnsAndIsDeterministic) {
  CorpusSpec cs;
  cs.vocab_size = 20;
  cs.seq_len = 24;
  cs.n_sequences = 16;
  cs.n_eval = 4;
  cs.window = 4;
  cs.n_keys = 4;
  cs.n_values = 4;
  cs.ngram_len = 3;
  auto data = generate_corpus(cs);
  auto c = tiny(MixerKind::softmax_full);
  TrainConfig tc;
  tc.steps = 40;
  tc.batch = 4;
  tc.schedule = LrSchedule::warmup_cosine(1e-2, 1e-3, 5, 40);
  TrainReport r;
  auto a = train_teacher<double>(c, data, tc, &r, 1);
  auto b = train_teacher<double>(c, data, tc, nullptr, 1);
  EXPECT_EQ(a.to_checkpoint().hash(), b.to_checkpoint().hash());
  EXPECT_LT(r.losses.back(), r.losses.front());
  EXPECT_LT(r.eval_ce, r.uniform_ce);
  EXPECT_EQ(a.lineage["dataset_hash"], data.hash());
  EXPECT_THROW(train_teacher<double>(tiny(MixerKind::hybrid), data, tc), ConfigError);
}
