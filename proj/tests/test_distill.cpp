#include <gtest/gtest.h>

#include <algorithm>

#include "oracles.hpp"
#include "support.hpp"
#include "xdistill/gradcheck.hpp"

using namespace xdistill;
using namespace xdistill::testing;

namespace {

std::vector<double> normal_vec(Rng& rng, std::size_t n, double sd) {
  std::vector<double> v(n);
  for (auto& x : v) x = rng.normal() * sd;
  return v;
}

}  // namespace

// ---------------------------------------------------------------------------

TEST(AlignmentTargets, ShapesPerLayer) {
  TinyPipeline<double> p;
  auto& tok = p.data.train[0].tokens;
  auto a = capture_alignment_targets(p.teacher, tok);
  ASSERT_EQ(a.outputs.size(), 2u);
  for (std::size_t l = 0; l < 2; ++l) {
    EXPECT_EQ(a.outputs[l].shape(), (Shape{tok.size(), 2 * 3}));
    EXPECT_EQ(a.inputs[l].shape(), (Shape{tok.size(), 8}));
  }
}

TEST(AlignmentTargets, ClosedGateFullWindowStudentHasZeroLoss) {
  TinyPipeline<double> p;
  auto sc = tiny_config(MixerKind::hybrid);
  sc.window = 64;
  auto s = init_student_from_teacher(p.teacher, sc);
  perturb(s, 5, 0.5, true);
  MixerOptions closed;
  closed.force_output_gate = 0.0;
  auto r = alignment_loss(s, p.teacher, p.data.eval, closed);
  EXPECT_LT(r.total, 1e-10);
  EXPECT_GT(alignment_loss(s, p.teacher, p.data.eval).total, 1e-6);
}

TEST(AlignmentTargets, IndependentOfBatchOrder) {
  TinyPipeline<double> p;
  auto a = capture_alignment_targets(p.teacher, p.data.train[3].tokens);
  capture_alignment_targets(p.teacher, p.data.train[1].tokens);
  auto b = capture_alignment_targets(p.teacher, p.data.train[3].tokens);
  for (std::size_t l = 0; l < 2; ++l) EXPECT_EQ(a.outputs[l], b.outputs[l]);
}

TEST(Stage1, ZeroStepsLeavesStudentUnchanged) {
  TinyPipeline<double> p;
  AlignConfig cfg;
  cfg.steps = 0;
  auto s = stage1_align(p.student, p.teacher, p.data, cfg);
  for (auto& [n, v] : p.student.params) EXPECT_EQ(s.p(n)->value, v->value) << n;
}

TEST(Stage1, ReducesAlignmentLossAndFreezesSharedWeights) {
  TinyPipeline<double> p;
  AlignConfig cfg;
  cfg.steps = 60;
  cfg.batch = 4;
  cfg.schedule = LrSchedule::warmup_cosine(1e-2, 1e-5, 5, 60);
  StageReport rep;
  auto s = stage1_align(p.student, p.teacher, p.data, cfg, &rep);
  EXPECT_LT(rep.final_eval, rep.initial_eval);
  std::size_t changed = 0;
  for (auto& [n, v] : p.student.params) {
    if (is_new_param(n))
      changed += !(s.p(n)->value == v->value);
    else
      EXPECT_EQ(s.p(n)->value, v->value) << n;
  }
  EXPECT_EQ(changed, 2u * 5u);  // phi_q, phi_k, gate_i, gate_f, gate_o per layer
  EXPECT_EQ(s.lineage["stage"], "align");
}

TEST(Stage1, LayerOrderDoesNotMatter) {
  TinyPipeline<double> p;
  AlignConfig cfg;
  cfg.steps = 8;
  cfg.batch = 2;
  auto a = stage1_align(p.student, p.teacher, p.data, cfg);
  cfg.layer_order = {1, 0};
  auto b = stage1_align(p.student, p.teacher, p.data, cfg);
  for (auto& [n, v] : a.params) EXPECT_EQ(b.p(n)->value, v->value) << n;
}

TEST(Stage1, OnlyNewParamsFreezeSetAccepted) {
  TinyPipeline<double> p;
  AlignConfig cfg;
  cfg.freeze_set = FreezeSet::full;
  EXPECT_THROW(stage1_align(p.student, p.teacher, p.data, cfg), ConfigError);
}

TEST(Stage1, LossGradientMatchesFiniteDifferences) {
  for (auto mode : {GateInputMode::concat_qkv, GateInputMode::layer_input}) {
    TinyPipeline<double> p;
    auto sc = tiny_config(MixerKind::hybrid);
    sc.gate_input_mode = mode;
    auto s = init_student_from_teacher(p.teacher, sc);
    perturb(s, 9, 0.3, true);
    auto tg = capture_alignment_targets(p.teacher, p.data.train[0].tokens);
    std::vector<Var<double>> inputs;
    for (auto& [n, v] : s.params)
      if (n.starts_with("layers.1.mixer.")) inputs.push_back(v);
    auto f = [&](Tape<double>& tape, const std::vector<Var<double>>&) {
      return layer_alignment_loss(tape, s, 1, tg.inputs[1], tg.outputs[1]);
    };
    auto r = grad_check<double>(f, inputs, 1e-5, 24);
    EXPECT_LT(r.max_rel_error, 1e-4) << r.worst;
  }
}

// ---------------------------------------------------------------------------

TEST(TeacherTargets, TopKMatchesFullSort) {
  TinyPipeline<double> p;
  for (std::size_t k : {1u, 5u, 24u}) {
    auto t = precompute_teacher_targets(p.teacher, p.data, k);
    EXPECT_EQ(t.n_positions(), p.data.train.size() * p.data.spec.seq_len);
    for (std::size_t s : {0u, 7u}) {
      auto lg = logits(p.teacher, p.data.train[s].tokens);
      for (std::size_t pos = 0; pos < t.seq_len; ++pos) {
        std::vector<std::pair<double, std::uint32_t>> all;
        for (std::uint32_t j = 0; j < 24; ++j) all.push_back({-lg.at(pos, j), j});
        std::sort(all.begin(), all.end());
        for (std::size_t j = 0; j < k; ++j) {
          EXPECT_EQ(t.ids_at(s, pos)[j], all[j].second);
          EXPECT_EQ(t.logits_at(s, pos)[j], static_cast<float>(-all[j].first));
        }
        if (k == 1) {
          EXPECT_EQ(t.ids_at(s, pos)[0], argmax_token<double>(lg.row(pos)));
        }
      }
    }
  }
}

TEST(TeacherTargets, FullKReconstructsSoftmax) {
  TinyPipeline<double> p;
  auto t = precompute_teacher_targets(p.teacher, p.data, 24);
  auto lg = logits(p.teacher, p.data.train[2].tokens);
  auto full = detail::softmax_of(lg.row(5).data(), 24);
  auto part = detail::softmax_of(t.logits_at(2, 5), 24);
  for (std::size_t j = 0; j < 24; ++j) EXPECT_NEAR(part[j], full[t.ids_at(2, 5)[j]], 1e-6);
}

TEST(TeacherTargets, TiesGoToLowerId) {
  std::vector<double> row{1.0, 3.0, 3.0, 0.5, 3.0};
  EXPECT_EQ(top_k_ids<double>(row, 2), (std::vector<std::uint32_t>{1, 2}));
}

TEST(TeacherTargets, FileRoundTripAndValidation) {
  TinyPipeline<double> p;
  auto t = precompute_teacher_targets(p.teacher, p.data, 6);
  auto bytes = t.serialize();
  auto u = TeacherTargets::deserialize(bytes);
  EXPECT_EQ(u.serialize(), bytes);
  EXPECT_EQ(u.teacher_hash, p.teacher.to_checkpoint().hash());
  EXPECT_EQ(u.dataset_hash, p.data.hash());
  auto cut = bytes;
  cut.pop_back();
  EXPECT_THROW(TeacherTargets::deserialize(cut), IoError);
  EXPECT_THROW(precompute_teacher_targets(p.teacher, p.data, 25), ConfigError);
}

// ---------------------------------------------------------------------------

TEST(SparseKL, ZeroForEqualLogitsUnderShift) {
  Rng rng(1);
  auto t = normal_vec(rng, 10, 2.0);
  std::vector<std::uint32_t> ids{4, 0, 9, 2};
  std::vector<double> tl, student(12, -50.0);
  for (auto i : ids) {
    tl.push_back(t[i]);
    student[i] = t[i] + 3.7;
  }
  EXPECT_NEAR(sparse_kl_row(ids.data(), tl.data(), 4, student.data()), 0.0, 1e-10);
}

TEST(SparseKL, FullKEqualsDenseKL) {
  Rng rng(2);
  for (int trial = 0; trial < 50; ++trial) {
    const std::size_t V = 3 + rng.below(30);
    auto t = normal_vec(rng, V, 3.0), s = normal_vec(rng, V, 3.0);
    auto ids = top_k_ids<double>(t, V);
    std::vector<double> tl;
    for (auto i : ids) tl.push_back(t[i]);
    EXPECT_NEAR(sparse_kl_row(ids.data(), tl.data(), V, s.data()), dense_kl(t, s), 1e-10);
  }
}

TEST(SparseKL, NonNegativeOnRandomInputs) {
  Rng rng(3);
  for (int trial = 0; trial < 10000; ++trial) {
    const std::size_t V = 2 + rng.below(40);
    const std::size_t k = 1 + rng.below(V);
    const double sd = trial % 3 == 0 ? 20.0 : 2.0;
    auto t = normal_vec(rng, V, sd), s = normal_vec(rng, V, sd);
    auto ids = top_k_ids<double>(t, k);
    std::vector<double> tl;
    for (auto i : ids) tl.push_back(t[i]);
    ASSERT_GE(sparse_kl_row(ids.data(), tl.data(), k, s.data()), -1e-12);
  }
}

TEST(SparseKL, TapeOpMatchesRowsAndGradient) {
  Rng rng(4);
  const std::size_t T = 5, V = 9, k = 4;
  auto x = make_var(rng.normal_tensor<double>({T, V}, 2.0));
  std::vector<std::uint32_t> ids;
  std::vector<double> tl;
  for (std::size_t r = 0; r < T; ++r) {
    auto t = normal_vec(rng, V, 2.0);
    for (auto i : top_k_ids<double>(t, k)) {
      ids.push_back(i);
      tl.push_back(t[i]);
    }
  }
  Tape<double> tape;
  auto kl = sparse_kl(tape, x, ids.data(), tl.data(), k);
  double ref = 0;
  for (std::size_t r = 0; r < T; ++r) ref += sparse_kl_row(ids.data() + r * k, tl.data() + r * k, k, x->value.data() + r * V);
  EXPECT_NEAR(kl->value.item(), ref / T, 1e-12);
  auto f = [&](Tape<double>& tp, const std::vector<Var<double>>& in) { return sparse_kl(tp, in[0], ids.data(), tl.data(), k); };
  EXPECT_LT(grad_check<double>(f, {x}).max_rel_error, 1e-7);
}

TEST(SparseKL, FlooredStudentProbabilityGradient) {
  // one id set entry sits ~60 nats below the others so its q is under 1e-12
  std::vector<std::uint32_t> ids{0, 1, 2};
  std::vector<double> tl{1.0, 0.5, 0.0};
  auto x = make_var(Tensor<double>::matrix({{2.0, 1.0, -60.0, 0.0}}));
  auto f = [&](Tape<double>& tp, const std::vector<Var<double>>& in) { return sparse_kl(tp, in[0], ids.data(), tl.data(), 3); };
  EXPECT_LT(grad_check<double>(f, {x}, 1e-6).max_rel_error, 1e-6);
}

// ---------------------------------------------------------------------------

namespace {

struct Stage2Fixture {
  TinyPipeline<double> p;
  TeacherTargets targets;
  Stage2Fixture() : targets(precompute_teacher_targets(p.teacher, p.data, 8)) {}
  DistillConfig cfg(double g, double b, std::size_t steps) const {
    DistillConfig c;
    c.gamma = g;
    c.beta = b;
    c.k = 8;
    c.steps = steps;
    c.batch = 2;
    c.schedule = LrSchedule::constant_lr(1e-3);
    return c;
  }
};

}  // namespace

TEST(Stage2, PureCEWeightEqualsPlainCrossEntropy) {
  Stage2Fixture f;
  auto& tok = f.p.data.train[1].tokens;
  Tape<double> t1, t2;
  auto l = distill_loss(t1, f.p.student, tok, f.targets.ids_at(1), f.targets.logits_at(1), 8, 1.0, 0.0);
  auto r = forward(t2, f.p.student, std::span<const std::uint32_t>(tok.data(), tok.size() - 1));
  auto ce = cross_entropy(t2, r.logits, std::span<const std::uint32_t>(tok.data() + 1, tok.size() - 1));
  EXPECT_NEAR(l->value.item(), ce->value.item(), 1e-12);
}

TEST(Stage2, ZeroWeightsLeaveParamsUnchanged) {
  Stage2Fixture f;
  auto s = stage2_distill(f.p.student, f.p.data, f.targets, f.cfg(0, 0, 3));
  for (auto& [n, v] : f.p.student.params) EXPECT_EQ(s.p(n)->value, v->value) << n;
}

TEST(Stage2, FreezeSetComplementIsBitwiseUnchanged) {
  Stage2Fixture f;
  for (auto fs : {FreezeSet::new_params_only, FreezeSet::mixers_only, FreezeSet::full}) {
    auto c = f.cfg(0.9, 0.1, 3);
    c.freeze_set = fs;
    auto s = stage2_distill(f.p.student, f.p.data, f.targets, c);
    std::size_t moved = 0;
    for (auto& [n, v] : f.p.student.params) {
      if (trainable_under(fs, n))
        moved += !(s.p(n)->value == v->value);
      else
        EXPECT_EQ(s.p(n)->value, v->value) << to_string(fs) << " " << n;
    }
    EXPECT_GT(moved, 0u) << to_string(fs);
  }
}

TEST(Stage2, ReducesTrainingLoss) {
  Stage2Fixture f;
  StageReport rep;
  auto c = f.cfg(0.9, 0.1, 40);
  c.batch = 4;
  c.schedule = LrSchedule::constant_lr(3e-3);
  stage2_distill(f.p.student, f.p.data, f.targets, c, &rep);
  const double first = (rep.losses[0] + rep.losses[1] + rep.losses[2]) / 3;
  const double last = (rep.losses[37] + rep.losses[38] + rep.losses[39]) / 3;
  EXPECT_LT(last, first);
}

TEST(Stage2, RefusesMismatchedHashes) {
  Stage2Fixture f;
  auto bad = f.targets;
  bad.teacher_hash = std::string(64, '0');
  EXPECT_THROW(stage2_distill(f.p.student, f.p.data, bad, f.cfg(1, 0, 1)), ContractError);
  bad = f.targets;
  bad.dataset_hash = std::string(64, '0');
  EXPECT_THROW(stage2_distill(f.p.student, f.p.data, bad, f.cfg(1, 0, 1)), ContractError);
  auto c = f.cfg(1, 0, 1);
  c.k = 4;
  EXPECT_THROW(stage2_distill(f.p.student, f.p.data, f.targets, c), ConfigError);
  c = f.cfg(-1, 0, 1);
  EXPECT_THROW(stage2_distill(f.p.student, f.p.data, f.targets, c), ConfigError);
}

TEST(Stage2, DomainRestrictsSequences) {
  Stage2Fixture f;
  auto idx = domain_indices(f.p.data, "kv_recall");
  for (auto i : idx) EXPECT_EQ(f.p.data.train[i].kind, StreamKind::kv_recall);
  EXPECT_EQ(domain_indices(f.p.data, "").size(), f.p.data.train.size());
  auto c = f.cfg(1, 0, 1);
  c.domain = "poetry";
  EXPECT_THROW(stage2_distill(f.p.student, f.p.data, f.targets, c), ConfigError);
}

TEST(Stage2, LossGradientThroughFullModel64) {
  Stage2Fixture f;
  auto s = f.p.student.clone();
  perturb(s, 12, 0.2, true);
  auto& tok = f.p.data.train[4].tokens;
  std::vector<Var<double>> inputs;
  for (auto& [n, v] : s.params) inputs.push_back(v);
  auto fn = [&](Tape<double>& tape, const std::vector<Var<double>>&) {
    return distill_loss(tape, s, tok, f.targets.ids_at(4), f.targets.logits_at(4), 8, 0.9, 0.1);
  };
  auto r = grad_check<double>(fn, inputs, 1e-5, 6);
  EXPECT_LT(r.max_rel_error, 1e-4) << r.worst;
}

TEST(Stage2, LossGradientThroughFullModel32) {
  Stage2Fixture f;
  auto sd = f.p.student.clone();
  perturb(sd, 12, 0.2, true);
  auto sf = sd.cast<float>();
  auto& tok = f.p.data.train[4].tokens;
  sf.set_trainable([](const std::string&) { return true; });
  {
    Tape<float> tape;
    tape.backward(distill_loss(tape, sf, tok, f.targets.ids_at(4), f.targets.logits_at(4), 8, 0.9, 0.1));
  }
  // float analytic gradient against double central differences at the same point
  double worst = 0;
  for (auto& [n, v] : sd.params) {
    auto& x = v->value;
    const std::size_t stride = std::max<std::size_t>(1, x.size() / 4);
    for (std::size_t i = 0; i < x.size(); i += stride) {
      const double orig = x[i], h = 1e-5;
      auto eval = [&] {
        Tape<double> t;
        return distill_loss(t, sd, tok, f.targets.ids_at(4), f.targets.logits_at(4), 8, 0.9, 0.1)->value.item();
      };
      x[i] = orig + h;
      const double up = eval();
      x[i] = orig - h;
      const double dn = eval();
      x[i] = orig;
      const double num = (up - dn) / (2 * h);
      const double ana = sf.p(n)->grad.empty() ? 0.0 : sf.p(n)->grad[i];
      worst = std::max(worst, std::abs(num - ana) / std::max({std::abs(num), std::abs(ana), 1e-3}));
    }
  }
  EXPECT_LT(worst, 1e-3);
}
