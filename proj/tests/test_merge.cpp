#include <gtest/gtest.h>

#include <algorithm>

#include "support.hpp"
#include "xdistill/merge.hpp"

using namespace xdistill;
using namespace xdistill::testing;

namespace {

Checkpoint random_ckpt(std::uint64_t seed, DType dt = DType::f64) {
  auto m = Model<double>::init(tiny_config(MixerKind::hybrid), seed);
  perturb(m, seed + 100, 0.5);
  auto c = m.to_checkpoint();
  c.dtype = dt;
  if (dt == DType::f32)
    for (auto& [n, t] : c.tensors) t = t.cast<float>().cast<double>();
  return c;
}

MergeSpec spec_of(std::vector<Checkpoint> cs, std::vector<double> w,
                  MergeNormalization mode = MergeNormalization::strict) {
  MergeSpec s;
  s.normalization = mode;
  for (std::size_t i = 0; i < cs.size(); ++i) s.experts.push_back({std::move(cs[i]), w[i], "e" + std::to_string(i)});
  return s;
}

double max_tensor_diff(const Checkpoint& a, const Checkpoint& b) {
  double d = 0;
  for (auto& [n, t] : a.tensors) d = std::max(d, max_abs_diff(t, b.tensors.at(n)));
  return d;
}

}  // namespace

TEST(LinearMerge, IdenticalExpertsAreAFixedPoint) {
  for (auto dt : {DType::f64, DType::f32}) {
    auto c = random_ckpt(1, dt);
    for (std::size_t K : {1u, 3u, 7u}) {
      auto m = linear_merge(spec_of(std::vector<Checkpoint>(K, c), std::vector<double>(K, 1.0 / K),
                                    MergeNormalization::automatic));
      EXPECT_LT(max_tensor_diff(m, c), 1e-12);
    }
  }
}

TEST(LinearMerge, SingleExpertIsIdentity) {
  auto c = random_ckpt(2);
  auto m = linear_merge(spec_of({c}, {1.0}));
  for (auto& [n, t] : c.tensors) EXPECT_EQ(m.tensors.at(n), t);
  EXPECT_EQ(m.config, c.config);
}

TEST(LinearMerge, ElementwiseOracleForTwoExperts) {
  auto a = random_ckpt(3), b = random_ckpt(4);
  auto m = linear_merge(spec_of({a, b}, {0.35, 0.65}));
  for (auto& [n, t] : a.tensors) {
    const auto& u = b.tensors.at(n);
    const auto& r = m.tensors.at(n);
    for (std::size_t i = 0; i < t.size(); ++i) EXPECT_NEAR(r[i], 0.35 * t[i] + 0.65 * u[i], 1e-12);
  }
  auto& prov = m.lineage["merge"]["experts"];
  ASSERT_EQ(prov.size(), 2u);
  EXPECT_EQ(prov[0]["hash"], a.hash());
  EXPECT_EQ(prov[1]["weight"], 0.65);
}

TEST(LinearMerge, PermutationInvariant) {
  std::vector<Checkpoint> cs{random_ckpt(5), random_ckpt(6), random_ckpt(7), random_ckpt(8)};
  std::vector<double> w{0.1, 0.2, 0.3, 0.4};
  auto base = linear_merge(spec_of(cs, w));
  std::vector<std::size_t> perm{0, 1, 2, 3};
  while (std::next_permutation(perm.begin(), perm.end())) {
    std::vector<Checkpoint> pc;
    std::vector<double> pw;
    for (auto i : perm) {
      pc.push_back(cs[i]);
      pw.push_back(w[i]);
    }
    EXPECT_LT(max_tensor_diff(linear_merge(spec_of(pc, pw)), base), 1e-12);
  }
}

TEST(LinearMerge, StrictModeRequiresUnitSum) {
  auto a = random_ckpt(3), b = random_ckpt(4);
  EXPECT_THROW(linear_merge(spec_of({a, b}, {0.5, 0.6})), ConfigError);
  EXPECT_NO_THROW(linear_merge(spec_of({a, b}, {0.5, 0.5 + 1e-12})));
  EXPECT_THROW(linear_merge(spec_of({a, b}, {-0.5, 1.5})), ConfigError);
  EXPECT_THROW(linear_merge(MergeSpec{}), ConfigError);
}

TEST(LinearMerge, AutoModeNormalizesMultiplierRecipes) {
  std::vector<Checkpoint> cs{random_ckpt(1), random_ckpt(2), random_ckpt(3), random_ckpt(4)};
  auto s = spec_of(cs, {0.35, 0.35, 20, 10}, MergeNormalization::automatic);
  auto w = s.effective_weights();
  double sum = 0;
  for (double x : w) sum += x;
  EXPECT_NEAR(sum, 1.0, 1e-15);
  EXPECT_NEAR(w[2], 20 / 30.7, 1e-15);
  auto m = linear_merge(s);
  const auto& t0 = cs[0].tensors.at("embed");
  double expect = 0;
  for (std::size_t e = 0; e < 4; ++e) expect += w[e] * cs[e].tensors.at("embed")[5];
  EXPECT_NEAR(m.tensors.at("embed")[5], expect, 1e-12);
  EXPECT_EQ(t0.shape(), m.tensors.at("embed").shape());
  EXPECT_THROW(linear_merge(spec_of({cs[0]}, {0.0}, MergeNormalization::automatic)), ConfigError);
}

TEST(LinearMerge, MismatchedExpertsRejected) {
  auto a = random_ckpt(3);
  auto other_cfg = Model<double>::init(tiny_config(MixerKind::mlstm_only), 1).to_checkpoint();
  EXPECT_THROW(linear_merge(spec_of({a, other_cfg}, {0.5, 0.5})), ContractError);
  auto missing = a;
  missing.tensors.erase("embed");
  EXPECT_THROW(linear_merge(spec_of({a, missing}, {0.5, 0.5})), ContractError);
  auto reshaped = a;
  reshaped.tensors.at("final_norm") = Tensor<double>(Shape{9});
  EXPECT_THROW(linear_merge(spec_of({a, reshaped}, {0.5, 0.5})), DimensionError);
  auto f32 = random_ckpt(4, DType::f32);
  EXPECT_THROW(linear_merge(spec_of({a, f32}, {0.5, 0.5})), ContractError);
}

TEST(PatchMerge, MatchesFullRemerge) {
  std::vector<Checkpoint> cs{random_ckpt(1), random_ckpt(2), random_ckpt(3)};
  auto s = spec_of(cs, {0.2, 0.5, 0.3});
  auto base = linear_merge(s);
  auto same = patch_merge(s, 1, cs[1]);
  EXPECT_LT(max_tensor_diff(same, base), 1e-15);
  auto fresh = random_ckpt(9);
  auto patched = patch_merge(s, 2, fresh);
  auto edited = s;
  edited.experts[2].checkpoint = fresh;
  EXPECT_LT(max_tensor_diff(patched, linear_merge(edited)), 1e-15);
  auto zero = spec_of(cs, {0.5, 0.5, 0.0});
  EXPECT_LT(max_tensor_diff(patch_merge(zero, 2, fresh), linear_merge(zero)), 1e-15);
  EXPECT_THROW(patch_merge(s, 3, fresh), ConfigError);
}

TEST(LinearMerge, ExpertsFromOneSeedMergeIntoARunnableModel) {
  TinyPipeline<double> p;
  auto targets = precompute_teacher_targets(p.teacher, p.data, 8);
  std::vector<Checkpoint> experts;
  for (const char* dom : {"markov_background", "local_ngram", "kv_recall"}) {
    DistillConfig c;
    c.k = 8;
    c.steps = 3;
    c.batch = 2;
    c.domain = dom;
    c.schedule = LrSchedule::constant_lr(1e-3);
    experts.push_back(stage2_distill(p.student, p.data, targets, c).to_checkpoint());
  }
  auto merged = Model<double>::from_checkpoint(
      linear_merge(spec_of(experts, {1, 1, 1}, MergeNormalization::automatic)));
  EXPECT_TRUE(logits(merged, p.data.eval[0].tokens).all_finite());
  EXPECT_EQ(merged.lineage["teacher_hash"], p.student.lineage["teacher_hash"]);
}
