#include <gtest/gtest.h>

#include <cstdlib>

#include "xdistill/config.hpp"
#include "xdistill/selfcheck.hpp"

using namespace xdistill;

namespace {

std::filesystem::path write_tmp(const std::string& name, const std::string& body) {
  auto p = std::filesystem::temp_directory_path() / ("xdistill_cfg_" + name);
  write_text_atomic(p, body);
  return p;
}

}  // namespace

TEST(RunConfig, DefaultsRoundTripThroughJson) {
  RunConfig c;
  nlohmann::json j = c;
  auto back = j.get<RunConfig>();
  EXPECT_EQ(nlohmann::json(back), j);
  EXPECT_NO_THROW(c.validate());
  EXPECT_EQ(c.student_config().mixer_kind, MixerKind::hybrid);
  EXPECT_EQ(c.student_config().d_model, c.teacher.d_model);
}

TEST(RunConfig, UnknownKeysRejectedAtEveryLevel) {
  for (const char* body : {R"({"sed": 3})", R"({"teacher": {"d_modl": 4}})", R"({"distill": {"adamw": {"beta3": 1}}})",
                           R"({"merge": {"experts": [{"path": "a", "weight": 1, "x": 0}]}})",
                           R"({"bench": {"scenarios": [{"mode": "generate", "B": 1}]}})"}) {
    auto p = write_tmp("unknown.json", body);
    EXPECT_THROW(load_run_config(p, {}), ConfigError) << body;
  }
}

TEST(RunConfig, FileThenOverridesThenEnvironment) {
  auto p = write_tmp("layered.json", R"({"seed": 7, "distill": {"gamma": 0.5}, "output_dir": "from_file"})");
  ::unsetenv("XDISTILL_OUTPUT_DIR");
  auto c = load_run_config(p, {"distill.beta=0.25", "align.freeze_set=new_params_only", "distill.domain=kv_recall"});
  EXPECT_EQ(c.seed, 7u);
  EXPECT_EQ(c.distill.gamma, 0.5);
  EXPECT_EQ(c.distill.beta, 0.25);
  EXPECT_EQ(c.distill.domain, "kv_recall");
  EXPECT_EQ(c.distill.k, DistillConfig{}.k);
  EXPECT_EQ(c.output_dir, "from_file");
  ::setenv("XDISTILL_OUTPUT_DIR", "/tmp/elsewhere", 1);
  EXPECT_EQ(load_run_config(p, {}).output_dir, "/tmp/elsewhere");
  ::unsetenv("XDISTILL_OUTPUT_DIR");
}

TEST(RunConfig, BadOverridesAndValues) {
  EXPECT_THROW(load_run_config({}, {"seed"}), ConfigError);
  EXPECT_THROW(load_run_config({}, {"nope=1"}), ConfigError);
  EXPECT_THROW(load_run_config({}, {"teacher.mixer_kind=hybrid"}), ConfigError);
  EXPECT_THROW(load_run_config({}, {"distill.gamma=-1"}), ConfigError);
  EXPECT_THROW(load_run_config({}, {"teacher.vocab_size=100"}), ConfigError);
  EXPECT_THROW(load_run_config({}, {"merge.normalization=sum"}), ConfigError);
  EXPECT_THROW(load_run_config(write_tmp("bad.json", "{"), {}), ConfigError);
}

TEST(RunConfig, StudentOverridesApplyOnTopOfTeacher) {
  auto c = load_run_config({}, {"student.mixer_kind=swa_only", "student.n_sinks=0", "teacher.window=16"});
  auto s = c.student_config();
  EXPECT_EQ(s.mixer_kind, MixerKind::swa_only);
  EXPECT_EQ(s.n_sinks, 0u);
  EXPECT_EQ(s.window, 16u);
  EXPECT_THROW(load_run_config({}, {"student.d_model=3"}), ConfigError);
}

TEST(SelfCheck, IdentityChecksPass) {
  auto rs = identity_checks();
  EXPECT_EQ(rs.size(), 6u);
  for (auto& r : rs) EXPECT_TRUE(r.pass) << r.name << " " << r.value;
}

TEST(SelfCheck, GradientChecksPass) {
  auto rs = gradient_checks();
  for (auto& r : rs) EXPECT_TRUE(r.pass) << r.name << " " << r.value;
  EXPECT_GE(rs.size(), 15u);
}
