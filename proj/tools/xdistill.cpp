// xdistill: corpus generation, teacher training, hybrid student distillation,
// expert merging, metrics and benchmarks behind one subcommand-style binary.

#include <CLI11.hpp>

#include <chrono>
#include <ctime>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <sstream>

#include "xdistill/bench.hpp"
#include "xdistill/config.hpp"
#include "xdistill/evalkit.hpp"
#include "xdistill/merge.hpp"
#include "xdistill/selfcheck.hpp"

namespace fs = std::filesystem;
using namespace xdistill;
using json = nlohmann::json;

namespace {

using M = Model<float>;

struct Context {
  RunConfig cfg;
  fs::path out;
  bool verbose = false;
  std::ofstream run_log;

  void log(const std::string& msg) {
    const auto now = std::chrono::system_clock::now();
    const auto tt = std::chrono::system_clock::to_time_t(now);
    std::tm tm{};
    gmtime_r(&tt, &tm);
    run_log << std::put_time(&tm, "%Y-%m-%dT%H:%M:%SZ") << ' ' << msg << '\n';
    run_log.flush();
    if (verbose) std::cerr << msg << '\n';
  }

  fs::path path(const std::string& opt, const std::string& fallback) const {
    if (opt.empty()) return out / fallback;
    fs::path p(opt);
    return p.is_absolute() || fs::exists(p) ? p : out / p;
  }
};

// Summaries carry no timestamps so reruns with the same seed are identical.
void emit(Context& ctx, const std::string& name, const json& summary) {
  write_text_atomic(ctx.out / (name + ".summary.json"), summary.dump(2) + "\n");
  std::cout << summary.dump(2) << std::endl;
  ctx.log(name + " done");
}

M load_model(const fs::path& p) { return M::from_checkpoint(Checkpoint::load(p)); }

void save_model(const M& m, const fs::path& p) { m.to_checkpoint().save(p); }

void check_teacher_link(const M& student, const fs::path& teacher_path) {
  const auto want = student.lineage.value("teacher_hash", std::string());
  const auto have = sha256_file(teacher_path);
  if (want != have)
    throw ContractError("student was initialized from teacher " + want + ", but " + teacher_path.string() + " hashes to " + have);
}

json stage_losses(const std::vector<double>& losses) {
  if (losses.empty()) return {{"first", nullptr}, {"last", nullptr}};
  return {{"first", losses.front()}, {"last", losses.back()}};
}

json model_eval(const M& m, const Dataset& data) {
  json per_kind = json::object();
  for (auto kind : {StreamKind::markov_background, StreamKind::local_ngram, StreamKind::kv_recall}) {
    std::vector<Sequence> s;
    for (auto& q : data.eval)
      if (q.kind == kind) s.push_back(q);
    if (!s.empty()) per_kind[to_string(kind)] = eval_ce(m, s);
  }
  return {{"eval_ce", eval_ce(m, data.eval)},
          {"eval_ce_by_kind", per_kind},
          {"recall_accuracy", recall_accuracy(m, data.eval, data.eval_pairs)}};
}

std::vector<Sequence> probe_of(const Dataset& data, std::size_t n) {
  return {data.eval.begin(), data.eval.begin() + static_cast<std::ptrdiff_t>(std::min(n, data.eval.size()))};
}

/// Teacher-vs-student score table on the eval split: next-token accuracy per
/// stream kind plus planted-recall accuracy, in percent.
ScoreTable desk_scores(const M& teacher, const M& student, const Dataset& data) {
  ScoreTable t;
  for (auto kind : {StreamKind::markov_background, StreamKind::local_ngram, StreamKind::kv_recall}) {
    std::vector<Sequence> s;
    for (auto& q : data.eval)
      if (q.kind == kind) s.push_back(q);
    if (s.empty()) continue;
    t.rows.push_back({std::string("next_token_") + to_string(kind), 100 * next_token_accuracy(teacher, s),
                      100 * next_token_accuracy(student, s), to_string(kind)});
  }
  if (!data.eval_pairs.empty())
    t.rows.push_back({"recall_answers", 100 * recall_accuracy(teacher, data.eval, data.eval_pairs),
                      100 * recall_accuracy(student, data.eval, data.eval_pairs), "kv_recall"});
  return t;
}

std::string table_csv(const ScoreTable& t) {
  std::ostringstream os;
  os.precision(17);
  os << "benchmark,teacher,student,domain\n";
  for (auto& r : t.rows) os << r.benchmark << ',' << r.teacher << ',' << r.student << ',' << r.domain << '\n';
  return os.str();
}

TokenSeq parse_tokens(const std::string& s) {
  TokenSeq out;
  std::stringstream ss(s);
  std::string item;
  while (std::getline(ss, item, ',')) {
    try {
      std::size_t used = 0;
      const auto v = std::stoul(item, &used);
      if (used != item.size()) throw std::invalid_argument(item);
      out.push_back(static_cast<std::uint32_t>(v));
    } catch (const std::logic_error&) {
      throw ConfigError("prompt token '" + item + "' is not a nonnegative integer");
    }
  }
  return out;
}

std::pair<std::string, double> parse_expert(const std::string& s) {
  const auto c = s.rfind(':');
  if (c == std::string::npos || c == 0) throw ConfigError("expert '" + s + "' is not path:weight");
  try {
    std::size_t used = 0;
    const double w = std::stod(s.substr(c + 1), &used);
    if (used != s.size() - c - 1) throw std::invalid_argument(s);
    return {s.substr(0, c), w};
  } catch (const std::logic_error&) {
    throw ConfigError("expert weight in '" + s + "' is not a number");
  }
}

json checks_summary(const std::vector<CheckResult>& rs) {
  bool all = true;
  for (auto& r : rs) all = all && r.pass;
  return {{"pass", all}, {"checks", to_json_value(rs)}};
}

int exit_code(ErrorCategory c) {
  switch (c) {
    case ErrorCategory::config: return 2;
    case ErrorCategory::io: return 3;
    case ErrorCategory::contract: return 4;
    case ErrorCategory::numeric: return 5;
  }
  return 1;
}

int fail(const std::string& category, const std::string& msg, int code) {
  std::cerr << json{{"error", {{"category", category}, {"message", msg}}}}.dump() << std::endl;
  return code;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Distill a softmax-attention teacher into hybrid mLSTM + sliding-window students"};
  app.require_subcommand(1);
  std::string config_path;
  std::vector<std::string> overrides;
  bool verbose = false;
  app.add_option("--config", config_path, "run config (JSON)");
  app.add_option("--set", overrides, "override a config key, e.g. --set distill.gamma=0.5")->take_all();
  app.add_flag("-v,--verbose", verbose, "echo progress to stderr");

  std::string corpus_opt, teacher_opt, student_opt, targets_opt, model_opt, scores_opt, domain_opt, tag_opt, mode_opt,
      patch_opt, prompt_opt = "0";
  std::vector<std::string> expert_opts;
  std::size_t grid_n = 101, n_new = 16;
  double temperature = 0.0;
  std::uint64_t sample_seed = 1;

  auto* gen_corpus = app.add_subcommand("gen-corpus", "generate the synthetic corpus");
  auto* train = app.add_subcommand("train-teacher", "train the softmax-attention teacher");
  train->add_option("--corpus", corpus_opt, "corpus stem");
  auto* init = app.add_subcommand("init-student", "build a student from the teacher");
  init->add_option("--teacher", teacher_opt);
  auto* align = app.add_subcommand("align", "Stage I: per-layer hidden-state alignment");
  align->add_option("--student", student_opt)->description("defaults to student_init.ckpt");
  align->add_option("--teacher", teacher_opt);
  align->add_option("--corpus", corpus_opt);
  auto* targets = app.add_subcommand("targets", "precompute sparse teacher targets");
  targets->add_option("--teacher", teacher_opt);
  targets->add_option("--corpus", corpus_opt);
  auto* distill = app.add_subcommand("distill", "Stage II: sparse-KL and cross-entropy distillation");
  distill->add_option("--student", student_opt)->description("defaults to student_aligned.ckpt");
  distill->add_option("--targets", targets_opt);
  distill->add_option("--corpus", corpus_opt);
  distill->add_option("--domain", domain_opt, "train only on one stream kind");
  distill->add_option("--tag", tag_opt, "output name suffix (defaults to the domain)");
  auto* merge = app.add_subcommand("merge", "Stage III: linear merge of expert checkpoints");
  merge->add_option("--expert", expert_opts, "path:weight, repeatable (overrides merge.experts)");
  merge->add_option("--mode", mode_opt, "strict or auto (overrides merge.normalization)");
  merge->add_option("--patch", patch_opt, "index:path, replace one expert and re-merge");
  auto* metrics = app.add_subcommand("eval-metrics", "recovery rates, win-and-tie curve and critical tolerance");
  metrics->add_option("--scores", scores_opt, "score CSV (benchmark,teacher,student[,domain])");
  metrics->add_option("--teacher", teacher_opt, "with --student: score both on the eval split");
  metrics->add_option("--student", student_opt);
  metrics->add_option("--corpus", corpus_opt);
  metrics->add_option("--domain", domain_opt, "restrict to rows of one domain");
  metrics->add_option("--grid", grid_n, "number of alpha grid points")->check(CLI::Range(2, 100000));
  auto* gates = app.add_subcommand("gate-stats", "median output-gate activation per layer and head");
  gates->add_option("--model", model_opt)->required();
  gates->add_option("--corpus", corpus_opt);
  auto* bench = app.add_subcommand("bench", "cache accounting, operation counts and decode/prefill timings");
  auto* generate = app.add_subcommand("generate", "sample tokens from a checkpoint");
  generate->add_option("--model", model_opt)->required();
  generate->add_option("--prompt", prompt_opt, "comma-separated token ids");
  generate->add_option("-n,--new-tokens", n_new);
  generate->add_option("--temperature", temperature, "0 means greedy")->check(CLI::NonNegativeNumber);
  generate->add_option("--sample-seed", sample_seed);
  auto* grad_check = app.add_subcommand("grad-check", "finite-difference gradient suite");
  auto* selftest = app.add_subcommand("selftest", "reduction identities, chunkwise equivalence and gradients");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int r = app.exit(e);
    return r == 0 ? 0 : 2;
  }

  try {
    Context ctx;
    ctx.verbose = verbose;
    ctx.cfg = load_run_config(config_path, overrides);
    ctx.out = ctx.cfg.output_dir;
    fs::create_directories(ctx.out);
    ctx.run_log.open(ctx.out / "run.log", std::ios::app);
    auto* sub = app.get_subcommands().front();
    const std::string name = sub->get_name();
    ctx.log("begin " + name);
    auto& cfg = ctx.cfg;
    const auto corpus_path = ctx.path(corpus_opt, "corpus");
    const auto teacher_path = ctx.path(teacher_opt, "teacher.ckpt");
    auto logger = [&ctx](const std::string& s) { ctx.log(s); };
    std::string summary_name = name;

    if (sub == gen_corpus) {
      auto d = generate_corpus(cfg.corpus);
      save_dataset(d, corpus_path);
      json kinds = json::object();
      for (auto& s : d.train) kinds[to_string(s.kind)] = kinds.value(to_string(s.kind), 0) + 1;
      write_text_atomic(ctx.out / (summary_name + ".config.json"), json(cfg).dump(2) + "\n");
      emit(ctx, summary_name,
           {{"dataset_hash", d.hash()},
            {"n_train", d.train.size()},
            {"n_eval", d.eval.size()},
            {"train_kinds", kinds},
            {"recall_pairs", {{"train", d.train_pairs.size()}, {"eval", d.eval_pairs.size()}}}});
      return 0;
    }
    if (sub == grad_check || sub == selftest) {
      std::vector<CheckResult> rs;
      if (sub == selftest) rs = identity_checks(cfg.seed);
      auto g = gradient_checks(cfg.seed);
      rs.insert(rs.end(), g.begin(), g.end());
      auto s = checks_summary(rs);
      emit(ctx, summary_name, s);
      return s["pass"].get<bool>() ? 0 : 5;
    }

    if (sub != distill) write_text_atomic(ctx.out / (summary_name + ".config.json"), json(cfg).dump(2) + "\n");

    if (sub == train) {
      auto data = load_dataset(corpus_path);
      TrainReport rep;
      auto m = train_teacher<float>(cfg.teacher, data, cfg.teacher_train, &rep, cfg.seed, logger);
      save_model(m, ctx.out / "teacher.ckpt");
      emit(ctx, summary_name,
           {{"checkpoint_hash", sha256_file(ctx.out / "teacher.ckpt")},
            {"parameter_count", m.parameter_count()},
            {"loss", stage_losses(rep.losses)},
            {"uniform_ce", rep.uniform_ce},
            {"eval", model_eval(m, data)}});
    } else if (sub == init) {
      auto teacher = load_model(teacher_path);
      auto student = init_student_from_teacher(teacher, cfg.student_config());
      if (student.lineage["teacher_hash"] != sha256_file(teacher_path))
        throw IoError("teacher checkpoint does not re-serialize to the same bytes");
      save_model(student, ctx.out / "student_init.ckpt");
      emit(ctx, summary_name,
           {{"checkpoint_hash", sha256_file(ctx.out / "student_init.ckpt")},
            {"teacher_hash", student.lineage["teacher_hash"]},
            {"mixer_kind", to_string(student.cfg.mixer_kind)},
            {"parameter_count", student.parameter_count()},
            {"new_parameter_count", new_parameter_count(student.cfg)}});
    } else if (sub == align) {
      auto teacher = load_model(teacher_path);
      auto student = load_model(ctx.path(student_opt, "student_init.ckpt"));
      check_teacher_link(student, teacher_path);
      auto data = load_dataset(corpus_path);
      StageReport rep;
      auto aligned = stage1_align(student, teacher, data, cfg.align, &rep, logger);
      save_model(aligned, ctx.out / "student_aligned.ckpt");
      emit(ctx, summary_name,
           {{"checkpoint_hash", sha256_file(ctx.out / "student_aligned.ckpt")},
            {"alignment_loss", {{"initial", rep.initial_eval}, {"final", rep.final_eval}}},
            {"train_loss", stage_losses(rep.losses)},
            {"eval", model_eval(aligned, data)}});
    } else if (sub == targets) {
      auto teacher = load_model(teacher_path);
      auto data = load_dataset(corpus_path);
      auto t = precompute_teacher_targets(teacher, data, cfg.distill.k);
      t.save(ctx.out / "targets.bin");
      emit(ctx, summary_name,
           {{"targets_hash", sha256_file(ctx.out / "targets.bin")},
            {"teacher_hash", t.teacher_hash},
            {"dataset_hash", t.dataset_hash},
            {"k", t.k},
            {"n_positions", t.n_positions()}});
    } else if (sub == distill) {
      auto student = load_model(ctx.path(student_opt, "student_aligned.ckpt"));
      auto t = TeacherTargets::load(ctx.path(targets_opt, "targets.bin"));
      auto data = load_dataset(corpus_path);
      auto dc = cfg.distill;
      if (!domain_opt.empty()) dc.domain = domain_opt;
      dc.validate();
      cfg.distill = dc;
      const std::string tag = !tag_opt.empty() ? tag_opt : dc.domain.empty() ? "all" : dc.domain;
      summary_name = "distill_" + tag;
      write_text_atomic(ctx.out / (summary_name + ".config.json"), json(cfg).dump(2) + "\n");
      StageReport rep;
      auto s = stage2_distill(student, data, t, dc, &rep, logger);
      const auto out = ctx.out / ("distill_" + tag + ".ckpt");
      save_model(s, out);
      emit(ctx, summary_name,
           {{"checkpoint_hash", sha256_file(out)},
            {"domain", dc.domain.empty() ? "all" : dc.domain},
            {"train_loss", stage_losses(rep.losses)},
            {"eval", model_eval(s, data)}});
    } else if (sub == merge) {
      std::vector<std::pair<std::string, double>> experts;
      for (auto& e : expert_opts) experts.push_back(parse_expert(e));
      if (experts.empty())
        for (auto& e : cfg.merge.experts) experts.emplace_back(e.path, e.weight);
      if (experts.empty()) throw ConfigError("merge needs experts (--expert or merge.experts)");
      MergeSpec spec;
      spec.normalization = merge_normalization_from_string(mode_opt.empty() ? cfg.merge.normalization : mode_opt);
      for (auto& [p, w] : experts) {
        const auto path = ctx.path(p, p);
        spec.experts.push_back({Checkpoint::load(path), w, path.filename().string()});
      }
      Checkpoint merged;
      if (patch_opt.empty()) {
        merged = linear_merge(spec);
      } else {
        const auto c = patch_opt.find(':');
        if (c == std::string::npos) throw ConfigError("--patch expects index:path");
        std::size_t idx = 0;
        try {
          idx = std::stoul(patch_opt.substr(0, c));
        } catch (const std::logic_error&) {
          throw ConfigError("--patch index is not a number");
        }
        const auto path = ctx.path(patch_opt.substr(c + 1), patch_opt.substr(c + 1));
        merged = patch_merge(spec, idx, Checkpoint::load(path), path.filename().string());
      }
      M::from_checkpoint(merged);
      merged.save(ctx.out / "merged.ckpt");
      json w = json::array();
      for (double x : spec.effective_weights()) w.push_back(x);
      emit(ctx, summary_name,
           {{"checkpoint_hash", sha256_file(ctx.out / "merged.ckpt")},
            {"normalization", to_string(spec.normalization)},
            {"effective_weights", w},
            {"experts", merged.lineage["merge"]["experts"]}});
    } else if (sub == metrics) {
      ScoreTable table;
      json extra = json::object();
      if (!scores_opt.empty()) {
        table = ScoreTable::load_csv(scores_opt);
      } else if (!student_opt.empty()) {
        auto teacher = load_model(teacher_path);
        auto student = load_model(ctx.path(student_opt, student_opt));
        check_teacher_link(student, teacher_path);
        auto data = load_dataset(corpus_path);
        table = desk_scores(teacher, student, data);
        write_text_atomic(ctx.out / "scores.csv", table_csv(table));
        extra["teacher_eval"] = model_eval(teacher, data);
        extra["student_eval"] = model_eval(student, data);
      } else {
        throw ConfigError("eval-metrics needs --scores or --student");
      }
      if (!domain_opt.empty()) table = table.filter_domain(domain_opt);
      table.validate();
      auto curve = win_tie_curve(table, uniform_grid(grid_n));
      write_text_atomic(ctx.out / "curve.csv", curve_csv(curve));
      json rows = json::array();
      for (auto& r : table.rows) {
        json row = {{"benchmark", r.benchmark}, {"teacher", r.teacher}, {"student", r.student}, {"threshold", tie_threshold(r)}};
        row["recovery"] = r.teacher > 0 ? json(recovery_rate(r)) : json(nullptr);
        rows.push_back(row);
      }
      json s = {{"alpha_star", alpha_star(table)},
                {"c0", win_tie_rate(table, 0.0)},
                {"n_benchmarks", table.rows.size()},
                {"rows", rows}};
      s.update(extra);
      emit(ctx, summary_name, s);
    } else if (sub == gates) {
      auto m = load_model(ctx.path(model_opt, model_opt));
      auto data = load_dataset(corpus_path);
      auto g = gate_statistics(m, probe_of(data, cfg.probe_sequences));
      write_text_atomic(ctx.out / "gate_stats.csv", g.csv());
      emit(ctx, summary_name, {{"n_layers", g.n_layers}, {"n_heads", g.n_heads}, {"medians", g.medians}});
    } else if (sub == bench) {
      auto tc = cfg.bench.model;
      tc.mixer_kind = MixerKind::softmax_full;
      auto sc = tc;
      sc.mixer_kind = MixerKind::hybrid;
      auto teacher = M::init(tc, cfg.seed);
      auto student = init_student_from_teacher(teacher, sc);
      BenchOptions bo;
      bo.warmups = cfg.bench.warmups;
      bo.repeats = cfg.bench.repeats;
      bo.seed = cfg.seed;
      auto rows = run_bench(teacher, "teacher", cfg.bench.scenarios, bo);
      auto srows = run_bench(student, "student", cfg.bench.scenarios, bo);
      rows.insert(rows.end(), srows.begin(), srows.end());
      write_text_atomic(ctx.out / "bench.csv", bench_csv(rows));
      std::vector<double> x, st, ss, pt, ps;
      for (auto n : cfg.bench.op_lengths) {
        x.push_back(static_cast<double>(n));
        st.push_back(static_cast<double>(step_mixing_ops(teacher, n)));
        ss.push_back(static_cast<double>(step_mixing_ops(student, n)));
        pt.push_back(static_cast<double>(prefill_mixing_ops(teacher, n)));
        ps.push_back(static_cast<double>(prefill_mixing_ops(student, n)));
      }
      json cache = json::array();
      for (auto n : cfg.bench.op_lengths)
        cache.push_back({{"t", n}, {"teacher", cache_accounting(tc, n)}, {"student", cache_accounting(sc, n)}});
      emit(ctx, summary_name,
           {{"step_ops_slope", {{"teacher", loglog_slope(x, st)}, {"student", loglog_slope(x, ss)}}},
            {"prefill_ops_slope", {{"teacher", loglog_slope(x, pt)}, {"student", loglog_slope(x, ps)}}},
            {"cache_scalars", cache},
            {"rows", rows.size()}});
    } else if (sub == generate) {
      auto m = load_model(ctx.path(model_opt, model_opt));
      auto tok = xdistill::generate(m, parse_tokens(prompt_opt), n_new, Sampling{temperature, sample_seed});
      emit(ctx, summary_name, {{"tokens", tok}});
    }
    return 0;
  } catch (const Error& e) {
    return fail(to_string(e.category()), e.what(), exit_code(e.category()));
  } catch (const json::exception& e) {
    return fail("config", e.what(), 2);
  } catch (const fs::filesystem_error& e) {
    return fail("io", e.what(), 3);
  } catch (const std::exception& e) {
    return fail("internal", e.what(), 1);
  }
}
