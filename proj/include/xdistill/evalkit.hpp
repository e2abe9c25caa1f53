#pragma once

// Teacher-relative benchmark metrics and output-gate statistics.
//
// For a benchmark b with teacher score A_T and student score A_S the student
// "wins or ties at tolerance α" when A_S >= (1 - α) A_T. C_α is the fraction
// of benchmarks won or tied, and α* is the smallest α with C_α >= 1/2.

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "xdistill/io.hpp"
#include "xdistill/model.hpp"

namespace xdistill {

struct ScoreRow {
  std::string benchmark;
  double teacher = 0;
  double student = 0;
  std::string domain;
};

struct ScoreTable {
  std::vector<ScoreRow> rows;

  void validate() const {
    std::set<std::string> names;
    for (auto& r : rows) {
      if (!names.insert(r.benchmark).second) throw ContractError("duplicate benchmark '" + r.benchmark + "'");
      if (!std::isfinite(r.teacher) || !std::isfinite(r.student) || r.teacher < 0 || r.student < 0)
        throw ContractError("scores of '" + r.benchmark + "' must be finite and nonnegative");
    }
  }

  ScoreTable filter_domain(const std::string& domain) const {
    ScoreTable t;
    for (auto& r : rows)
      if (r.domain == domain) t.rows.push_back(r);
    return t;
  }

  /// CSV with header benchmark,teacher,student[,domain].
  static ScoreTable parse_csv(const std::string& text) {
    std::istringstream in(text);
    std::string line;
    auto split = [](const std::string& l) {
      std::vector<std::string> f;
      std::stringstream ss(l);
      std::string x;
      while (std::getline(ss, x, ',')) {
        x.erase(0, x.find_first_not_of(" \t\r"));
        x.erase(x.find_last_not_of(" \t\r") + 1);
        f.push_back(x);
      }
      return f;
    };
    if (!std::getline(in, line)) throw IoError("score CSV is empty");
    const auto header = split(line);
    const bool has_domain = header.size() == 4;
    if (header.size() < 3 || header.size() > 4 || header[0] != "benchmark" || header[1] != "teacher" ||
        header[2] != "student" || (has_domain && header[3] != "domain"))
      throw IoError("score CSV header must be benchmark,teacher,student[,domain]");
    ScoreTable t;
    std::size_t lineno = 1;
    while (std::getline(in, line)) {
      ++lineno;
      if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
      auto f = split(line);
      if (f.size() != header.size()) throw IoError("score CSV line " + std::to_string(lineno) + ": wrong field count");
      ScoreRow r;
      r.benchmark = f[0];
      try {
        std::size_t used = 0;
        r.teacher = std::stod(f[1], &used);
        if (used != f[1].size()) throw std::invalid_argument(f[1]);
        r.student = std::stod(f[2], &used);
        if (used != f[2].size()) throw std::invalid_argument(f[2]);
      } catch (const std::logic_error&) {
        throw IoError("score CSV line " + std::to_string(lineno) + ": unparsable score");
      }
      if (has_domain) r.domain = f[3];
      t.rows.push_back(std::move(r));
    }
    t.validate();
    return t;
  }

  static ScoreTable load_csv(const std::filesystem::path& p) { return parse_csv(read_text(p)); }
};

/// A_S / A_T; undefined when the teacher scores zero.
inline double recovery_rate(const ScoreRow& r) {
  if (r.teacher == 0) throw ContractError("recovery rate of '" + r.benchmark + "' is undefined (teacher score 0)");
  return r.student / r.teacher;
}

/// Smallest α at which row `r` counts as won or tied: max(0, 1 - A_S/A_T),
/// and 0 when A_T = 0.
inline double tie_threshold(const ScoreRow& r) {
  if (r.teacher == 0) return 0.0;
  return std::max(0.0, 1.0 - r.student / r.teacher);
}

/// 1 if A_S >= (1 - α) A_T. Evaluated through the threshold so that
/// indicator(r, tie_threshold(r)) is exactly 1.
inline int indicator(const ScoreRow& r, double alpha) {
  if (!(alpha >= 0 && alpha <= 1)) throw ContractError("alpha must lie in [0, 1]");
  return alpha >= tie_threshold(r) ? 1 : 0;
}

inline double win_tie_rate(const ScoreTable& t, double alpha) {
  if (t.rows.empty()) throw ContractError("win-tie rate of an empty table");
  std::size_t n = 0;
  for (auto& r : t.rows) n += indicator(r, alpha);
  return static_cast<double>(n) / static_cast<double>(t.rows.size());
}

/// Per-row thresholds in ascending order.
inline std::vector<double> sorted_thresholds(const ScoreTable& t) {
  std::vector<double> th;
  for (auto& r : t.rows) th.push_back(tie_threshold(r));
  std::sort(th.begin(), th.end());
  return th;
}

/// inf{α : C_α >= 1/2}, i.e. the ceil(|B|/2)-th smallest threshold.
inline double alpha_star(const ScoreTable& t) {
  if (t.rows.empty()) throw ContractError("alpha* of an empty table");
  auto th = sorted_thresholds(t);
  const std::size_t need = (th.size() + 1) / 2;
  return std::clamp(th[need - 1], 0.0, 1.0);
}

struct CurvePoint {
  double alpha;
  double c_alpha;
};

inline std::vector<CurvePoint> win_tie_curve(const ScoreTable& t, const std::vector<double>& grid) {
  if (!std::is_sorted(grid.begin(), grid.end())) throw ContractError("alpha grid must be sorted");
  std::vector<CurvePoint> out;
  for (double a : grid) out.push_back({a, win_tie_rate(t, a)});
  return out;
}

inline std::vector<double> uniform_grid(std::size_t n) {
  std::vector<double> g;
  for (std::size_t i = 0; i <= n; ++i) g.push_back(static_cast<double>(i) / static_cast<double>(n));
  return g;
}

inline std::string curve_csv(const std::vector<CurvePoint>& c) {
  std::ostringstream os;
  os.precision(17);
  os << "alpha,c_alpha\n";
  for (auto& p : c) os << p.alpha << ',' << p.c_alpha << '\n';
  return os.str();
}

// ---------------------------------------------------------------------------
// Output-gate statistics
// ---------------------------------------------------------------------------

/// Median of `v`; the mean of the two middle values for even sizes.
inline double median(std::vector<double> v) {
  if (v.empty()) throw ContractError("median of an empty set");
  const std::size_t h = v.size() / 2;
  std::nth_element(v.begin(), v.begin() + static_cast<std::ptrdiff_t>(h), v.end());
  if (v.size() % 2) return v[h];
  const double hi = v[h];
  return 0.5 * (hi + *std::max_element(v.begin(), v.begin() + static_cast<std::ptrdiff_t>(h)));
}

struct GateStats {
  std::size_t n_layers = 0, n_heads = 0;
  std::vector<double> medians;  // [layer x head]
  double at(std::size_t l, std::size_t h) const { return medians.at(l * n_heads + h); }

  std::string csv() const {
    std::ostringstream os;
    os.precision(17);
    os << "layer,head,median\n";
    for (std::size_t l = 0; l < n_layers; ++l)
      for (std::size_t h = 0; h < n_heads; ++h) os << l << ',' << h << ',' << at(l, h) << '\n';
    return os.str();
  }
};

/// Per layer and head, the median sigmoid output-gate activation over every
/// position of every probe sequence.
template <class T>
GateStats gate_statistics(const Model<T>& m, const std::vector<Sequence>& probe) {
  if (m.cfg.mixer_kind != MixerKind::hybrid) throw ContractError("gate statistics need a hybrid model");
  if (probe.empty()) throw ContractError("empty probe set");
  const std::size_t L = m.cfg.n_layers, H = m.cfg.n_heads;
  std::vector<std::vector<double>> vals(L * H);
  for (auto& s : probe) {
    Tape<T> tape;
    auto r = forward(tape, m, s.tokens, ForwardOptions{{}, true});
    for (std::size_t l = 0; l < L; ++l) {
      const auto& o = r.layers[l].trace.output_gate;
      for (std::size_t t = 0; t < o.rows(); ++t)
        for (std::size_t h = 0; h < H; ++h) vals[l * H + h].push_back(static_cast<double>(o.at(t, h)));
    }
  }
  GateStats g{L, H, {}};
  for (auto& v : vals) g.medians.push_back(median(std::move(v)));
  return g;
}

}  // namespace xdistill
