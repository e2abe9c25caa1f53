#pragma once

// Deterministic synthetic corpus. Three stream kinds separate local from
// global capability:
//   markov_background  first-order chain over background tokens
//   local_ngram        background with spans copied from inside the window
//   kv_recall          background with planted [KEY k v] ... [QUERY k v]
//                      pairs whose answer lies more than a given distance
//                      after the key
//
// Vocabulary layout: 0 = BOS, 1 = KEY marker, 2 = QUERY marker, then key
// symbols, value symbols and background symbols in that order.

#include <nlohmann/json.hpp>

#include <algorithm>
#include <cstdint>
#include <filesystem>
#include <set>
#include <string>
#include <vector>

#include "xdistill/io.hpp"
#include "xdistill/rng.hpp"

namespace xdistill {

using TokenSeq = std::vector<std::uint32_t>;

enum class StreamKind : int { markov_background = 0, local_ngram = 1, kv_recall = 2 };

inline const char* to_string(StreamKind k) {
  switch (k) {
    case StreamKind::markov_background: return "markov_background";
    case StreamKind::local_ngram: return "local_ngram";
    case StreamKind::kv_recall: return "kv_recall";
  }
  return "?";
}

inline StreamKind stream_kind_from_string(const std::string& s) {
  for (auto k : {StreamKind::markov_background, StreamKind::local_ngram, StreamKind::kv_recall})
    if (s == to_string(k)) return k;
  throw ConfigError("unknown stream kind '" + s + "'");
}

struct StreamMix {
  double markov_background = 0.4;
  double local_ngram = 0.3;
  double kv_recall = 0.3;
};

struct CorpusSpec {
  std::size_t vocab_size = 256;
  std::size_t seq_len = 256;
  std::size_t n_sequences = 512;  // training split
  std::size_t n_eval = 64;
  std::uint64_t seed = 1;
  StreamMix mix;
  std::size_t window = 64;            // W of the students that will consume the corpus
  std::size_t min_recall_distance = 0;  // 0 means W + 1
  std::size_t first_key_pos = 5;      // keep planted keys out of the sink positions
  std::size_t pairs_per_sequence = 2;
  std::size_t n_keys = 16;
  std::size_t n_values = 16;
  std::size_t markov_branching = 4;
  std::size_t ngram_len = 6;
  double copy_rate = 0.05;  // per-position probability of starting a copied span

  static constexpr std::uint32_t kBos = 0, kKeyMark = 1, kQueryMark = 2;

  std::uint32_t key_base() const { return 3; }
  std::uint32_t value_base() const { return static_cast<std::uint32_t>(3 + n_keys); }
  std::uint32_t background_base() const { return static_cast<std::uint32_t>(3 + n_keys + n_values); }
  std::size_t n_background() const { return vocab_size - background_base(); }
  std::size_t recall_distance() const { return min_recall_distance ? min_recall_distance : window + 1; }

  void validate() const {
    const double s = mix.markov_background + mix.local_ngram + mix.kv_recall;
    XD_REQUIRE(mix.markov_background >= 0 && mix.local_ngram >= 0 && mix.kv_recall >= 0, ConfigError,
               "mix weights must be nonnegative");
    XD_REQUIRE(std::abs(s - 1.0) < 1e-9, ConfigError, "mix weights must sum to 1, got " + std::to_string(s));
    XD_REQUIRE(vocab_size > 3 + n_keys + n_values + 1, ConfigError,
               "vocab_size too small for the key/value/background layout");
    XD_REQUIRE(markov_branching >= 1 && markov_branching <= n_background(), ConfigError,
               "markov_branching must be in [1, n_background]");
    XD_REQUIRE(seq_len >= 2 && n_sequences >= 1, ConfigError, "empty corpus");
    XD_REQUIRE(window >= 1, ConfigError, "window must be >= 1");
    XD_REQUIRE(recall_distance() > window, ConfigError,
               "min_recall_distance must exceed the window so the window alone cannot answer");
    if (mix.kv_recall > 0) {
      XD_REQUIRE(pairs_per_sequence >= 1 && pairs_per_sequence <= n_keys, ConfigError,
                 "pairs_per_sequence must be in [1, n_keys]");
      const std::size_t need = first_key_pos + recall_distance() + 2 + 3 * (pairs_per_sequence - 1);
      XD_REQUIRE(seq_len > need, ConfigError,
                 "infeasible recall placement: seq_len " + std::to_string(seq_len) + " cannot hold a key at " +
                     std::to_string(first_key_pos) + " and an answer more than " + std::to_string(recall_distance()) +
                     " positions later");
    }
    if (mix.local_ngram > 0)
      XD_REQUIRE(ngram_len >= 1 && ngram_len < window, ConfigError, "ngram_len must be in [1, window)");
  }
};

inline void to_json(nlohmann::json& j, const StreamMix& m) {
  j = {{"markov_background", m.markov_background}, {"local_ngram", m.local_ngram}, {"kv_recall", m.kv_recall}};
}

inline void to_json(nlohmann::json& j, const CorpusSpec& s) {
  j = {{"vocab_size", s.vocab_size},
       {"seq_len", s.seq_len},
       {"n_sequences", s.n_sequences},
       {"n_eval", s.n_eval},
       {"seed", s.seed},
       {"mix", s.mix},
       {"window", s.window},
       {"min_recall_distance", s.min_recall_distance},
       {"first_key_pos", s.first_key_pos},
       {"pairs_per_sequence", s.pairs_per_sequence},
       {"n_keys", s.n_keys},
       {"n_values", s.n_values},
       {"markov_branching", s.markov_branching},
       {"ngram_len", s.ngram_len},
       {"copy_rate", s.copy_rate}};
}

namespace detail {

/// Reads keys of `j` into matching fields; any key not consumed is an error.
class StrictReader {
 public:
  StrictReader(const nlohmann::json& j, std::string where) : j_(j), where_(std::move(where)) {
    if (!j_.is_object()) throw ConfigError(where_ + ": expected an object");
  }
  template <class U>
  StrictReader& get(const char* key, U& out) {
    seen_.insert(key);
    if (j_.contains(key)) {
      try {
        out = j_.at(key).get<U>();
      } catch (const nlohmann::json::exception& e) {
        throw ConfigError(where_ + "." + key + ": " + e.what());
      }
    }
    return *this;
  }
  const nlohmann::json& sub(const char* key) {
    seen_.insert(key);
    static const nlohmann::json empty = nlohmann::json::object();
    return j_.contains(key) ? j_.at(key) : empty;
  }
  void finish() const {
    for (auto& [k, v] : j_.items())
      if (!seen_.count(k)) throw ConfigError("unknown key '" + where_ + "." + k + "'");
  }

 private:
  const nlohmann::json& j_;
  std::string where_;
  std::set<std::string> seen_;
};

}  // namespace detail

inline void from_json(const nlohmann::json& j, StreamMix& m) {
  detail::StrictReader r(j, "mix");
  r.get("markov_background", m.markov_background).get("local_ngram", m.local_ngram).get("kv_recall", m.kv_recall);
  r.finish();
}

inline void from_json(const nlohmann::json& j, CorpusSpec& s) {
  detail::StrictReader r(j, "corpus");
  r.get("vocab_size", s.vocab_size)
      .get("seq_len", s.seq_len)
      .get("n_sequences", s.n_sequences)
      .get("n_eval", s.n_eval)
      .get("seed", s.seed)
      .get("mix", s.mix)
      .get("window", s.window)
      .get("min_recall_distance", s.min_recall_distance)
      .get("first_key_pos", s.first_key_pos)
      .get("pairs_per_sequence", s.pairs_per_sequence)
      .get("n_keys", s.n_keys)
      .get("n_values", s.n_values)
      .get("markov_branching", s.markov_branching)
      .get("ngram_len", s.ngram_len)
      .get("copy_rate", s.copy_rate);
  r.finish();
}

struct RecallPair {
  std::size_t seq = 0;         // index within its split
  std::size_t key_pos = 0;     // position of the key symbol in the KEY triple
  std::size_t answer_pos = 0;  // position of the value symbol in the QUERY triple
  std::uint32_t key = 0, value = 0;
};

struct Sequence {
  TokenSeq tokens;
  StreamKind kind = StreamKind::markov_background;
};

struct Dataset {
  CorpusSpec spec;
  std::vector<Sequence> train, eval;
  std::vector<RecallPair> train_pairs, eval_pairs;
  std::vector<double> transition;  // [n_background x n_background] row-stochastic

  const std::vector<Sequence>& split(bool is_eval) const { return is_eval ? eval : train; }

  /// Packed little-endian u32 tokens, train then eval.
  std::vector<std::uint8_t> token_bytes() const {
    std::vector<std::uint8_t> out;
    for (auto* part : {&train, &eval})
      for (auto& s : *part)
        for (auto t : s.tokens) put_le<std::uint32_t>(out, t);
    return out;
  }

  std::string hash() const { return sha256_hex(token_bytes()); }
};

namespace detail {

inline std::vector<double> make_transition(const CorpusSpec& s, Rng& rng) {
  const std::size_t n = s.n_background();
  std::vector<double> P(n * n, 0.0);
  std::vector<std::size_t> idx(n);
  for (std::size_t a = 0; a < n; ++a) {
    for (std::size_t i = 0; i < n; ++i) idx[i] = i;
    double total = 0;
    for (std::size_t j = 0; j < s.markov_branching; ++j) {
      std::swap(idx[j], idx[j + rng.below(n - j)]);
      const double w = std::pow(rng.uniform(0.5, 1.5), 2);
      P[a * n + idx[j]] = w;
      total += w;
    }
    for (std::size_t b = 0; b < n; ++b) P[a * n + b] /= total;
  }
  return P;
}

class StreamWriter {
 public:
  StreamWriter(const CorpusSpec& s, const std::vector<double>& P, Rng& rng) : s_(s), P_(P), rng_(rng) {}

  std::uint32_t background_after(std::uint32_t prev) {
    const std::size_t n = s_.n_background();
    const std::uint32_t base = s_.background_base();
    if (prev < base) return base + static_cast<std::uint32_t>(rng_.below(n));
    std::vector<double> row(P_.begin() + (prev - base) * n, P_.begin() + (prev - base + 1) * n);
    return base + static_cast<std::uint32_t>(rng_.categorical(row));
  }

  TokenSeq markov(std::size_t len) {
    TokenSeq t{CorpusSpec::kBos};
    while (t.size() < len) t.push_back(background_after(t.back()));
    return t;
  }

  TokenSeq local_ngram(std::size_t len) {
    TokenSeq t{CorpusSpec::kBos};
    const std::size_t n = s_.ngram_len;
    while (t.size() < len) {
      // copy a span whose source lies entirely inside the last `window` positions
      if (t.size() > n + 1 && rng_.uniform() < s_.copy_rate) {
        const std::size_t max_d = std::min(s_.window - 1, t.size() - 1);
        if (max_d >= n) {
          const std::size_t d = n + rng_.below(max_d - n + 1);
          for (std::size_t i = 0; i < n && t.size() < len; ++i) t.push_back(t[t.size() - d]);
          continue;
        }
      }
      t.push_back(background_after(t.back()));
    }
    return t;
  }

  TokenSeq kv_recall(std::size_t len, std::size_t seq_index, std::vector<RecallPair>& pairs) {
    const std::size_t P = s_.pairs_per_sequence, dist = s_.recall_distance();
    // planted triples: start positions of [KEY k v] and [QUERY k v]
    std::vector<std::size_t> kstart(P), qstart(P);
    std::vector<char> used(len, 0);
    auto free_span = [&](std::size_t a) { return a + 3 <= len && !used[a] && !used[a + 1] && !used[a + 2]; };
    auto mark = [&](std::size_t a) { used[a] = used[a + 1] = used[a + 2] = 1; };
    for (std::size_t j = 0; j < P; ++j) {
      bool placed = false;
      for (int attempt = 0; attempt < 1000 && !placed; ++attempt) {
        // key triple at a >= first_key_pos - 1 so the key symbol sits at >= first_key_pos
        const std::size_t lo = s_.first_key_pos - 1;
        const std::size_t hi = len - 3 - (dist - 1);  // leaves room for q >= a + dist - 1
        if (hi < lo) break;
        const std::size_t a = lo + rng_.below(hi - lo + 1);
        const std::size_t qlo = a + dist - 1;  // answer (q+2) - key (a+1) >= dist
        if (qlo + 3 > len) continue;
        const std::size_t q = qlo + rng_.below(len - 3 - qlo + 1);
        if (!free_span(a) || !free_span(q) || (a < q + 3 && q < a + 3)) continue;
        kstart[j] = a;
        qstart[j] = q;
        mark(a);
        mark(q);
        placed = true;
      }
      if (!placed)
        throw ConfigError("infeasible recall placement: could not place " + std::to_string(P) +
                          " pairs with distance > " + std::to_string(dist - 1) + " in length " + std::to_string(len));
    }
    // distinct keys, arbitrary values
    std::vector<std::uint32_t> keys(s_.n_keys);
    for (std::size_t i = 0; i < keys.size(); ++i) keys[i] = s_.key_base() + static_cast<std::uint32_t>(i);
    for (std::size_t i = 0; i < P; ++i) std::swap(keys[i], keys[i + rng_.below(keys.size() - i)]);

    TokenSeq t(len, 0);
    std::vector<char> planted(len, 0);
    for (std::size_t j = 0; j < P; ++j) {
      const std::uint32_t v = s_.value_base() + static_cast<std::uint32_t>(rng_.below(s_.n_values));
      const std::size_t a = kstart[j], q = qstart[j];
      t[a] = CorpusSpec::kKeyMark, t[a + 1] = keys[j], t[a + 2] = v;
      t[q] = CorpusSpec::kQueryMark, t[q + 1] = keys[j], t[q + 2] = v;
      for (std::size_t i = 0; i < 3; ++i) planted[a + i] = planted[q + i] = 1;
      pairs.push_back({seq_index, a + 1, q + 2, keys[j], v});
    }
    t[0] = CorpusSpec::kBos;
    for (std::size_t i = 1; i < len; ++i)
      if (!planted[i]) t[i] = background_after(t[i - 1]);
    return t;
  }

 private:
  const CorpusSpec& s_;
  const std::vector<double>& P_;
  Rng& rng_;
};

}  // namespace detail

/// Generates train and eval splits. Byte-identical for identical specs; no
/// eval sequence equals any training sequence.
inline Dataset generate_corpus(const CorpusSpec& spec) {
  spec.validate();
  Dataset d;
  d.spec = spec;
  Rng chain_rng(Rng::derive(spec.seed, 1));
  d.transition = detail::make_transition(spec, chain_rng);
  Rng rng(Rng::derive(spec.seed, 2));
  detail::StreamWriter w(spec, d.transition, rng);
  const std::vector<double> mix{spec.mix.markov_background, spec.mix.local_ngram, spec.mix.kv_recall};

  std::set<TokenSeq> seen;
  auto make = [&](std::vector<Sequence>& out, std::vector<RecallPair>& pairs, std::size_t n, bool is_eval) {
    while (out.size() < n) {
      const auto kind = static_cast<StreamKind>(rng.categorical(mix));
      std::vector<RecallPair> local;
      Sequence s{{}, kind};
      switch (kind) {
        case StreamKind::markov_background: s.tokens = w.markov(spec.seq_len); break;
        case StreamKind::local_ngram: s.tokens = w.local_ngram(spec.seq_len); break;
        case StreamKind::kv_recall: s.tokens = w.kv_recall(spec.seq_len, out.size(), local); break;
      }
      if (is_eval && seen.count(s.tokens)) continue;  // keep the splits disjoint
      if (!is_eval) seen.insert(s.tokens);
      pairs.insert(pairs.end(), local.begin(), local.end());
      out.push_back(std::move(s));
    }
  };
  make(d.train, d.train_pairs, spec.n_sequences, false);
  make(d.eval, d.eval_pairs, spec.n_eval, true);
  return d;
}

inline nlohmann::json dataset_meta(const Dataset& d) {
  nlohmann::json seqs = nlohmann::json::array();
  std::size_t offset = 0;
  for (bool is_eval : {false, true})
    for (auto& s : d.split(is_eval)) {
      seqs.push_back({{"offset", offset}, {"length", s.tokens.size()}, {"split", is_eval ? "eval" : "train"},
                      {"kind", to_string(s.kind)}});
      offset += s.tokens.size();
    }
  auto pairs = [](const std::vector<RecallPair>& ps) {
    nlohmann::json a = nlohmann::json::array();
    for (auto& p : ps)
      a.push_back({{"seq", p.seq}, {"key_pos", p.key_pos}, {"answer_pos", p.answer_pos}, {"key", p.key}, {"value", p.value}});
    return a;
  };
  return {{"format_version", 1},
          {"spec", d.spec},
          {"tokens_sha256", d.hash()},
          {"sequences", seqs},
          {"recall_pairs", {{"train", pairs(d.train_pairs)}, {"eval", pairs(d.eval_pairs)}}}};
}

/// Writes `<stem>.tokens` and `<stem>.meta.json`.
inline void save_dataset(const Dataset& d, const std::filesystem::path& stem) {
  auto tok = stem;
  tok += ".tokens";
  auto meta = stem;
  meta += ".meta.json";
  write_file_atomic(tok, d.token_bytes());
  write_text_atomic(meta, dataset_meta(d).dump(1) + "\n");
}

inline Dataset load_dataset(const std::filesystem::path& stem) {
  auto tok = stem;
  tok += ".tokens";
  auto meta_path = stem;
  meta_path += ".meta.json";
  nlohmann::json meta;
  try {
    meta = nlohmann::json::parse(read_text(meta_path));
  } catch (const nlohmann::json::parse_error& e) {
    throw IoError("malformed dataset sidecar '" + meta_path.string() + "': " + e.what());
  }
  auto bytes = read_file(tok);
  if (bytes.size() % 4 != 0) throw IoError("token file size is not a multiple of 4");
  if (sha256_hex(bytes) != meta.at("tokens_sha256").get<std::string>())
    throw IoError("token file '" + tok.string() + "' does not match its sidecar hash");
  Dataset d;
  d.spec = meta.at("spec").get<CorpusSpec>();
  for (auto& s : meta.at("sequences")) {
    const auto off = s.at("offset").get<std::size_t>(), len = s.at("length").get<std::size_t>();
    if ((off + len) * 4 > bytes.size()) throw IoError("sequence extends past the token file");
    Sequence seq{TokenSeq(len), stream_kind_from_string(s.at("kind").get<std::string>())};
    for (std::size_t i = 0; i < len; ++i) {
      seq.tokens[i] = get_le<std::uint32_t>(bytes.data() + (off + i) * 4);
      if (seq.tokens[i] >= d.spec.vocab_size) throw IoError("token id out of range in dataset");
    }
    (s.at("split") == "eval" ? d.eval : d.train).push_back(std::move(seq));
  }
  auto pairs = [](const nlohmann::json& a, std::vector<RecallPair>& out) {
    for (auto& p : a)
      out.push_back({p.at("seq"), p.at("key_pos"), p.at("answer_pos"), p.at("key"), p.at("value")});
  };
  pairs(meta.at("recall_pairs").at("train"), d.train_pairs);
  pairs(meta.at("recall_pairs").at("eval"), d.eval_pairs);
  Rng chain_rng(Rng::derive(d.spec.seed, 1));
  d.transition = detail::make_transition(d.spec, chain_rng);
  return d;
}

}  // namespace xdistill
