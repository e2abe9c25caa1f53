#pragma once

// Weight-space merging of expert checkpoints: θ = Σ λ_i θ_i.

#include <nlohmann/json.hpp>

#include <cmath>
#include <filesystem>
#include <string>
#include <vector>

#include "xdistill/checkpoint.hpp"

namespace xdistill {

enum class MergeNormalization { strict, automatic };

inline const char* to_string(MergeNormalization m) { return m == MergeNormalization::strict ? "strict" : "auto"; }
inline MergeNormalization merge_normalization_from_string(const std::string& s) {
  if (s == "strict") return MergeNormalization::strict;
  if (s == "auto") return MergeNormalization::automatic;
  throw ConfigError("unknown merge normalization '" + s + "' (expected strict or auto)");
}

struct MergeExpert {
  Checkpoint checkpoint;
  double weight = 0;
  std::string source;  // path or label, recorded in provenance
};

struct MergeSpec {
  std::vector<MergeExpert> experts;
  MergeNormalization normalization = MergeNormalization::strict;

  /// Weights as applied: unchanged in strict mode, divided by their sum in
  /// auto mode.
  std::vector<double> effective_weights() const {
    if (experts.empty()) throw ConfigError("merge needs at least one expert");
    double s = 0;
    for (auto& e : experts) {
      if (!(e.weight >= 0) || !std::isfinite(e.weight))
        throw ConfigError("merge weights must be finite and nonnegative");
      s += e.weight;
    }
    if (normalization == MergeNormalization::strict) {
      if (std::abs(s - 1.0) > 1e-9)
        throw ConfigError("strict merge requires weights summing to 1, got " + std::to_string(s));
      s = 1.0;
    }
    if (!(s > 0)) throw ConfigError("merge weights sum to zero");
    std::vector<double> w;
    for (auto& e : experts) w.push_back(e.weight / s);
    return w;
  }
};

/// Tensor-wise convex combination. Config and non-tensor lineage come from
/// the first expert; provenance lists every expert's hash and weight.
inline Checkpoint linear_merge(const MergeSpec& spec) {
  const auto w = spec.effective_weights();
  const Checkpoint& first = spec.experts.front().checkpoint;
  for (std::size_t i = 1; i < spec.experts.size(); ++i) {
    const auto& c = spec.experts[i].checkpoint;
    if (c.config != first.config) throw ContractError("expert " + std::to_string(i) + " has a different config");
    if (c.dtype != first.dtype) throw ContractError("expert " + std::to_string(i) + " has a different dtype");
    if (c.tensors.size() != first.tensors.size())
      throw ContractError("expert " + std::to_string(i) + " has a different tensor set");
    for (auto& [name, t] : first.tensors) {
      auto it = c.tensors.find(name);
      if (it == c.tensors.end()) throw ContractError("expert " + std::to_string(i) + " lacks tensor '" + name + "'");
      if (it->second.shape() != t.shape())
        throw DimensionError("tensor '" + name + "' shape differs in expert " + std::to_string(i));
    }
  }
  Checkpoint out;
  out.config = first.config;
  out.dtype = first.dtype;
  out.lineage = first.lineage;
  for (auto& [name, t] : first.tensors) {
    Tensor<double> acc(t.shape());
    for (std::size_t e = 0; e < spec.experts.size(); ++e) {
      const auto& src = spec.experts[e].checkpoint.tensors.at(name);
      for (std::size_t i = 0; i < acc.size(); ++i) acc[i] += w[e] * src[i];
    }
    if (out.dtype == DType::f32) acc = acc.cast<float>().cast<double>();
    out.tensors.emplace(name, std::move(acc));
  }
  nlohmann::json prov = nlohmann::json::array();
  for (std::size_t e = 0; e < spec.experts.size(); ++e)
    prov.push_back({{"hash", spec.experts[e].checkpoint.hash()},
                    {"weight", spec.experts[e].weight},
                    {"normalized_weight", w[e]},
                    {"source", spec.experts[e].source}});
  out.lineage["stage"] = "merge";
  out.lineage["merge"] = {{"normalization", to_string(spec.normalization)}, {"experts", prov}};
  return out;
}

/// Re-merge with expert `index` replaced; equals linear_merge of the edited
/// spec.
inline Checkpoint patch_merge(MergeSpec spec, std::size_t index, Checkpoint replacement, std::string source = {}) {
  if (index >= spec.experts.size()) throw ConfigError("patch index " + std::to_string(index) + " out of range");
  spec.experts[index].checkpoint = std::move(replacement);
  if (!source.empty()) spec.experts[index].source = std::move(source);
  return linear_merge(spec);
}

}  // namespace xdistill
