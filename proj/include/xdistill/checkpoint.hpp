#pragma once

// Checkpoint file layout:
//   u64 LE  manifest length N
//   N bytes JSON manifest {format_version, config, lineage,
//                          tensors: {name: {dtype, shape, offset, nbytes}}}
//   zero padding to a 64-byte boundary; this is the start of the data section
//   tensor data, little-endian, in manifest (sorted-name) order, each tensor
//   starting on a 64-byte boundary; offsets are relative to the data section.

#include <nlohmann/json.hpp>

#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include "xdistill/io.hpp"
#include "xdistill/tensor.hpp"

namespace xdistill {

enum class DType { f32, f64 };

inline const char* to_string(DType d) { return d == DType::f32 ? "f32" : "f64"; }
inline DType dtype_from_string(const std::string& s) {
  if (s == "f32") return DType::f32;
  if (s == "f64") return DType::f64;
  throw IoError("unknown dtype '" + s + "'");
}
inline std::size_t dtype_size(DType d) { return d == DType::f32 ? 4 : 8; }

template <class T>
constexpr DType dtype_of() {
  static_assert(std::is_same_v<T, float> || std::is_same_v<T, double>);
  return std::is_same_v<T, float> ? DType::f32 : DType::f64;
}

struct Checkpoint {
  static constexpr int kFormatVersion = 1;

  nlohmann::json config = nlohmann::json::object();
  nlohmann::json lineage = nlohmann::json::object();  // seeds, parent hashes, merge provenance
  DType dtype = DType::f32;
  std::map<std::string, Tensor<double>> tensors;  // values exactly representable in `dtype`

  std::vector<std::uint8_t> serialize() const {
    nlohmann::json tj = nlohmann::json::object();
    std::size_t off = 0;
    const std::size_t es = dtype_size(dtype);
    for (auto& [name, t] : tensors) {
      const std::size_t nbytes = t.size() * es;
      tj[name] = {{"dtype", to_string(dtype)}, {"shape", t.shape()}, {"offset", off}, {"nbytes", nbytes}};
      off = align64(off + nbytes);
    }
    nlohmann::json manifest = {
        {"format_version", kFormatVersion}, {"config", config}, {"lineage", lineage}, {"tensors", tj}};
    const std::string m = manifest.dump();
    std::vector<std::uint8_t> out;
    put_le<std::uint64_t>(out, m.size());
    out.insert(out.end(), m.begin(), m.end());
    out.resize(align64(out.size()), 0);
    const std::size_t base = out.size();
    for (auto& [name, t] : tensors) {
      const std::size_t at = base + tj[name]["offset"].get<std::size_t>();
      out.resize(at, 0);
      for (std::size_t i = 0; i < t.size(); ++i) {
        if (dtype == DType::f32)
          put_le<float>(out, static_cast<float>(t[i]));
        else
          put_le<double>(out, t[i]);
      }
    }
    out.resize(align64(out.size()), 0);
    return out;
  }

  static Checkpoint deserialize(const std::vector<std::uint8_t>& b) {
    if (b.size() < 8) throw IoError("checkpoint truncated (no header)");
    const auto mlen = get_le<std::uint64_t>(b.data());
    if (8 + mlen > b.size()) throw IoError("checkpoint truncated (manifest)");
    nlohmann::json m;
    try {
      m = nlohmann::json::parse(b.begin() + 8, b.begin() + 8 + static_cast<std::ptrdiff_t>(mlen));
    } catch (const nlohmann::json::parse_error& e) {
      throw IoError(std::string("malformed checkpoint manifest: ") + e.what());
    }
    if (m.at("format_version").get<int>() != kFormatVersion)
      throw IoError("unsupported checkpoint format_version " + m.at("format_version").dump());
    Checkpoint c;
    c.config = m.at("config");
    c.lineage = m.at("lineage");
    const std::size_t base = align64(8 + mlen);
    bool first = true;
    for (auto& [name, info] : m.at("tensors").items()) {
      const DType dt = dtype_from_string(info.at("dtype").get<std::string>());
      if (first) c.dtype = dt;
      if (dt != c.dtype) throw IoError("mixed dtypes in checkpoint");
      first = false;
      const Shape shape = info.at("shape").get<Shape>();
      const std::size_t off = base + info.at("offset").get<std::size_t>();
      const std::size_t nbytes = info.at("nbytes").get<std::size_t>();
      if (nbytes != numel(shape) * dtype_size(dt)) throw IoError("tensor '" + name + "' size disagrees with its shape");
      if (off + nbytes > b.size()) throw IoError("checkpoint truncated (tensor '" + name + "')");
      Tensor<double> t(shape);
      for (std::size_t i = 0; i < t.size(); ++i)
        t[i] = dt == DType::f32 ? static_cast<double>(get_le<float>(b.data() + off + 4 * i))
                                : get_le<double>(b.data() + off + 8 * i);
      c.tensors.emplace(name, std::move(t));
    }
    return c;
  }

  void save(const std::filesystem::path& p) const { write_file_atomic(p, serialize()); }
  static Checkpoint load(const std::filesystem::path& p) { return deserialize(read_file(p)); }
  std::string hash() const { return sha256_hex(serialize()); }

 private:
  static std::size_t align64(std::size_t n) { return (n + 63) / 64 * 64; }
};

}  // namespace xdistill
