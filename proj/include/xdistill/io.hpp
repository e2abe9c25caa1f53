#pragma once

// File helpers: whole-file reads, atomic writes (temp file + rename), SHA-256
// digests and little-endian scalar encoding.

#include <openssl/evp.h>

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <memory>
#include <string>
#include <vector>

#include "xdistill/error.hpp"

namespace xdistill {

static_assert(std::endian::native == std::endian::little, "file formats assume a little-endian host");

inline std::vector<std::uint8_t> read_file(const std::filesystem::path& p) {
  std::ifstream in(p, std::ios::binary);
  if (!in) throw IoError("cannot open '" + p.string() + "' for reading");
  std::vector<std::uint8_t> buf((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  if (in.bad()) throw IoError("read failed for '" + p.string() + "'");
  return buf;
}

inline std::string read_text(const std::filesystem::path& p) {
  auto b = read_file(p);
  return std::string(b.begin(), b.end());
}

/// Writes `bytes` to `p` via a sibling temp file and rename, so readers never
/// observe a partially written file.
inline void write_file_atomic(const std::filesystem::path& p, const void* data, std::size_t n) {
  if (p.has_parent_path()) std::filesystem::create_directories(p.parent_path());
  auto tmp = p;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot open '" + tmp.string() + "' for writing");
    out.write(static_cast<const char*>(data), static_cast<std::streamsize>(n));
    out.flush();
    if (!out) throw IoError("write failed for '" + tmp.string() + "'");
  }
  std::error_code ec;
  std::filesystem::rename(tmp, p, ec);
  if (ec) throw IoError("cannot rename '" + tmp.string() + "' to '" + p.string() + "': " + ec.message());
}

inline void write_file_atomic(const std::filesystem::path& p, const std::vector<std::uint8_t>& bytes) {
  write_file_atomic(p, bytes.data(), bytes.size());
}

inline void write_text_atomic(const std::filesystem::path& p, const std::string& s) {
  write_file_atomic(p, s.data(), s.size());
}

inline std::string sha256_hex(const void* data, std::size_t n) {
  std::unique_ptr<EVP_MD_CTX, decltype(&EVP_MD_CTX_free)> ctx(EVP_MD_CTX_new(), EVP_MD_CTX_free);
  unsigned char md[EVP_MAX_MD_SIZE];
  unsigned int len = 0;
  if (!ctx || EVP_DigestInit_ex(ctx.get(), EVP_sha256(), nullptr) != 1 ||
      EVP_DigestUpdate(ctx.get(), data, n) != 1 || EVP_DigestFinal_ex(ctx.get(), md, &len) != 1)
    throw IoError("SHA-256 computation failed");
  static const char* hex = "0123456789abcdef";
  std::string out;
  for (unsigned i = 0; i < len; ++i) {
    out.push_back(hex[md[i] >> 4]);
    out.push_back(hex[md[i] & 15]);
  }
  return out;
}

inline std::string sha256_hex(const std::vector<std::uint8_t>& b) { return sha256_hex(b.data(), b.size()); }
inline std::string sha256_file(const std::filesystem::path& p) { return sha256_hex(read_file(p)); }

template <class U>
void put_le(std::vector<std::uint8_t>& out, U v) {
  std::uint8_t b[sizeof(U)];
  std::memcpy(b, &v, sizeof(U));
  out.insert(out.end(), b, b + sizeof(U));
}

template <class U>
U get_le(const std::uint8_t* p) {
  U v;
  std::memcpy(&v, p, sizeof(U));
  return v;
}

}  // namespace xdistill
