// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "unipr/error.hpp"
#include "unipr/retrieval.hpp"
#include "unipr/tensor.hpp"
#include "unipr/tokenio.hpp"

namespace unipr {

// UPRD descriptor set, also used for built indexes:
//
//   "UPRD" | u16 version (1) | u32 rows | u32 dim | f32[rows*dim] row-major
//   u32 manifest_bytes | manifest JSONL (one FrameMeta per row)

inline constexpr std::array<char, 4> kDescriptorMagic{'U', 'P', 'R', 'D'};
inline constexpr std::uint16_t kDescriptorVersion = 1;

struct DescriptorSet {
  MatF rows;
  std::vector<FrameMeta> metas;
};

inline std::string encode_descriptors(const DescriptorSet& set) {
  require(static_cast<std::size_t>(set.rows.rows()) == set.metas.size(),
          "descriptor set: row/meta count mismatch");
  std::string buf(kDescriptorMagic.data(), 4);
  detail::put_le<std::uint16_t>(buf, kDescriptorVersion);
  detail::put_le<std::uint32_t>(buf, static_cast<std::uint32_t>(set.rows.rows()));
  detail::put_le<std::uint32_t>(buf, static_cast<std::uint32_t>(set.rows.cols()));
  detail::append_f32s(buf, set.rows.data(), static_cast<std::size_t>(set.rows.size()));
  const std::string manifest = encode_manifest(set.metas);
  detail::put_le<std::uint32_t>(buf, static_cast<std::uint32_t>(manifest.size()));
  buf += manifest;
  return buf;
}

inline DescriptorSet decode_descriptors(std::string_view bytes) {
  const auto* p = reinterpret_cast<const unsigned char*>(bytes.data());
  if (bytes.size() < 4 || std::memcmp(bytes.data(), kDescriptorMagic.data(), 4) != 0)
    fail(ErrorKind::Format, "bad magic: not a UPRD descriptor file");
  if (bytes.size() < 14) fail(ErrorKind::Format, "descriptor file truncated at byte offset " +
                                                     std::to_string(bytes.size()));
  if (auto v = detail::get_le<std::uint16_t>(p + 4); v != kDescriptorVersion)
    fail(ErrorKind::Format, "unsupported descriptor file version " + std::to_string(v));
  const auto rows = detail::get_le<std::uint32_t>(p + 6);
  const auto dim = detail::get_le<std::uint32_t>(p + 10);
  const std::size_t payload = std::size_t{rows} * dim * sizeof(float);
  std::size_t at = 14;
  if (bytes.size() - at < payload + 4)
    fail(ErrorKind::Format, "descriptor file truncated at byte offset " + std::to_string(bytes.size()));
  DescriptorSet set{MatF(rows, dim), {}};
  detail::read_f32s(p + at, set.rows.data(), std::size_t{rows} * dim);
  at += payload;
  const auto mlen = detail::get_le<std::uint32_t>(p + at);
  at += 4;
  if (bytes.size() - at != mlen)
    fail(ErrorKind::Format, "descriptor file manifest length mismatch at byte offset " +
                                std::to_string(at));
  set.metas = mlen ? decode_manifest(bytes.substr(at, mlen)) : std::vector<FrameMeta>{};
  if (set.metas.size() != rows)
    fail(ErrorKind::Format, "descriptor file has " + std::to_string(rows) + " rows but " +
                                std::to_string(set.metas.size()) + " manifest records");
  return set;
}

inline void write_descriptors(const DescriptorSet& set, const std::filesystem::path& path) {
  detail::write_file(path, encode_descriptors(set));
}

inline DescriptorSet read_descriptors(const std::filesystem::path& path) {
  if (!std::filesystem::exists(path)) fail(ErrorKind::Io, "no such file: " + path.string());
  return decode_descriptors(detail::read_file(path));
}

inline void write_index(const RetrievalIndex& index, const std::filesystem::path& path) {
  write_descriptors({index.descriptors, index.metas}, path);
}

inline RetrievalIndex read_index(const std::filesystem::path& path) {
  auto set = read_descriptors(path);
  return build_index(std::move(set.rows), std::move(set.metas));
}

// ---------------------------------------------------------------------------
// Plain-text graymap (PGM P2). Values are clamped to [0, 1] and scaled to 255.

inline std::string encode_pgm(const MatD& grid) {
  std::string out = "P2\n" + std::to_string(grid.cols()) + " " + std::to_string(grid.rows()) + "\n255\n";
  for (Eigen::Index r = 0; r < grid.rows(); ++r) {
    for (Eigen::Index c = 0; c < grid.cols(); ++c) {
      const double v = std::clamp(grid(r, c), 0.0, 1.0);
      if (c) out += ' ';
      out += std::to_string(static_cast<int>(std::lround(255.0 * v)));
    }
    out += '\n';
  }
  return out;
}

inline void write_pgm(const MatD& grid, const std::filesystem::path& path) {
  detail::write_file(path, encode_pgm(grid));
}

// ---------------------------------------------------------------------------

/// FNV-1a 64 over the compact dump of a resolved config, as 16 hex digits.
inline std::string config_hash(const nlohmann::json& config) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : config.dump()) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  static constexpr char kHex[] = "0123456789abcdef";
  std::string s(16, '0');
  for (int i = 15; i >= 0; --i, h >>= 4) s[static_cast<std::size_t>(i)] = kHex[h & 0xf];
  return s;
}

}  // namespace unipr
