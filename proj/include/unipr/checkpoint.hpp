// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <array>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <map>
#include <string>

#include "unipr/aggregation.hpp"
#include "unipr/error.hpp"
#include "unipr/tokenio.hpp"

namespace unipr {

// UPRP parameter checkpoint, little-endian:
//
//   "UPRP" | u16 version (1) | u16 flags (bit 0: adapter enabled)
//   u32 d2, d3, hidden, head_dim, clusters, reduced_dim
//   u32 tensor_count
//   tensor_count x { u32 name_len | name bytes | u32 rows | u32 cols | f32[rows*cols] }

inline constexpr std::array<char, 4> kCheckpointMagic{'U', 'P', 'R', 'P'};
inline constexpr std::uint16_t kCheckpointVersion = 1;

template <typename T>
std::string encode_checkpoint(const AggregatorParams<T>& params) {
  std::string buf(kCheckpointMagic.data(), 4);
  detail::put_le<std::uint16_t>(buf, kCheckpointVersion);
  detail::put_le<std::uint16_t>(buf, params.adapter_enabled ? 1 : 0);
  const auto& c = params.config;
  for (auto v : {c.d2, c.d3, c.hidden, c.head_dim, c.clusters, c.reduced_dim})
    detail::put_le<std::uint32_t>(buf, v);
  std::uint32_t count = 0;
  for_each_tensor([&](const std::string&, auto) { ++count; }, params);
  detail::put_le<std::uint32_t>(buf, count);
  for_each_tensor(
      [&](const std::string& name, auto m) {
        detail::put_le<std::uint32_t>(buf, static_cast<std::uint32_t>(name.size()));
        buf += name;
        detail::put_le<std::uint32_t>(buf, static_cast<std::uint32_t>(m.rows()));
        detail::put_le<std::uint32_t>(buf, static_cast<std::uint32_t>(m.cols()));
        for (Eigen::Index i = 0; i < m.size(); ++i)
          detail::put_f32(buf, static_cast<float>(m.data()[i]));
      },
      params);
  return buf;
}

template <typename T>
AggregatorParams<T> decode_checkpoint(std::string_view bytes) {
  std::size_t at = 0;
  auto need = [&](std::size_t n) {
    if (bytes.size() - at < n)
      fail(ErrorKind::Format, "checkpoint truncated at byte offset " + std::to_string(bytes.size()));
  };
  auto u16 = [&] {
    need(2);
    auto v = detail::get_le<std::uint16_t>(reinterpret_cast<const unsigned char*>(bytes.data() + at));
    at += 2;
    return v;
  };
  auto u32 = [&] {
    need(4);
    auto v = detail::get_le<std::uint32_t>(reinterpret_cast<const unsigned char*>(bytes.data() + at));
    at += 4;
    return v;
  };
  if (bytes.size() < 4 || std::memcmp(bytes.data(), kCheckpointMagic.data(), 4) != 0)
    fail(ErrorKind::Format, "bad magic: not a UPRP checkpoint");
  at = 4;
  if (auto v = u16(); v != kCheckpointVersion)
    fail(ErrorKind::Format, "unsupported checkpoint version " + std::to_string(v));
  const auto flags = u16();
  ModelConfig cfg;
  cfg.d2 = u32();
  cfg.d3 = u32();
  cfg.hidden = u32();
  cfg.head_dim = u32();
  cfg.clusters = u32();
  cfg.reduced_dim = u32();
  try {
    cfg.validate();
  } catch (const Error& e) {
    fail(ErrorKind::Format, std::string("checkpoint: ") + e.what());
  }
  const auto count = u32();

  std::map<std::string, std::pair<std::array<std::uint32_t, 2>, std::size_t>> dir;
  for (std::uint32_t t = 0; t < count; ++t) {
    const auto len = u32();
    need(len);
    std::string name(bytes.substr(at, len));
    at += len;
    const auto rows = u32();
    const auto cols = u32();
    const std::size_t payload = std::size_t{rows} * cols * sizeof(float);
    need(payload);
    if (!dir.emplace(name, std::make_pair(std::array{rows, cols}, at)).second)
      fail(ErrorKind::Format, "checkpoint: duplicate tensor '" + name + "'");
    at += payload;
  }
  if (at != bytes.size())
    fail(ErrorKind::Format, "checkpoint: trailing bytes at byte offset " + std::to_string(at));

  auto params = init_aggregator<T>(cfg, 0);
  params.adapter_enabled = (flags & 1) != 0;
  std::size_t used = 0;
  for_each_tensor(
      [&](const std::string& name, auto m) {
        auto it = dir.find(name);
        if (it == dir.end()) fail(ErrorKind::Format, "checkpoint: missing tensor '" + name + "'");
        const auto [shape, offset] = it->second;
        if (Eigen::Index{shape[0]} != m.rows() || Eigen::Index{shape[1]} != m.cols())
          fail(ErrorKind::Format, "checkpoint: tensor '" + name + "' has shape " +
                                      std::to_string(shape[0]) + "x" + std::to_string(shape[1]) +
                                      ", expected " + shape_str(m));
        const auto* src = reinterpret_cast<const unsigned char*>(bytes.data() + offset);
        for (Eigen::Index i = 0; i < m.size(); ++i)
          m.data()[i] = static_cast<T>(std::bit_cast<float>(detail::get_le<std::uint32_t>(src + 4 * i)));
        ++used;
      },
      params);
  if (used != dir.size()) fail(ErrorKind::Format, "checkpoint: contains unknown tensors");
  return params;
}

template <typename T>
void save_checkpoint(const AggregatorParams<T>& params, const std::filesystem::path& path) {
  detail::write_file(path, encode_checkpoint(params));
}

template <typename T>
AggregatorParams<T> load_checkpoint(const std::filesystem::path& path) {
  if (!std::filesystem::exists(path)) fail(ErrorKind::Io, "no such file: " + path.string());
  return decode_checkpoint<T>(detail::read_file(path));
}

}  // namespace unipr
