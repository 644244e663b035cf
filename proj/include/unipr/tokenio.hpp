// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <algorithm>
#include <array>
#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "unipr/error.hpp"
#include "unipr/rng.hpp"
#include "unipr/tensor.hpp"

namespace unipr {

/// Token-group dimensions shared by every frame of a container.
struct TokenDims {
  std::uint32_t d2 = 1024;  // 2D token width
  std::uint32_t d3 = 2048;  // 3D token width
  std::uint32_t r2 = 4;     // 2D register tokens
  std::uint32_t r3 = 4;     // 3D register tokens
  std::uint32_t p = 1036;   // patch tokens (28 x 37 for a 392 x 518 crop)

  bool operator==(const TokenDims&) const = default;

  std::size_t floats_per_frame() const {
    return std::size_t{d2} * (1 + r2 + p) + std::size_t{d3} * (r3 + p);
  }

  void validate() const {
    require(d2 >= 1 && d3 >= 1 && r2 >= 1 && r3 >= 1 && p >= 1,
            "token dims must all be >= 1");
  }

  std::string str() const {
    std::ostringstream os;
    os << "D2=" << d2 << " D3=" << d3 << " R2=" << r2 << " R3=" << r3
       << " P=" << p;
    return os.str();
  }
};

/// Per-frame backbone outputs. The camera token is intentionally absent.
struct TokenSet {
  RowVec<float> cls2d;  // 1 x D2
  MatF reg2d;           // R2 x D2
  MatF patch2d;         // P x D2
  MatF reg3d;           // R3 x D3
  MatF patch3d;         // P x D3
  std::string frame_id;

  TokenDims dims() const {
    return {static_cast<std::uint32_t>(cls2d.cols()),
            static_cast<std::uint32_t>(reg3d.cols()),
            static_cast<std::uint32_t>(reg2d.rows()),
            static_cast<std::uint32_t>(reg3d.rows()),
            static_cast<std::uint32_t>(patch2d.rows())};
  }

  static TokenSet zeros(const TokenDims& d) {
    TokenSet t;
    t.cls2d = RowVec<float>::Zero(d.d2);
    t.reg2d = MatF::Zero(d.r2, d.d2);
    t.patch2d = MatF::Zero(d.p, d.d2);
    t.reg3d = MatF::Zero(d.r3, d.d3);
    t.patch3d = MatF::Zero(d.p, d.d3);
    return t;
  }

  /// Throws unless the groups are mutually consistent and finite.
  void validate() const {
    const auto d = dims();
    d.validate();
    require(reg2d.cols() == d.d2 && patch2d.cols() == d.d2,
            "TokenSet " + frame_id + ": 2D groups disagree on width");
    require(patch3d.cols() == d.d3,
            "TokenSet " + frame_id + ": 3D groups disagree on width");
    require(patch3d.rows() == patch2d.rows(),
            "TokenSet " + frame_id + ": patch2d/patch3d row counts differ");
    if (!(all_finite(cls2d) && all_finite(reg2d) && all_finite(patch2d) &&
          all_finite(reg3d) && all_finite(patch3d)))
      fail(ErrorKind::Numerical, "TokenSet " + frame_id + ": non-finite entry");
  }

  bool same_payload(const TokenSet& o) const {
    auto eq = [](const auto& a, const auto& b) {
      return a.rows() == b.rows() && a.cols() == b.cols() &&
             std::memcmp(a.data(), b.data(), sizeof(float) * a.size()) == 0;
    };
    return eq(cls2d, o.cls2d) && eq(reg2d, o.reg2d) && eq(patch2d, o.patch2d) &&
           eq(reg3d, o.reg3d) && eq(patch3d, o.patch3d);
  }
};

struct Position {
  double east = 0;
  double north = 0;
  bool operator==(const Position&) const = default;
};

struct FrameMeta {
  std::string frame_id;
  std::string sequence_id;
  std::int64_t index_in_sequence = 0;
  std::optional<Position> position;
  std::optional<std::int64_t> frame_index;

  bool operator==(const FrameMeta&) const = default;
};

// ---------------------------------------------------------------------------
// Little-endian scalar helpers shared by all binary formats.

namespace detail {

template <typename U>
void put_le(std::string& buf, U v) {
  static_assert(std::is_unsigned_v<U>);
  for (std::size_t i = 0; i < sizeof(U); ++i)
    buf.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

inline void put_f32(std::string& buf, float f) {
  put_le(buf, std::bit_cast<std::uint32_t>(f));
}

template <typename U>
U get_le(const unsigned char* p) {
  U v = 0;
  for (std::size_t i = 0; i < sizeof(U); ++i) v |= U(p[i]) << (8 * i);
  return v;
}

inline void append_f32s(std::string& buf, const float* data, std::size_t n) {
  if constexpr (std::endian::native == std::endian::little) {
    buf.append(reinterpret_cast<const char*>(data), n * sizeof(float));
  } else {
    for (std::size_t i = 0; i < n; ++i) put_f32(buf, data[i]);
  }
}

inline void read_f32s(const unsigned char* src, float* dst, std::size_t n) {
  if constexpr (std::endian::native == std::endian::little) {
    std::memcpy(dst, src, n * sizeof(float));
  } else {
    for (std::size_t i = 0; i < n; ++i)
      dst[i] = std::bit_cast<float>(get_le<std::uint32_t>(src + 4 * i));
  }
}

inline std::string read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) fail(ErrorKind::Io, "cannot open " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return std::move(ss).str();
}

inline void write_file(const std::filesystem::path& path,
                       const std::string& bytes) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) fail(ErrorKind::Io, "cannot open " + path.string() + " for writing");
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) fail(ErrorKind::Io, "write failed for " + path.string());
}

}  // namespace detail

// ---------------------------------------------------------------------------
// UPRT token container.
//
//   offset 0  : "UPRT"
//   offset 4  : u16 version (1)
//   offset 6  : u32 frame_count, D2, D3, R2, R3, P
//   offset 30 : frame_count payloads of f32, each cls2d | reg2d | patch2d |
//               reg3d | patch3d, row-major.
//
// Frame ids are not stored; they are bound by position through the manifest.

inline constexpr std::array<char, 4> kContainerMagic{'U', 'P', 'R', 'T'};
inline constexpr std::uint16_t kContainerVersion = 1;
inline constexpr std::size_t kContainerHeaderBytes = 4 + 2 + 6 * 4;

inline std::string encode_container(const std::vector<TokenSet>& frames,
                                    const TokenDims& empty_dims = {}) {
  const TokenDims dims = frames.empty() ? empty_dims : frames.front().dims();
  for (std::size_t i = 0; i < frames.size(); ++i) {
    frames[i].validate();
    if (frames[i].dims() != dims)
      fail(ErrorKind::InvalidArgument,
           "write_container: frame " + std::to_string(i) + " has dims " +
               frames[i].dims().str() + ", expected " + dims.str());
  }
  std::string buf;
  buf.reserve(kContainerHeaderBytes +
              frames.size() * dims.floats_per_frame() * sizeof(float));
  buf.append(kContainerMagic.data(), 4);
  detail::put_le<std::uint16_t>(buf, kContainerVersion);
  detail::put_le<std::uint32_t>(buf, static_cast<std::uint32_t>(frames.size()));
  for (auto v : {dims.d2, dims.d3, dims.r2, dims.r3, dims.p})
    detail::put_le<std::uint32_t>(buf, v);
  for (const auto& f : frames) {
    detail::append_f32s(buf, f.cls2d.data(), f.cls2d.size());
    detail::append_f32s(buf, f.reg2d.data(), f.reg2d.size());
    detail::append_f32s(buf, f.patch2d.data(), f.patch2d.size());
    detail::append_f32s(buf, f.reg3d.data(), f.reg3d.size());
    detail::append_f32s(buf, f.patch3d.data(), f.patch3d.size());
  }
  return buf;
}

/// Writes frames to `path`; returns the number of bytes written.
inline std::size_t write_container(const std::vector<TokenSet>& frames,
                                   const std::filesystem::path& path,
                                   const TokenDims& empty_dims = {}) {
  auto bytes = encode_container(frames, empty_dims);
  detail::write_file(path, bytes);
  return bytes.size();
}

struct ContainerHeader {
  std::uint16_t version = 0;
  std::uint32_t frame_count = 0;
  TokenDims dims;
};

inline ContainerHeader decode_container_header(std::string_view bytes) {
  if (bytes.size() < 4 || std::memcmp(bytes.data(), kContainerMagic.data(), 4) != 0)
    fail(ErrorKind::Format, "bad magic: not a UPRT token container");
  if (bytes.size() < kContainerHeaderBytes)
    fail(ErrorKind::Format, "truncated header at byte offset " +
                                std::to_string(bytes.size()) + " (need " +
                                std::to_string(kContainerHeaderBytes) + ")");
  const auto* p = reinterpret_cast<const unsigned char*>(bytes.data());
  ContainerHeader h;
  h.version = detail::get_le<std::uint16_t>(p + 4);
  if (h.version != kContainerVersion)
    fail(ErrorKind::Format,
         "unsupported container version " + std::to_string(h.version));
  h.frame_count = detail::get_le<std::uint32_t>(p + 6);
  h.dims.d2 = detail::get_le<std::uint32_t>(p + 10);
  h.dims.d3 = detail::get_le<std::uint32_t>(p + 14);
  h.dims.r2 = detail::get_le<std::uint32_t>(p + 18);
  h.dims.r3 = detail::get_le<std::uint32_t>(p + 22);
  h.dims.p = detail::get_le<std::uint32_t>(p + 26);
  try {
    h.dims.validate();
  } catch (const Error& e) {
    fail(ErrorKind::Format, std::string("invalid header: ") + e.what());
  }
  return h;
}

inline std::vector<TokenSet> decode_container(std::string_view bytes) {
  const auto h = decode_container_header(bytes);
  const std::size_t frame_bytes = h.dims.floats_per_frame() * sizeof(float);
  const std::size_t expected =
      kContainerHeaderBytes + std::size_t{h.frame_count} * frame_bytes;
  if (bytes.size() < expected) {
    const std::size_t whole = (bytes.size() - kContainerHeaderBytes) / frame_bytes;
    fail(ErrorKind::Format,
         "truncated payload at byte offset " + std::to_string(bytes.size()) +
             ": frame " + std::to_string(whole) + " of " +
             std::to_string(h.frame_count) + " is incomplete (expected " +
             std::to_string(expected) + " bytes)");
  }
  if (bytes.size() > expected)
    fail(ErrorKind::Format, "trailing bytes after payload at byte offset " +
                                std::to_string(expected));

  std::vector<TokenSet> frames;
  frames.reserve(h.frame_count);
  const auto* src =
      reinterpret_cast<const unsigned char*>(bytes.data()) + kContainerHeaderBytes;
  auto fill = [&src](auto& m) {
    detail::read_f32s(src, m.data(), static_cast<std::size_t>(m.size()));
    src += m.size() * sizeof(float);
  };
  for (std::uint32_t i = 0; i < h.frame_count; ++i) {
    auto t = TokenSet::zeros(h.dims);
    fill(t.cls2d);
    fill(t.reg2d);
    fill(t.patch2d);
    fill(t.reg3d);
    fill(t.patch3d);
    frames.push_back(std::move(t));
  }
  return frames;
}

inline std::vector<TokenSet> read_container(const std::filesystem::path& path) {
  if (!std::filesystem::exists(path))
    fail(ErrorKind::Io, "no such file: " + path.string());
  return decode_container(detail::read_file(path));
}

// ---------------------------------------------------------------------------
// Manifest: one JSON object per line.

inline nlohmann::json to_json(const FrameMeta& m) {
  nlohmann::json j;
  j["frame_id"] = m.frame_id;
  j["sequence_id"] = m.sequence_id;
  j["index_in_sequence"] = m.index_in_sequence;
  if (m.position) j["position"] = {m.position->east, m.position->north};
  if (m.frame_index) j["frame_index"] = *m.frame_index;
  return j;
}

inline FrameMeta frame_meta_from_json(const nlohmann::json& j) {
  static const std::set<std::string> known{"frame_id", "sequence_id",
                                           "index_in_sequence", "position",
                                           "frame_index"};
  if (!j.is_object()) fail(ErrorKind::Format, "manifest record is not an object");
  for (const auto& [key, _] : j.items())
    if (!known.contains(key))
      fail(ErrorKind::Format, "manifest record has unknown field '" + key + "'");
  FrameMeta m;
  try {
    m.frame_id = j.at("frame_id").get<std::string>();
    m.sequence_id = j.at("sequence_id").get<std::string>();
    m.index_in_sequence = j.at("index_in_sequence").get<std::int64_t>();
    if (j.contains("position")) {
      const auto& p = j.at("position");
      if (!p.is_array() || p.size() != 2)
        fail(ErrorKind::Format, "position must be [east, north]");
      m.position = Position{p[0].get<double>(), p[1].get<double>()};
    }
    if (j.contains("frame_index"))
      m.frame_index = j.at("frame_index").get<std::int64_t>();
  } catch (const nlohmann::json::exception& e) {
    fail(ErrorKind::Format, std::string("manifest record: ") + e.what());
  }
  return m;
}

/// Checks the manifest-level invariants.
inline void validate_manifest(const std::vector<FrameMeta>& metas) {
  std::set<std::pair<std::string, std::int64_t>> seen;
  for (std::size_t i = 0; i < metas.size(); ++i) {
    const auto& m = metas[i];
    if (!m.position && !m.frame_index)
      fail(ErrorKind::Format, "manifest line " + std::to_string(i + 1) +
                                  ": needs position or frame_index");
    if (m.index_in_sequence < 0)
      fail(ErrorKind::Format, "manifest line " + std::to_string(i + 1) +
                                  ": negative index_in_sequence");
    if (!seen.emplace(m.sequence_id, m.index_in_sequence).second)
      fail(ErrorKind::Format, "manifest line " + std::to_string(i + 1) +
                                  ": duplicate (sequence_id, index_in_sequence)");
  }
}

inline std::string encode_manifest(const std::vector<FrameMeta>& metas) {
  std::string out;
  for (const auto& m : metas) {
    out += to_json(m).dump();
    out += '\n';
  }
  return out;
}

inline std::vector<FrameMeta> decode_manifest(std::string_view text) {
  std::vector<FrameMeta> metas;
  std::size_t line_no = 0;
  std::size_t start = 0;
  while (start < text.size()) {
    auto end = text.find('\n', start);
    if (end == std::string_view::npos) end = text.size();
    auto line = text.substr(start, end - start);
    start = end + 1;
    ++line_no;
    if (line.find_first_not_of(" \t\r") == std::string_view::npos) continue;
    nlohmann::json j;
    try {
      j = nlohmann::json::parse(line);
    } catch (const nlohmann::json::parse_error& e) {
      fail(ErrorKind::Format,
           "manifest line " + std::to_string(line_no) + ": " + e.what());
    }
    metas.push_back(frame_meta_from_json(j));
  }
  validate_manifest(metas);
  return metas;
}

inline void write_manifest(const std::vector<FrameMeta>& metas,
                           const std::filesystem::path& path) {
  validate_manifest(metas);
  detail::write_file(path, encode_manifest(metas));
}

inline std::vector<FrameMeta> read_manifest(const std::filesystem::path& path) {
  if (!std::filesystem::exists(path))
    fail(ErrorKind::Io, "no such file: " + path.string());
  return decode_manifest(detail::read_file(path));
}

/// A container plus its manifest, frame ids bound by position.
struct Dataset {
  std::vector<TokenSet> frames;
  std::vector<FrameMeta> metas;
};

inline Dataset load_dataset(const std::filesystem::path& container,
                            const std::filesystem::path& manifest) {
  Dataset ds{read_container(container), read_manifest(manifest)};
  if (ds.frames.size() != ds.metas.size())
    fail(ErrorKind::Format, "container has " + std::to_string(ds.frames.size()) +
                                " frames but manifest has " +
                                std::to_string(ds.metas.size()) + " records");
  for (std::size_t i = 0; i < ds.frames.size(); ++i)
    ds.frames[i].frame_id = ds.metas[i].frame_id;
  return ds;
}

// ---------------------------------------------------------------------------
// Synthetic token generator.
//
// Each place p has a latent code z_p ~ N(0, I_k). Every token role (the cls
// token, each register slot, and each of `patch_types` patch kinds) has a
// fixed offset c_r and a fixed mixing matrix G_r shared by all places, and
// its noise-free value is c_r + G_r z_p. A view adds i.i.d. Gaussian noise
// of scale noise_sigma to every entry. The offsets are common to all places,
// so a useful descriptor must learn to discount them and to concentrate on
// the k-dimensional place subspace.

struct SyntheticConfig {
  std::uint32_t num_places = 200;
  std::uint32_t views_per_place = 2;
  double place_spacing_m = 10.0;
  double noise_sigma = 0.5;
  TokenDims dims;
  std::uint64_t seed = 0;
  std::uint32_t place_offset = 0;  // first place id, for held-out splits
  std::uint32_t latent_dim = 8;
  std::uint32_t patch_types = 8;
  double offset_scale = 2.0;  // magnitude of the place-independent offsets

  void validate() const {
    require(num_places >= 1, "synthetic: num_places must be >= 1");
    require(views_per_place >= 1, "synthetic: views_per_place must be >= 1");
    require(noise_sigma >= 0 && std::isfinite(noise_sigma),
            "synthetic: noise_sigma must be finite and >= 0");
    require(place_spacing_m > 0, "synthetic: place_spacing_m must be > 0");
    require(latent_dim >= 1 && patch_types >= 1,
            "synthetic: latent_dim and patch_types must be >= 1");
    dims.validate();
  }
};

namespace detail {

enum : std::uint64_t { kStreamWorld = 1, kStreamPlace = 2, kStreamView = 3 };

struct RoleBasis {
  RowVec<double> offset;  // 1 x D
  Mat<double> mixing;     // k x D (row-major so z^T * mixing is a row)
};

inline RoleBasis make_role(std::uint64_t seed, std::uint64_t role, std::uint32_t width,
                           const SyntheticConfig& cfg) {
  CounterRng rng(derive_key({seed, kStreamWorld, role}));
  RoleBasis b;
  b.offset.resize(width);
  for (std::uint32_t i = 0; i < width; ++i) b.offset[i] = cfg.offset_scale * rng.normal();
  b.mixing.resize(cfg.latent_dim, width);
  const double s = 1.0 / std::sqrt(static_cast<double>(cfg.latent_dim));
  for (Eigen::Index i = 0; i < b.mixing.size(); ++i) b.mixing.data()[i] = s * rng.normal();
  return b;
}

}  // namespace detail

/// Frames are ordered view-major: every place of view 0, then view 1, ...
/// Each view is one traversal (sequence_id "view<v>") along the east axis.
inline std::pair<std::vector<TokenSet>, std::vector<FrameMeta>> generate_synthetic(
    const SyntheticConfig& cfg) {
  cfg.validate();
  const auto& d = cfg.dims;
  const std::uint32_t k = cfg.latent_dim;

  // Role ids: 0 = cls2d, 100+r = reg2d slot r, 200+t = 2D patch type t,
  // 300+r = reg3d slot r, 400+t = 3D patch type t.
  std::vector<detail::RoleBasis> reg2d_roles, patch2d_roles, reg3d_roles, patch3d_roles;
  const auto cls_role = detail::make_role(cfg.seed, 0, d.d2, cfg);
  for (std::uint32_t r = 0; r < d.r2; ++r)
    reg2d_roles.push_back(detail::make_role(cfg.seed, 100 + r, d.d2, cfg));
  for (std::uint32_t t = 0; t < cfg.patch_types; ++t)
    patch2d_roles.push_back(detail::make_role(cfg.seed, 200 + t, d.d2, cfg));
  for (std::uint32_t r = 0; r < d.r3; ++r)
    reg3d_roles.push_back(detail::make_role(cfg.seed, 300 + r, d.d3, cfg));
  for (std::uint32_t t = 0; t < cfg.patch_types; ++t)
    patch3d_roles.push_back(detail::make_role(cfg.seed, 400 + t, d.d3, cfg));

  std::vector<TokenSet> bases;
  bases.reserve(cfg.num_places);
  for (std::uint32_t i = 0; i < cfg.num_places; ++i) {
    const std::uint64_t place = std::uint64_t{cfg.place_offset} + i;
    CounterRng rng(derive_key({cfg.seed, detail::kStreamPlace, place}));
    RowVec<double> z(k);
    for (std::uint32_t j = 0; j < k; ++j) z[j] = rng.normal();
    auto value = [&z](const detail::RoleBasis& b) -> RowVec<double> {
      return b.offset + z * b.mixing;
    };
    auto t = TokenSet::zeros(d);
    t.cls2d = value(cls_role).cast<float>();
    for (std::uint32_t r = 0; r < d.r2; ++r) t.reg2d.row(r) = value(reg2d_roles[r]).cast<float>();
    for (std::uint32_t r = 0; r < d.r3; ++r) t.reg3d.row(r) = value(reg3d_roles[r]).cast<float>();
    std::vector<RowVec<float>> p2, p3;
    for (std::uint32_t ty = 0; ty < cfg.patch_types; ++ty) {
      p2.push_back(value(patch2d_roles[ty]).cast<float>());
      p3.push_back(value(patch3d_roles[ty]).cast<float>());
    }
    for (std::uint32_t r = 0; r < d.p; ++r) {
      t.patch2d.row(r) = p2[r % cfg.patch_types];
      t.patch3d.row(r) = p3[r % cfg.patch_types];
    }
    bases.push_back(std::move(t));
  }

  std::vector<TokenSet> frames;
  std::vector<FrameMeta> metas;
  frames.reserve(std::size_t{cfg.num_places} * cfg.views_per_place);
  for (std::uint32_t v = 0; v < cfg.views_per_place; ++v) {
    for (std::uint32_t i = 0; i < cfg.num_places; ++i) {
      const std::uint64_t place = std::uint64_t{cfg.place_offset} + i;
      TokenSet t = bases[i];
      if (cfg.noise_sigma > 0) {
        CounterRng rng(derive_key({cfg.seed, detail::kStreamView, place, v}));
        auto perturb = [&](auto& m) {
          for (Eigen::Index e = 0; e < m.size(); ++e)
            m.data()[e] += static_cast<float>(cfg.noise_sigma * rng.normal());
        };
        perturb(t.cls2d);
        perturb(t.reg2d);
        perturb(t.patch2d);
        perturb(t.reg3d);
        perturb(t.patch3d);
      }
      t.frame_id = "p" + std::to_string(place) + "_v" + std::to_string(v);
      FrameMeta m;
      m.frame_id = t.frame_id;
      m.sequence_id = "view" + std::to_string(v);
      m.index_in_sequence = static_cast<std::int64_t>(place);
      m.position = Position{static_cast<double>(place) * cfg.place_spacing_m, 0.0};
      m.frame_index = static_cast<std::int64_t>(place);
      frames.push_back(std::move(t));
      metas.push_back(std::move(m));
    }
  }
  return {std::move(frames), std::move(metas)};
}

}  // namespace unipr
