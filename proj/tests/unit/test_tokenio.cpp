// SPDX-License-Identifier: Apache-2.0
#include "unipr/tokenio.hpp"

#include <gtest/gtest.h>

#include <cmath>
#include <map>

#include "fixtures.hpp"

using namespace unipr;

namespace {

std::vector<TokenSet> frames_of(std::size_t n, const TokenDims& d) {
  std::vector<TokenSet> out;
  for (std::size_t i = 0; i < n; ++i) out.push_back(fixtures::random_frame(100 + i, d));
  return out;
}

ErrorKind kind_of(const std::function<void()>& f) {
  try {
    f();
  } catch (const Error& e) {
    return e.kind();
  }
  ADD_FAILURE() << "expected an error";
  return ErrorKind::InvalidArgument;
}

std::string message_of(const std::function<void()>& f) {
  try {
    f();
  } catch (const Error& e) {
    return e.what();
  }
  return {};
}

}  // namespace

TEST(Container, RoundTripIsBitExact) {
  fixtures::TempDir dir("container");
  const auto frames = frames_of(3, fixtures::small_dims());
  const auto bytes = write_container(frames, dir / "a.uprt");
  EXPECT_EQ(bytes, std::filesystem::file_size(dir / "a.uprt"));
  const auto back = read_container(dir / "a.uprt");
  ASSERT_EQ(back.size(), frames.size());
  for (std::size_t i = 0; i < frames.size(); ++i) EXPECT_TRUE(back[i].same_payload(frames[i]));
  EXPECT_EQ(encode_container(back), encode_container(frames));
}

TEST(Container, HeaderLayout) {
  const auto d = fixtures::small_dims();
  const auto bytes = encode_container(frames_of(2, d));
  ASSERT_GE(bytes.size(), 30u);
  EXPECT_EQ(bytes.substr(0, 4), "UPRT");
  const auto* p = reinterpret_cast<const unsigned char*>(bytes.data());
  EXPECT_EQ(p[4] | (p[5] << 8), 1);
  auto u32 = [&](std::size_t at) {
    return std::uint32_t(p[at]) | std::uint32_t(p[at + 1]) << 8 | std::uint32_t(p[at + 2]) << 16 |
           std::uint32_t(p[at + 3]) << 24;
  };
  EXPECT_EQ(u32(6), 2u);
  EXPECT_EQ(u32(10), d.d2);
  EXPECT_EQ(u32(14), d.d3);
  EXPECT_EQ(u32(18), d.r2);
  EXPECT_EQ(u32(22), d.r3);
  EXPECT_EQ(u32(26), d.p);
  EXPECT_EQ(bytes.size(), 30 + 2 * d.floats_per_frame() * 4);
}

TEST(Container, PayloadOrderIsClsRegPatchThenThreeD) {
  const TokenDims d{2, 3, 1, 1, 1};
  auto t = TokenSet::zeros(d);
  t.cls2d << 1, 2;
  t.reg2d << 3, 4;
  t.patch2d << 5, 6;
  t.reg3d << 7, 8, 9;
  t.patch3d << 10, 11, 12;
  const auto bytes = encode_container({t});
  std::vector<float> payload((bytes.size() - 30) / 4);
  std::memcpy(payload.data(), bytes.data() + 30, bytes.size() - 30);
  EXPECT_EQ(payload, (std::vector<float>{1, 2, 3, 4, 5, 6, 7, 8, 9, 10, 11, 12}));
}

TEST(Container, ValidTwoFrameFileHasHeaderDims) {
  const auto d = fixtures::small_dims();
  const auto back = decode_container(encode_container(frames_of(2, d)));
  ASSERT_EQ(back.size(), 2u);
  for (const auto& f : back) EXPECT_EQ(f.dims(), d);
}

TEST(Container, EmptyFrameList) {
  fixtures::TempDir dir("empty");
  const auto d = fixtures::small_dims();
  EXPECT_EQ(write_container({}, dir / "e.uprt", d), 30u);
  EXPECT_TRUE(read_container(dir / "e.uprt").empty());
  EXPECT_EQ(decode_container_header(encode_container({}, d)).dims, d);
}

TEST(Container, MismatchedPatchCountIsRejected) {
  auto frames = frames_of(2, fixtures::small_dims());
  auto other = fixtures::small_dims();
  other.p += 1;
  frames.push_back(fixtures::random_frame(7, other));
  EXPECT_EQ(kind_of([&] { encode_container(frames); }), ErrorKind::InvalidArgument);
}

TEST(Container, BadMagic) {
  auto bytes = encode_container(frames_of(1, fixtures::small_dims()));
  bytes.replace(0, 4, "XXXX");
  EXPECT_EQ(kind_of([&] { decode_container(bytes); }), ErrorKind::Format);
  EXPECT_NE(message_of([&] { decode_container(bytes); }).find("magic"), std::string::npos);
}

TEST(Container, UnsupportedVersion) {
  auto bytes = encode_container(frames_of(1, fixtures::small_dims()));
  bytes[4] = 2;
  EXPECT_NE(message_of([&] { decode_container(bytes); }).find("version 2"), std::string::npos);
}

TEST(Container, TruncationNamesByteOffset) {
  const auto d = fixtures::small_dims();
  const auto bytes = encode_container(frames_of(2, d));
  const std::size_t cut = 30 + d.floats_per_frame() * 4 + 17;  // mid second frame
  const auto msg = message_of([&] { decode_container(bytes.substr(0, cut)); });
  EXPECT_NE(msg.find("truncated"), std::string::npos);
  EXPECT_NE(msg.find("byte offset " + std::to_string(cut)), std::string::npos) << msg;
  EXPECT_EQ(kind_of([&] { decode_container(bytes.substr(0, 12)); }), ErrorKind::Format);
}

TEST(Container, TrailingBytesAreRejected) {
  auto bytes = encode_container(frames_of(1, fixtures::small_dims()));
  bytes += "ab";
  EXPECT_EQ(kind_of([&] { decode_container(bytes); }), ErrorKind::Format);
}

TEST(Container, MissingFile) {
  EXPECT_EQ(kind_of([] { read_container("/nonexistent/x.uprt"); }), ErrorKind::Io);
}

TEST(Container, NonFiniteTokensAreRejected) {
  auto frames = frames_of(1, fixtures::small_dims());
  frames[0].patch3d(1, 1) = std::nanf("");
  EXPECT_EQ(kind_of([&] { encode_container(frames); }), ErrorKind::Numerical);
}

// ---------------------------------------------------------------------------

TEST(Manifest, RoundTrip) {
  std::vector<FrameMeta> metas(2);
  metas[0] = {"a", "s", 0, Position{1.5, -2.0}, 4};
  metas[1] = {"b", "s", 1, std::nullopt, 5};
  EXPECT_EQ(decode_manifest(encode_manifest(metas)), metas);
}

TEST(Manifest, NeedsPositionOrFrameIndex) {
  EXPECT_EQ(kind_of([] { decode_manifest(R"({"frame_id":"a","sequence_id":"s","index_in_sequence":0})"); }),
            ErrorKind::Format);
}

TEST(Manifest, DuplicateSequenceIndexIsRejected) {
  const std::string text =
      R"({"frame_id":"a","sequence_id":"s","index_in_sequence":0,"frame_index":0})"
      "\n"
      R"({"frame_id":"b","sequence_id":"s","index_in_sequence":0,"frame_index":1})";
  EXPECT_NE(message_of([&] { decode_manifest(text); }).find("duplicate"), std::string::npos);
}

TEST(Manifest, UnknownFieldIsRejected) {
  EXPECT_NE(message_of([] {
              decode_manifest(
                  R"({"frame_id":"a","sequence_id":"s","index_in_sequence":0,"frame_index":0,"x":1})");
            }).find("unknown field"),
            std::string::npos);
}

TEST(Manifest, DatasetBindsFrameIdsAndChecksCounts) {
  fixtures::TempDir dir("dataset");
  SyntheticConfig cfg;
  cfg.dims = fixtures::small_dims();
  cfg.num_places = 3;
  const auto [frames, metas] = generate_synthetic(cfg);
  write_container(frames, dir / "c.uprt");
  write_manifest(metas, dir / "m.jsonl");
  const auto ds = load_dataset(dir / "c.uprt", dir / "m.jsonl");
  ASSERT_EQ(ds.frames.size(), 6u);
  EXPECT_EQ(ds.frames[4].frame_id, metas[4].frame_id);
  write_manifest({metas.begin(), metas.begin() + 5}, dir / "short.jsonl");
  EXPECT_EQ(kind_of([&] { load_dataset(dir / "c.uprt", dir / "short.jsonl"); }), ErrorKind::Format);
}

// ---------------------------------------------------------------------------

TEST(Synthetic, SameConfigGivesIdenticalBytes) {
  SyntheticConfig cfg;
  cfg.dims = fixtures::small_dims();
  cfg.num_places = 20;
  const auto a = generate_synthetic(cfg);
  const auto b = generate_synthetic(cfg);
  EXPECT_EQ(encode_container(a.first), encode_container(b.first));
  EXPECT_EQ(encode_manifest(a.second), encode_manifest(b.second));
  cfg.seed = 1;
  EXPECT_NE(encode_container(generate_synthetic(cfg).first), encode_container(a.first));
}

TEST(Synthetic, ZeroNoiseViewsAreIdentical) {
  SyntheticConfig cfg;
  cfg.dims = fixtures::small_dims();
  cfg.num_places = 5;
  cfg.noise_sigma = 0;
  const auto [frames, metas] = generate_synthetic(cfg);
  for (std::uint32_t i = 0; i < 5; ++i) EXPECT_TRUE(frames[i].same_payload(frames[5 + i]));
}

TEST(Synthetic, LayoutAndMetadata) {
  SyntheticConfig cfg;
  cfg.dims = fixtures::small_dims();
  cfg.num_places = 4;
  cfg.views_per_place = 3;
  cfg.place_spacing_m = 7.5;
  const auto [frames, metas] = generate_synthetic(cfg);
  ASSERT_EQ(frames.size(), 12u);
  EXPECT_EQ(metas[5].sequence_id, "view1");
  EXPECT_EQ(metas[5].index_in_sequence, 1);
  EXPECT_EQ(*metas[5].frame_index, 1);
  EXPECT_DOUBLE_EQ(metas[5].position->east, 7.5);
  EXPECT_EQ(frames[5].frame_id, metas[5].frame_id);
  EXPECT_NO_THROW(validate_manifest(metas));
}

TEST(Synthetic, PlaceSlicesMatchTheFullSet) {
  SyntheticConfig cfg;
  cfg.dims = fixtures::small_dims();
  cfg.num_places = 6;
  const auto full = generate_synthetic(cfg).first;
  for (std::uint32_t i = 0; i < 6; ++i) {
    SyntheticConfig one = cfg;
    one.num_places = 1;
    one.place_offset = i;
    const auto part = generate_synthetic(one).first;
    EXPECT_TRUE(part[0].same_payload(full[i]));
    EXPECT_TRUE(part[1].same_payload(full[6 + i]));
  }
}

TEST(Synthetic, NoiseHasRequestedScale) {
  SyntheticConfig cfg;
  cfg.dims = fixtures::small_dims();
  cfg.num_places = 30;
  cfg.noise_sigma = 0;
  const auto clean = generate_synthetic(cfg).first;
  cfg.noise_sigma = 0.3;
  const auto noisy = generate_synthetic(cfg).first;
  double ss = 0;
  std::size_t n = 0;
  for (std::size_t f = 0; f < clean.size(); ++f) {
    const MatF diff = noisy[f].patch3d - clean[f].patch3d;
    ss += diff.squaredNorm();
    n += static_cast<std::size_t>(diff.size());
  }
  EXPECT_NEAR(std::sqrt(ss / double(n)), 0.3, 0.01);
}

// Nearest-centroid classification of raw mean-pooled tokens at default dims.
// Places are generated one at a time to bound memory.
TEST(Synthetic, NearestSignatureAccuracyIsOneWithoutNoise) {
  SyntheticConfig cfg;
  cfg.noise_sigma = 0;
  const std::uint32_t places = 200;
  auto pooled = [](const TokenSet& t) {
    std::vector<double> v;
    auto mean_rows = [&v](const auto& m) {
      for (Eigen::Index j = 0; j < m.cols(); ++j) {
        double s = 0;
        for (Eigen::Index i = 0; i < m.rows(); ++i) s += m(i, j);
        v.push_back(s / double(m.rows()));
      }
    };
    mean_rows(t.cls2d);
    mean_rows(t.reg2d);
    mean_rows(t.patch2d);
    mean_rows(t.reg3d);
    mean_rows(t.patch3d);
    return v;
  };
  std::vector<std::vector<double>> centroids, queries;
  for (std::uint32_t i = 0; i < places; ++i) {
    SyntheticConfig one = cfg;
    one.num_places = 1;
    one.place_offset = i;
    const auto [frames, metas] = generate_synthetic(one);
    ASSERT_EQ(frames.size(), 2u);
    ASSERT_EQ(frames[0].dims(), TokenDims{});
    centroids.push_back(pooled(frames[0]));
    queries.push_back(pooled(frames[1]));
  }
  std::size_t correct = 0;
  for (std::uint32_t q = 0; q < places; ++q) {
    std::size_t best = 0;
    double best_d = 1e300;
    for (std::uint32_t c = 0; c < places; ++c) {
      double d = 0;
      for (std::size_t j = 0; j < centroids[c].size(); ++j)
        d += (queries[q][j] - centroids[c][j]) * (queries[q][j] - centroids[c][j]);
      if (d < best_d) best_d = d, best = c;
    }
    correct += best == q;
  }
  EXPECT_EQ(correct, places);
}

TEST(Synthetic, InvalidConfig) {
  SyntheticConfig cfg;
  cfg.num_places = 0;
  EXPECT_EQ(kind_of([&] { generate_synthetic(cfg); }), ErrorKind::InvalidArgument);
  cfg.num_places = 1;
  cfg.noise_sigma = -1;
  EXPECT_EQ(kind_of([&] { generate_synthetic(cfg); }), ErrorKind::InvalidArgument);
}
