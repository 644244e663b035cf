// SPDX-License-Identifier: Apache-2.0
#include "unipr/aggregation.hpp"
#include "unipr/checkpoint.hpp"

#include <gtest/gtest.h>

#include <chrono>
#include <numeric>
#include <set>

#include "fixtures.hpp"

using namespace unipr;

namespace {

TokenSet permute_patches(const TokenSet& t, const std::vector<Eigen::Index>& perm) {
  TokenSet out = t;
  for (std::size_t i = 0; i < perm.size(); ++i) {
    out.patch2d.row(Eigen::Index(i)) = t.patch2d.row(perm[i]);
    out.patch3d.row(Eigen::Index(i)) = t.patch3d.row(perm[i]);
  }
  return out;
}

std::vector<Eigen::Index> shuffled(std::size_t n, std::uint64_t seed) {
  std::vector<Eigen::Index> p(n);
  std::iota(p.begin(), p.end(), 0);
  CounterRng rng(derive_key({seed, 0x5eULL}));
  for (std::size_t i = n; i > 1; --i) std::swap(p[i - 1], p[rng.below(i)]);
  return p;
}

}  // namespace

TEST(Descriptor, DefaultLengthAndNorm) {
  const ModelConfig cfg;
  EXPECT_EQ(cfg.descriptor_dim(), 17152u);
  EXPECT_EQ(DescriptorLayout::from(cfg).total(), 17152u);
  const auto params = init_aggregator<float>(cfg, 0);
  const auto frame = fixtures::random_frame(1, TokenDims{});
  const auto d = build_descriptor(frame, params);
  ASSERT_EQ(d.data.size(), 17152);
  EXPECT_NEAR(d.data.cast<double>().norm(), 1.0, 1e-5);
}

TEST(Descriptor, LayoutOffsets) {
  const auto l = DescriptorLayout::from(ModelConfig{});
  EXPECT_EQ(l.offset(Segment::Cls2d), 0u);
  EXPECT_EQ(l.offset(Segment::Reg2d), 256u);
  EXPECT_EQ(l.offset(Segment::Patch2d), 512u);
  EXPECT_EQ(l.offset(Segment::Reg3d), 512u + 8192u);
  EXPECT_EQ(l.offset(Segment::Patch3d), 768u + 8192u);
  EXPECT_EQ(l.length(Segment::Patch3d), 8192u);
}

TEST(Descriptor, SegmentNormsAreEqual) {
  const auto d = fixtures::small_dims();
  const auto params = init_aggregator<double>(fixtures::small_model(d), 3);
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    const auto desc = build_descriptor(fixtures::random_frame(seed, d), params);
    for (int s = 0; s < kNumSegments; ++s)
      EXPECT_NEAR(desc.segment(Segment(s)).cast<double>().norm(), 1.0 / std::sqrt(5.0), 1e-4);
  }
}

TEST(Descriptor, PatchPermutationInvariance) {
  const auto d = fixtures::small_dims();
  for (std::uint64_t seed = 0; seed < 50; ++seed) {
    const auto params = init_aggregator<double>(fixtures::small_model(d), seed);
    const auto frame = fixtures::random_frame(500 + seed, d);
    const auto a = build_descriptor(frame, params);
    const auto b = build_descriptor(permute_patches(frame, shuffled(d.p, seed)), params);
    EXPECT_LE((a.data - b.data).cwiseAbs().maxCoeff(), 1e-5) << "seed " << seed;
  }
}

TEST(Descriptor, DeterministicAcrossCalls) {
  const auto params = init_aggregator<float>(fixtures::small_model(), 1);
  const auto frame = fixtures::random_frame(1, fixtures::small_dims());
  EXPECT_EQ(build_descriptor(frame, params).data, build_descriptor(frame, params).data);
}

TEST(Descriptor, DimMismatchIsRejected) {
  const auto params = init_aggregator<float>(fixtures::small_model(), 1);
  auto dims = fixtures::small_dims();
  dims.d3 += 1;
  EXPECT_THROW(build_descriptor(fixtures::random_frame(1, dims), params), Error);
}

TEST(Descriptor, DefaultFrameUnderOneSecond) {
  const auto params = init_aggregator<float>(ModelConfig{}, 0);
  const auto frame = fixtures::random_frame(2, TokenDims{});
  const auto t0 = std::chrono::steady_clock::now();
  build_descriptor(frame, params);
  const double s = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  EXPECT_LT(s, 1.0);
}

TEST(PatchAggregation, OneHotPlanSumsAssignedRows) {
  MatD plan = MatD::Zero(4, 2);
  plan(0, 1) = plan(1, 0) = plan(2, 1) = plan(3, 1) = 1.0;
  MatD f(4, 3);
  f << 1, 2, 3, 4, 5, 6, 7, 8, 9, 10, 11, 12;
  const auto out = aggregate_patches(plan, f);
  ASSERT_EQ(out.size(), 6);
  // cluster 0: row 1; cluster 1: rows 0, 2, 3
  EXPECT_EQ(out.head(3), (RowVec<double>(3) << 4, 5, 6).finished());
  EXPECT_EQ(out.tail(3), (RowVec<double>(3) << 18, 21, 24).finished());
}

TEST(AssignmentMass, NegativeScoreRowGoesToDustbin) {
  const auto d = fixtures::small_dims();
  auto params = init_aggregator<double>(fixtures::small_model(d), 2);
  auto& head = params.patch2d_head;
  head.dustbin_z = 8.0;
  auto frame = fixtures::random_frame(3, d);
  // Push patch 0's scores far down through a dedicated input direction.
  frame.patch2d.row(0).setZero();
  frame.patch2d(0, 0) = 50.0f;
  head.score.fc1.weight.row(0).setConstant(1.0);
  head.score.fc2.weight.setConstant(-1.0);
  const auto g = assignment_mass(frame, params, 2, 5);
  EXPECT_LT(g.grid2d(0, 0), 1e-6);
  EXPECT_LE(g.grid2d.maxCoeff(), 1.0 / d.p + 1e-9);
  EXPECT_NEAR(g.grid2d.sum() + g.dustbin_mass2d, 1.0, 1e-6);
  EXPECT_THROW(assignment_mass(frame, params, 3, 3), Error);
}

TEST(Checkpoint, RoundTripAndDescriptorsMatch) {
  fixtures::TempDir dir("ckpt");
  auto params = init_aggregator<float>(fixtures::small_model(), 4);
  params.adapter_enabled = true;
  params.adapter2d.weight(0, 1) = 0.25f;
  save_checkpoint(params, dir / "p.uprp");
  const auto back = load_checkpoint<float>(dir / "p.uprp");
  EXPECT_EQ(back.config, params.config);
  EXPECT_TRUE(back.adapter_enabled);
  EXPECT_EQ(encode_checkpoint(back), encode_checkpoint(params));
  const auto frame = fixtures::random_frame(8, fixtures::small_dims());
  EXPECT_EQ(build_descriptor(frame, back).data, build_descriptor(frame, params).data);
}

TEST(Checkpoint, CorruptFilesAreRejected) {
  const auto bytes = encode_checkpoint(init_aggregator<float>(fixtures::small_model(), 4));
  auto kind = [](std::string_view b) {
    try {
      decode_checkpoint<float>(b);
    } catch (const Error& e) {
      return e.kind();
    }
    return ErrorKind::Numerical;
  };
  std::string bad = bytes;
  bad[0] = 'Q';
  EXPECT_EQ(kind(bad), ErrorKind::Format);
  EXPECT_EQ(kind(bytes.substr(0, bytes.size() - 3)), ErrorKind::Format);
  EXPECT_EQ(kind(bytes + "x"), ErrorKind::Format);
  EXPECT_THROW(load_checkpoint<float>("/nonexistent.uprp"), Error);
}

TEST(Visitation, TensorNamesAreUnique) {
  auto params = init_aggregator<double>(fixtures::small_model(), 0);
  std::set<std::string> names;
  std::size_t count = 0, adapters = 0;
  for_each_tensor(
      [&](const std::string& n, auto) {
        names.insert(n);
        ++count;
        adapters += is_adapter_tensor(n);
      },
      params);
  EXPECT_EQ(names.size(), count);
  EXPECT_EQ(adapters, 4u);
  EXPECT_TRUE(names.count("cls2d_head.p"));
}
