// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <array>
#include <cmath>
#include <cstdint>
#include <string>
#include <string_view>
#include <type_traits>
#include <vector>

#include "unipr/error.hpp"
#include "unipr/layers.hpp"
#include "unipr/rng.hpp"
#include "unipr/sinkhorn.hpp"
#include "unipr/tensor.hpp"
#include "unipr/tokenio.hpp"

namespace unipr {

/// Architecture hyper-parameters of the descriptor heads.
struct ModelConfig {
  std::uint32_t d2 = 1024;
  std::uint32_t d3 = 2048;
  std::uint32_t hidden = 512;       // H, shared by every MLP
  std::uint32_t head_dim = 256;     // cls / register descriptor width
  std::uint32_t clusters = 64;      // m
  std::uint32_t reduced_dim = 128;  // l
  double gem_p_init = 3.0;
  double dustbin_init = 1.0;

  bool operator==(const ModelConfig&) const = default;

  void validate() const {
    require(d2 >= 1 && d3 >= 1 && hidden >= 1 && head_dim >= 1 && clusters >= 1 &&
                reduced_dim >= 1,
            "model config: all dimensions must be >= 1");
    require(gem_p_init > 0, "model config: gem_p_init must be > 0");
  }

  std::size_t descriptor_dim() const {
    return 3 * std::size_t{head_dim} + 2 * std::size_t{clusters} * reduced_dim;
  }
};

enum class Segment : int { Cls2d = 0, Reg2d, Patch2d, Reg3d, Patch3d };
inline constexpr int kNumSegments = 5;

inline constexpr std::array<std::string_view, kNumSegments> kSegmentNames{
    "cls2d", "reg2d", "patch2d", "reg3d", "patch3d"};

/// Named segments of the unified descriptor, in concatenation order.
struct DescriptorLayout {
  std::array<std::size_t, kNumSegments> lengths{};

  static DescriptorLayout from(const ModelConfig& c) {
    const std::size_t patch = std::size_t{c.clusters} * c.reduced_dim;
    return {{c.head_dim, c.head_dim, patch, c.head_dim, patch}};
  }

  std::size_t offset(Segment s) const {
    std::size_t o = 0;
    for (int i = 0; i < static_cast<int>(s); ++i) o += lengths[i];
    return o;
  }
  std::size_t length(Segment s) const { return lengths[static_cast<int>(s)]; }
  std::size_t total() const {
    std::size_t t = 0;
    for (auto l : lengths) t += l;
    return t;
  }
  bool operator==(const DescriptorLayout&) const = default;
};

struct Descriptor {
  RowVec<float> data;
  DescriptorLayout layout;

  auto segment(Segment s) const {
    return data.segment(static_cast<Eigen::Index>(layout.offset(s)),
                        static_cast<Eigen::Index>(layout.length(s)));
  }
};

template <typename T>
struct GemHeadParams {
  MlpParams<T> inner;  // D -> H -> H
  T p = T(3);
  MlpParams<T> outer;  // H -> H -> head_dim

  template <typename U>
  GemHeadParams<U> cast() const {
    return {inner.template cast<U>(), static_cast<U>(p), outer.template cast<U>()};
  }
};

template <typename T>
struct PatchHeadParams {
  MlpParams<T> score;   // D -> H -> m
  MlpParams<T> reduce;  // D -> H -> l
  T dustbin_z = T(1);

  Eigen::Index clusters() const { return score.out_dim(); }
  Eigen::Index reduced_dim() const { return reduce.out_dim(); }

  template <typename U>
  PatchHeadParams<U> cast() const {
    return {score.template cast<U>(), reduce.template cast<U>(), static_cast<U>(dustbin_z)};
  }
};

template <typename T>
struct AggregatorParams {
  ModelConfig config;
  GemHeadParams<T> cls2d_head;
  GemHeadParams<T> reg2d_head;
  GemHeadParams<T> reg3d_head;
  PatchHeadParams<T> patch2d_head;
  PatchHeadParams<T> patch3d_head;
  // Per-token D -> D adapters in front of the heads. Identity-initialised;
  // only trained (and only applied) once enabled.
  LinearParams<T> adapter2d;
  LinearParams<T> adapter3d;
  bool adapter_enabled = false;

  DescriptorLayout layout() const { return DescriptorLayout::from(config); }

  template <typename U>
  AggregatorParams<U> cast() const {
    return {config,
            cls2d_head.template cast<U>(),
            reg2d_head.template cast<U>(),
            reg3d_head.template cast<U>(),
            patch2d_head.template cast<U>(),
            patch3d_head.template cast<U>(),
            adapter2d.template cast<U>(),
            adapter3d.template cast<U>(),
            adapter_enabled};
  }
};

// ---------------------------------------------------------------------------
// Tensor visitation. `f(name, maps...)` is invoked once per learnable tensor
// with an Eigen::Map over the same tensor of every params object passed in,
// which lets gradients, optimizer moments and checkpoints share one walk.

namespace detail {

template <typename T>
Eigen::Map<Mat<T>> as_map(Mat<T>& m) {
  return {m.data(), m.rows(), m.cols()};
}
template <typename T>
Eigen::Map<const Mat<T>> as_map(const Mat<T>& m) {
  return {m.data(), m.rows(), m.cols()};
}
template <typename T>
Eigen::Map<Mat<T>> as_map(RowVec<T>& v) {
  return {v.data(), 1, v.cols()};
}
template <typename T>
Eigen::Map<const Mat<T>> as_map(const RowVec<T>& v) {
  return {v.data(), 1, v.cols()};
}
template <typename T>
  requires std::is_floating_point_v<T>
Eigen::Map<Mat<T>> as_map(T& s) {
  return {&s, 1, 1};
}
template <typename T>
  requires std::is_floating_point_v<T>
Eigen::Map<const Mat<T>> as_map(const T& s) {
  return {&s, 1, 1};
}

template <typename F, typename... L>
void visit_linear(F& f, const std::string& prefix, L&... l) {
  f(prefix + ".weight", as_map(l.weight)...);
  f(prefix + ".bias", as_map(l.bias)...);
}

template <typename F, typename... M>
void visit_mlp(F& f, const std::string& prefix, M&... m) {
  visit_linear(f, prefix + ".fc1", m.fc1...);
  visit_linear(f, prefix + ".fc2", m.fc2...);
}

template <typename F, typename... G>
void visit_gem(F& f, const std::string& prefix, G&... g) {
  visit_mlp(f, prefix + ".inner", g.inner...);
  f(prefix + ".p", as_map(g.p)...);
  visit_mlp(f, prefix + ".outer", g.outer...);
}

template <typename F, typename... H>
void visit_patch(F& f, const std::string& prefix, H&... h) {
  visit_mlp(f, prefix + ".score", h.score...);
  visit_mlp(f, prefix + ".reduce", h.reduce...);
  f(prefix + ".dustbin_z", as_map(h.dustbin_z)...);
}

}  // namespace detail

template <typename F, typename... P>
void for_each_tensor(F&& f, P&... ps) {
  detail::visit_gem(f, "cls2d_head", ps.cls2d_head...);
  detail::visit_gem(f, "reg2d_head", ps.reg2d_head...);
  detail::visit_patch(f, "patch2d_head", ps.patch2d_head...);
  detail::visit_gem(f, "reg3d_head", ps.reg3d_head...);
  detail::visit_patch(f, "patch3d_head", ps.patch3d_head...);
  detail::visit_linear(f, "adapter2d", ps.adapter2d...);
  detail::visit_linear(f, "adapter3d", ps.adapter3d...);
}

inline bool is_adapter_tensor(std::string_view name) {
  return name.starts_with("adapter");
}

/// Same-shaped parameter object filled with zeros (gradient/moment storage).
template <typename T>
AggregatorParams<T> zeros_like(const AggregatorParams<T>& p) {
  AggregatorParams<T> z = p;
  for_each_tensor([](const std::string&, auto m) { m.setZero(); }, z);
  return z;
}

template <typename T>
AggregatorParams<T> init_aggregator(const ModelConfig& cfg, std::uint64_t seed) {
  cfg.validate();
  CounterRng rng(derive_key({seed, 0xa66ULL}));
  const Eigen::Index h = cfg.hidden;
  auto gem = [&](Eigen::Index in) {
    GemHeadParams<T> g;
    g.inner = init_mlp<T>(in, h, h, rng);
    g.p = static_cast<T>(cfg.gem_p_init);
    g.outer = init_mlp<T>(h, h, cfg.head_dim, rng);
    return g;
  };
  auto patch = [&](Eigen::Index in) {
    PatchHeadParams<T> p;
    p.score = init_mlp<T>(in, h, cfg.clusters, rng);
    p.reduce = init_mlp<T>(in, h, cfg.reduced_dim, rng);
    p.dustbin_z = static_cast<T>(cfg.dustbin_init);
    return p;
  };
  AggregatorParams<T> a;
  a.config = cfg;
  a.cls2d_head = gem(cfg.d2);
  a.reg2d_head = gem(cfg.d2);
  a.patch2d_head = patch(cfg.d2);
  a.reg3d_head = gem(cfg.d3);
  a.patch3d_head = patch(cfg.d3);
  a.adapter2d = identity_linear<T>(cfg.d2);
  a.adapter3d = identity_linear<T>(cfg.d3);
  return a;
}

// ---------------------------------------------------------------------------
// Heads.

template <typename T>
struct GemHeadCache {
  MlpCache<T> inner;
  Mat<T> pooled_input;
  RowVec<T> pooled;
  MlpCache<T> outer;
};

/// inner MLP -> GeM over rows -> outer MLP.
template <typename T>
RowVec<T> gem_head(const Mat<T>& tokens, const GemHeadParams<T>& params,
                   GemHeadCache<T>* cache = nullptr) {
  require(tokens.rows() >= 1, "gem_head: needs at least one token");
  require(tokens.cols() == params.inner.in_dim(),
          "gem_head: token width " + std::to_string(tokens.cols()) +
              " does not match head input " + std::to_string(params.inner.in_dim()));
  Mat<T> x = mlp_forward(tokens, params.inner, cache ? &cache->inner : nullptr);
  RowVec<T> pooled = gem_pool<T>(x, params.p);
  Mat<T> y = mlp_forward(Mat<T>(pooled), params.outer, cache ? &cache->outer : nullptr);
  if (cache) {
    cache->pooled_input = std::move(x);
    cache->pooled = pooled;
  }
  return y.row(0);
}

template <typename T>
struct ScoreHeadOutput {
  Mat<T> scores;    // n x m
  Mat<T> features;  // n x l
};

template <typename T>
struct PatchCache {
  MlpCache<T> score;
  MlpCache<T> reduce;
  MatD augmented;  // n x (m+1)
  TransportPlan plan;
  SinkhornTrace trace;
  MatD features;
};

template <typename T>
ScoreHeadOutput<T> score_head(const Mat<T>& patches, const PatchHeadParams<T>& params,
                              PatchCache<T>* cache = nullptr) {
  require(patches.rows() >= 1, "score_head: needs at least one patch token");
  require(patches.cols() == params.score.in_dim() &&
              patches.cols() == params.reduce.in_dim(),
          "score_head: patch width " + std::to_string(patches.cols()) +
              " does not match head input");
  return {mlp_forward(patches, params.score, cache ? &cache->score : nullptr),
          mlp_forward(patches, params.reduce, cache ? &cache->reduce : nullptr)};
}

/// out[j*l + k] = sum_i plan(i,j) * features(i,k); cluster-major.
inline RowVec<double> aggregate_patches(const MatD& plan, const MatD& features) {
  require(plan.rows() == features.rows(),
          "aggregate_patches: plan " + shape_str(plan) + " vs features " +
              shape_str(features));
  const MatD d = plan.transpose() * features;  // m x l, row-major
  return Eigen::Map<const RowVec<double>>(d.data(), d.size());
}

template <typename T>
TransportPlan patch_transport(const Mat<T>& scores, T dustbin_z, const SinkhornConfig& cfg,
                              SinkhornTrace* trace = nullptr, MatD* augmented = nullptr) {
  MatD aug = augment_dustbin<double>(scores.template cast<double>(),
                                     static_cast<double>(dustbin_z));
  auto plan = sinkhorn(aug, uniform_marginal(aug.rows()), uniform_marginal(aug.cols()),
                       cfg, trace);
  if (augmented) *augmented = std::move(aug);
  return plan;
}

/// score head -> dustbin -> Sinkhorn -> drop dustbin -> cluster-weighted sums.
template <typename T>
RowVec<double> patch_segment(const Mat<T>& patches, const PatchHeadParams<T>& params,
                             const SinkhornConfig& cfg, PatchCache<T>* cache = nullptr) {
  auto out = score_head(patches, params, cache);
  SinkhornTrace trace;
  MatD aug;
  auto plan = patch_transport(out.scores, params.dustbin_z, cfg, cache ? &trace : nullptr,
                              cache ? &aug : nullptr);
  MatD features = out.features.template cast<double>();
  RowVec<double> seg = aggregate_patches(plan.trimmed, features);
  if (cache) {
    cache->augmented = std::move(aug);
    cache->plan = std::move(plan);
    cache->trace = std::move(trace);
    cache->features = std::move(features);
  }
  return seg;
}

// ---------------------------------------------------------------------------
// Full descriptor.

/// Token rows feeding each head; for a sequence these are stacked frames.
template <typename T>
struct TokenGroups {
  Mat<T> cls2d, reg2d, patch2d, reg3d, patch3d;
};

template <typename T>
TokenGroups<T> groups_of(const std::vector<const TokenSet*>& frames) {
  require(!frames.empty(), "descriptor: needs at least one frame");
  std::vector<Mat<T>> c, r2, p2, r3, p3;
  for (const auto* f : frames) {
    c.push_back(Mat<T>(f->cls2d.template cast<T>()));
    r2.push_back(f->reg2d.template cast<T>());
    p2.push_back(f->patch2d.template cast<T>());
    r3.push_back(f->reg3d.template cast<T>());
    p3.push_back(f->patch3d.template cast<T>());
  }
  return {vstack<T>(c), vstack<T>(r2), vstack<T>(p2), vstack<T>(r3), vstack<T>(p3)};
}

template <typename T>
struct DescriptorCache {
  TokenGroups<T> inputs;  // before adapters
  GemHeadCache<T> cls2d, reg2d, reg3d;
  PatchCache<T> patch2d, patch3d;
  std::array<RowVec<double>, kNumSegments> raw;
  std::array<RowVec<double>, kNumSegments> unit;
  RowVec<double> concat;
  RowVec<double> output;
};

template <typename T>
void check_dims(const TokenGroups<T>& g, const AggregatorParams<T>& p) {
  const auto& c = p.config;
  auto ok = [](const Mat<T>& m, std::uint32_t d) { return m.cols() == Eigen::Index{d}; };
  if (!(ok(g.cls2d, c.d2) && ok(g.reg2d, c.d2) && ok(g.patch2d, c.d2) && ok(g.reg3d, c.d3) &&
        ok(g.patch3d, c.d3)))
    fail(ErrorKind::InvalidArgument,
         "descriptor: token widths (" + std::to_string(g.cls2d.cols()) + ", " +
             std::to_string(g.reg3d.cols()) + ") do not match params (" +
             std::to_string(c.d2) + ", " + std::to_string(c.d3) + ")");
  require(g.patch2d.rows() == g.patch3d.rows(),
          "descriptor: patch2d and patch3d row counts differ");
}

/// Unit-norm descriptor in f64 from already-grouped token rows.
template <typename T>
RowVec<double> describe(const TokenGroups<T>& groups, const AggregatorParams<T>& params,
                        const SinkhornConfig& cfg, DescriptorCache<T>* cache = nullptr) {
  check_dims(groups, params);
  auto adapt2 = [&](const Mat<T>& x) {
    return params.adapter_enabled ? linear_forward(x, params.adapter2d) : x;
  };
  auto adapt3 = [&](const Mat<T>& x) {
    return params.adapter_enabled ? linear_forward(x, params.adapter3d) : x;
  };
  std::array<RowVec<double>, kNumSegments> raw;
  raw[0] = gem_head(adapt2(groups.cls2d), params.cls2d_head, cache ? &cache->cls2d : nullptr)
               .template cast<double>();
  raw[1] = gem_head(adapt2(groups.reg2d), params.reg2d_head, cache ? &cache->reg2d : nullptr)
               .template cast<double>();
  raw[2] = patch_segment(adapt2(groups.patch2d), params.patch2d_head, cfg,
                         cache ? &cache->patch2d : nullptr);
  raw[3] = gem_head(adapt3(groups.reg3d), params.reg3d_head, cache ? &cache->reg3d : nullptr)
               .template cast<double>();
  raw[4] = patch_segment(adapt3(groups.patch3d), params.patch3d_head, cfg,
                         cache ? &cache->patch3d : nullptr);

  const auto layout = params.layout();
  RowVec<double> concat(static_cast<Eigen::Index>(layout.total()));
  std::array<RowVec<double>, kNumSegments> unit;
  for (int s = 0; s < kNumSegments; ++s) {
    unit[s] = l2_normalize(raw[s]);
    concat.segment(static_cast<Eigen::Index>(layout.offset(Segment(s))), unit[s].size()) =
        unit[s];
  }
  RowVec<double> out = l2_normalize(concat);
  if (!all_finite(out)) fail(ErrorKind::Numerical, "descriptor: non-finite output");
  if (cache) {
    cache->inputs = groups;
    cache->raw = std::move(raw);
    cache->unit = std::move(unit);
    cache->concat = std::move(concat);
    cache->output = out;
  }
  return out;
}

template <typename T>
Descriptor build_descriptor(const TokenSet& frame, const AggregatorParams<T>& params,
                            const SinkhornConfig& cfg = {}) {
  const auto groups = groups_of<T>({&frame});
  return {describe(groups, params, cfg).template cast<float>(), params.layout()};
}

/// Per-patch mass not sent to the dustbin for the 2D and 3D patch sets,
/// reshaped to a rows x cols image grid (row-major patch order).
struct AssignmentGrids {
  MatD grid2d;
  MatD grid3d;
  double dustbin_mass2d = 0;
  double dustbin_mass3d = 0;
};

template <typename T>
AssignmentGrids assignment_mass(const TokenSet& frame, const AggregatorParams<T>& params,
                                Eigen::Index grid_rows, Eigen::Index grid_cols,
                                const SinkhornConfig& cfg = {}) {
  const auto n = static_cast<Eigen::Index>(frame.patch2d.rows());
  if (grid_rows <= 0 || grid_cols <= 0 || grid_rows * grid_cols != n)
    fail(ErrorKind::InvalidArgument, "assignment_mass: " + std::to_string(n) +
                                         " patches do not form a " +
                                         std::to_string(grid_rows) + "x" +
                                         std::to_string(grid_cols) + " grid");
  auto groups = groups_of<T>({&frame});
  check_dims(groups, params);
  AssignmentGrids out;
  auto one = [&](const Mat<T>& patches, const LinearParams<T>& adapter,
                 const PatchHeadParams<T>& head, MatD& grid, double& dustbin) {
    const Mat<T> x = params.adapter_enabled ? linear_forward(patches, adapter) : patches;
    auto sh = score_head(x, head);
    auto plan = patch_transport(sh.scores, head.dustbin_z, cfg);
    const VecD kept = plan.trimmed.rowwise().sum();
    grid = Eigen::Map<const MatD>(kept.data(), grid_rows, grid_cols);
    dustbin = plan.full.col(plan.full.cols() - 1).sum();
  };
  one(groups.patch2d, params.adapter2d, params.patch2d_head, out.grid2d, out.dustbin_mass2d);
  one(groups.patch3d, params.adapter3d, params.patch3d_head, out.grid3d, out.dustbin_mass3d);
  return out;
}

}  // namespace unipr
