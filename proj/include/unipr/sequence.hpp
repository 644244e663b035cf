// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <vector>

#include "unipr/aggregation.hpp"
#include "unipr/error.hpp"
#include "unipr/tokenio.hpp"

namespace unipr {

/// An ordered run of frames; frames[0] is the anchor, the rest support it.
struct FrameSequence {
  std::vector<TokenSet> frames;
  std::vector<FrameMeta> metas;  // parallel to frames when known
  static constexpr std::size_t anchor_index = 0;

  std::size_t size() const { return frames.size(); }
  const TokenSet& anchor() const { return frames.at(anchor_index); }

  void validate() const {
    require(!frames.empty(), "sequence: needs at least one frame");
    require(metas.empty() || metas.size() == frames.size(),
            "sequence: metas must parallel frames");
    const auto dims = frames.front().dims();
    for (const auto& f : frames)
      require(f.dims() == dims, "sequence: frames disagree on token dims");
  }

  std::vector<const TokenSet*> pointers() const {
    std::vector<const TokenSet*> out;
    for (const auto& f : frames) out.push_back(&f);
    return out;
  }
};

/// GeM head over the union of every frame's token rows, one shared head.
template <typename T>
RowVec<T> seq_gem_head(const std::vector<Mat<T>>& token_groups,
                       const GemHeadParams<T>& params) {
  require(!token_groups.empty(), "seq_gem_head: empty frame list");
  const Mat<T> stacked = vstack<T>(token_groups);
  require(stacked.rows() >= 1, "seq_gem_head: empty token union");
  return gem_head(stacked, params);
}

/// One transport problem over the stacked patch tokens of all frames, with
/// uniform marginals over the stacked rows. Output width is m*l for any M.
template <typename T>
RowVec<double> seq_patch_aggregate(const std::vector<Mat<T>>& patch_sets,
                                   const PatchHeadParams<T>& params,
                                   const SinkhornConfig& cfg = {}) {
  require(!patch_sets.empty(), "seq_patch_aggregate: empty frame list");
  const Mat<T> stacked = vstack<T>(patch_sets);
  require(stacked.rows() >= 1, "seq_patch_aggregate: empty token stack");
  return patch_segment(stacked, params, cfg);
}

template <typename T>
RowVec<double> describe_sequence(const std::vector<const TokenSet*>& frames,
                                 const AggregatorParams<T>& params,
                                 const SinkhornConfig& cfg = {},
                                 DescriptorCache<T>* cache = nullptr) {
  require(!frames.empty(), "sequence descriptor: M must be >= 1");
  const auto dims = frames.front()->dims();
  for (const auto* f : frames)
    require(f->dims() == dims, "sequence descriptor: frames disagree on token dims");
  return describe(groups_of<T>(frames), params, cfg, cache);
}

template <typename T>
Descriptor build_sequence_descriptor(const FrameSequence& seq,
                                     const AggregatorParams<T>& params,
                                     const SinkhornConfig& cfg = {}) {
  seq.validate();
  return {describe_sequence(seq.pointers(), params, cfg).template cast<float>(),
          params.layout()};
}

}  // namespace unipr
