// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <map>
#include <numbers>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "unipr/aggregation.hpp"
#include "unipr/error.hpp"
#include "unipr/layers.hpp"
#include "unipr/ms_loss.hpp"
#include "unipr/retrieval.hpp"
#include "unipr/sequence.hpp"
#include "unipr/sinkhorn.hpp"

namespace unipr {

enum class TrainStage { HeadsOnly, HeadsPlusAdapter };

inline std::string stage_name(TrainStage s) {
  return s == TrainStage::HeadsOnly ? "heads_only" : "heads_plus_adapter";
}

inline TrainStage parse_stage(const std::string& s) {
  if (s == "heads_only") return TrainStage::HeadsOnly;
  if (s == "heads_plus_adapter") return TrainStage::HeadsPlusAdapter;
  fail(ErrorKind::InvalidArgument, "unknown training stage '" + s + "'");
}

/// Whether a tensor receives gradients in the given stage.
inline bool is_trainable(std::string_view name, TrainStage stage) {
  return stage == TrainStage::HeadsPlusAdapter || !is_adapter_tensor(name);
}

// ---------------------------------------------------------------------------
// Backward pass through the descriptor pipeline.

namespace detail {

inline Mat<double> gem_head_backward(const GemHeadCache<double>& c, const RowVec<double>& gy,
                                     const GemHeadParams<double>& p, GemHeadParams<double>* g) {
  Mat<double> g_pooled = mlp_backward(c.outer, Mat<double>(gy), p.outer, g ? &g->outer : nullptr);
  double gp = 0;
  Mat<double> gx = gem_pool_backward<double>(c.pooled_input, p.p, c.pooled,
                                             RowVec<double>(g_pooled.row(0)), &gp);
  if (g) g->p += gp;
  return mlp_backward(c.inner, gx, p.inner, g ? &g->inner : nullptr);
}

inline Mat<double> patch_backward(const PatchCache<double>& c, const RowVec<double>& gy,
                                  const PatchHeadParams<double>& p, PatchHeadParams<double>* g) {
  const Eigen::Index m = c.plan.trimmed.cols();
  const Eigen::Index l = c.features.cols();
  const Eigen::Map<const MatD> gd(gy.data(), m, l);
  MatD g_full = MatD::Zero(c.plan.full.rows(), m + 1);
  g_full.leftCols(m) = c.features * gd.transpose();
  const MatD g_features = c.plan.trimmed * gd;
  const MatD g_aug = sinkhorn_backward(c.augmented, c.plan, c.trace, g_full);
  if (g) g->dustbin_z += g_aug.col(m).sum();
  const MatD g_scores = g_aug.leftCols(m);
  Mat<double> gx = mlp_backward(c.score, g_scores, p.score, g ? &g->score : nullptr);
  gx += mlp_backward(c.reduce, g_features, p.reduce, g ? &g->reduce : nullptr);
  return gx;
}

}  // namespace detail

/// Accumulates d(loss)/d(params) into `grads` given d(loss)/d(descriptor).
/// Adapter gradients are only accumulated in the heads_plus_adapter stage.
inline void descriptor_backward(const DescriptorCache<double>& c, const RowVec<double>& g_out,
                                const AggregatorParams<double>& p, AggregatorParams<double>& grads,
                                TrainStage stage) {
  const auto layout = p.layout();
  const RowVec<double> g_concat = l2_normalize_backward(c.concat, c.output, g_out);
  std::array<RowVec<double>, kNumSegments> g_raw;
  for (int s = 0; s < kNumSegments; ++s) {
    const RowVec<double> g_unit = g_concat.segment(
        static_cast<Eigen::Index>(layout.offset(Segment(s))), c.unit[s].size());
    g_raw[s] = l2_normalize_backward(c.raw[s], c.unit[s], g_unit);
  }
  const Mat<double> g_cls = detail::gem_head_backward(c.cls2d, g_raw[0], p.cls2d_head, &grads.cls2d_head);
  const Mat<double> g_reg2 = detail::gem_head_backward(c.reg2d, g_raw[1], p.reg2d_head, &grads.reg2d_head);
  const Mat<double> g_p2 = detail::patch_backward(c.patch2d, g_raw[2], p.patch2d_head, &grads.patch2d_head);
  const Mat<double> g_reg3 = detail::gem_head_backward(c.reg3d, g_raw[3], p.reg3d_head, &grads.reg3d_head);
  const Mat<double> g_p3 = detail::patch_backward(c.patch3d, g_raw[4], p.patch3d_head, &grads.patch3d_head);

  if (p.adapter_enabled && stage == TrainStage::HeadsPlusAdapter) {
    linear_backward(c.inputs.cls2d, g_cls, p.adapter2d, &grads.adapter2d);
    linear_backward(c.inputs.reg2d, g_reg2, p.adapter2d, &grads.adapter2d);
    linear_backward(c.inputs.patch2d, g_p2, p.adapter2d, &grads.adapter2d);
    linear_backward(c.inputs.reg3d, g_reg3, p.adapter3d, &grads.adapter3d);
    linear_backward(c.inputs.patch3d, g_p3, p.adapter3d, &grads.adapter3d);
  }
}

/// One training example: a single frame (M = 1) or a window of frames.
using Sample = std::vector<const TokenSet*>;

struct BatchResult {
  double loss = 0;
  AggregatorParams<double> grads;
  bool no_valid_pairs = false;
};

/// Loss of a batch; gradients (scaled by loss_scale) when `with_grad`.
inline BatchResult batch_loss(const std::vector<Sample>& samples, const std::vector<long>& labels,
                              const AggregatorParams<double>& params, const MsLossConfig& loss_cfg,
                              const SinkhornConfig& sk, TrainStage stage, bool with_grad = true,
                              double loss_scale = 1.0) {
  require(samples.size() == labels.size(), "batch_loss: samples/labels size mismatch");
  const auto dim = static_cast<Eigen::Index>(params.layout().total());
  MatD desc(static_cast<Eigen::Index>(samples.size()), dim);
  std::vector<DescriptorCache<double>> caches(with_grad ? samples.size() : 0);
  for (std::size_t i = 0; i < samples.size(); ++i)
    desc.row(static_cast<Eigen::Index>(i)) =
        describe_sequence(samples[i], params, sk, with_grad ? &caches[i] : nullptr);
  auto ms = ms_loss(desc, labels, loss_cfg);
  BatchResult out;
  out.loss = loss_scale * ms.loss;
  out.no_valid_pairs = ms.no_valid_pairs;
  if (!std::isfinite(out.loss)) fail(ErrorKind::Numerical, "backward: non-finite loss");
  if (with_grad) {
    out.grads = zeros_like(params);
    for (std::size_t i = 0; i < samples.size(); ++i)
      descriptor_backward(caches[i], loss_scale * ms.grad.row(static_cast<Eigen::Index>(i)), params,
                          out.grads, stage);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Optimizer and schedule.

struct TrainConfig {
  double peak_lr = 1e-3;        // full-scale fine-tuning used 1e-6
  double warmup_epochs = 0.5;
  std::size_t total_steps = 300;
  double weight_decay = 1e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double adam_eps = 1e-8;
  TrainStage stage = TrainStage::HeadsOnly;
  std::uint64_t seed = 0;
  int sinkhorn_unroll_iters = 3;
  std::size_t places_per_batch = 32;
  std::size_t samples_per_place = 2;
  std::size_t seq_len = 1;       // training sample length (1 = single frame)
  std::size_t eval_every = 50;   // 0 disables periodic evaluation
  std::size_t eval_seq_len = 0;  // 0 = same as seq_len
  double eval_threshold_m = 25.0;
  MsLossConfig loss;

  void validate() const {
    require(peak_lr >= 0, "train: peak_lr must be >= 0");
    require(total_steps >= 1, "train: total_steps must be >= 1");
    require(warmup_epochs >= 0, "train: warmup_epochs must be >= 0");
    require(places_per_batch >= 2 && samples_per_place >= 2,
            "train: batches need >= 2 places with >= 2 samples each");
    require(seq_len >= 1, "train: seq_len must be >= 1");
    require(sinkhorn_unroll_iters >= 1, "train: sinkhorn_unroll_iters must be >= 1");
    loss.validate();
  }

  SinkhornConfig sinkhorn() const { return SinkhornConfig::training(sinkhorn_unroll_iters); }
};

/// Linear warm-up to the peak, then cosine decay to zero at total_steps.
inline double learning_rate(std::size_t step, double peak, std::size_t warmup_steps,
                            std::size_t total_steps) {
  if (step < warmup_steps)
    return peak * static_cast<double>(step) / static_cast<double>(warmup_steps);
  if (total_steps <= warmup_steps) return peak;
  const double t = static_cast<double>(step - warmup_steps) /
                   static_cast<double>(total_steps - warmup_steps);
  return peak * 0.5 * (1.0 + std::cos(std::numbers::pi * std::min(t, 1.0)));
}

struct AdamState {
  AggregatorParams<double> m;
  AggregatorParams<double> v;
  std::size_t steps = 0;

  static AdamState for_params(const AggregatorParams<double>& p) {
    return {zeros_like(p), zeros_like(p), 0};
  }
};

inline constexpr double kMinGemP = 0.1;

/// Decoupled-weight-decay Adam step with learning rate `lr`. Frozen tensors
/// are left untouched.
inline void optimizer_step(AggregatorParams<double>& params, const AggregatorParams<double>& grads,
                           AdamState& state, const TrainConfig& cfg, double lr) {
  ++state.steps;
  const double t = static_cast<double>(state.steps);
  const double bc1 = 1.0 - std::pow(cfg.beta1, t);
  const double bc2 = 1.0 - std::pow(cfg.beta2, t);
  for_each_tensor(
      [&](const std::string& name, auto w, auto gr, auto m, auto v) {
        require(w.rows() == gr.rows() && w.cols() == gr.cols(),
                "optimizer: shape mismatch for " + name);
        if (!is_trainable(name, cfg.stage)) return;
        w *= (1.0 - lr * cfg.weight_decay);
        m = cfg.beta1 * m + (1.0 - cfg.beta1) * gr;
        v = cfg.beta2 * v + (1.0 - cfg.beta2) * gr.cwiseProduct(gr);
        w.array() -= lr * (m.array() / bc1) / ((v.array() / bc2).sqrt() + cfg.adam_eps);
        if (name.ends_with(".p")) w = w.cwiseMax(kMinGemP);
      },
      params, grads, state.m, state.v);
}

// ---------------------------------------------------------------------------
// Data assembly.

/// Training samples grouped by place label. A sample is a window of
/// `seq_len` frames; its label is the anchor frame's `frame_index`.
struct SamplePool {
  std::vector<std::vector<std::size_t>> windows;  // frame rows per sample
  std::vector<long> labels;
  std::map<long, std::vector<std::size_t>> by_label;  // label -> sample ids
};

inline SamplePool make_pool(const Dataset& ds, std::size_t seq_len) {
  SamplePool pool;
  const auto ws = make_windows(ds.metas, seq_len, 1);
  for (const auto& w : ws.windows) {
    if (!w.meta.frame_index)
      fail(ErrorKind::InvalidArgument, "train: frame " + w.meta.frame_id +
                                           " lacks frame_index (used as place label)");
    const long label = static_cast<long>(*w.meta.frame_index);
    pool.by_label[label].push_back(pool.windows.size());
    pool.windows.push_back(w.frame_rows);
    pool.labels.push_back(label);
  }
  return pool;
}

struct Batch {
  std::vector<Sample> samples;
  std::vector<long> labels;
};

/// Deterministic batch for a given step. Labels in one batch are at least
/// `seq_len` apart so that windows of different places do not overlap.
inline Batch sample_batch(const SamplePool& pool, const Dataset& ds, const TrainConfig& cfg,
                          std::size_t step) {
  std::vector<long> eligible;
  for (const auto& [label, ids] : pool.by_label)
    if (ids.size() >= cfg.samples_per_place) eligible.push_back(label);
  if (eligible.size() < 2)
    fail(ErrorKind::InvalidArgument, "train: dataset too small (need >= 2 places with >= " +
                                         std::to_string(cfg.samples_per_place) + " samples)");
  CounterRng rng(derive_key({cfg.seed, 0x7ba7cULL, step}));
  std::vector<long> chosen;
  const std::size_t want = std::min(cfg.places_per_batch, eligible.size());
  std::size_t attempts = 0;
  while (chosen.size() < want && attempts < 100 * want) {
    ++attempts;
    const long cand = eligible[rng.below(eligible.size())];
    bool ok = true;
    for (auto c : chosen)
      if (std::abs(c - cand) < static_cast<long>(cfg.seq_len)) ok = false;
    if (ok) chosen.push_back(cand);
  }
  if (chosen.size() < 2) fail(ErrorKind::InvalidArgument, "train: could not assemble a batch");
  Batch b;
  for (auto label : chosen) {
    auto ids = pool.by_label.at(label);
    for (std::size_t j = 0; j < cfg.samples_per_place; ++j) {
      const std::size_t pick = j + rng.below(ids.size() - j);
      std::swap(ids[j], ids[pick]);
      Sample s;
      for (auto r : pool.windows[ids[j]]) s.push_back(&ds.frames[r]);
      b.samples.push_back(std::move(s));
      b.labels.push_back(label);
    }
  }
  return b;
}

// ---------------------------------------------------------------------------
// Evaluation on a held-out set: the first sequence in manifest order is the
// database, every other sequence supplies queries.

struct HeldOutSplit {
  Dataset db;
  Dataset queries;
};

inline HeldOutSplit split_by_first_sequence(const Dataset& ds) {
  require(!ds.metas.empty(), "evaluation: empty dataset");
  HeldOutSplit s;
  const auto& first = ds.metas.front().sequence_id;
  for (std::size_t i = 0; i < ds.metas.size(); ++i) {
    auto& dst = ds.metas[i].sequence_id == first ? s.db : s.queries;
    dst.frames.push_back(ds.frames[i]);
    dst.metas.push_back(ds.metas[i]);
  }
  require(!s.queries.metas.empty(), "evaluation: needs at least two sequences (db + queries)");
  return s;
}

template <typename T>
RetrievalProblem make_problem(const HeldOutSplit& split, const AggregatorParams<T>& params,
                              std::size_t seq_len, std::size_t stride, const SinkhornConfig& sk) {
  const auto db_w = make_windows(split.db.metas, seq_len, stride);
  const auto q_w = make_windows(split.queries.metas, seq_len, stride);
  RetrievalProblem prob{build_index(describe_windows(db_w, split.db, params, sk), window_metas(db_w)),
                        describe_windows(q_w, split.queries, params, sk), window_metas(q_w)};
  return prob;
}

template <typename T>
RecallReport evaluate_recall(const HeldOutSplit& split, const AggregatorParams<T>& params,
                             std::size_t seq_len, const PositiveRule& rule,
                             const std::vector<std::size_t>& ks, const SinkhornConfig& sk,
                             std::size_t stride = 1) {
  const auto prob = make_problem(split, params, seq_len, stride, sk);
  return recall_at_k(prob.index, prob.queries, prob.query_metas, rule, ks);
}

// ---------------------------------------------------------------------------
// Training loop.

struct MetricsRecord {
  std::size_t step = 0;
  double lr = 0;
  double loss = 0;
  std::optional<double> recall_at_1;
};

inline nlohmann::json to_json(const MetricsRecord& r) {
  nlohmann::json j{{"step", r.step}, {"lr", r.lr}, {"loss", r.loss}};
  if (r.recall_at_1) j["R@1"] = *r.recall_at_1;
  return j;
}

struct TrainResult {
  AggregatorParams<double> params;
  std::vector<MetricsRecord> log;
  std::optional<double> initial_recall_at_1;
  std::optional<double> final_recall_at_1;
};

inline std::size_t warmup_steps_for(const TrainConfig& cfg, std::size_t num_labels) {
  const std::size_t per_epoch =
      std::max<std::size_t>(1, (num_labels + cfg.places_per_batch - 1) / cfg.places_per_batch);
  return static_cast<std::size_t>(std::llround(cfg.warmup_epochs * double(per_epoch)));
}

/// Deterministic given (dataset bytes, params, config). `held_out` is
/// optional; when present R@1 is logged every eval_every steps and at the
/// start and end.
inline TrainResult train(const Dataset& data, AggregatorParams<double> params,
                         const TrainConfig& cfg, const Dataset* held_out = nullptr) {
  cfg.validate();
  if (cfg.stage == TrainStage::HeadsPlusAdapter) params.adapter_enabled = true;
  const auto pool = make_pool(data, cfg.seq_len);
  if (pool.by_label.size() < 2) fail(ErrorKind::InvalidArgument, "train: dataset too small");
  const auto sk = cfg.sinkhorn();
  const std::size_t warmup = warmup_steps_for(cfg, pool.by_label.size());

  std::optional<HeldOutSplit> split;
  if (held_out) split = split_by_first_sequence(*held_out);
  const std::size_t eval_len = cfg.eval_seq_len ? cfg.eval_seq_len : cfg.seq_len;
  auto eval = [&](const AggregatorParams<double>& p) {
    return evaluate_recall(*split, p, eval_len, PositiveRule::distance_m(cfg.eval_threshold_m), {1},
                           sk)
        .at(1);
  };

  TrainResult res;
  if (split) res.initial_recall_at_1 = eval(params);
  AdamState state = AdamState::for_params(params);
  for (std::size_t step = 0; step < cfg.total_steps; ++step) {
    const auto batch = sample_batch(pool, data, cfg, step);
    const auto br = batch_loss(batch.samples, batch.labels, params, cfg.loss, sk, cfg.stage);
    const double lr = learning_rate(step, cfg.peak_lr, warmup, cfg.total_steps);
    optimizer_step(params, br.grads, state, cfg, lr);
    MetricsRecord rec{step, lr, br.loss, std::nullopt};
    const bool last = step + 1 == cfg.total_steps;
    if (split && (last || (cfg.eval_every && (step + 1) % cfg.eval_every == 0)))
      rec.recall_at_1 = eval(params);
    if (last && rec.recall_at_1) res.final_recall_at_1 = rec.recall_at_1;
    res.log.push_back(rec);
  }
  res.params = std::move(params);
  return res;
}

}  // namespace unipr
