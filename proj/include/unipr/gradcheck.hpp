// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <iomanip>
#include <sstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "unipr/aggregation.hpp"
#include "unipr/error.hpp"
#include "unipr/layers.hpp"
#include "unipr/ms_loss.hpp"
#include "unipr/rng.hpp"
#include "unipr/sinkhorn.hpp"
#include "unipr/training.hpp"

namespace unipr {

struct GradcheckEntry {
  std::string module;
  std::string tensor;
  std::size_t elements = 0;
  double max_rel_err = 0;
  double max_abs_err = 0;
  bool skipped = false;  // frozen in the checked stage
};

struct GradcheckReport {
  std::vector<GradcheckEntry> entries;
  double threshold = 1e-4;

  double max_rel_err() const {
    double m = 0;
    for (const auto& e : entries)
      if (!e.skipped) m = std::max(m, e.max_rel_err);
    return m;
  }
  bool passed() const { return max_rel_err() < threshold; }

  std::string table() const {
    std::ostringstream os;
    for (const auto& e : entries) {
      os << std::left << std::setw(10) << e.module << std::setw(36) << e.tensor;
      if (e.skipped) {
        os << "skipped\n";
        continue;
      }
      os << std::right << std::setw(6) << e.elements << "  rel " << std::scientific
         << std::setprecision(3) << e.max_rel_err << "  abs " << e.max_abs_err
         << (e.max_rel_err < threshold ? "  ok" : "  FAIL") << "\n";
      os << std::defaultfloat;
    }
    return os.str();
  }
};

inline nlohmann::json to_json(const GradcheckReport& r) {
  nlohmann::json j;
  j["threshold"] = r.threshold;
  j["passed"] = r.passed();
  j["max_rel_err"] = r.max_rel_err();
  for (const auto& e : r.entries)
    j["tensors"].push_back({{"module", e.module},
                            {"tensor", e.tensor},
                            {"elements", e.elements},
                            {"status", e.skipped ? "skipped" : "checked"},
                            {"max_rel_err", e.max_rel_err},
                            {"max_abs_err", e.max_abs_err}});
  return j;
}

struct GradcheckConfig {
  TokenDims dims{6, 6, 2, 2, 5};
  std::uint32_t hidden = 4;
  std::uint32_t head_dim = 3;
  std::uint32_t clusters = 3;
  std::uint32_t reduced_dim = 2;
  int unroll_iters = 3;
  double step = 1e-5;
  double threshold = 1e-4;
  std::uint64_t seed = 0;
  double token_scale = 2.0;
  double gem_input_shift = 1.0;  // added to inner fc2 biases, keeps GeM inputs off the clamp
  double score_gain = 3.0;       // scales score fc2 weights, keeps the unrolled plan off its fixed point
  TrainStage stage = TrainStage::HeadsPlusAdapter;
  std::size_t seq_len = 1;
  MsLossConfig loss;

  ModelConfig model() const {
    ModelConfig m;
    m.d2 = dims.d2;
    m.d3 = dims.d3;
    m.hidden = hidden;
    m.head_dim = head_dim;
    m.clusters = clusters;
    m.reduced_dim = reduced_dim;
    return m;
  }
};

/// |g_a - g_n| / max(1e-8, |g_a| + |g_n|)
inline double relative_error(double analytic, double numeric) {
  return std::abs(analytic - numeric) / std::max(1e-8, std::abs(analytic) + std::abs(numeric));
}

/// Central differences over every element of `w` against `analytic`.
template <typename W, typename G>
GradcheckEntry check_tensor(const std::string& module, const std::string& name, W&& w,
                            const G& analytic, const std::function<double()>& loss, double h) {
  require(w.rows() == analytic.rows() && w.cols() == analytic.cols(),
          "gradcheck: gradient shape mismatch for " + name);
  GradcheckEntry e{module, name, static_cast<std::size_t>(w.size()), 0, 0, false};
  for (Eigen::Index i = 0; i < w.size(); ++i) {
    const double saved = w.data()[i];
    w.data()[i] = saved + h;
    const double lp = loss();
    w.data()[i] = saved - h;
    const double lm = loss();
    w.data()[i] = saved;
    const double numeric = (lp - lm) / (2 * h);
    const double a = analytic.data()[i];
    e.max_rel_err = std::max(e.max_rel_err, relative_error(a, numeric));
    e.max_abs_err = std::max(e.max_abs_err, std::abs(a - numeric));
  }
  return e;
}

namespace detail {

inline MatD random_matrix(CounterRng& rng, Eigen::Index r, Eigen::Index c, double scale = 1.0) {
  MatD m(r, c);
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = scale * rng.normal();
  return m;
}

inline TokenSet random_frame(CounterRng& rng, const TokenDims& d, double scale) {
  auto t = TokenSet::zeros(d);
  auto fill = [&](auto& m) {
    for (Eigen::Index i = 0; i < m.size(); ++i)
      m.data()[i] = static_cast<float>(scale * rng.normal());
  };
  fill(t.cls2d);
  fill(t.reg2d);
  fill(t.patch2d);
  fill(t.reg3d);
  fill(t.patch3d);
  return t;
}

}  // namespace detail

/// Full pipeline: tokens -> descriptors (unrolled Sinkhorn) -> ms_loss.
inline void gradcheck_pipeline(const GradcheckConfig& cfg, GradcheckReport& rep) {
  CounterRng rng(derive_key({cfg.seed, 0x9c0ULL}));
  auto params = init_aggregator<double>(cfg.model(), cfg.seed);
  for (auto* h : {&params.cls2d_head, &params.reg2d_head, &params.reg3d_head})
    h->inner.fc2.bias.array() += cfg.gem_input_shift;
  for (auto* h : {&params.patch2d_head, &params.patch3d_head}) h->score.fc2.weight *= cfg.score_gain;
  params.adapter_enabled = cfg.stage == TrainStage::HeadsPlusAdapter;
  if (params.adapter_enabled) {
    params.adapter2d.weight += detail::random_matrix(rng, cfg.dims.d2, cfg.dims.d2, 0.1);
    params.adapter3d.weight += detail::random_matrix(rng, cfg.dims.d3, cfg.dims.d3, 0.1);
  }
  // Two places, two samples each; a sample is seq_len frames.
  std::vector<TokenSet> frames;
  for (std::size_t i = 0; i < 4 * cfg.seq_len; ++i) frames.push_back(detail::random_frame(rng, cfg.dims, cfg.token_scale));
  std::vector<Sample> samples;
  for (std::size_t s = 0; s < 4; ++s) {
    Sample smp;
    for (std::size_t f = 0; f < cfg.seq_len; ++f) smp.push_back(&frames[s * cfg.seq_len + f]);
    samples.push_back(smp);
  }
  const std::vector<long> labels{0, 0, 1, 1};
  const auto sk = SinkhornConfig::training(cfg.unroll_iters);

  const auto analytic = batch_loss(samples, labels, params, cfg.loss, sk, cfg.stage, true).grads;
  auto loss = [&] { return batch_loss(samples, labels, params, cfg.loss, sk, cfg.stage, false).loss; };
  for_each_tensor(
      [&](const std::string& name, auto w, auto g) {
        if (!is_trainable(name, cfg.stage)) {
          rep.entries.push_back({"pipeline", name, static_cast<std::size_t>(w.size()), 0, 0, true});
          return;
        }
        rep.entries.push_back(check_tensor("pipeline", name, w, g, loss, cfg.step));
      },
      params, analytic);
}

/// A single GeM head, including its input tokens and the exponent p.
inline void gradcheck_gem_head(const GradcheckConfig& cfg, GradcheckReport& rep) {
  CounterRng rng(derive_key({cfg.seed, 0x9e4ULL}));
  GemHeadParams<double> head;
  head.inner = init_mlp<double>(cfg.dims.d2, cfg.hidden, cfg.hidden, rng);
  head.inner.fc2.bias.array() += cfg.gem_input_shift;
  head.p = 3.0;
  head.outer = init_mlp<double>(cfg.hidden, cfg.hidden, cfg.head_dim, rng);
  MatD x = detail::random_matrix(rng, 3, cfg.dims.d2);
  const RowVec<double> w = detail::random_matrix(rng, 1, cfg.head_dim).row(0);

  GemHeadCache<double> cache;
  gem_head(x, head, &cache);
  GemHeadParams<double> g{{}, 0.0, {}};
  g.inner = {{MatD::Zero(head.inner.fc1.weight.rows(), head.inner.fc1.weight.cols()),
              RowVec<double>::Zero(head.inner.fc1.bias.size())},
             {MatD::Zero(head.inner.fc2.weight.rows(), head.inner.fc2.weight.cols()),
              RowVec<double>::Zero(head.inner.fc2.bias.size())}};
  g.outer = {{MatD::Zero(head.outer.fc1.weight.rows(), head.outer.fc1.weight.cols()),
              RowVec<double>::Zero(head.outer.fc1.bias.size())},
             {MatD::Zero(head.outer.fc2.weight.rows(), head.outer.fc2.weight.cols()),
              RowVec<double>::Zero(head.outer.fc2.bias.size())}};
  const MatD gx = detail::gem_head_backward(cache, w, head, &g);
  auto loss = [&] { return gem_head(x, head).dot(w); };

  const double h = cfg.step;
  auto add = [&](const std::string& name, auto&& t, const auto& gt) {
    rep.entries.push_back(check_tensor("gem_head", name, t, gt, loss, h));
  };
  add("tokens", x, gx);
  add("inner.fc1.weight", head.inner.fc1.weight, g.inner.fc1.weight);
  add("inner.fc1.bias", head.inner.fc1.bias, g.inner.fc1.bias);
  add("inner.fc2.weight", head.inner.fc2.weight, g.inner.fc2.weight);
  add("inner.fc2.bias", head.inner.fc2.bias, g.inner.fc2.bias);
  Eigen::Map<MatD> pmap(&head.p, 1, 1);
  Eigen::Map<const MatD> gpmap(&g.p, 1, 1);
  add("p", pmap, gpmap);
  add("outer.fc1.weight", head.outer.fc1.weight, g.outer.fc1.weight);
  add("outer.fc1.bias", head.outer.fc1.bias, g.outer.fc1.bias);
  add("outer.fc2.weight", head.outer.fc2.weight, g.outer.fc2.weight);
  add("outer.fc2.bias", head.outer.fc2.bias, g.outer.fc2.bias);
}

/// Unrolled Sinkhorn with respect to the augmented scores.
inline void gradcheck_sinkhorn(const GradcheckConfig& cfg, GradcheckReport& rep) {
  CounterRng rng(derive_key({cfg.seed, 0x5c4ULL}));
  MatD s = detail::random_matrix(rng, cfg.dims.p, cfg.clusters + 1);
  const MatD w = detail::random_matrix(rng, s.rows(), s.cols());
  const auto mu = uniform_marginal(s.rows());
  const auto kappa = uniform_marginal(s.cols());
  const auto sk = SinkhornConfig::training(cfg.unroll_iters);
  SinkhornTrace trace;
  const auto plan = sinkhorn(s, mu, kappa, sk, &trace);
  const MatD gs = sinkhorn_backward(s, plan, trace, w);
  auto loss = [&] { return sinkhorn(s, mu, kappa, sk).full.cwiseProduct(w).sum(); };
  rep.entries.push_back(check_tensor("sinkhorn", "scores", s, gs, loss, cfg.step));
}

inline void gradcheck_ms_loss(const GradcheckConfig& cfg, GradcheckReport& rep) {
  CounterRng rng(derive_key({cfg.seed, 0x315ULL}));
  // Two views per label around a shared centre, so every pair sits near the margin.
  const MatD centres = detail::random_matrix(rng, 3, 5);
  MatD d = detail::random_matrix(rng, 6, 5, 0.6);
  for (Eigen::Index i = 0; i < d.rows(); ++i) d.row(i) += centres.row(i / 2);
  d.rowwise().normalize();
  const std::vector<long> labels{0, 0, 1, 1, 2, 2};
  const auto res = ms_loss(d, labels, cfg.loss);
  auto loss = [&] { return ms_loss(d, labels, cfg.loss).loss; };
  rep.entries.push_back(check_tensor("ms_loss", "descriptors", d, res.grad, loss, cfg.step));
}

/// `module` is one of: all, pipeline, gem_head, sinkhorn, ms_loss.
inline GradcheckReport gradcheck(const std::string& module, const GradcheckConfig& cfg = {}) {
  GradcheckReport rep;
  rep.threshold = cfg.threshold;
  const bool all = module == "all";
  bool known = false;
  if (all || module == "gem_head") known = true, gradcheck_gem_head(cfg, rep);
  if (all || module == "sinkhorn") known = true, gradcheck_sinkhorn(cfg, rep);
  if (all || module == "ms_loss") known = true, gradcheck_ms_loss(cfg, rep);
  if (all || module == "pipeline") known = true, gradcheck_pipeline(cfg, rep);
  if (!known) fail(ErrorKind::InvalidArgument, "gradcheck: unknown module '" + module + "'");
  return rep;
}

}  // namespace unipr
