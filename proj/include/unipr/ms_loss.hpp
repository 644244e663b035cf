// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <algorithm>
#include <cmath>
#include <limits>
#include <vector>

#include "unipr/error.hpp"
#include "unipr/tensor.hpp"

namespace unipr {

struct MsLossConfig {
  double alpha = 1.0;    // positive-pair temperature
  double beta = 50.0;    // negative-pair temperature
  double lambda = 0.5;   // similarity margin
  double epsilon = 0.1;  // pair-mining margin

  void validate() const {
    require(alpha > 0 && beta > 0, "ms_loss: alpha and beta must be > 0");
    require(lambda > 0 && lambda < 1, "ms_loss: lambda must lie in (0, 1)");
    require(epsilon >= 0, "ms_loss: epsilon must be >= 0");
  }
};

struct MsLossResult {
  double loss = 0;
  MatD grad;                 // d loss / d descriptors, B x dim
  std::size_t positive_pairs = 0;  // after mining
  std::size_t negative_pairs = 0;
  bool no_valid_pairs = false;
};

/// Multi-similarity loss over a batch of descriptors with pair mining.
///
/// For anchor i with positives P_i and negatives N_i (other rows with the
/// same / a different label), a negative is kept when S_ik + eps exceeds
/// the hardest positive and a positive is kept when S_ik - eps is below the
/// hardest negative; when one side is empty the other is kept unmined. The
/// loss is the mean over all B anchors of
///   1/alpha log(1 + sum_P exp(-alpha (S - lambda)))
/// + 1/beta  log(1 + sum_N exp( beta (S - lambda))).
inline MsLossResult ms_loss(const MatD& desc, const std::vector<long>& labels,
                            const MsLossConfig& cfg) {
  cfg.validate();
  const Eigen::Index b = desc.rows();
  require(b >= 2, "ms_loss: batch needs at least two descriptors");
  require(static_cast<std::size_t>(b) == labels.size(), "ms_loss: labels/batch size mismatch");

  const MatD sim = desc * desc.transpose();
  MatD gsim = MatD::Zero(b, b);  // d L / d S_ik, not symmetrised
  MsLossResult out;
  double total = 0;
  for (Eigen::Index i = 0; i < b; ++i) {
    double hardest_pos = std::numeric_limits<double>::infinity();
    double hardest_neg = -std::numeric_limits<double>::infinity();
    bool any_pos = false, any_neg = false;
    for (Eigen::Index k = 0; k < b; ++k) {
      if (k == i) continue;
      if (labels[i] == labels[k]) {
        any_pos = true;
        hardest_pos = std::min(hardest_pos, sim(i, k));
      } else {
        any_neg = true;
        hardest_neg = std::max(hardest_neg, sim(i, k));
      }
    }
    std::vector<Eigen::Index> pos, neg;
    for (Eigen::Index k = 0; k < b; ++k) {
      if (k == i) continue;
      if (labels[i] == labels[k]) {
        if (!any_neg || sim(i, k) - cfg.epsilon < hardest_neg) pos.push_back(k);
      } else {
        if (!any_pos || sim(i, k) + cfg.epsilon > hardest_pos) neg.push_back(k);
      }
    }
    out.positive_pairs += pos.size();
    out.negative_pairs += neg.size();
    if (!pos.empty()) {
      double sum = 0;
      for (auto k : pos) sum += std::exp(-cfg.alpha * (sim(i, k) - cfg.lambda));
      total += std::log1p(sum) / cfg.alpha;
      for (auto k : pos) gsim(i, k) -= std::exp(-cfg.alpha * (sim(i, k) - cfg.lambda)) / (1 + sum);
    }
    if (!neg.empty()) {
      double sum = 0;
      for (auto k : neg) sum += std::exp(cfg.beta * (sim(i, k) - cfg.lambda));
      total += std::log1p(sum) / cfg.beta;
      for (auto k : neg) gsim(i, k) += std::exp(cfg.beta * (sim(i, k) - cfg.lambda)) / (1 + sum);
    }
  }
  out.no_valid_pairs = out.positive_pairs == 0 && out.negative_pairs == 0;
  out.loss = total / static_cast<double>(b);
  gsim /= static_cast<double>(b);
  // S = D D^T  =>  dD = (G + G^T) D
  out.grad = (gsim + gsim.transpose()) * desc;
  if (!std::isfinite(out.loss) || !all_finite(out.grad))
    fail(ErrorKind::Numerical, "ms_loss: non-finite loss");
  return out;
}

}  // namespace unipr
