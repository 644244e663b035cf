// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <algorithm>
#include <cmath>
#include <limits>
#include <vector>

#include "unipr/error.hpp"
#include "unipr/tensor.hpp"

namespace unipr {

struct SinkhornConfig {
  int max_iters = 100;
  double tol = 1e-6;
  /// Run exactly max_iters iterations with no early exit. This is the
  /// differentiable training mode.
  bool unrolled = false;

  static SinkhornConfig training(int iters = 3) { return {iters, 0.0, true}; }
};

struct TransportPlan {
  MatD full;     // n x (m+1), last column is the dustbin
  MatD trimmed;  // n x m
  VecD row_marginal;
  VecD col_marginal;
  int iterations_run = 0;
  bool converged = false;
  double row_residual = 0;  // max_i |sum_j full(i,j) - mu_i|
  double col_residual = 0;  // max_j |sum_i full(i,j) - kappa_j|
};

/// Dual potentials after each iteration, kept for differentiation.
struct SinkhornTrace {
  std::vector<VecD> u;  // row potentials, one per iteration
  std::vector<VecD> v;  // column potentials, one per iteration
};

/// Appends a constant dustbin column: [S, z 1_n].
template <typename T>
Mat<T> augment_dustbin(const Mat<T>& scores, T z) {
  Mat<T> out(scores.rows(), scores.cols() + 1);
  out.leftCols(scores.cols()) = scores;
  out.col(scores.cols()).setConstant(z);
  return out;
}

inline VecD uniform_marginal(Eigen::Index n) {
  return VecD::Constant(n, 1.0 / static_cast<double>(n));
}

namespace detail {

/// Row-wise log-sum-exp of (a + row_offsets broadcast) for matrix a.
inline VecD rowwise_lse(const MatD& s, const VecD& col_pot) {
  VecD out(s.rows());
  for (Eigen::Index i = 0; i < s.rows(); ++i) {
    const auto row = s.row(i).transpose().array() + col_pot.array();
    const double mx = row.maxCoeff();
    out[i] = mx + std::log((row - mx).exp().sum());
  }
  return out;
}

inline VecD colwise_lse(const MatD& s, const VecD& row_pot) {
  const Eigen::Index n = s.rows(), c = s.cols();
  VecD mx = VecD::Constant(c, -std::numeric_limits<double>::infinity());
  for (Eigen::Index i = 0; i < n; ++i)
    mx = mx.cwiseMax((s.row(i).array() + row_pot[i]).transpose().matrix());
  VecD acc = VecD::Zero(c);
  for (Eigen::Index i = 0; i < n; ++i)
    acc.array() += (s.row(i).transpose().array() + row_pot[i] - mx.array()).exp();
  return mx.array() + acc.array().log();
}

inline MatD plan_from_potentials(const MatD& s, const VecD& u, const VecD& v) {
  MatD p = s;
  p.colwise() += u;
  p.rowwise() += v.transpose();
  return p.array().exp().matrix();
}

}  // namespace detail

/// Log-domain Sinkhorn on exp(scores) with the given marginals.
inline TransportPlan sinkhorn(const MatD& scores, const VecD& mu, const VecD& kappa,
                              const SinkhornConfig& cfg = {},
                              SinkhornTrace* trace = nullptr) {
  const Eigen::Index n = scores.rows(), c = scores.cols();
  require(n >= 1 && c >= 1, "sinkhorn: empty score matrix");
  require(mu.size() == n && kappa.size() == c,
          "sinkhorn: marginal sizes do not match scores " + shape_str(scores));
  require(cfg.max_iters >= 1, "sinkhorn: max_iters must be >= 1");
  require((mu.array() > 0).all() && (kappa.array() > 0).all(),
          "sinkhorn: marginals must be strictly positive");
  const double mass_mu = mu.sum(), mass_kappa = kappa.sum();
  if (std::abs(mass_mu - mass_kappa) > 1e-9 || std::abs(mass_mu - 1.0) > 1e-9)
    fail(ErrorKind::InvalidArgument, "sinkhorn: marginals must both sum to 1");
  if (!all_finite(scores)) fail(ErrorKind::Numerical, "sinkhorn: non-finite scores");

  const VecD log_mu = mu.array().log();
  const VecD log_kappa = kappa.array().log();
  VecD u = VecD::Zero(n);
  VecD v = VecD::Zero(c);
  if (trace) {
    trace->u.clear();
    trace->v.clear();
  }

  TransportPlan plan;
  plan.row_marginal = mu;
  plan.col_marginal = kappa;
  for (int it = 0; it < cfg.max_iters; ++it) {
    u = log_mu - detail::rowwise_lse(scores, v);
    v = log_kappa - detail::colwise_lse(scores, u);
    plan.iterations_run = it + 1;
    if (trace) {
      trace->u.push_back(u);
      trace->v.push_back(v);
    }
    if (!cfg.unrolled) {
      const MatD p = detail::plan_from_potentials(scores, u, v);
      const double rr = (p.rowwise().sum() - mu).cwiseAbs().maxCoeff();
      const double cr = (p.colwise().sum().transpose() - kappa).cwiseAbs().maxCoeff();
      if (rr <= cfg.tol && cr <= cfg.tol) break;
    }
  }
  plan.full = detail::plan_from_potentials(scores, u, v);
  if (!all_finite(plan.full)) fail(ErrorKind::Numerical, "sinkhorn: non-finite plan");
  plan.row_residual = (plan.full.rowwise().sum() - mu).cwiseAbs().maxCoeff();
  plan.col_residual = (plan.full.colwise().sum().transpose() - kappa).cwiseAbs().maxCoeff();
  plan.converged = plan.row_residual <= cfg.tol && plan.col_residual <= cfg.tol;
  plan.trimmed = plan.full.leftCols(c - 1);
  return plan;
}

/// Gradient of a loss with respect to the scores through the recorded
/// iterations, given d(loss)/d(full plan). Each iteration is
///   u_i = log mu_i - lse_j(S_ij + v_j),  v_j = log kappa_j - lse_i(S_ij + u_i)
/// and the plan is exp(S_ij + u_i + v_j).
inline MatD sinkhorn_backward(const MatD& scores, const TransportPlan& plan,
                              const SinkhornTrace& trace, const MatD& grad_plan) {
  const Eigen::Index n = scores.rows(), c = scores.cols();
  const std::size_t iters = trace.u.size();
  require(iters >= 1 && trace.v.size() == iters, "sinkhorn_backward: empty trace");

  const MatD g_log = grad_plan.cwiseProduct(plan.full);
  MatD gs = g_log;
  VecD gu = g_log.rowwise().sum();
  VecD gv = g_log.colwise().sum().transpose();

  const VecD log_mu = plan.row_marginal.array().log();
  const VecD log_kappa = plan.col_marginal.array().log();
  for (std::size_t t = iters; t-- > 0;) {
    const VecD& u = trace.u[t];
    const VecD& v = trace.v[t];
    // Column step: column softmax A_ij = exp(S_ij + u_i + v_j - log kappa_j).
    {
      MatD a = scores;
      a.colwise() += u;
      a.rowwise() += (v - log_kappa).transpose();
      a = a.array().exp().matrix();
      a.array().rowwise() *= gv.transpose().array();  // A_ij * gv_j
      gs -= a;
      gu -= a.rowwise().sum();
    }
    // Row step: row softmax B_ij = exp(S_ij + v_prev_j + u_i - log mu_i).
    const VecD v_prev = t == 0 ? VecD::Zero(c) : trace.v[t - 1];
    {
      MatD b = scores;
      b.colwise() += u - log_mu;
      b.rowwise() += v_prev.transpose();
      b = b.array().exp().matrix();
      b.array().colwise() *= gu.array();  // B_ij * gu_i
      gs -= b;
      gv = t == 0 ? VecD::Zero(c) : VecD(-b.colwise().sum().transpose());
    }
    gu = VecD::Zero(n);
  }
  return gs;
}

}  // namespace unipr
