// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cmath>
#include <string>

#include "unipr/error.hpp"
#include "unipr/rng.hpp"
#include "unipr/tensor.hpp"

namespace unipr {

/// Affine map y = x W + b applied row-wise.
template <typename T>
struct LinearParams {
  Mat<T> weight;  // in x out
  RowVec<T> bias; // 1 x out

  Eigen::Index in_dim() const { return weight.rows(); }
  Eigen::Index out_dim() const { return weight.cols(); }

  template <typename U>
  LinearParams<U> cast() const {
    return {weight.template cast<U>(), bias.template cast<U>()};
  }
};

/// linear -> ReLU -> linear.
template <typename T>
struct MlpParams {
  LinearParams<T> fc1;
  LinearParams<T> fc2;

  Eigen::Index in_dim() const { return fc1.in_dim(); }
  Eigen::Index hidden_dim() const { return fc1.out_dim(); }
  Eigen::Index out_dim() const { return fc2.out_dim(); }

  void validate() const {
    require(fc1.bias.size() == fc1.out_dim() && fc2.bias.size() == fc2.out_dim(),
            "mlp: bias width does not match weight");
    require(fc1.out_dim() == fc2.in_dim(), "mlp: layer shapes do not chain (" +
                                               shape_str(fc1.weight) + " then " +
                                               shape_str(fc2.weight) + ")");
  }

  template <typename U>
  MlpParams<U> cast() const {
    return {fc1.template cast<U>(), fc2.template cast<U>()};
  }
};

/// Uniform(-1/sqrt(in), 1/sqrt(in)) for weights and biases alike.
template <typename T>
LinearParams<T> init_linear(Eigen::Index in, Eigen::Index out, CounterRng& rng) {
  LinearParams<T> p{Mat<T>(in, out), RowVec<T>(out)};
  const double bound = 1.0 / std::sqrt(static_cast<double>(in));
  for (Eigen::Index i = 0; i < p.weight.size(); ++i)
    p.weight.data()[i] = static_cast<T>(rng.uniform(-bound, bound));
  for (Eigen::Index i = 0; i < p.bias.size(); ++i)
    p.bias[i] = static_cast<T>(rng.uniform(-bound, bound));
  return p;
}

template <typename T>
MlpParams<T> init_mlp(Eigen::Index in, Eigen::Index hidden, Eigen::Index out,
                      CounterRng& rng) {
  auto fc1 = init_linear<T>(in, hidden, rng);
  auto fc2 = init_linear<T>(hidden, out, rng);
  return {std::move(fc1), std::move(fc2)};
}

template <typename T>
LinearParams<T> identity_linear(Eigen::Index dim) {
  return {Mat<T>::Identity(dim, dim), RowVec<T>::Zero(dim)};
}

template <typename T>
Mat<T> linear_forward(const Mat<T>& x, const LinearParams<T>& p) {
  require(x.cols() == p.in_dim(), "linear: input " + shape_str(x) +
                                      " does not match weight " +
                                      shape_str(p.weight));
  Mat<T> y = x * p.weight;
  y.rowwise() += p.bias;
  return y;
}

/// Accumulates parameter gradients into `g`; returns d(loss)/dx.
template <typename T>
Mat<T> linear_backward(const Mat<T>& x, const Mat<T>& gy, const LinearParams<T>& p,
                       LinearParams<T>* g) {
  if (g) {
    g->weight.noalias() += x.transpose() * gy;
    g->bias += gy.colwise().sum();
  }
  return gy * p.weight.transpose();
}

/// Intermediates kept for the backward pass.
template <typename T>
struct MlpCache {
  Mat<T> input;
  Mat<T> hidden;  // post-ReLU
};

template <typename T>
Mat<T> mlp_forward(const Mat<T>& x, const MlpParams<T>& p, MlpCache<T>* cache = nullptr) {
  Mat<T> h = linear_forward(x, p.fc1).cwiseMax(T(0));
  Mat<T> y = linear_forward(h, p.fc2);
  if (cache) {
    cache->input = x;
    cache->hidden = std::move(h);
  }
  return y;
}

template <typename T>
Mat<T> mlp_backward(const MlpCache<T>& c, const Mat<T>& gy, const MlpParams<T>& p,
                    MlpParams<T>* g) {
  Mat<T> gh = linear_backward(c.hidden, gy, p.fc2, g ? &g->fc2 : nullptr);
  gh = (c.hidden.array() > T(0)).select(gh, T(0));
  return linear_backward(c.input, gh, p.fc1, g ? &g->fc1 : nullptr);
}

inline constexpr double kGemEps = 1e-6;

/// Column-wise power mean ((1/N) sum_i max(x_i, eps)^p)^(1/p).
template <typename T>
RowVec<T> gem_pool(const Mat<T>& x, T p, T eps = T(kGemEps)) {
  require(x.rows() >= 1, "gem_pool: needs at least one token row");
  require(p > T(0) && std::isfinite(static_cast<double>(p)), "gem_pool: p must be > 0");
  const T inv_n = T(1) / static_cast<T>(x.rows());
  RowVec<T> mean = (x.array().max(eps).pow(p).colwise().sum() * inv_n).matrix();
  return mean.array().pow(T(1) / p).matrix();
}

/// Backward of gem_pool. Adds d/dp into `gp` and returns d/dx.
template <typename T>
Mat<T> gem_pool_backward(const Mat<T>& x, T p, const RowVec<T>& y, const RowVec<T>& gy,
                         T* gp, T eps = T(kGemEps)) {
  const T n = static_cast<T>(x.rows());
  const auto c = x.array().max(eps);
  const auto cp = c.pow(p);
  const RowVec<T> mean = (cp.colwise().sum() / n).matrix();
  // dy/dc = mean^(1/p - 1) * c^(p-1) / n
  const RowVec<T> scale = (mean.array().pow(T(1) / p - T(1)) / n * gy.array()).matrix();
  Mat<T> gx = c.pow(p - T(1)).matrix();
  gx.array().rowwise() *= scale.array();
  gx = (x.array() > eps).select(gx, T(0));
  if (gp) {
    // dy/dp = y * (-ln(mean)/p^2 + (sum c^p ln c)/(n p mean))
    const RowVec<T> weighted = ((cp * c.log()).colwise().sum() / n).matrix();
    const auto dy_dp = y.array() * (-mean.array().log() / (p * p) +
                                    weighted.array() / (p * mean.array()));
    *gp += (dy_dp * gy.array()).sum();
  }
  return gx;
}

/// Returns x / ||x||; zero vectors are returned unchanged.
template <typename T>
RowVec<T> l2_normalize(const RowVec<T>& x) {
  const T n = x.norm();
  return n > T(0) ? RowVec<T>(x / n) : x;
}

/// Backward of l2_normalize given the forward input and output.
template <typename T>
RowVec<T> l2_normalize_backward(const RowVec<T>& x, const RowVec<T>& y, const RowVec<T>& gy) {
  const T n = x.norm();
  if (n <= T(0)) return gy;
  return (gy - y * y.dot(gy)) / n;
}

}  // namespace unipr
