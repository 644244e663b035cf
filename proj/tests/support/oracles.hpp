// SPDX-License-Identifier: Apache-2.0
//
// Reference implementations used as test oracles. They work on plain nested
// vectors and share no code with the library.
#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <numeric>
#include <utility>
#include <vector>

namespace oracle {

using Matrix = std::vector<std::vector<double>>;

template <typename M>
Matrix to_nested(const M& m) {
  Matrix out(static_cast<std::size_t>(m.rows()), std::vector<double>(static_cast<std::size_t>(m.cols())));
  for (std::size_t i = 0; i < out.size(); ++i)
    for (std::size_t j = 0; j < out[i].size(); ++j)
      out[i][j] = static_cast<double>(m(static_cast<long>(i), static_cast<long>(j)));
  return out;
}

inline Matrix matmul(const Matrix& a, const Matrix& b) {
  const std::size_t n = a.size(), k = b.size(), m = b.empty() ? 0 : b[0].size();
  Matrix c(n, std::vector<double>(m, 0.0));
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < m; ++j) {
      double s = 0;
      for (std::size_t t = 0; t < k; ++t) s += a[i][t] * b[t][j];
      c[i][j] = s;
    }
  return c;
}

/// Column-wise generalized mean (mean of max(x, eps)^p)^(1/p).
inline std::vector<double> gem(const Matrix& x, double p, double eps = 1e-6) {
  std::vector<double> out(x.empty() ? 0 : x[0].size(), 0.0);
  for (std::size_t j = 0; j < out.size(); ++j) {
    double s = 0;
    for (const auto& row : x) s += std::pow(std::max(row[j], eps), p);
    out[j] = std::pow(s / static_cast<double>(x.size()), 1.0 / p);
  }
  return out;
}

/// Scaling-form Sinkhorn: plan = diag(a) exp(S) diag(b), b starts at 1.
inline Matrix plain_sinkhorn(const Matrix& s, const std::vector<double>& mu,
                             const std::vector<double>& kappa, int iters) {
  const std::size_t n = s.size(), m = s[0].size();
  Matrix k(n, std::vector<double>(m));
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < m; ++j) k[i][j] = std::exp(s[i][j]);
  std::vector<double> a(n, 1.0), b(m, 1.0);
  for (int it = 0; it < iters; ++it) {
    for (std::size_t i = 0; i < n; ++i) {
      double r = 0;
      for (std::size_t j = 0; j < m; ++j) r += k[i][j] * b[j];
      a[i] = mu[i] / r;
    }
    for (std::size_t j = 0; j < m; ++j) {
      double c = 0;
      for (std::size_t i = 0; i < n; ++i) c += k[i][j] * a[i];
      b[j] = kappa[j] / c;
    }
  }
  Matrix plan(n, std::vector<double>(m));
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < m; ++j) plan[i][j] = a[i] * k[i][j] * b[j];
  return plan;
}

struct Hit {
  std::size_t id;
  double sim;
};

/// Full scan: every similarity accumulated in f64 in index order, sorted
/// by descending similarity then ascending id.
template <typename Db, typename Q>
std::vector<Hit> brute_knn(const Db& db, const Q& q, std::size_t k) {
  std::vector<Hit> all;
  for (long i = 0; i < db.rows(); ++i) {
    double s = 0;
    for (long j = 0; j < db.cols(); ++j) s += double(db(i, j)) * double(q(j));
    all.push_back({static_cast<std::size_t>(i), s});
  }
  std::sort(all.begin(), all.end(), [](const Hit& x, const Hit& y) {
    return x.sim != y.sim ? x.sim > y.sim : x.id < y.id;
  });
  all.resize(std::min(k, all.size()));
  return all;
}

/// Recall@k with positives given by `is_pos(query, db)`. Queries with no
/// positive anywhere in the database are dropped.
template <typename Db, typename Qs, typename Pos>
std::vector<double> brute_recall(const Db& db, const Qs& queries, const std::vector<std::size_t>& ks,
                                 Pos is_pos, std::size_t* retained = nullptr) {
  std::vector<double> hits(ks.size(), 0.0);
  std::size_t kept = 0;
  for (long q = 0; q < queries.rows(); ++q) {
    bool any = false;
    for (long d = 0; d < db.rows(); ++d) any = any || is_pos(std::size_t(q), std::size_t(d));
    if (!any) continue;
    ++kept;
    const auto ranked = brute_knn(db, queries.row(q), static_cast<std::size_t>(db.rows()));
    for (std::size_t t = 0; t < ks.size(); ++t)
      for (std::size_t r = 0; r < std::min(ks[t], ranked.size()); ++r)
        if (is_pos(std::size_t(q), ranked[r].id)) {
          hits[t] += 1;
          break;
        }
  }
  if (retained) *retained = kept;
  for (auto& h : hits) h = kept ? h / static_cast<double>(kept) : 0.0;
  return hits;
}

/// Multi-similarity loss written out term by term.
inline double ms_loss(const Matrix& d, const std::vector<long>& labels, double alpha, double beta,
                      double lambda, double eps) {
  const std::size_t b = d.size();
  auto sim = [&](std::size_t i, std::size_t k) {
    double s = 0;
    for (std::size_t t = 0; t < d[i].size(); ++t) s += d[i][t] * d[k][t];
    return s;
  };
  double total = 0;
  for (std::size_t i = 0; i < b; ++i) {
    double min_pos = 1e300, max_neg = -1e300;
    bool has_pos = false, has_neg = false;
    for (std::size_t k = 0; k < b; ++k) {
      if (k == i) continue;
      if (labels[k] == labels[i]) {
        has_pos = true;
        min_pos = std::min(min_pos, sim(i, k));
      } else {
        has_neg = true;
        max_neg = std::max(max_neg, sim(i, k));
      }
    }
    double sp = 0, sn = 0;
    bool any_p = false, any_n = false;
    for (std::size_t k = 0; k < b; ++k) {
      if (k == i) continue;
      const double s = sim(i, k);
      if (labels[k] == labels[i]) {
        if (!has_neg || s - eps < max_neg) {
          sp += std::exp(-alpha * (s - lambda));
          any_p = true;
        }
      } else if (!has_pos || s + eps > min_pos) {
        sn += std::exp(beta * (s - lambda));
        any_n = true;
      }
    }
    if (any_p) total += std::log(1 + sp) / alpha;
    if (any_n) total += std::log(1 + sn) / beta;
  }
  return total / static_cast<double>(b);
}

/// Hand-written AdamW for one scalar with decoupled decay.
struct ScalarAdamW {
  double lr, beta1, beta2, eps, wd;
  double m = 0, v = 0;
  int t = 0;

  double step(double w, double g) {
    ++t;
    w = w - lr * wd * w;
    m = beta1 * m + (1 - beta1) * g;
    v = beta2 * v + (1 - beta2) * g * g;
    const double mhat = m / (1 - std::pow(beta1, t));
    const double vhat = v / (1 - std::pow(beta2, t));
    return w - lr * mhat / (std::sqrt(vhat) + eps);
  }
};

}  // namespace oracle
