// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <Eigen/Core>

#include <cmath>
#include <cstdint>
#include <string>

#include "unipr/error.hpp"

namespace unipr {

/// Row-major so that token rows are contiguous, matching the on-disk layout.
template <typename T>
using Mat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using RowVec = Eigen::Matrix<T, 1, Eigen::Dynamic>;
template <typename T>
using Vec = Eigen::Matrix<T, Eigen::Dynamic, 1>;

using MatF = Mat<float>;
using MatD = Mat<double>;
using VecF = Vec<float>;
using VecD = Vec<double>;

template <typename Derived>
std::string shape_str(const Eigen::MatrixBase<Derived>& m) {
  return std::to_string(m.rows()) + "x" + std::to_string(m.cols());
}

template <typename Derived>
bool all_finite(const Eigen::DenseBase<Derived>& m) {
  return m.derived().array().isFinite().all();
}

/// Stacks row blocks vertically; all blocks must share a column count.
template <typename T, typename Range>
Mat<T> vstack(const Range& blocks) {
  Eigen::Index rows = 0;
  Eigen::Index cols = -1;
  for (const auto& b : blocks) {
    if (cols < 0) cols = b.cols();
    require(b.cols() == cols, "vstack: column mismatch (" +
                                  std::to_string(b.cols()) + " vs " +
                                  std::to_string(cols) + ")");
    rows += b.rows();
  }
  Mat<T> out(rows, cols < 0 ? 0 : cols);
  Eigen::Index at = 0;
  for (const auto& b : blocks) {
    out.middleRows(at, b.rows()) = b.template cast<T>();
    at += b.rows();
  }
  return out;
}

}  // namespace unipr
