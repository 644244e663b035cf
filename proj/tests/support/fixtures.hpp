// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <filesystem>
#include <string>

#include "unipr/aggregation.hpp"
#include "unipr/rng.hpp"
#include "unipr/tokenio.hpp"

namespace fixtures {

inline unipr::MatD random_matrix(std::uint64_t seed, Eigen::Index r, Eigen::Index c,
                                 double scale = 1.0) {
  unipr::CounterRng rng(unipr::derive_key({seed, 0xf1ULL}));
  unipr::MatD m(r, c);
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = scale * rng.normal();
  return m;
}

inline unipr::TokenSet random_frame(std::uint64_t seed, const unipr::TokenDims& d) {
  unipr::CounterRng rng(unipr::derive_key({seed, 0xf2ULL}));
  auto t = unipr::TokenSet::zeros(d);
  auto fill = [&](auto& m) {
    for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = static_cast<float>(rng.normal());
  };
  fill(t.cls2d);
  fill(t.reg2d);
  fill(t.patch2d);
  fill(t.reg3d);
  fill(t.patch3d);
  t.frame_id = "f" + std::to_string(seed);
  return t;
}

inline unipr::TokenDims small_dims() { return {8, 12, 3, 2, 10}; }

inline unipr::ModelConfig small_model(const unipr::TokenDims& d = small_dims()) {
  unipr::ModelConfig m;
  m.d2 = d.d2;
  m.d3 = d.d3;
  m.hidden = 6;
  m.head_dim = 5;
  m.clusters = 4;
  m.reduced_dim = 3;
  return m;
}

/// Fresh directory under the system temp dir, removed on destruction.
struct TempDir {
  std::filesystem::path path;
  explicit TempDir(const std::string& tag) {
    path = std::filesystem::temp_directory_path() /
           ("unipr_" + tag + "_" + std::to_string(reinterpret_cast<std::uintptr_t>(this)));
    std::filesystem::remove_all(path);
    std::filesystem::create_directories(path);
  }
  ~TempDir() { std::filesystem::remove_all(path); }
  std::filesystem::path operator/(const std::string& name) const { return path / name; }
};

}  // namespace fixtures
