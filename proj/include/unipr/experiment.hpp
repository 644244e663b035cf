// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <optional>
#include <vector>

#include "unipr/aggregation.hpp"
#include "unipr/retrieval.hpp"
#include "unipr/tokenio.hpp"
#include "unipr/training.hpp"

namespace unipr {

/// A desk-scale training run: a training world, a held-out set of places
/// from the same world (view 0 = database, view 1 = queries) and the
/// model/optimizer settings.
struct Experiment {
  SyntheticConfig train_data;
  SyntheticConfig held_out;
  ModelConfig model;
  TrainConfig train;
  std::uint64_t init_seed = 1;
};

inline ModelConfig toy_model() {
  ModelConfig m;
  m.d2 = 32;
  m.d3 = 32;
  m.hidden = 32;
  m.head_dim = 32;
  m.clusters = 8;
  m.reduced_dim = 8;
  return m;
}

inline TokenDims toy_dims() { return {32, 32, 4, 4, 16}; }

/// Single-frame run on 200 held-out places x 2 views.
inline Experiment single_frame_experiment() {
  Experiment e;
  e.train_data.dims = toy_dims();
  e.train_data.num_places = 4000;
  e.train_data.views_per_place = 4;
  e.train_data.noise_sigma = 0.75;
  e.held_out = e.train_data;
  e.held_out.place_offset = e.train_data.num_places;
  e.held_out.num_places = 200;
  e.held_out.views_per_place = 2;
  e.model = toy_model();
  e.train.peak_lr = 1e-2;
  e.train.total_steps = 300;
  e.train.places_per_batch = 32;
  e.train.samples_per_place = 4;
  e.train.eval_every = 0;
  return e;
}

/// Sequence run: trained on windows of 5, frames 2 m apart, heavier noise.
inline Experiment sequence_experiment() {
  Experiment e = single_frame_experiment();
  for (auto* s : {&e.train_data, &e.held_out}) {
    s->noise_sigma = 2.5;
    s->place_spacing_m = 2.0;
  }
  e.train.seq_len = 5;
  return e;
}

struct ExperimentData {
  Dataset train;
  Dataset held_out;
};

inline ExperimentData make_experiment_data(const Experiment& e) {
  auto [tf, tm] = generate_synthetic(e.train_data);
  auto [hf, hm] = generate_synthetic(e.held_out);
  return {{std::move(tf), std::move(tm)}, {std::move(hf), std::move(hm)}};
}

inline TrainResult run_experiment(const Experiment& e, const ExperimentData& data) {
  return train(data.train, init_aggregator<double>(e.model, e.init_seed), e.train, &data.held_out);
}

}  // namespace unipr
