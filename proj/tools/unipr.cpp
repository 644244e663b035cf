// SPDX-License-Identifier: Apache-2.0
//
// unipr: command-line driver for the descriptor pipeline.

#include <cmath>
#include <cstdint>
#include <fstream>
#include <functional>
#include <iostream>
#include <map>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include "unipr/aggregation.hpp"
#include "unipr/checkpoint.hpp"
#include "unipr/error.hpp"
#include "unipr/gradcheck.hpp"
#include "unipr/retrieval.hpp"
#include "unipr/store.hpp"
#include "unipr/tokenio.hpp"
#include "unipr/training.hpp"

namespace {

using nlohmann::json;
using namespace unipr;

struct RunConfig {
  // files
  std::string container, manifest, output, descriptors, index, queries;
  std::string checkpoint, init_checkpoint, metrics, held_out_container, held_out_manifest;
  // synthetic data
  std::uint32_t places = 200, views = 2, place_offset = 0, latent_dim = 8, patch_types = 8;
  double spacing = 10.0, noise = 0.5, offset_scale = 2.0;
  // token dims
  std::uint32_t d2 = 1024, d3 = 2048, r2 = 4, r3 = 4, p = 1036;
  // model
  std::uint32_t hidden = 512, head_dim = 256, clusters = 64, reduced_dim = 128;
  // transport
  int sinkhorn_iters = 100;
  double sinkhorn_tol = 1e-6;
  bool train_parity = false;
  int unroll = 3;
  // sequences
  std::size_t seq_len = 1, stride = 1;
  std::string select_sequence;
  std::vector<std::size_t> seq_lens{1};
  // evaluation
  std::string rule = "distance_m";
  double threshold = 25.0;
  std::vector<double> thresholds{2.0, 25.0};
  std::vector<std::size_t> ks{1, 5, 10};
  std::size_t k = 10;
  // training
  std::size_t steps = 300, places_per_batch = 32, samples_per_place = 2, eval_every = 50;
  double lr = 1e-3, warmup_epochs = 0.5, weight_decay = 1e-4;
  std::string stage = "heads_only";
  double ms_alpha = 1.0, ms_beta = 50.0, ms_lambda = 0.5, ms_epsilon = 0.1;
  // gradcheck
  std::string module = "all";
  bool tiny = false;
  // heatmap
  std::size_t frame = 0;
  std::uint32_t grid_rows = 0, grid_cols = 0;

  std::uint64_t seed = 0;
};

struct Field {
  std::string name;
  std::function<CLI::Option*(CLI::App&, RunConfig&)> add;
  std::function<json(const RunConfig&)> get;
  std::function<void(RunConfig&, const json&)> set;
};

template <typename T>
struct is_vector : std::false_type {};
template <typename T>
struct is_vector<std::vector<T>> : std::true_type {};

template <typename T>
Field field(const std::string& name, T RunConfig::*member, const std::string& help) {
  std::string flag = "--" + name;
  std::replace(flag.begin(), flag.end(), '_', '-');
  return {name,
          [=](CLI::App& app, RunConfig& c) -> CLI::Option* {
            if constexpr (std::is_same_v<T, bool>) {
              return app.add_flag(flag, c.*member, help);
            } else if constexpr (is_vector<T>::value) {
              return app.add_option(flag, c.*member, help)->delimiter(',')->capture_default_str();
            } else {
              return app.add_option(flag, c.*member, help)->capture_default_str();
            }
          },
          [=](const RunConfig& c) { return json(c.*member); },
          [=](RunConfig& c, const json& j) { c.*member = j.get<T>(); }};
}

const std::vector<Field>& all_fields() {
  static const std::vector<Field> fields = {
      field("container", &RunConfig::container, "UPRT token container"),
      field("manifest", &RunConfig::manifest, "JSONL frame manifest"),
      field("output", &RunConfig::output, "output path (prefix for heatmap)"),
      field("descriptors", &RunConfig::descriptors, "UPRD descriptor file"),
      field("index", &RunConfig::index, "UPRD index file"),
      field("queries", &RunConfig::queries, "UPRD query descriptor file"),
      field("checkpoint", &RunConfig::checkpoint, "UPRP checkpoint (read; written by train)"),
      field("init_checkpoint", &RunConfig::init_checkpoint, "UPRP checkpoint to start training from"),
      field("metrics", &RunConfig::metrics, "JSONL metrics log"),
      field("held_out_container", &RunConfig::held_out_container, "held-out UPRT container for R@1"),
      field("held_out_manifest", &RunConfig::held_out_manifest, "held-out manifest for R@1"),
      field("places", &RunConfig::places, "number of places"),
      field("views", &RunConfig::views, "views per place (one sequence per view)"),
      field("place_offset", &RunConfig::place_offset, "id of the first place"),
      field("latent_dim", &RunConfig::latent_dim, "per-place latent dimension"),
      field("patch_types", &RunConfig::patch_types, "distinct patch roles"),
      field("spacing", &RunConfig::spacing, "place spacing in metres"),
      field("noise", &RunConfig::noise, "per-view Gaussian noise sigma"),
      field("offset_scale", &RunConfig::offset_scale, "scale of the role offsets"),
      field("d2", &RunConfig::d2, "2D token width"),
      field("d3", &RunConfig::d3, "3D token width"),
      field("r2", &RunConfig::r2, "2D register tokens per frame"),
      field("r3", &RunConfig::r3, "3D register tokens per frame"),
      field("p", &RunConfig::p, "patch tokens per frame"),
      field("hidden", &RunConfig::hidden, "head hidden width H"),
      field("head_dim", &RunConfig::head_dim, "GeM head output width"),
      field("clusters", &RunConfig::clusters, "clusters m"),
      field("reduced_dim", &RunConfig::reduced_dim, "reduced patch width l"),
      field("sinkhorn_iters", &RunConfig::sinkhorn_iters, "evaluation Sinkhorn iteration cap"),
      field("sinkhorn_tol", &RunConfig::sinkhorn_tol, "evaluation Sinkhorn marginal tolerance"),
      field("train_parity", &RunConfig::train_parity, "evaluate with the training unroll"),
      field("unroll", &RunConfig::unroll, "unrolled Sinkhorn iterations in training"),
      field("seq_len", &RunConfig::seq_len, "frames per window S"),
      field("stride", &RunConfig::stride, "window stride"),
      field("select_sequence", &RunConfig::select_sequence, "only this sequence_id"),
      field("seq_lens", &RunConfig::seq_lens, "sequence lengths to sweep"),
      field("rule", &RunConfig::rule, "positive rule: distance_m or frame_gap"),
      field("threshold", &RunConfig::threshold, "positive rule threshold"),
      field("thresholds", &RunConfig::thresholds, "thresholds to sweep"),
      field("ks", &RunConfig::ks, "recall cut-offs"),
      field("k", &RunConfig::k, "neighbours per query"),
      field("steps", &RunConfig::steps, "training steps"),
      field("places_per_batch", &RunConfig::places_per_batch, "places per batch"),
      field("samples_per_place", &RunConfig::samples_per_place, "samples per place in a batch"),
      field("eval_every", &RunConfig::eval_every, "steps between held-out evaluations (0 = end only)"),
      field("lr", &RunConfig::lr, "peak learning rate"),
      field("warmup_epochs", &RunConfig::warmup_epochs, "linear warm-up length in epochs"),
      field("weight_decay", &RunConfig::weight_decay, "decoupled weight decay"),
      field("stage", &RunConfig::stage, "heads_only or heads_plus_adapter"),
      field("ms_alpha", &RunConfig::ms_alpha, "multi-similarity positive scale"),
      field("ms_beta", &RunConfig::ms_beta, "multi-similarity negative scale"),
      field("ms_lambda", &RunConfig::ms_lambda, "multi-similarity margin"),
      field("ms_epsilon", &RunConfig::ms_epsilon, "pair-mining margin"),
      field("module", &RunConfig::module, "all, pipeline, gem_head, sinkhorn or ms_loss"),
      field("tiny", &RunConfig::tiny, "use the tiny gradcheck dims"),
      field("frame", &RunConfig::frame, "frame row to render"),
      field("grid_rows", &RunConfig::grid_rows, "patch grid rows (0 = square)"),
      field("grid_cols", &RunConfig::grid_cols, "patch grid cols (0 = square)"),
      field("seed", &RunConfig::seed, "random seed"),
  };
  return fields;
}

const std::vector<std::string> kModelFields{"hidden", "head_dim", "clusters", "reduced_dim", "seed"};
const std::vector<std::string> kTransportFields{"sinkhorn_iters", "sinkhorn_tol", "train_parity",
                                                "unroll"};

struct Command {
  std::string name;
  std::string description;
  std::vector<std::string> fields;
  std::function<int(const RunConfig&, const json&)> run;
};

template <typename... Lists>
std::vector<std::string> cat(std::vector<std::string> a, const Lists&... rest) {
  (a.insert(a.end(), rest.begin(), rest.end()), ...);
  return a;
}

// ---------------------------------------------------------------------------

ModelConfig model_of(const RunConfig& c, const TokenDims& dims) {
  ModelConfig m;
  m.d2 = dims.d2;
  m.d3 = dims.d3;
  m.hidden = c.hidden;
  m.head_dim = c.head_dim;
  m.clusters = c.clusters;
  m.reduced_dim = c.reduced_dim;
  return m;
}

SinkhornConfig sinkhorn_of(const RunConfig& c) {
  if (c.train_parity) return SinkhornConfig::training(c.unroll);
  SinkhornConfig s;
  s.max_iters = c.sinkhorn_iters;
  s.tol = c.sinkhorn_tol;
  return s;
}

PositiveRule rule_of(const std::string& kind, double threshold) {
  PositiveRule r;
  if (kind == "distance_m")
    r = PositiveRule::distance_m(threshold);
  else if (kind == "frame_gap")
    r = PositiveRule::frame_gap(threshold);
  else
    fail(ErrorKind::InvalidArgument, "rule must be distance_m or frame_gap, got '" + kind + "'");
  r.validate();
  return r;
}

void need(const std::string& value, const std::string& flag) {
  if (value.empty()) fail(ErrorKind::InvalidArgument, "--" + flag + " is required");
}

void need_file(const std::string& value, const std::string& flag) {
  need(value, flag);
  if (!std::filesystem::exists(value)) fail(ErrorKind::Io, "no such file: " + value);
}

Dataset load(const std::string& container, const std::string& manifest) {
  need_file(container, "container");
  need_file(manifest, "manifest");
  return load_dataset(container, manifest);
}

/// Checkpoint when given, otherwise seeded random heads sized to the data.
AggregatorParams<double> params_for(const RunConfig& c, const TokenDims& dims,
                                    const std::string& checkpoint) {
  if (checkpoint.empty()) return init_aggregator<double>(model_of(c, dims), c.seed);
  need_file(checkpoint, "checkpoint");
  auto p = load_checkpoint<double>(checkpoint);
  if (p.config.d2 != dims.d2 || p.config.d3 != dims.d3)
    fail(ErrorKind::InvalidArgument, "checkpoint widths (" + std::to_string(p.config.d2) + ", " +
                                         std::to_string(p.config.d3) + ") do not match tokens (" +
                                         std::to_string(dims.d2) + ", " + std::to_string(dims.d3) + ")");
  return p;
}

TokenDims dims_of(const Dataset& ds) {
  if (ds.frames.empty()) fail(ErrorKind::InvalidArgument, "dataset has no frames");
  return ds.frames.front().dims();
}

Dataset select(const Dataset& ds, const std::string& sequence) {
  if (sequence.empty()) return ds;
  Dataset out;
  for (std::size_t i = 0; i < ds.metas.size(); ++i)
    if (ds.metas[i].sequence_id == sequence) {
      out.frames.push_back(ds.frames[i]);
      out.metas.push_back(ds.metas[i]);
    }
  if (out.metas.empty()) fail(ErrorKind::InvalidArgument, "no frames in sequence '" + sequence + "'");
  return out;
}

void emit(const std::string& path, const std::string& text) {
  if (path.empty())
    std::cout << text;
  else
    detail::write_file(path, text);
}

// ---------------------------------------------------------------------------

int cmd_gen(const RunConfig& c, const json&) {
  need(c.container, "container");
  need(c.manifest, "manifest");
  SyntheticConfig s;
  s.num_places = c.places;
  s.views_per_place = c.views;
  s.place_spacing_m = c.spacing;
  s.noise_sigma = c.noise;
  s.dims = {c.d2, c.d3, c.r2, c.r3, c.p};
  s.seed = c.seed;
  s.place_offset = c.place_offset;
  s.latent_dim = c.latent_dim;
  s.patch_types = c.patch_types;
  s.offset_scale = c.offset_scale;
  const auto [frames, metas] = generate_synthetic(s);
  const auto bytes = write_container(frames, c.container);
  write_manifest(metas, c.manifest);
  std::cout << json{{"frames", frames.size()}, {"container_bytes", bytes}}.dump() << "\n";
  return 0;
}

int cmd_aggregate(const RunConfig& c, const json&) {
  need(c.output, "output");
  const auto ds = select(load(c.container, c.manifest), c.select_sequence);
  const auto params = params_for(c, dims_of(ds), c.checkpoint).cast<float>();
  const auto windows = make_windows(ds.metas, c.seq_len, c.stride);
  DescriptorSet set{describe_windows(windows, ds, params, sinkhorn_of(c)), window_metas(windows)};
  write_descriptors(set, c.output);
  std::cout << json{{"rows", set.rows.rows()},
                    {"dim", set.rows.cols()},
                    {"skipped_sequences", windows.skipped_sequences}}
                   .dump()
            << "\n";
  return 0;
}

int cmd_index(const RunConfig& c, const json&) {
  need_file(c.descriptors, "descriptors");
  need(c.output, "output");
  auto set = read_descriptors(c.descriptors);
  const auto index = build_index(std::move(set.rows), std::move(set.metas));
  write_index(index, c.output);
  std::cout << json{{"entries", index.size()}, {"dim", index.dim()}}.dump() << "\n";
  return 0;
}

int cmd_query(const RunConfig& c, const json&) {
  need_file(c.index, "index");
  need_file(c.queries, "queries");
  const auto index = read_index(c.index);
  const auto q = read_descriptors(c.queries);
  std::string out;
  for (Eigen::Index i = 0; i < q.rows.rows(); ++i) {
    json rec{{"query", q.metas[static_cast<std::size_t>(i)].frame_id}};
    rec["neighbors"] = json::array();
    for (const auto& n : knn_query(index, q.rows.row(i), c.k))
      rec["neighbors"].push_back(
          {{"id", n.id}, {"frame_id", index.metas[n.id].frame_id}, {"similarity", n.similarity}});
    out += rec.dump() + "\n";
  }
  emit(c.output, out);
  return 0;
}

int cmd_eval(const RunConfig& c, const json& resolved) {
  need_file(c.index, "index");
  need_file(c.queries, "queries");
  const auto index = read_index(c.index);
  const auto q = read_descriptors(c.queries);
  const auto report = recall_at_k(index, q.rows, q.metas, rule_of(c.rule, c.threshold), c.ks);
  json rec{{"config_hash", config_hash(resolved)}, {"report", to_json(report)}};
  emit(c.output, rec.dump() + "\n");
  if (!c.output.empty()) std::cout << format_table({{1, report}});
  return 0;
}

int cmd_sweep(const RunConfig& c, const json& resolved) {
  const auto ds = load(c.container, c.manifest);
  const auto params = params_for(c, dims_of(ds), c.checkpoint).cast<float>();
  const auto split = split_by_first_sequence(ds);
  const auto sk = sinkhorn_of(c);
  std::vector<PositiveRule> rules;
  for (double t : c.thresholds) rules.push_back(rule_of(c.rule, t));
  const auto cells = sweep(
      [&](std::size_t s) { return make_problem(split, params, s, c.stride, sk); }, rules,
      c.seq_lens, c.ks);
  const std::string hash = config_hash(resolved);
  std::string out;
  for (const auto& cell : cells)
    out += json{{"config_hash", hash}, {"seq_len", cell.seq_len}, {"report", to_json(cell.report)}}
               .dump() +
           "\n";
  const bool monotone = recall_monotone_in_threshold(cells);
  out += json{{"config_hash", hash}, {"monotone_in_threshold", monotone}}.dump() + "\n";
  emit(c.output, out);
  std::cout << format_table(cells);
  if (!monotone) fail(ErrorKind::Numerical, "sweep: recall decreased with a larger threshold");
  return 0;
}

int cmd_train(const RunConfig& c, const json& resolved) {
  need(c.checkpoint, "checkpoint");
  const auto ds = load(c.container, c.manifest);
  std::optional<Dataset> held;
  if (!c.held_out_container.empty() || !c.held_out_manifest.empty())
    held = load(c.held_out_container, c.held_out_manifest);
  auto params = params_for(c, dims_of(ds), c.init_checkpoint);
  TrainConfig t;
  t.peak_lr = c.lr;
  t.warmup_epochs = c.warmup_epochs;
  t.total_steps = c.steps;
  t.weight_decay = c.weight_decay;
  t.stage = parse_stage(c.stage);
  t.seed = c.seed;
  t.sinkhorn_unroll_iters = c.unroll;
  t.places_per_batch = c.places_per_batch;
  t.samples_per_place = c.samples_per_place;
  t.seq_len = c.seq_len;
  t.eval_every = c.eval_every;
  t.eval_threshold_m = c.threshold;
  t.loss = {c.ms_alpha, c.ms_beta, c.ms_lambda, c.ms_epsilon};
  const auto res = train(ds, std::move(params), t, held ? &*held : nullptr);
  save_checkpoint(res.params, c.checkpoint);
  const std::string hash = config_hash(resolved);
  std::string log = json{{"config_hash", hash}, {"config", resolved}}.dump() + "\n";
  for (const auto& r : res.log) log += to_json(r).dump() + "\n";
  if (!c.metrics.empty()) detail::write_file(c.metrics, log);
  json summary{{"config_hash", hash}, {"steps", res.log.size()}, {"final_loss", res.log.back().loss}};
  if (res.initial_recall_at_1) summary["initial_R@1"] = *res.initial_recall_at_1;
  if (res.final_recall_at_1) summary["final_R@1"] = *res.final_recall_at_1;
  std::cout << summary.dump() << "\n";
  return 0;
}

int cmd_gradcheck(const RunConfig& c, const json&) {
  if (!c.tiny) fail(ErrorKind::InvalidArgument, "gradcheck runs on tiny dims only; pass --tiny");
  GradcheckConfig g;
  g.seed = c.seed;
  g.stage = parse_stage(c.stage);
  g.unroll_iters = c.unroll;
  g.loss = {c.ms_alpha, c.ms_beta, c.ms_lambda, c.ms_epsilon};
  const auto rep = gradcheck(c.module, g);
  std::cout << rep.table();
  if (!c.output.empty()) detail::write_file(c.output, to_json(rep).dump(2) + "\n");
  std::cout << (rep.passed() ? "PASS" : "FAIL") << " max rel err " << rep.max_rel_err() << "\n";
  return rep.passed() ? 0 : 1;
}

int cmd_heatmap(const RunConfig& c, const json&) {
  need(c.container, "container");
  need(c.output, "output");
  if (!std::filesystem::exists(c.container)) fail(ErrorKind::Io, "no such file: " + c.container);
  const auto frames = read_container(c.container);
  if (c.frame >= frames.size())
    fail(ErrorKind::InvalidArgument, "--frame " + std::to_string(c.frame) + " out of range (" +
                                         std::to_string(frames.size()) + " frames)");
  const auto& f = frames[c.frame];
  const auto n = static_cast<Eigen::Index>(f.patch2d.rows());
  Eigen::Index rows = c.grid_rows, cols = c.grid_cols;
  if (rows == 0 && cols == 0) {
    rows = cols = static_cast<Eigen::Index>(std::llround(std::sqrt(double(n))));
  } else if (rows == 0) {
    rows = cols ? n / cols : 0;
  } else if (cols == 0) {
    cols = n / rows;
  }
  const auto params = params_for(c, f.dims(), c.checkpoint).cast<float>();
  const auto grids = assignment_mass(f, params, rows, cols, sinkhorn_of(c));
  // Each patch carries 1/n of the mass; n * kept mass maps to [0, 1].
  write_pgm(grids.grid2d * double(n), c.output + ".2d.pgm");
  write_pgm(grids.grid3d * double(n), c.output + ".3d.pgm");
  std::cout << json{{"rows", rows},
                    {"cols", cols},
                    {"dustbin_mass_2d", grids.dustbin_mass2d},
                    {"dustbin_mass_3d", grids.dustbin_mass3d}}
                   .dump()
            << "\n";
  return 0;
}

const std::vector<Command>& commands() {
  static const std::vector<Command> cmds = {
      {"gen", "generate a synthetic token container and manifest",
       {"container", "manifest", "places", "views", "spacing", "noise", "place_offset", "latent_dim",
        "patch_types", "offset_scale", "d2", "d3", "r2", "r3", "p", "seed"},
       cmd_gen},
      {"aggregate", "build frame or window descriptors",
       cat({"container", "manifest", "checkpoint", "output", "select_sequence", "seq_len", "stride"},
           kModelFields, kTransportFields),
       cmd_aggregate},
      {"index", "build a retrieval index from descriptors", {"descriptors", "output"}, cmd_index},
      {"query", "k nearest neighbours for each query descriptor",
       {"index", "queries", "k", "output"},
       cmd_query},
      {"eval", "Recall@k of query descriptors against an index",
       {"index", "queries", "rule", "threshold", "ks", "output"},
       cmd_eval},
      {"sweep", "recall over a grid of thresholds and sequence lengths",
       cat({"container", "manifest", "checkpoint", "rule", "thresholds", "ks", "seq_lens", "stride",
            "output"},
           kModelFields, kTransportFields),
       cmd_sweep},
      {"train", "train the aggregation heads",
       cat({"container", "manifest", "held_out_container", "held_out_manifest", "init_checkpoint",
            "checkpoint", "metrics", "steps", "lr", "warmup_epochs", "weight_decay", "stage",
            "places_per_batch", "samples_per_place", "seq_len", "eval_every", "threshold",
            "ms_alpha", "ms_beta", "ms_lambda", "ms_epsilon", "unroll"},
           kModelFields),
       cmd_train},
      {"gradcheck", "finite-difference gradient verification",
       {"module", "tiny", "stage", "unroll", "ms_alpha", "ms_beta", "ms_lambda", "ms_epsilon", "seed",
        "output"},
       cmd_gradcheck},
      {"heatmap", "export per-patch assignment mass as PGM images",
       cat({"container", "checkpoint", "frame", "grid_rows", "grid_cols", "output"}, kModelFields,
           kTransportFields),
       cmd_heatmap},
  };
  return cmds;
}

const Field& find_field(const std::string& name) {
  for (const auto& f : all_fields())
    if (f.name == name) return f;
  fail(ErrorKind::InvalidArgument, "internal: unknown field " + name);
}

int exit_code(ErrorKind k) {
  switch (k) {
    case ErrorKind::InvalidArgument: return 2;
    case ErrorKind::Io:
    case ErrorKind::Format: return 3;
    case ErrorKind::Numerical: return 4;
  }
  return 1;
}

int report_error(const std::string& kind, const std::string& message, int code) {
  std::cerr << json{{"error", kind}, {"message", message}, {"exit_code", code}}.dump() << "\n";
  return code;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"unipr: token aggregation, sequence descriptors, retrieval and training"};
  app.require_subcommand(1);
  app.set_help_all_flag("--help-all", "expand help for every subcommand");

  struct Bound {
    const Command* cmd;
    CLI::App* app;
    RunConfig flags;
    std::vector<std::pair<const Field*, CLI::Option*>> options;
    std::string config_path;
    bool dump = false;
  };
  std::vector<Bound> bound(commands().size());
  for (std::size_t i = 0; i < commands().size(); ++i) {
    auto& b = bound[i];
    b.cmd = &commands()[i];
    b.app = app.add_subcommand(b.cmd->name, b.cmd->description);
    b.app->add_option("--config", b.config_path, "JSON config file (flags take precedence)");
    b.app->add_flag("--dump-config", b.dump, "print the resolved config and exit");
    for (const auto& name : b.cmd->fields) {
      const Field& f = find_field(name);
      b.options.emplace_back(&f, f.add(*b.app, b.flags));
    }
  }

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    if (e.get_exit_code() == 0) return app.exit(e);
    return report_error("usage", e.what(), 2);
  }

  for (auto& b : bound) {
    if (!b.app->parsed()) continue;
    RunConfig cfg;
    try {
      if (!b.config_path.empty()) {
        if (!std::filesystem::exists(b.config_path))
          return report_error("io", "no such file: " + b.config_path, 3);
        const json file = json::parse(detail::read_file(b.config_path));
        if (!file.is_object()) return report_error("config", "config file must hold a JSON object", 2);
        for (const auto& [key, value] : file.items()) {
          if (key == "subcommand") {
            if (value != b.cmd->name)
              return report_error("config", "config is for subcommand " + value.dump(), 2);
            continue;
          }
          auto it = std::find(b.cmd->fields.begin(), b.cmd->fields.end(), key);
          if (it == b.cmd->fields.end())
            return report_error("config", "unknown field '" + key + "' for " + b.cmd->name, 2);
          find_field(key).set(cfg, value);
        }
      }
    } catch (const json::exception& e) {
      return report_error("config", e.what(), 2);
    }
    for (const auto& [f, opt] : b.options)
      if (opt->count() > 0) f->set(cfg, f->get(b.flags));

    json resolved{{"subcommand", b.cmd->name}};
    for (const auto& [f, opt] : b.options) resolved[f->name] = f->get(cfg);
    if (b.dump) {
      std::cout << resolved.dump(2) << "\n";
      return 0;
    }
    try {
      return b.cmd->run(cfg, resolved);
    } catch (const Error& e) {
      return report_error(std::string(to_string(e.kind())), e.what(), exit_code(e.kind()));
    } catch (const json::exception& e) {
      return report_error("format", e.what(), 3);
    } catch (const std::exception& e) {
      return report_error("internal", e.what(), 1);
    }
  }
  return 0;
}
