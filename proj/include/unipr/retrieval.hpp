// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <iomanip>
#include <map>
#include <numeric>
#include <sstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "unipr/error.hpp"
#include "unipr/sequence.hpp"
#include "unipr/tensor.hpp"
#include "unipr/tokenio.hpp"

namespace unipr {

/// Exhaustive inner-product index over unit-norm rows.
struct RetrievalIndex {
  MatF descriptors;  // N x dim, unit rows
  std::vector<FrameMeta> metas;

  std::size_t size() const { return metas.size(); }
  Eigen::Index dim() const { return descriptors.cols(); }
  bool empty() const { return metas.empty(); }
};

/// Rows are re-normalized on ingest.
inline RetrievalIndex build_index(MatF descriptors, std::vector<FrameMeta> metas) {
  if (static_cast<std::size_t>(descriptors.rows()) != metas.size())
    fail(ErrorKind::InvalidArgument,
         "build_index: " + std::to_string(descriptors.rows()) + " descriptors but " +
             std::to_string(metas.size()) + " metas");
  if (!all_finite(descriptors)) fail(ErrorKind::Numerical, "build_index: non-finite descriptor");
  for (Eigen::Index i = 0; i < descriptors.rows(); ++i) {
    double sq = 0;
    for (Eigen::Index j = 0; j < descriptors.cols(); ++j)
      sq += double(descriptors(i, j)) * double(descriptors(i, j));
    if (sq <= 0) fail(ErrorKind::Numerical, "build_index: zero descriptor row " + std::to_string(i));
    const double inv = 1.0 / std::sqrt(sq);
    for (Eigen::Index j = 0; j < descriptors.cols(); ++j)
      descriptors(i, j) = static_cast<float>(descriptors(i, j) * inv);
  }
  return {std::move(descriptors), std::move(metas)};
}

struct Neighbor {
  std::size_t id = 0;
  double similarity = 0;
  bool operator==(const Neighbor&) const = default;
};

/// Inner product accumulated in f64 in index order.
template <typename A, typename B>
double inner_product_f64(const A& a, const B& b) {
  double s = 0;
  for (Eigen::Index j = 0; j < a.size(); ++j) s += double(a[j]) * double(b[j]);
  return s;
}

/// Top-k by similarity, descending; ties broken by ascending id.
template <typename Derived>
std::vector<Neighbor> knn_query(const RetrievalIndex& index,
                                const Eigen::MatrixBase<Derived>& query, std::size_t k) {
  require(k >= 1, "knn_query: k must be >= 1");
  if (index.empty()) fail(ErrorKind::InvalidArgument, "knn_query: index is empty");
  require(query.size() == index.dim(), "knn_query: query width " +
                                           std::to_string(query.size()) + " vs index " +
                                           std::to_string(index.dim()));
  std::vector<Neighbor> all(index.size());
  for (std::size_t i = 0; i < index.size(); ++i)
    all[i] = {i, inner_product_f64(index.descriptors.row(static_cast<Eigen::Index>(i)), query)};
  const std::size_t kk = std::min(k, all.size());
  auto better = [](const Neighbor& a, const Neighbor& b) {
    return a.similarity > b.similarity || (a.similarity == b.similarity && a.id < b.id);
  };
  std::partial_sort(all.begin(), all.begin() + static_cast<std::ptrdiff_t>(kk), all.end(), better);
  all.resize(kk);
  return all;
}

struct PositiveRule {
  enum class Kind { DistanceM, FrameGap };
  Kind kind = Kind::DistanceM;
  double threshold = 25.0;

  static PositiveRule distance_m(double m) { return {Kind::DistanceM, m}; }
  static PositiveRule frame_gap(double frames) { return {Kind::FrameGap, frames}; }

  void validate() const { require(threshold > 0, "positive rule: threshold must be > 0"); }

  std::string str() const {
    std::ostringstream os;
    os << (kind == Kind::DistanceM ? "distance_m" : "frame_gap") << "=" << threshold;
    return os.str();
  }

  bool matches(const FrameMeta& query, const FrameMeta& db) const {
    if (kind == Kind::DistanceM) {
      if (!query.position || !db.position)
        fail(ErrorKind::InvalidArgument, "distance rule needs positions for " +
                                             query.frame_id + " and " + db.frame_id);
      const double de = query.position->east - db.position->east;
      const double dn = query.position->north - db.position->north;
      return std::sqrt(de * de + dn * dn) <= threshold;
    }
    if (!query.frame_index || !db.frame_index)
      fail(ErrorKind::InvalidArgument, "frame-gap rule needs frame_index for " +
                                           query.frame_id + " and " + db.frame_id);
    return std::abs(double(*query.frame_index - *db.frame_index)) <= threshold;
  }
};

inline std::string kind_name(PositiveRule::Kind k) {
  return k == PositiveRule::Kind::DistanceM ? "distance_m" : "frame_gap";
}

struct RecallReport {
  std::vector<std::size_t> ks;
  std::vector<double> values;  // fraction in [0,1]; empty when undefined
  std::vector<std::size_t> hits;  // retained queries with a positive in the top k
  PositiveRule rule;
  std::size_t num_queries = 0;
  std::size_t num_queries_with_positives = 0;

  bool defined() const { return num_queries_with_positives > 0; }

  double at(std::size_t k) const {
    for (std::size_t i = 0; i < ks.size(); ++i)
      if (ks[i] == k && defined()) return values[i];
    fail(ErrorKind::InvalidArgument, "recall report has no value for k=" + std::to_string(k));
  }
};

inline nlohmann::json to_json(const RecallReport& r) {
  nlohmann::json j;
  j["rule"] = {{"kind", kind_name(r.rule.kind)}, {"threshold", r.rule.threshold}};
  j["num_queries"] = r.num_queries;
  j["num_queries_with_positives"] = r.num_queries_with_positives;
  j["defined"] = r.defined();
  nlohmann::json rec = nlohmann::json::object();
  for (std::size_t i = 0; i < r.ks.size(); ++i)
    rec["R@" + std::to_string(r.ks[i])] = r.defined() ? nlohmann::json(r.values[i]) : nlohmann::json();
  j["recall"] = rec;
  return j;
}

/// Ranked neighbour lists per query, deep enough for the largest k.
inline std::vector<std::vector<Neighbor>> rank_queries(const RetrievalIndex& index,
                                                       const MatF& queries, std::size_t depth) {
  std::vector<std::vector<Neighbor>> out;
  out.reserve(static_cast<std::size_t>(queries.rows()));
  for (Eigen::Index q = 0; q < queries.rows(); ++q)
    out.push_back(knn_query(index, queries.row(q), depth));
  return out;
}

/// Recall from precomputed rankings. Queries with no positive anywhere in
/// the database are excluded from the denominator.
inline RecallReport recall_from_rankings(const std::vector<std::vector<Neighbor>>& rankings,
                                         const std::vector<FrameMeta>& db_metas,
                                         const std::vector<FrameMeta>& query_metas,
                                         const PositiveRule& rule,
                                         std::vector<std::size_t> ks) {
  rule.validate();
  require(!ks.empty(), "recall: ks must be non-empty");
  require(rankings.size() == query_metas.size(), "recall: rankings/query metas size mismatch");
  std::sort(ks.begin(), ks.end());
  ks.erase(std::unique(ks.begin(), ks.end()), ks.end());
  require(ks.front() >= 1, "recall: k must be >= 1");

  RecallReport rep;
  rep.ks = ks;
  rep.rule = rule;
  rep.num_queries = query_metas.size();
  std::vector<std::size_t> hits(ks.size(), 0);
  for (std::size_t q = 0; q < query_metas.size(); ++q) {
    bool any = false;
    for (const auto& m : db_metas)
      if (rule.matches(query_metas[q], m)) {
        any = true;
        break;
      }
    if (!any) continue;
    ++rep.num_queries_with_positives;
    // Rank (1-based) of the first positive in the retrieved list.
    std::size_t first = 0;
    for (std::size_t r = 0; r < rankings[q].size(); ++r)
      if (rule.matches(query_metas[q], db_metas[rankings[q][r].id])) {
        first = r + 1;
        break;
      }
    if (first == 0) continue;
    for (std::size_t i = 0; i < ks.size(); ++i)
      if (first <= ks[i]) ++hits[i];
  }
  rep.hits = hits;
  if (rep.defined())
    for (auto h : hits)
      rep.values.push_back(double(h) / double(rep.num_queries_with_positives));
  return rep;
}

inline RecallReport recall_at_k(const RetrievalIndex& index, const MatF& queries,
                                const std::vector<FrameMeta>& query_metas,
                                const PositiveRule& rule, std::vector<std::size_t> ks) {
  require(!ks.empty(), "recall: ks must be non-empty");
  require(static_cast<std::size_t>(queries.rows()) == query_metas.size(),
          "recall: queries/metas size mismatch");
  const std::size_t depth = *std::max_element(ks.begin(), ks.end());
  return recall_from_rankings(rank_queries(index, queries, depth), index.metas, query_metas,
                              rule, std::move(ks));
}

// ---------------------------------------------------------------------------
// Sliding windows.

/// S consecutive frames of one sequence; the window's meta is its anchor's.
struct Window {
  std::string sequence_id;
  std::vector<std::size_t> frame_rows;  // indices into the manifest/container
  FrameMeta meta;
};

struct WindowSet {
  std::vector<Window> windows;
  std::size_t skipped_sequences = 0;  // shorter than S
};

inline WindowSet make_windows(const std::vector<FrameMeta>& manifest, std::size_t length,
                              std::size_t stride = 1) {
  require(length >= 1, "make_windows: S must be >= 1");
  require(stride >= 1, "make_windows: stride must be >= 1");
  std::map<std::string, std::vector<std::size_t>> by_seq;
  std::vector<std::string> order;
  for (std::size_t i = 0; i < manifest.size(); ++i) {
    auto [it, inserted] = by_seq.try_emplace(manifest[i].sequence_id);
    if (inserted) order.push_back(manifest[i].sequence_id);
    it->second.push_back(i);
  }
  WindowSet out;
  for (const auto& seq : order) {
    auto rows = by_seq[seq];
    std::stable_sort(rows.begin(), rows.end(), [&](std::size_t a, std::size_t b) {
      return manifest[a].index_in_sequence < manifest[b].index_in_sequence;
    });
    if (rows.size() < length) {
      ++out.skipped_sequences;
      continue;
    }
    for (std::size_t s = 0; s + length <= rows.size(); s += stride) {
      Window w;
      w.sequence_id = seq;
      w.frame_rows.assign(rows.begin() + static_cast<std::ptrdiff_t>(s),
                          rows.begin() + static_cast<std::ptrdiff_t>(s + length));
      w.meta = manifest[w.frame_rows.front()];
      if (length > 1) w.meta.frame_id += "+" + std::to_string(length - 1);
      out.windows.push_back(std::move(w));
    }
  }
  return out;
}

inline FrameSequence materialize(const Window& w, const Dataset& ds) {
  FrameSequence seq;
  for (auto r : w.frame_rows) {
    require(r < ds.frames.size(), "materialize: frame row out of range");
    seq.frames.push_back(ds.frames[r]);
    seq.metas.push_back(ds.metas[r]);
  }
  return seq;
}

/// Descriptors for every window, as rows.
template <typename T>
MatF describe_windows(const WindowSet& ws, const Dataset& ds, const AggregatorParams<T>& params,
                      const SinkhornConfig& cfg) {
  MatF out(static_cast<Eigen::Index>(ws.windows.size()),
           static_cast<Eigen::Index>(params.layout().total()));
  for (std::size_t i = 0; i < ws.windows.size(); ++i) {
    std::vector<const TokenSet*> frames;
    for (auto r : ws.windows[i].frame_rows) frames.push_back(&ds.frames.at(r));
    out.row(static_cast<Eigen::Index>(i)) =
        describe_sequence(frames, params, cfg).template cast<float>();
  }
  return out;
}

inline std::vector<FrameMeta> window_metas(const WindowSet& ws) {
  std::vector<FrameMeta> out;
  for (const auto& w : ws.windows) out.push_back(w.meta);
  return out;
}

// ---------------------------------------------------------------------------
// Sweeps over positive rules and sequence lengths.

/// Database and query descriptors for one sequence length.
struct RetrievalProblem {
  RetrievalIndex index;
  MatF queries;
  std::vector<FrameMeta> query_metas;
};

struct SweepCell {
  std::size_t seq_len = 1;
  RecallReport report;
};

/// Rankings are computed once per sequence length and shared by all rules.
inline std::vector<SweepCell> sweep(const std::function<RetrievalProblem(std::size_t)>& builder,
                                    const std::vector<PositiveRule>& rules,
                                    const std::vector<std::size_t>& seq_lens,
                                    const std::vector<std::size_t>& ks) {
  require(!rules.empty() && !seq_lens.empty() && !ks.empty(), "sweep: grids must be non-empty");
  const std::size_t depth = *std::max_element(ks.begin(), ks.end());
  std::vector<SweepCell> cells;
  for (auto s : seq_lens) {
    const auto prob = builder(s);
    const auto rankings = rank_queries(prob.index, prob.queries, depth);
    for (const auto& rule : rules)
      cells.push_back({s, recall_from_rankings(rankings, prob.index.metas, prob.query_metas,
                                               rule, ks)});
  }
  return cells;
}

/// True when, for every sequence length and rule kind, the number of hits
/// never drops as the threshold grows, and neither does the fraction when
/// both thresholds retain the same queries.
inline bool recall_monotone_in_threshold(const std::vector<SweepCell>& cells) {
  for (const auto& a : cells)
    for (const auto& b : cells) {
      if (a.seq_len != b.seq_len || a.report.rule.kind != b.report.rule.kind) continue;
      if (a.report.rule.threshold > b.report.rule.threshold) continue;
      for (std::size_t i = 0; i < a.report.ks.size(); ++i) {
        if (a.report.hits[i] > b.report.hits[i]) return false;
        if (a.report.num_queries_with_positives == b.report.num_queries_with_positives &&
            a.report.defined() && a.report.values[i] > b.report.values[i])
          return false;
      }
    }
  return true;
}

inline std::string format_table(const std::vector<SweepCell>& cells) {
  std::ostringstream os;
  if (cells.empty()) return "";
  os << std::left << std::setw(6) << "S" << std::setw(18) << "rule";
  for (auto k : cells.front().report.ks) os << std::right << std::setw(9) << ("R@" + std::to_string(k));
  os << std::right << std::setw(10) << "queries" << "\n";
  for (const auto& c : cells) {
    os << std::left << std::setw(6) << c.seq_len << std::setw(18) << c.report.rule.str();
    for (std::size_t i = 0; i < c.report.ks.size(); ++i) {
      os << std::right << std::setw(9);
      if (c.report.defined())
        os << std::fixed << std::setprecision(2) << 100.0 * c.report.values[i];
      else
        os << "n/a";
    }
    os << std::setw(10) << c.report.num_queries_with_positives << "\n";
  }
  return os.str();
}

}  // namespace unipr
