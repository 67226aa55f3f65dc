#pragma once

// Triplet extraction from refined bridges, per-image recall at K, and the
// dataset-level R@K / mR@K summary.

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <cstdint>
#include <optional>
#include <ostream>
#include <span>
#include <string>
#include <tuple>
#include <vector>

#include "gbnet/box.hpp"
#include "gbnet/errors.hpp"
#include "gbnet/graph.hpp"
#include "gbnet/model.hpp"
#include "gbnet/tensor.hpp"
#include "gbnet/text.hpp"

namespace gbnet {

struct ScoredTriplet {
  Index subject = 0;
  Index subject_class = 0;
  Box subject_box;
  Index predicate = 0;  // CP class index
  Index object = 0;
  Index object_class = 0;
  Box object_box;
  double confidence = 0.0;
};

struct TruthTriplet {
  Index subject = 0;
  Index subject_class = 0;
  Box subject_box;
  Index predicate = 0;
  Index object = 0;
  Index object_class = 0;
  Box object_box;
};

// Highest entry of a bridge row; ties go to the lower class index.
inline std::pair<Index, double> row_argmax(const Matrix& m, Index row) {
  Index best = 0;
  for (Index j = 1; j < m.cols(); ++j) {
    if (m(row, j) > m(row, best)) best = j;
  }
  return {best, m.cols() ? m(row, best) : 0.0};
}

// Ranked candidate triplets. Each SE takes its best class; every SP pair then
// proposes each non-background predicate with a nonzero bridge weight at
// confidence s_subject * s_object * s_predicate. The constrained setting keeps
// only the best predicate per pair. Ranking is by confidence, then
// (subject, object, predicate).
inline std::vector<ScoredTriplet> extract_topk(const Matrix& entity_bridges, const Matrix& predicate_bridges,
                                               const std::vector<Box>& boxes, Index k, bool constrained,
                                               Index background_predicate) {
  if (k <= 0) throw ConfigError("K must be positive");
  const Index n = entity_bridges.rows();
  if (static_cast<Index>(boxes.size()) != n) throw ShapeError("one box per SE node expected");
  if (predicate_bridges.rows() != (n > 1 ? n * (n - 1) : 0)) throw ShapeError("predicate bridges do not cover the pairs");
  std::vector<std::pair<Index, double>> ent(static_cast<std::size_t>(n));
  for (Index i = 0; i < n; ++i) ent[static_cast<std::size_t>(i)] = row_argmax(entity_bridges, i);

  std::vector<ScoredTriplet> out;
  for (Index sp = 0; sp < predicate_bridges.rows(); ++sp) {
    const auto [s, o] = pair_at(sp, n);
    const auto& es = ent[static_cast<std::size_t>(s)];
    const auto& eo = ent[static_cast<std::size_t>(o)];
    auto make = [&](Index p) {
      return ScoredTriplet{s, es.first, boxes[static_cast<std::size_t>(s)], p, o, eo.first,
                           boxes[static_cast<std::size_t>(o)], es.second * eo.second * predicate_bridges(sp, p)};
    };
    std::optional<Index> best;
    for (Index p = 0; p < predicate_bridges.cols(); ++p) {
      if (p == background_predicate || predicate_bridges(sp, p) <= 0.0) continue;
      if (!constrained) {
        out.push_back(make(p));
      } else if (!best || predicate_bridges(sp, p) > predicate_bridges(sp, *best)) {
        best = p;
      }
    }
    if (constrained && best) out.push_back(make(*best));
  }
  std::sort(out.begin(), out.end(), [](const ScoredTriplet& a, const ScoredTriplet& b) {
    if (a.confidence != b.confidence) return a.confidence > b.confidence;
    return std::tie(a.subject, a.object, a.predicate) < std::tie(b.subject, b.object, b.predicate);
  });
  if (static_cast<Index>(out.size()) > k) out.resize(static_cast<std::size_t>(k));
  return out;
}

inline std::vector<ScoredTriplet> extract_topk(const BridgeSet& bridges, const std::vector<Box>& boxes, Index k,
                                               bool constrained, Index background_predicate) {
  return extract_topk(bridges.entity, bridges.predicate, boxes, k, constrained, background_predicate);
}

inline bool triplet_matches(const ScoredTriplet& p, const TruthTriplet& g, Task task, double iou_threshold = 0.5) {
  if (p.predicate != g.predicate || p.subject_class != g.subject_class || p.object_class != g.object_class) return false;
  if (task == Task::SGGen) {
    return iou(p.subject_box, g.subject_box) >= iou_threshold && iou(p.object_box, g.object_box) >= iou_threshold;
  }
  return p.subject == g.subject && p.object == g.object;
}

struct ImageRecall {
  double recall = 0.0;
  std::vector<std::uint64_t> hits;    // per predicate class
  std::vector<std::uint64_t> totals;  // per predicate class
};

// Recall of the first K predictions against the ground truth. Each prediction
// and each ground-truth triplet is used at most once; predictions are taken in
// rank order and may displace an earlier claim along an augmenting path, so
// the count equals the largest possible one-to-one matching.
inline ImageRecall match_and_recall(std::span<const ScoredTriplet> predictions, std::span<const TruthTriplet> truth,
                                    Index k, Task task, Index n_predicate_classes) {
  if (k <= 0) throw ConfigError("K must be positive");
  if (truth.empty()) throw InputError("recall needs at least one ground-truth triplet");
  const std::size_t np = std::min(predictions.size(), static_cast<std::size_t>(k));
  const std::size_t ng = truth.size();
  std::vector<std::vector<std::size_t>> adj(np);
  for (std::size_t i = 0; i < np; ++i) {
    for (std::size_t g = 0; g < ng; ++g) {
      if (triplet_matches(predictions[i], truth[g], task)) adj[i].push_back(g);
    }
  }
  std::vector<std::ptrdiff_t> owner(ng, -1);
  std::vector<char> seen;
  auto augment = [&](auto&& self, std::size_t i) -> bool {
    for (std::size_t g : adj[i]) {
      if (seen[g]) continue;
      seen[g] = 1;
      if (owner[g] < 0 || self(self, static_cast<std::size_t>(owner[g]))) {
        owner[g] = static_cast<std::ptrdiff_t>(i);
        return true;
      }
    }
    return false;
  };
  for (std::size_t i = 0; i < np; ++i) {
    seen.assign(ng, 0);
    augment(augment, i);
  }
  ImageRecall r;
  r.hits.assign(static_cast<std::size_t>(n_predicate_classes), 0);
  r.totals.assign(static_cast<std::size_t>(n_predicate_classes), 0);
  std::size_t matched = 0;
  for (std::size_t g = 0; g < ng; ++g) {
    const auto c = static_cast<std::size_t>(truth[g].predicate);
    if (c >= r.totals.size()) throw InputError("ground-truth predicate out of range");
    ++r.totals[c];
    if (owner[g] >= 0) {
      ++r.hits[c];
      ++matched;
    }
  }
  r.recall = static_cast<double>(matched) / static_cast<double>(ng);
  return r;
}

struct RecallSummary {
  double recall = 0.0;       // mean of per-image recall
  double mean_recall = 0.0;  // mean over classes present in the ground truth
  std::vector<std::optional<double>> per_class;
};

// Per-class recall pools hits over images; the background class is left out.
inline RecallSummary aggregate_recall(std::span<const ImageRecall> images, Index background_predicate) {
  if (images.empty()) throw InputError("recall aggregation needs at least one image");
  RecallSummary s;
  const std::size_t nc = images.front().totals.size();
  std::vector<std::uint64_t> hits(nc, 0), totals(nc, 0);
  for (const ImageRecall& im : images) {
    s.recall += im.recall;
    for (std::size_t c = 0; c < nc; ++c) {
      hits[c] += im.hits.at(c);
      totals[c] += im.totals.at(c);
    }
  }
  s.recall /= static_cast<double>(images.size());
  s.per_class.assign(nc, std::nullopt);
  double acc = 0.0;
  int present = 0;
  for (std::size_t c = 0; c < nc; ++c) {
    if (static_cast<Index>(c) == background_predicate || totals[c] == 0) continue;
    const double rc = static_cast<double>(hits[c]) / static_cast<double>(totals[c]);
    s.per_class[c] = rc;
    acc += rc;
    ++present;
  }
  s.mean_recall = present ? acc / present : 0.0;
  return s;
}

struct MetricRow {
  Task task = Task::SGCls;
  std::string metric;  // "R" or "mR"
  Index k = 0;
  bool constrained = true;
  double value = 0.0;
};

struct ClassRecallRow {
  Task task = Task::SGCls;
  Index k = 0;
  bool constrained = true;
  std::string predicate;
  double value = 0.0;
};

struct MetricReport {
  std::vector<MetricRow> rows;
  std::vector<ClassRecallRow> per_class;

  std::optional<double> find(Task task, std::string_view metric, Index k, bool constrained) const {
    for (const MetricRow& r : rows) {
      if (r.task == task && r.metric == metric && r.k == k && r.constrained == constrained) return r.value;
    }
    return std::nullopt;
  }
};

inline void write_metrics_tsv(std::ostream& out, const MetricReport& report) {
  out << "task\tmetric\tK\tconstrained\tvalue\n";
  for (const MetricRow& r : report.rows) {
    out << to_string(r.task) << '\t' << r.metric << '\t' << r.k << '\t' << (r.constrained ? "yes" : "no") << '\t'
        << text::format_double(r.value) << '\n';
  }
}

inline void write_metrics_table(std::ostream& out, const MetricReport& report) {
  char buf[128];
  for (const MetricRow& r : report.rows) {
    std::snprintf(buf, sizeof(buf), "%-8s %-3s@%-4lld %-13s %8.4f\n", std::string(to_string(r.task)).c_str(),
                  r.metric.c_str(), static_cast<long long>(r.k), r.constrained ? "constrained" : "unconstrained",
                  r.value);
    out << buf;
  }
}

}  // namespace gbnet
