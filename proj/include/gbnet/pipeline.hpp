#pragma once

// Dataset-level evaluation and per-scene inference on top of the model.

#include <ostream>
#include <string>
#include <vector>

#include "gbnet/commonsense.hpp"
#include "gbnet/dataset.hpp"
#include "gbnet/evaluator.hpp"
#include "gbnet/model.hpp"
#include "gbnet/scene.hpp"

namespace gbnet {

struct EvalOptions {
  std::vector<Task> tasks{Task::SGGen, Task::SGCls, Task::PredCls};
  std::vector<Index> ks{20, 50, 100};
  std::vector<bool> constrained{true, false};
};

struct SceneResult {
  std::int64_t image_id = 0;
  Task task = Task::SGCls;
  std::vector<Box> boxes;
  ForwardOutput output;
};

inline SceneResult infer_scene(const SceneRecord& r, const LabelMap& labels, const CommonsenseGraph& kg,
                               const ModelParams& params, Task task) {
  SceneResult out;
  out.image_id = r.image_id;
  out.task = task;
  const SceneInputs in = make_scene_inputs(r, labels, kg, task);
  const HeteroGraph graph = build_scene_graph(in.boxes, kg);
  out.boxes = in.boxes;
  out.output = forward(graph, in, kg, params, task);
  return out;
}

// R@K and mR@K for every requested task, K and constraint setting. Scenes
// without ground-truth triplets are skipped.
inline MetricReport evaluate_dataset(const Dataset& ds, const CommonsenseGraph& kg, const ModelParams& params,
                                     const EvalOptions& opt = {}) {
  const LabelMap labels = map_labels(ds, kg);
  MetricReport report;
  for (Task task : opt.tasks) {
    std::vector<std::vector<ScoredTriplet>> ranked_c, ranked_u;
    std::vector<std::vector<TruthTriplet>> truths;
    Index k_max = 1;
    for (Index k : opt.ks) k_max = std::max(k_max, k);
    for (const SceneRecord& r : ds.records) {
      if (r.triplets.empty()) continue;
      const SceneResult res = infer_scene(r, labels, kg, params, task);
      ranked_c.push_back(extract_topk(res.output.bridges, res.boxes, k_max, true, labels.background_predicate));
      ranked_u.push_back(extract_topk(res.output.bridges, res.boxes, k_max, false, labels.background_predicate));
      truths.push_back(truth_triplets(r, labels));
    }
    if (truths.empty()) throw InputError("evaluation set has no ground-truth triplets");
    for (bool constrained : opt.constrained) {
      for (Index k : opt.ks) {
        std::vector<ImageRecall> recalls;
        for (std::size_t i = 0; i < truths.size(); ++i) {
          recalls.push_back(match_and_recall(constrained ? ranked_c[i] : ranked_u[i], truths[i], k, task,
                                             kg.predicate_count()));
        }
        const RecallSummary s = aggregate_recall(recalls, labels.background_predicate);
        report.rows.push_back({task, "R", k, constrained, s.recall});
        report.rows.push_back({task, "mR", k, constrained, s.mean_recall});
        for (std::size_t c = 0; c < s.per_class.size(); ++c) {
          if (s.per_class[c]) {
            report.per_class.push_back({task, k, constrained, kg.label(NodeKind::CP, static_cast<Index>(c)), *s.per_class[c]});
          }
        }
      }
    }
  }
  return report;
}

// Graphviz rendering of a scene's extracted triplets.
inline void write_scene_dot(std::ostream& out, const SceneResult& res, const CommonsenseGraph& kg,
                            const std::vector<ScoredTriplet>& triplets) {
  out << "digraph scene_" << res.image_id << " {\n  rankdir=LR;\n";
  for (Index i = 0; i < res.output.bridges.entity.rows(); ++i) {
    const auto [c, score] = row_argmax(res.output.bridges.entity, i);
    out << "  e" << i << " [label=\"" << i << ": " << kg.label(NodeKind::CE, c) << " (" << text::format_double(score)
        << ")\"];\n";
  }
  for (const ScoredTriplet& t : triplets) {
    out << "  e" << t.subject << " -> e" << t.object << " [label=\"" << kg.label(NodeKind::CP, t.predicate) << " "
        << text::format_double(t.confidence) << "\"];\n";
  }
  out << "}\n";
}

}  // namespace gbnet
