#pragma once

// Turns dataset records into model inputs and ground-truth triplets indexed
// by commonsense class.

#include <string>
#include <vector>

#include "gbnet/commonsense.hpp"
#include "gbnet/dataset.hpp"
#include "gbnet/errors.hpp"
#include "gbnet/evaluator.hpp"
#include "gbnet/model.hpp"

namespace gbnet {

struct LabelMap {
  std::vector<Index> entity;     // dataset entity index -> CE index
  std::vector<Index> predicate;  // dataset predicate index -> CP index
  Index background_entity = 0;
  Index background_predicate = 0;
};

inline LabelMap map_labels(const Dataset& ds, const CommonsenseGraph& kg) {
  LabelMap m;
  for (const std::string& l : ds.entity_labels) {
    auto c = kg.class_index(NodeKind::CE, l);
    if (!c) throw InputError("entity label '" + l + "' is not in the commonsense graph");
    m.entity.push_back(*c);
  }
  for (const std::string& l : ds.predicate_labels) {
    auto c = kg.class_index(NodeKind::CP, l);
    if (!c) throw InputError("predicate label '" + l + "' is not in the commonsense graph");
    m.predicate.push_back(*c);
  }
  m.background_entity = kg.background(NodeKind::CE);
  m.background_predicate = kg.background(NodeKind::CP);
  return m;
}

// Boxes the SE nodes are built from: detector boxes for SGGen, the
// ground-truth boxes otherwise.
inline const std::vector<Box>& scene_boxes(const SceneRecord& r, Task mode) {
  return mode == Task::SGGen ? r.boxes : r.gt_boxes;
}

inline SceneInputs make_scene_inputs(const SceneRecord& r, const LabelMap& labels, const CommonsenseGraph& kg,
                                     Task mode) {
  const Index n = static_cast<Index>(r.size());
  SceneInputs in;
  in.boxes = scene_boxes(r, mode);
  in.entity_features = r.features;
  in.union_features = mode == Task::SGGen ? union_features(r.features, r.boxes) : r.union_features;
  in.label_dists = Matrix::Zero(n, kg.entity_count());
  if (r.detector_dists.cols() != static_cast<Index>(labels.entity.size())) {
    throw ShapeError("detector distributions do not match the entity label list");
  }
  for (Index j = 0; j < r.detector_dists.cols(); ++j) {
    in.label_dists.col(labels.entity[static_cast<std::size_t>(j)]) = r.detector_dists.col(j);
  }
  for (int c : r.gt_classes) in.gt_entity_classes.push_back(labels.entity.at(static_cast<std::size_t>(c)));
  return in;
}

inline std::vector<TruthTriplet> truth_triplets(const SceneRecord& r, const LabelMap& labels) {
  std::vector<TruthTriplet> out;
  for (const SceneTriplet& t : r.triplets) {
    const auto s = static_cast<std::size_t>(t.subject);
    const auto o = static_cast<std::size_t>(t.object);
    out.push_back({t.subject, labels.entity.at(static_cast<std::size_t>(r.gt_classes.at(s))), r.gt_boxes.at(s),
                   labels.predicate.at(static_cast<std::size_t>(t.predicate)), t.object,
                   labels.entity.at(static_cast<std::size_t>(r.gt_classes.at(o))), r.gt_boxes.at(o)});
  }
  return out;
}

// Model dimensions implied by a dataset and a commonsense graph.
inline ModelConfig configure_model(ModelConfig c, const Dataset& ds, const CommonsenseGraph& kg) {
  c.entity_feature_dim = ds.feat_dim;
  c.union_feature_dim = ds.feat_dim + kGeometryDim;
  c.embedding_dim = kg.embedding_dim();
  c.layout = SlotLayout::from_commonsense(kg);
  c.validate();
  return c;
}

}  // namespace gbnet
