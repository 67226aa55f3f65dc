#pragma once

// Heterogeneous graph data model: four node kinds, typed weighted directed
// edges, the scene skeleton built from detections, and the bridge matrices
// linking scene instances to commonsense classes.

#include <algorithm>
#include <array>
#include <cmath>
#include <compare>
#include <cstdint>
#include <numeric>
#include <optional>
#include <set>
#include <span>
#include <string>
#include <string_view>
#include <tuple>
#include <vector>

#include "gbnet/box.hpp"
#include "gbnet/errors.hpp"
#include "gbnet/tensor.hpp"

namespace gbnet {

enum class NodeKind : std::uint8_t { SE = 0, SP = 1, CE = 2, CP = 3 };

inline constexpr std::array<NodeKind, 4> kNodeKinds{NodeKind::SE, NodeKind::SP, NodeKind::CE, NodeKind::CP};

inline constexpr std::size_t kind_index(NodeKind k) { return static_cast<std::size_t>(k); }

inline std::string_view to_string(NodeKind k) {
  switch (k) {
    case NodeKind::SE: return "SE";
    case NodeKind::SP: return "SP";
    case NodeKind::CE: return "CE";
    case NodeKind::CP: return "CP";
  }
  return "?";
}

inline std::optional<NodeKind> parse_node_kind(std::string_view s) {
  for (NodeKind k : kNodeKinds) {
    if (to_string(k) == s) return k;
  }
  return std::nullopt;
}

enum class EdgeFamily : std::uint8_t { scene = 0, commonsense = 1, bridge = 2 };

struct EdgeType {
  std::string name;
  EdgeFamily family = EdgeFamily::commonsense;
  NodeKind src = NodeKind::CE;
  NodeKind dst = NodeKind::CE;

  auto operator<=>(const EdgeType&) const = default;
  bool operator==(const EdgeType&) const = default;
};

inline std::string describe(const EdgeType& t) {
  return t.name + "[" + std::string(to_string(t.src)) + "->" + std::string(to_string(t.dst)) + "]";
}

namespace edge_types {

inline const EdgeType subject_of{"subjectOf", EdgeFamily::scene, NodeKind::SE, NodeKind::SP};
inline const EdgeType object_of{"objectOf", EdgeFamily::scene, NodeKind::SE, NodeKind::SP};
inline const EdgeType has_subject{"hasSubject", EdgeFamily::scene, NodeKind::SP, NodeKind::SE};
inline const EdgeType has_object{"hasObject", EdgeFamily::scene, NodeKind::SP, NodeKind::SE};

inline const EdgeType entity_classified_to{"classifiedTo", EdgeFamily::bridge, NodeKind::SE, NodeKind::CE};
inline const EdgeType entity_has_instance{"hasInstance", EdgeFamily::bridge, NodeKind::CE, NodeKind::SE};
inline const EdgeType predicate_classified_to{"classifiedTo", EdgeFamily::bridge, NodeKind::SP, NodeKind::CP};
inline const EdgeType predicate_has_instance{"hasInstance", EdgeFamily::bridge, NodeKind::CP, NodeKind::SP};

inline const std::array<EdgeType, 4> scene{subject_of, object_of, has_subject, has_object};
inline const std::array<EdgeType, 4> bridge{entity_classified_to, predicate_classified_to, entity_has_instance,
                                            predicate_has_instance};

}  // namespace edge_types

// Both kinds use the same reserved label; labels are unique within a kind.
inline constexpr std::string_view kBackgroundLabel = "__background__";

using NodeId = std::uint32_t;

struct Node {
  NodeId id = 0;
  NodeKind kind = NodeKind::SE;
  std::optional<Box> box;           // SE
  std::optional<NodeId> subject;    // SP
  std::optional<NodeId> object;     // SP
  std::optional<std::string> label; // CE, CP
};

struct Edge {
  NodeId src = 0;
  NodeId dst = 0;
  std::size_t type = 0;  // index into HeteroGraph::edge_types()
  double weight = 1.0;
};

class HeteroGraph {
 public:
  NodeId add_node(Node node) {
    node.id = static_cast<NodeId>(nodes_.size());
    switch (node.kind) {
      case NodeKind::SE:
        if (!node.box) throw InputError("SE node without a box");
        require_valid_box(*node.box);
        break;
      case NodeKind::SP:
        if (!node.subject || !node.object) throw InputError("SP node without subject/object");
        if (*node.subject == *node.object) throw InputError("SP node with identical subject and object");
        for (NodeId e : {*node.subject, *node.object}) {
          if (e >= nodes_.size() || nodes_[e].kind != NodeKind::SE) {
            throw InputError("SP endpoint " + std::to_string(e) + " is not an SE node");
          }
        }
        break;
      case NodeKind::CE:
      case NodeKind::CP:
        if (!node.label || node.label->empty()) throw InputError("commonsense node without a label");
        if (find_label(node.kind, *node.label)) {
          throw UniquenessError("duplicate " + std::string(to_string(node.kind)) + " label '" + *node.label + "'");
        }
        break;
    }
    const std::size_t k = kind_index(node.kind);
    local_.push_back(static_cast<Index>(members_[k].size()));
    members_[k].push_back(node.id);
    nodes_.push_back(std::move(node));
    in_edges_.emplace_back();
    return nodes_.back().id;
  }

  void add_edge(NodeId src, NodeId dst, const EdgeType& type, double weight) {
    if (src >= nodes_.size() || dst >= nodes_.size()) throw InputError("dangling edge endpoint");
    if (!std::isfinite(weight)) throw InputError("non-finite edge weight on " + describe(type));
    if (nodes_[src].kind != type.src || nodes_[dst].kind != type.dst) {
      throw SignatureError("edge " + std::to_string(src) + "->" + std::to_string(dst) + " does not match " +
                           describe(type));
    }
    const std::size_t t = intern(type);
    if (!keys_.insert({src, dst, t}).second) {
      throw UniquenessError("duplicate edge " + std::to_string(src) + "->" + std::to_string(dst) + " of type " +
                            describe(type));
    }
    edges_.push_back(Edge{src, dst, t, weight});
    by_type_[t].push_back(edges_.size() - 1);
    in_edges_[dst].push_back(edges_.size() - 1);
  }

  const std::vector<Node>& nodes() const { return nodes_; }
  const Node& node(NodeId id) const { return nodes_.at(id); }
  const std::vector<Edge>& edges() const { return edges_; }
  const std::vector<EdgeType>& edge_types() const { return types_; }
  const EdgeType& type_of(const Edge& e) const { return types_[e.type]; }

  std::optional<std::size_t> find_type(const EdgeType& type) const {
    for (std::size_t i = 0; i < types_.size(); ++i) {
      if (types_[i] == type) return i;
    }
    return std::nullopt;
  }

  std::span<const std::size_t> edges_of_type(std::size_t type_index) const { return by_type_.at(type_index); }
  std::span<const std::size_t> in_edges(NodeId dst) const { return in_edges_.at(dst); }

  std::span<const NodeId> members(NodeKind k) const { return members_[kind_index(k)]; }
  std::size_t count(NodeKind k) const { return members_[kind_index(k)].size(); }

  // Position of a node among the nodes of its own kind.
  Index local_index(NodeId id) const { return local_.at(id); }

  std::optional<NodeId> find_label(NodeKind k, std::string_view label) const {
    for (NodeId id : members_[kind_index(k)]) {
      if (nodes_[id].label && *nodes_[id].label == label) return id;
    }
    return std::nullopt;
  }

  // Commonsense portion must carry exactly one background node per class kind.
  void validate_commonsense() const {
    for (NodeKind k : {NodeKind::CE, NodeKind::CP}) {
      if (!find_label(k, kBackgroundLabel)) {
        throw InputError("commonsense graph has no " + std::string(to_string(k)) + " background node");
      }
    }
  }

  // Copy with every edge of one type removed.
  HeteroGraph without_edge_type(const EdgeType& type) const {
    HeteroGraph g;
    for (const Node& n : nodes_) g.add_node(n);
    for (const EdgeType& t : types_) g.intern(t);
    for (const Edge& e : edges_) {
      if (types_[e.type] != type) g.add_edge(e.src, e.dst, types_[e.type], e.weight);
    }
    return g;
  }

 private:
  std::size_t intern(const EdgeType& type) {
    if (auto at = find_type(type)) return *at;
    types_.push_back(type);
    by_type_.emplace_back();
    return types_.size() - 1;
  }

  std::vector<Node> nodes_;
  std::vector<Edge> edges_;
  std::vector<EdgeType> types_;
  std::vector<std::vector<std::size_t>> by_type_;
  std::vector<std::vector<std::size_t>> in_edges_;
  std::array<std::vector<NodeId>, 4> members_;
  std::vector<Index> local_;
  std::set<std::tuple<NodeId, NodeId, std::size_t>> keys_;
};

struct Detection {
  Box box;
  int feature_id = 0;
};

// Ordered pairs (i, j), i != j, enumerated row-major; returns the SP position.
inline Index pair_index(Index subject, Index object, Index n_entities) {
  return subject * (n_entities - 1) + (object < subject ? object : object - 1);
}

inline std::pair<Index, Index> pair_at(Index sp, Index n_entities) {
  const Index s = sp / (n_entities - 1);
  const Index r = sp % (n_entities - 1);
  return {s, r < s ? r : r + 1};
}

// Appends one SE per detection and one SP per ordered pair of distinct
// detections to a copy of `base`, linking each SP with the four scene edge
// types at weight 1.
inline HeteroGraph build_scene_skeleton(std::span<const Detection> detections, const HeteroGraph& base = {}) {
  for (const Detection& d : detections) require_valid_box(d.box);
  HeteroGraph g = base;
  std::vector<NodeId> se;
  se.reserve(detections.size());
  for (const Detection& d : detections) {
    Node n;
    n.kind = NodeKind::SE;
    n.box = d.box;
    se.push_back(g.add_node(std::move(n)));
  }
  for (std::size_t i = 0; i < se.size(); ++i) {
    for (std::size_t j = 0; j < se.size(); ++j) {
      if (i == j) continue;
      Node n;
      n.kind = NodeKind::SP;
      n.subject = se[i];
      n.object = se[j];
      const NodeId sp = g.add_node(std::move(n));
      g.add_edge(se[i], sp, edge_types::subject_of, 1.0);
      g.add_edge(se[j], sp, edge_types::object_of, 1.0);
      g.add_edge(sp, se[i], edge_types::has_subject, 1.0);
      g.add_edge(sp, se[j], edge_types::has_object, 1.0);
    }
  }
  return g;
}

// Indices of the k largest entries; ties go to the lower index.
inline std::vector<Index> top_k_indices(const Eigen::Ref<const Eigen::RowVectorXd>& row, Index k) {
  std::vector<Index> order(static_cast<std::size_t>(row.size()));
  std::iota(order.begin(), order.end(), Index{0});
  const Index keep = std::min<Index>(k, row.size());
  std::partial_sort(order.begin(), order.begin() + keep, order.end(), [&row](Index a, Index b) {
    if (row(a) != row(b)) return row(a) > row(b);
    return a < b;
  });
  order.resize(static_cast<std::size_t>(keep));
  return order;
}

// 0/1 mask keeping the top k entries of every row.
inline Matrix top_k_mask(const Matrix& rows, Index k) {
  Matrix mask = Matrix::Zero(rows.rows(), rows.cols());
  for (Index i = 0; i < rows.rows(); ++i) {
    for (Index j : top_k_indices(rows.row(i), k)) mask(i, j) = 1.0;
  }
  return mask;
}

// Bridge weights: entity rows are SE x CE, predicate rows are SP x CP. The
// classifiedTo and hasInstance directions share one matrix.
struct BridgeSet {
  Matrix entity;
  Matrix predicate;
  Index k = 1;

  double classified_to(NodeKind scene_kind, Index scene, Index cls) const {
    return scene_kind == NodeKind::SE ? entity(scene, cls) : predicate(scene, cls);
  }
  double has_instance(NodeKind class_kind, Index cls, Index scene) const {
    return class_kind == NodeKind::CE ? entity(scene, cls) : predicate(scene, cls);
  }
};

struct BridgeEdge {
  EdgeType type;
  Index src = 0;  // local index within the source kind
  Index dst = 0;
  double weight = 0.0;
};

// Nonzero bridges materialized as edges in both directions.
inline std::vector<BridgeEdge> bridge_edges(const BridgeSet& b) {
  std::vector<BridgeEdge> out;
  auto emit = [&out](const Matrix& m, const EdgeType& fwd, const EdgeType& rev) {
    for (Index i = 0; i < m.rows(); ++i) {
      for (Index j = 0; j < m.cols(); ++j) {
        if (m(i, j) == 0.0) continue;
        out.push_back({fwd, i, j, m(i, j)});
        out.push_back({rev, j, i, m(i, j)});
      }
    }
  };
  emit(b.entity, edge_types::entity_classified_to, edge_types::entity_has_instance);
  emit(b.predicate, edge_types::predicate_classified_to, edge_types::predicate_has_instance);
  return out;
}

// Entity bridges from detector class distributions: each SE keeps its top-k
// classes at the detector's probabilities. Predicate bridges start empty.
inline BridgeSet init_entity_bridges(const Matrix& label_dists, Index k, Index n_predicates = 0,
                                     Index n_predicate_classes = 0) {
  if (k < 1) throw ConfigError("K_bridge must be at least 1");
  for (Index i = 0; i < label_dists.rows(); ++i) {
    if ((label_dists.row(i).array() < 0.0).any() || std::abs(label_dists.row(i).sum() - 1.0) > 1e-6) {
      throw InputError("detector distribution row " + std::to_string(i) + " is not a probability vector");
    }
  }
  BridgeSet b;
  b.k = std::min<Index>(k, label_dists.cols());
  b.entity = label_dists.cwiseProduct(top_k_mask(label_dists, b.k));
  b.predicate = Matrix::Zero(n_predicates, n_predicate_classes);
  return b;
}

}  // namespace gbnet
