#pragma once

// Graph-bridging forward computation: node-state initialization, typed
// message passing with per-kind GRU updates, and bridge refinement by an
// asymmetric attention similarity followed by per-row top-K sparsification.

#include <array>
#include <cmath>
#include <cstdint>
#include <memory>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include "gbnet/commonsense.hpp"
#include "gbnet/errors.hpp"
#include "gbnet/graph.hpp"
#include "gbnet/tensor.hpp"

namespace gbnet {

enum class Task : std::uint8_t { SGGen = 0, SGCls = 1, PredCls = 2 };
using InferenceMode = Task;

inline std::string_view to_string(Task t) {
  switch (t) {
    case Task::SGGen: return "sggen";
    case Task::SGCls: return "sgcls";
    case Task::PredCls: return "predcls";
  }
  return "?";
}

inline std::optional<Task> parse_task(std::string_view s) {
  for (Task t : {Task::SGGen, Task::SGCls, Task::PredCls}) {
    if (to_string(t) == s) return t;
  }
  return std::nullopt;
}

// One aggregation slot of a receiving kind: all edges of `type` from `src`.
struct Slot {
  NodeKind src = NodeKind::SE;
  std::string type;

  bool operator==(const Slot&) const = default;
};

// Receive-head input layout. Slots targeting each kind are ordered by source
// kind (SE, SP, CE, CP) and then by edge type name.
struct SlotLayout {
  std::array<std::vector<Slot>, 4> by_dst;

  const std::vector<Slot>& slots(NodeKind dst) const { return by_dst[kind_index(dst)]; }

  std::optional<std::size_t> find(NodeKind dst, NodeKind src, std::string_view type) const {
    const auto& s = slots(dst);
    for (std::size_t i = 0; i < s.size(); ++i) {
      if (s[i].src == src && s[i].type == type) return i;
    }
    return std::nullopt;
  }

  bool operator==(const SlotLayout&) const = default;

  static SlotLayout from_types(std::vector<EdgeType> types) {
    for (const EdgeType& t : edge_types::scene) types.push_back(t);
    for (const EdgeType& t : edge_types::bridge) types.push_back(t);
    std::sort(types.begin(), types.end(), [](const EdgeType& a, const EdgeType& b) {
      return std::make_tuple(kind_index(a.dst), kind_index(a.src), a.name) <
             std::make_tuple(kind_index(b.dst), kind_index(b.src), b.name);
    });
    SlotLayout layout;
    for (const EdgeType& t : types) {
      Slot s{t.src, t.name};
      auto& v = layout.by_dst[kind_index(t.dst)];
      if (std::find(v.begin(), v.end(), s) == v.end()) v.push_back(std::move(s));
    }
    return layout;
  }

  static SlotLayout from_commonsense(const CommonsenseGraph& kg) { return from_types(kg.commonsense_types()); }
};

struct ModelConfig {
  Index state_dim = 32;
  Index hidden_dim = 64;
  int steps = 3;
  Index k_bridge = 5;
  Index entity_feature_dim = 0;
  Index union_feature_dim = 0;
  Index embedding_dim = 0;
  SlotLayout layout;

  Index input_dim(NodeKind k) const {
    switch (k) {
      case NodeKind::SE: return entity_feature_dim;
      case NodeKind::SP: return union_feature_dim;
      default: return embedding_dim;
    }
  }

  Index receive_width(NodeKind k) const { return state_dim * static_cast<Index>(layout.slots(k).size()); }

  void validate() const {
    if (state_dim < 1 || hidden_dim < 1) throw ConfigError("state and hidden dims must be positive");
    if (steps < 0) throw ConfigError("T must be non-negative");
    if (k_bridge < 1) throw ConfigError("K_bridge must be at least 1");
  }
};

struct MlpIndex {
  std::size_t w1 = 0, b1 = 0, w2 = 0, b2 = 0;
};

struct KindIndex {
  std::size_t init_w = 0, init_b = 0;
  MlpIndex send, receive, att;
  std::size_t wz = 0, uz = 0, wr = 0, ur = 0, wh = 0, uh = 0;
};

// All trainable heads; one set per node kind, shared across nodes of that kind.
struct ModelParams {
  ModelConfig config;
  ParameterSet tensors;
  std::array<KindIndex, 4> index{};

  const KindIndex& at(NodeKind k) const { return index[kind_index(k)]; }

  // Glorot-uniform weights, zero biases, deterministic in `seed`.
  static ModelParams initialize(const ModelConfig& config, std::uint64_t seed) {
    config.validate();
    ModelParams p;
    p.config = config;
    std::mt19937_64 rng(seed);
    auto weight = [&rng](Index out, Index in) {
      const double a = std::sqrt(6.0 / static_cast<double>(in + out));
      std::uniform_real_distribution<double> u(-a, a);
      Matrix m(out, in);
      for (Index i = 0; i < m.size(); ++i) m.data()[i] = u(rng);
      return m;
    };
    const Index d = config.state_dim;
    const Index h = config.hidden_dim;
    for (NodeKind k : kNodeKinds) {
      const std::string pre(to_string(k));
      KindIndex& ix = p.index[kind_index(k)];
      auto mlp = [&](const std::string& name, Index in, Index out) {
        MlpIndex m;
        m.w1 = p.tensors.add(pre + "." + name + ".W1", weight(h, in));
        m.b1 = p.tensors.add(pre + "." + name + ".b1", Matrix::Zero(1, h));
        m.w2 = p.tensors.add(pre + "." + name + ".W2", weight(out, h));
        m.b2 = p.tensors.add(pre + "." + name + ".b2", Matrix::Zero(1, out));
        return m;
      };
      ix.init_w = p.tensors.add(pre + ".init.W", weight(d, config.input_dim(k)));
      ix.init_b = p.tensors.add(pre + ".init.b", Matrix::Zero(1, d));
      ix.send = mlp("send", d, d);
      ix.receive = mlp("receive", config.receive_width(k), d);
      ix.att = mlp("att", d, d);
      ix.wz = p.tensors.add(pre + ".gru.Wz", weight(d, d));
      ix.uz = p.tensors.add(pre + ".gru.Uz", weight(d, d));
      ix.wr = p.tensors.add(pre + ".gru.Wr", weight(d, d));
      ix.ur = p.tensors.add(pre + ".gru.Ur", weight(d, d));
      ix.wh = p.tensors.add(pre + ".gru.Wh", weight(d, d));
      ix.uh = p.tensors.add(pre + ".gru.Uh", weight(d, d));
    }
    return p;
  }
};

// Per-image inputs standing in for the detector outputs.
struct SceneInputs {
  Matrix entity_features;   // n x F, visual feature per SE
  Matrix union_features;    // n(n-1) x U, one row per ordered pair
  Matrix label_dists;       // n x |CE|, detector class distribution
  std::vector<Box> boxes;   // boxes the SE nodes were built from
  std::vector<Index> gt_entity_classes;  // CE indices; PredCls only
};

struct NodeStates {
  std::array<Matrix, 4> x;
  const Matrix& of(NodeKind k) const { return x[kind_index(k)]; }
};

struct StateVars {
  std::array<Var, 4> x;
  Var of(NodeKind k) const { return x[kind_index(k)]; }
};

// Current bridges plus the softmax rows they were cut from. The score
// entries are unset before the first refinement.
struct BridgeVars {
  Var entity;
  Var predicate;
  Var entity_scores;
  Var predicate_scores;
};

struct GruVars {
  Var wz, uz, wr, ur, wh, uh;
};

// z = s(Wz m + Uz x), r = s(Wr m + Ur x), h = tanh(Wh m + Uh (r.x)),
// x' = (1 - z).x + z.h, applied to each row.
inline Var gru(const GruVars& g, Var x, Var m) {
  Var z = sigmoid(add(matmul_nt(m, g.wz), matmul_nt(x, g.uz)));
  Var r = sigmoid(add(matmul_nt(m, g.wr), matmul_nt(x, g.ur)));
  Var h = tanh(add(matmul_nt(m, g.wh), matmul_nt(mul(r, x), g.uh)));
  return add(mul(affine(z, -1.0, 1.0), x), mul(z, h));
}

struct GruWeights {
  Matrix wz, uz, wr, ur, wh, uh;
};

// Column-vector GRU update.
inline Matrix gru_update(const Matrix& x, const Matrix& m, const GruWeights& cell) {
  if (x.cols() != 1 || m.cols() != 1) throw ShapeError("gru_update: x and m must be column vectors");
  Tape tape;
  GruVars g{tape.constant(cell.wz), tape.constant(cell.uz), tape.constant(cell.wr),
            tape.constant(cell.ur), tape.constant(cell.wh), tape.constant(cell.uh)};
  const Var out = gru(g, tape.constant(x.transpose()), tape.constant(m.transpose()));
  return out.value().transpose();
}

// One forward evaluation of the model over a single scene graph on a tape.
class GraphPass {
 public:
  GraphPass(Tape& tape, const ModelParams& params, const std::vector<Var>& bound, const HeteroGraph& graph,
            const CommonsenseGraph& kg)
      : tape_(tape), params_(params), p_(bound), graph_(graph), kg_(kg) {
    if (bound.size() != params.tensors.size()) throw ShapeError("bound parameter count mismatch");
    if (graph.count(NodeKind::CE) != kg.graph.count(NodeKind::CE) ||
        graph.count(NodeKind::CP) != kg.graph.count(NodeKind::CP)) {
      throw InputError("scene graph does not carry the commonsense nodes");
    }
    build_plan();
  }

  Index count(NodeKind k) const { return static_cast<Index>(graph_.count(k)); }

  StateVars init_states(const SceneInputs& in) {
    const ModelConfig& c = params_.config;
    const Index n = count(NodeKind::SE);
    if (in.entity_features.rows() != n || in.entity_features.cols() != c.entity_feature_dim) {
      throw InputError("entity features " + shape_str(in.entity_features) + " do not match " + std::to_string(n) +
                       " SE nodes of width " + std::to_string(c.entity_feature_dim));
    }
    if (in.union_features.rows() != count(NodeKind::SP) || in.union_features.cols() != c.union_feature_dim) {
      throw InputError("union features " + shape_str(in.union_features) + " do not match the SP nodes");
    }
    if (kg_.embedding_dim() != c.embedding_dim) throw InputError("commonsense embedding width does not match config");
    StateVars s;
    s.x[kind_index(NodeKind::SE)] = project(NodeKind::SE, tape_.constant(in.entity_features));
    s.x[kind_index(NodeKind::SP)] = project(NodeKind::SP, tape_.constant(in.union_features));
    s.x[kind_index(NodeKind::CE)] = project(NodeKind::CE, tape_.constant(kg_.entity_embeddings));
    s.x[kind_index(NodeKind::CP)] = project(NodeKind::CP, tape_.constant(kg_.predicate_embeddings));
    return s;
  }

  // Entity bridges from the detector (or the ground truth in PredCls);
  // predicate bridges empty.
  BridgeVars init_bridges(const SceneInputs& in, Task mode) {
    if (in.label_dists.rows() != count(NodeKind::SE) || in.label_dists.cols() != count(NodeKind::CE)) {
      throw InputError("detector distributions " + shape_str(in.label_dists) + " do not match SE x CE");
    }
    BridgeVars b;
    if (mode == Task::PredCls) {
      b.entity = tape_.constant(one_hot(in));
    } else {
      b.entity = tape_.constant(init_entity_bridges(in.label_dists, params_.config.k_bridge).entity);
    }
    b.predicate = tape_.constant(Matrix::Zero(count(NodeKind::SP), count(NodeKind::CP)));
    return b;
  }

  // Concatenated per-slot sums feeding each kind's receive head.
  std::array<Var, 4> aggregate(const StateVars& s, const BridgeVars& b) {
    std::array<Var, 4> out_msg;
    for (NodeKind k : kNodeKinds) {
      const MlpIndex& h = params_.at(k).send;
      out_msg[kind_index(k)] = apply_mlp(MlpHead{p_[h.w1], p_[h.b1], p_[h.w2], p_[h.b2]}, s.of(k));
    }
    std::array<Var, 4> agg;
    for (NodeKind dst : kNodeKinds) {
      const auto& slots = params_.config.layout.slots(dst);
      std::vector<Var> parts;
      parts.reserve(slots.size());
      for (std::size_t i = 0; i < slots.size(); ++i) {
        const Var src_msg = out_msg[kind_index(slots[i].src)];
        const SlotPlan& plan = plan_[kind_index(dst)][i];
        switch (plan.source) {
          case SlotSource::links:
            parts.push_back(aggregate_links(src_msg, plan.links, count(dst)));
            break;
          case SlotSource::entity_to_class:
            parts.push_back(matmul_tn(b.entity, src_msg));
            break;
          case SlotSource::class_to_entity:
            parts.push_back(matmul(b.entity, src_msg));
            break;
          case SlotSource::predicate_to_class:
            parts.push_back(matmul_tn(b.predicate, src_msg));
            break;
          case SlotSource::class_to_predicate:
            parts.push_back(matmul(b.predicate, src_msg));
            break;
        }
      }
      agg[kind_index(dst)] = concat_cols(parts);
    }
    return agg;
  }

  StateVars message_round(const StateVars& s, const BridgeVars& b) {
    const std::array<Var, 4> agg = aggregate(s, b);
    StateVars next;
    for (NodeKind k : kNodeKinds) {
      const KindIndex& ix = params_.at(k);
      const Var incoming = apply_mlp(head(ix.receive), agg[kind_index(k)]);
      const GruVars g{p_[ix.wz], p_[ix.uz], p_[ix.wr], p_[ix.ur], p_[ix.wh], p_[ix.uh]};
      next.x[kind_index(k)] = gru(g, s.of(k), incoming);
    }
    return next;
  }

  // Softmax similarity rows from each scene node to every class node, cut to
  // the top K_bridge entries (not renormalized). PredCls pins the entity
  // bridges to the ground-truth classes.
  BridgeVars refine_bridges(const StateVars& s, Task mode, const SceneInputs* in = nullptr) {
    BridgeVars b;
    b.entity_scores = similarity(NodeKind::SE, NodeKind::CE, s);
    b.predicate_scores = similarity(NodeKind::SP, NodeKind::CP, s);
    b.entity = sparsify(b.entity_scores);
    b.predicate = sparsify(b.predicate_scores);
    if (mode == Task::PredCls) {
      if (in == nullptr) throw ModeError("PredCls refinement needs ground-truth entity labels");
      b.entity = tape_.constant(one_hot(*in));
    }
    return b;
  }

  struct Trace {
    StateVars states;
    BridgeVars bridges;
  };

  Trace run(const SceneInputs& in, Task mode) {
    Trace t;
    t.states = init_states(in);
    t.bridges = init_bridges(in, mode);
    for (int step = 0; step < params_.config.steps; ++step) {
      t.states = message_round(t.states, t.bridges);
      t.bridges = refine_bridges(t.states, mode, &in);
    }
    return t;
  }

 private:
  enum class SlotSource { links, entity_to_class, class_to_entity, predicate_to_class, class_to_predicate };

  struct SlotPlan {
    SlotSource source = SlotSource::links;
    LinkList links;
  };

  MlpHead head(const MlpIndex& h) const { return MlpHead{p_[h.w1], p_[h.b1], p_[h.w2], p_[h.b2]}; }

  Var project(NodeKind k, Var input) {
    const KindIndex& ix = params_.at(k);
    if (p_[ix.init_w].cols() != input.cols()) {
      throw ShapeError(std::string(to_string(k)) + " init head expects width " + std::to_string(p_[ix.init_w].cols()) +
                       ", got " + std::to_string(input.cols()));
    }
    return add_row(matmul_nt(input, p_[ix.init_w]), p_[ix.init_b]);
  }

  Var similarity(NodeKind scene, NodeKind cls, const StateVars& s) {
    const Var q = apply_mlp(head(params_.at(scene).att), s.of(scene));
    const Var k = apply_mlp(head(params_.at(cls).att), s.of(cls));
    return row_softmax(matmul_nt(q, k));
  }

  Var sparsify(Var scores) {
    return mul(scores, tape_.constant(top_k_mask(scores.value(), params_.config.k_bridge)));
  }

  Matrix one_hot(const SceneInputs& in) const {
    const Index n = count(NodeKind::SE);
    if (static_cast<Index>(in.gt_entity_classes.size()) != n) {
      throw ModeError("PredCls needs one ground-truth class per SE node");
    }
    Matrix m = Matrix::Zero(n, count(NodeKind::CE));
    for (Index i = 0; i < n; ++i) {
      const Index c = in.gt_entity_classes[static_cast<std::size_t>(i)];
      if (c < 0 || c >= m.cols()) throw InputError("ground-truth class out of range");
      m(i, c) = 1.0;
    }
    return m;
  }

  void build_plan() {
    const SlotLayout& layout = params_.config.layout;
    for (NodeKind dst : kNodeKinds) {
      if (p_[params_.at(dst).receive.w1].cols() != params_.config.receive_width(dst)) {
        throw ConfigError(std::string(to_string(dst)) + " receive head width does not match its slot layout");
      }
    }
    for (const EdgeType& t : graph_.edge_types()) {
      if (t.family == EdgeFamily::bridge) continue;
      if (!layout.find(t.dst, t.src, t.name) && !graph_.edges_of_type(*graph_.find_type(t)).empty()) {
        throw ConfigError("edge type " + describe(t) + " has no receive slot in the model layout");
      }
    }
    for (NodeKind dst : kNodeKinds) {
      auto& plans = plan_[kind_index(dst)];
      for (const Slot& slot : layout.slots(dst)) {
        SlotPlan plan;
        if (slot.type == edge_types::entity_classified_to.name && slot.src == NodeKind::SE) {
          plan.source = SlotSource::entity_to_class;
        } else if (slot.type == edge_types::entity_has_instance.name && slot.src == NodeKind::CE && dst == NodeKind::SE) {
          plan.source = SlotSource::class_to_entity;
        } else if (slot.type == edge_types::predicate_classified_to.name && slot.src == NodeKind::SP) {
          plan.source = SlotSource::predicate_to_class;
        } else if (slot.type == edge_types::predicate_has_instance.name && slot.src == NodeKind::CP &&
                   dst == NodeKind::SP) {
          plan.source = SlotSource::class_to_predicate;
        } else {
          auto links = std::make_shared<std::vector<Link>>();
          const EdgeFamily family =
              (slot.src == NodeKind::SE || slot.src == NodeKind::SP) ? EdgeFamily::scene : EdgeFamily::commonsense;
          if (auto t = graph_.find_type(EdgeType{slot.type, family, slot.src, dst})) {
            for (std::size_t e : graph_.edges_of_type(*t)) {
              const Edge& edge = graph_.edges()[e];
              links->push_back({graph_.local_index(edge.src), graph_.local_index(edge.dst), edge.weight});
            }
          }
          plan.links = std::move(links);
        }
        plans.push_back(std::move(plan));
      }
    }
  }

  Tape& tape_;
  const ModelParams& params_;
  const std::vector<Var>& p_;
  const HeteroGraph& graph_;
  const CommonsenseGraph& kg_;
  std::array<std::vector<SlotPlan>, 4> plan_;
};

// Builds the full graph for a scene: commonsense nodes and edges, then one SE
// per box and one SP per ordered pair.
inline HeteroGraph build_scene_graph(const std::vector<Box>& boxes, const CommonsenseGraph& kg) {
  std::vector<Detection> dets;
  dets.reserve(boxes.size());
  for (std::size_t i = 0; i < boxes.size(); ++i) dets.push_back({boxes[i], static_cast<int>(i)});
  return build_scene_skeleton(dets, kg.graph);
}

inline NodeStates values_of(const StateVars& s) {
  NodeStates out;
  for (std::size_t i = 0; i < 4; ++i) out.x[i] = s.x[i].value();
  return out;
}

inline StateVars constants_of(Tape& tape, const NodeStates& s) {
  StateVars out;
  for (std::size_t i = 0; i < 4; ++i) out.x[i] = tape.constant(s.x[i]);
  return out;
}

inline NodeStates init_states(const HeteroGraph& graph, const SceneInputs& in, const CommonsenseGraph& kg,
                              const ModelParams& params) {
  Tape tape;
  const auto bound = params.tensors.bind(tape, nullptr);
  GraphPass pass(tape, params, bound, graph, kg);
  return values_of(pass.init_states(in));
}

inline NodeStates message_round(const HeteroGraph& graph, const CommonsenseGraph& kg, const BridgeSet& bridges,
                                const NodeStates& states, const ModelParams& params) {
  Tape tape;
  const auto bound = params.tensors.bind(tape, nullptr);
  GraphPass pass(tape, params, bound, graph, kg);
  BridgeVars b;
  b.entity = tape.constant(bridges.entity);
  b.predicate = tape.constant(bridges.predicate);
  return values_of(pass.message_round(constants_of(tape, states), b));
}

// Receive-head inputs (all slots concatenated) per kind.
inline std::array<Matrix, 4> aggregated_inputs(const HeteroGraph& graph, const CommonsenseGraph& kg,
                                               const BridgeSet& bridges, const NodeStates& states,
                                               const ModelParams& params) {
  Tape tape;
  const auto bound = params.tensors.bind(tape, nullptr);
  GraphPass pass(tape, params, bound, graph, kg);
  BridgeVars b;
  b.entity = tape.constant(bridges.entity);
  b.predicate = tape.constant(bridges.predicate);
  const auto agg = pass.aggregate(constants_of(tape, states), b);
  std::array<Matrix, 4> out;
  for (std::size_t i = 0; i < 4; ++i) out[i] = agg[i].value();
  return out;
}

struct RefineResult {
  BridgeSet bridges;
  Matrix entity_scores;
  Matrix predicate_scores;
};

inline RefineResult refine_bridges(const HeteroGraph& graph, const CommonsenseGraph& kg, const NodeStates& states,
                                   const ModelParams& params, Task mode,
                                   const std::optional<std::vector<Index>>& gt_labels = std::nullopt) {
  if (mode == Task::PredCls && !gt_labels) throw ModeError("PredCls refinement needs ground-truth entity labels");
  Tape tape;
  const auto bound = params.tensors.bind(tape, nullptr);
  GraphPass pass(tape, params, bound, graph, kg);
  SceneInputs in;
  if (gt_labels) in.gt_entity_classes = *gt_labels;
  const BridgeVars b = pass.refine_bridges(constants_of(tape, states), mode, &in);
  RefineResult r;
  r.bridges.entity = b.entity.value();
  r.bridges.predicate = b.predicate.value();
  r.bridges.k = params.config.k_bridge;
  r.entity_scores = b.entity_scores.value();
  r.predicate_scores = b.predicate_scores.value();
  return r;
}

struct ForwardOutput {
  BridgeSet bridges;
  Matrix entity_scores;     // pre-sparsification softmax rows (empty when T = 0)
  Matrix predicate_scores;
  NodeStates states;
};

inline ForwardOutput forward(const HeteroGraph& graph, const SceneInputs& in, const CommonsenseGraph& kg,
                             const ModelParams& params, Task mode) {
  Tape tape;
  const auto bound = params.tensors.bind(tape, nullptr);
  GraphPass pass(tape, params, bound, graph, kg);
  const GraphPass::Trace t = pass.run(in, mode);
  ForwardOutput out;
  out.bridges.entity = t.bridges.entity.value();
  out.bridges.predicate = t.bridges.predicate.value();
  out.bridges.k = params.config.k_bridge;
  if (t.bridges.entity_scores.valid()) {
    out.entity_scores = t.bridges.entity_scores.value();
    out.predicate_scores = t.bridges.predicate_scores.value();
  }
  out.states = values_of(t.states);
  return out;
}

}  // namespace gbnet
