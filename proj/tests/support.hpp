#pragma once

// Shared fixtures for the test binaries: seeded generators, a central
// finite-difference checker and small commonsense graphs.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <random>
#include <string>
#include <vector>

#include "gbnet/commonsense.hpp"
#include "gbnet/graph.hpp"
#include "gbnet/model.hpp"
#include "gbnet/tensor.hpp"
#include "gbnet/trainer.hpp"

namespace gbtest {

using gbnet::Index;
using gbnet::Matrix;

struct Gen {
  std::mt19937_64 rng;
  explicit Gen(std::uint64_t seed) : rng(seed) {}

  double uniform(double lo = -1.0, double hi = 1.0) { return std::uniform_real_distribution<double>(lo, hi)(rng); }
  int integer(int lo, int hi) { return std::uniform_int_distribution<int>(lo, hi)(rng); }
  bool coin(double p = 0.5) { return uniform(0.0, 1.0) < p; }

  Matrix matrix(Index r, Index c, double scale = 1.0) {
    Matrix m(r, c);
    for (Index i = 0; i < m.size(); ++i) m.data()[i] = scale * uniform();
    return m;
  }

  // Rows are probability vectors.
  Matrix distributions(Index r, Index c) {
    return gbnet::row_softmax_values(matrix(r, c, 2.0));
  }

  gbnet::Box box() {
    const double w = uniform(0.05, 0.5), h = uniform(0.05, 0.5);
    const double x = uniform(0.0, 1.0 - w), y = uniform(0.0, 1.0 - h);
    return {x, y, x + w, y + h};
  }

  std::vector<gbnet::Box> boxes(int n) {
    std::vector<gbnet::Box> out;
    for (int i = 0; i < n; ++i) out.push_back(box());
    return out;
  }
};

// |a - fd| / max(|a|, |fd|, 1e-8)
inline double relative_error(double a, double fd) {
  return std::abs(a - fd) / std::max({std::abs(a), std::abs(fd), 1e-8});
}

// Builds a scalar loss from watched leaves.
using LossBuilder = std::function<gbnet::Var(gbnet::Tape&, const std::vector<gbnet::Var>&)>;

struct GradCheck {
  double max_rel = 0.0;
  std::size_t entries = 0;
  std::size_t over = 0;  // entries above `tol`
  // Same statistics over entries that are not zero to within difference
  // roundoff (|a| <= 1e-12 and |fd| <= 1e-9).
  double max_rel_nonzero = 0.0;
  std::size_t over_nonzero = 0;
};

// Compares reverse-mode gradients of `loss` with central differences over
// every entry of every leaf.
inline GradCheck check_gradients(std::vector<Matrix> leaves, const LossBuilder& loss, double h = 1e-5,
                                 double tol = 1e-4) {
  std::vector<Matrix> grads;
  for (const Matrix& m : leaves) grads.push_back(Matrix::Zero(m.rows(), m.cols()));
  {
    gbnet::Tape tape;
    std::vector<gbnet::Var> vars;
    for (std::size_t i = 0; i < leaves.size(); ++i) vars.push_back(tape.watch(leaves[i], &grads[i]));
    tape.backward(loss(tape, vars));
  }
  auto eval = [&]() {
    gbnet::Tape tape;
    std::vector<gbnet::Var> vars;
    for (const Matrix& m : leaves) vars.push_back(tape.constant(m));
    return loss(tape, vars).value()(0, 0);
  };
  GradCheck out;
  for (std::size_t i = 0; i < leaves.size(); ++i) {
    for (Index k = 0; k < leaves[i].size(); ++k) {
      double& x = leaves[i].data()[k];
      const double keep = x;
      x = keep + h;
      const double up = eval();
      x = keep - h;
      const double down = eval();
      x = keep;
      const double fd = (up - down) / (2.0 * h);
      const double a = grads[i].data()[k];
      const double err = relative_error(a, fd);
      out.max_rel = std::max(out.max_rel, err);
      out.over += err > tol ? 1 : 0;
      if (std::abs(a) > 1e-12 || std::abs(fd) > 1e-9) {
        out.max_rel_nonzero = std::max(out.max_rel_nonzero, err);
        out.over_nonzero += err > tol ? 1 : 0;
      }
      ++out.entries;
    }
  }
  return out;
}

inline gbnet::EmbeddingTable random_embeddings(Gen& g, const std::vector<std::string>& labels, int dim) {
  gbnet::EmbeddingTable t;
  for (const std::string& l : labels) {
    std::vector<double> v(static_cast<std::size_t>(dim));
    for (double& x : v) x = g.uniform();
    t[l] = v;
  }
  return t;
}

inline std::vector<std::string> labels(const std::string& prefix, int n) {
  std::vector<std::string> out;
  for (int i = 0; i < n; ++i) out.push_back(prefix + std::to_string(i));
  return out;
}

// A commonsense graph over e0.. and p0.. with one ontology edge per family
// of kinds and conditionals from a few random triplet counts.
inline gbnet::CommonsenseGraph small_kg(Gen& g, int n_entities, int n_predicates, int emb_dim = 4) {
  const auto ents = labels("e", n_entities);
  const auto preds = labels("p", n_predicates);
  std::vector<std::string> all = ents;
  all.insert(all.end(), preds.begin(), preds.end());
  std::vector<gbnet::OntologyEdgeRecord> onto;
  if (n_entities > 1) onto.push_back({ents[0], "SimilarTo", ents[1], 1.0, 0});
  if (n_predicates > 1) onto.push_back({preds[1], "IsA", preds[0], 0.5, 0});
  onto.push_back({ents[0], "UsedFor", preds[0], 0.7, 0});
  gbnet::TripletCounts counts;
  for (int k = 0; k < 6; ++k) {
    counts[{ents[static_cast<std::size_t>(g.integer(0, n_entities - 1))],
            preds[static_cast<std::size_t>(g.integer(0, n_predicates - 1))],
            ents[static_cast<std::size_t>(g.integer(0, n_entities - 1))]}] += static_cast<std::uint64_t>(g.integer(1, 5));
  }
  return gbnet::assemble(ents, preds, onto, gbnet::compile_conditional_edges(counts), random_embeddings(g, all, emb_dim));
}

struct TinyScene {
  gbnet::HeteroGraph graph;
  gbnet::SceneInputs inputs;
  gbnet::Alignment target;
};

// Random scene of n entities against `kg`, with random targets.
inline TinyScene tiny_scene(Gen& g, const gbnet::CommonsenseGraph& kg, int n, Index feat_dim) {
  TinyScene s;
  s.inputs.boxes = g.boxes(n);
  s.inputs.entity_features = g.matrix(n, feat_dim);
  s.inputs.union_features = g.matrix(n > 1 ? n * (n - 1) : 0, feat_dim + gbnet::kGeometryDim);
  s.inputs.label_dists = g.distributions(n, kg.entity_count());
  for (int i = 0; i < n; ++i) s.inputs.gt_entity_classes.push_back(g.integer(0, static_cast<int>(kg.entity_count()) - 1));
  s.graph = gbnet::build_scene_graph(s.inputs.boxes, kg);
  for (int i = 0; i < n; ++i) s.target.entity.push_back(g.integer(0, static_cast<int>(kg.entity_count()) - 1));
  for (int j = 0; j < n * (n - 1); ++j) s.target.predicate.push_back(g.integer(0, static_cast<int>(kg.predicate_count()) - 1));
  return s;
}

inline gbnet::ModelConfig tiny_config(const gbnet::CommonsenseGraph& kg, Index d, int steps, Index feat_dim,
                                      Index k_bridge = 5) {
  gbnet::ModelConfig c;
  c.state_dim = d;
  c.hidden_dim = 2 * d;
  c.steps = steps;
  c.k_bridge = k_bridge;
  c.entity_feature_dim = feat_dim;
  c.union_feature_dim = feat_dim + gbnet::kGeometryDim;
  c.embedding_dim = kg.embedding_dim();
  c.layout = gbnet::SlotLayout::from_commonsense(kg);
  return c;
}

// Full-model loss with every parameter as a watched leaf.
inline LossBuilder model_loss(const gbnet::ModelParams& params, const TinyScene& scene, const gbnet::CommonsenseGraph& kg,
                              gbnet::Task mode, const gbnet::ClassBalanceTable* balance) {
  return [&params, &scene, &kg, mode, balance](gbnet::Tape& tape, const std::vector<gbnet::Var>& vars) {
    gbnet::GraphPass pass(tape, params, vars, scene.graph, kg);
    const auto t = pass.run(scene.inputs, mode);
    return gbnet::bridge_loss(t.bridges.entity_scores, t.bridges.predicate_scores, scene.target, balance,
                              mode != gbnet::Task::PredCls);
  };
}

// Moves every parameter, biases included, off its initial value so no unit
// starts exactly at a ReLU kink.
inline void randomize(gbnet::ModelParams& p, Gen& g, double spread = 0.3) {
  for (auto& t : p.tensors.items()) {
    for (Index k = 0; k < t.value.size(); ++k) t.value.data()[k] += g.uniform(-spread, spread);
  }
}

inline std::vector<Matrix> values(const gbnet::ParameterSet& p) {
  std::vector<Matrix> out;
  for (const auto& x : p.items()) out.push_back(x.value);
  return out;
}

}  // namespace gbtest
