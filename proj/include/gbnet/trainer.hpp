#pragma once

// Supervision: box alignment, class-balanced cross-entropy on the bridge
// softmax rows, Adam, the mini-batch loop and checkpoints.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <numeric>
#include <random>
#include <string>
#include <thread>
#include <tuple>
#include <vector>

#include "gbnet/box.hpp"
#include "gbnet/checkpoint.hpp"
#include "gbnet/commonsense.hpp"
#include "gbnet/dataset.hpp"
#include "gbnet/errors.hpp"
#include "gbnet/model.hpp"
#include "gbnet/random.hpp"
#include "gbnet/scene.hpp"
#include "gbnet/tensor.hpp"

namespace gbnet {

// Per-node training targets: a CE index per SE and a CP index per SP.
struct Alignment {
  std::vector<Index> entity;
  std::vector<Index> predicate;
};

// Greedy highest-IoU-first matching of predicted boxes to ground-truth boxes
// (ties by predicted then ground-truth index). Unmatched SE nodes and SP nodes
// without a labeled relation get the background class.
inline Alignment align(const std::vector<Box>& predicted, const std::vector<Box>& truth_boxes,
                       const std::vector<Index>& truth_classes, const std::vector<TruthTriplet>& truth,
                       Index background_entity, Index background_predicate, double iou_threshold = 0.5) {
  if (truth_boxes.size() != truth_classes.size()) throw ShapeError("one class per ground-truth box expected");
  struct Candidate {
    double overlap;
    std::size_t p, g;
  };
  std::vector<Candidate> cands;
  for (std::size_t p = 0; p < predicted.size(); ++p) {
    for (std::size_t g = 0; g < truth_boxes.size(); ++g) {
      const double o = iou(predicted[p], truth_boxes[g]);
      if (o >= iou_threshold) cands.push_back({o, p, g});
    }
  }
  std::stable_sort(cands.begin(), cands.end(), [](const Candidate& a, const Candidate& b) {
    if (a.overlap != b.overlap) return a.overlap > b.overlap;
    return std::tie(a.p, a.g) < std::tie(b.p, b.g);
  });
  std::vector<std::ptrdiff_t> match(predicted.size(), -1);
  std::vector<char> taken(truth_boxes.size(), 0);
  for (const Candidate& c : cands) {
    if (match[c.p] >= 0 || taken[c.g]) continue;
    match[c.p] = static_cast<std::ptrdiff_t>(c.g);
    taken[c.g] = 1;
  }
  Alignment a;
  for (std::size_t p = 0; p < predicted.size(); ++p) {
    a.entity.push_back(match[p] >= 0 ? truth_classes[static_cast<std::size_t>(match[p])] : background_entity);
  }
  const Index n = static_cast<Index>(predicted.size());
  a.predicate.assign(n > 1 ? static_cast<std::size_t>(n * (n - 1)) : 0, background_predicate);
  for (Index sp = 0; sp < static_cast<Index>(a.predicate.size()); ++sp) {
    const auto [s, o] = pair_at(sp, n);
    const auto ms = match[static_cast<std::size_t>(s)];
    const auto mo = match[static_cast<std::size_t>(o)];
    if (ms < 0 || mo < 0) continue;
    for (const TruthTriplet& t : truth) {
      if (t.subject == ms && t.object == mo) {
        a.predicate[static_cast<std::size_t>(sp)] = t.predicate;
        break;
      }
    }
  }
  return a;
}

// (1 - beta) / (1 - beta^n); beta = 0 gives 1 for every class.
inline double class_balanced_weight(std::uint64_t n, double beta) {
  if (n == 0) throw InputError("class-balanced weight is undefined for an unseen class");
  if (!(beta >= 0.0 && beta < 1.0)) throw ConfigError("balance beta must lie in [0, 1)");
  return (1.0 - beta) / (1.0 - std::pow(beta, static_cast<double>(n)));
}

struct ClassBalanceTable {
  double beta = 0.0;
  std::vector<std::uint64_t> counts;
  std::vector<double> weights;  // 0 for classes never seen in training

  static ClassBalanceTable from_counts(std::vector<std::uint64_t> counts, double beta) {
    ClassBalanceTable t;
    t.beta = beta;
    t.counts = std::move(counts);
    for (std::uint64_t n : t.counts) t.weights.push_back(n ? class_balanced_weight(n, beta) : 0.0);
    return t;
  }

  double weight(Index c) const { return weights.at(static_cast<std::size_t>(c)); }
};

// -sum_i log S_E[i, t_i] - sum_j w(t_j) log S_P[j, t_j]; the entity term is
// dropped when `with_entities` is false (PredCls).
inline Var bridge_loss(Var entity_scores, Var predicate_scores, const Alignment& target, const ClassBalanceTable* balance,
                       bool with_entities = true) {
  Tape& tape = detail::tape_of(predicate_scores);
  if (static_cast<Index>(target.predicate.size()) != predicate_scores.rows() ||
      (with_entities && static_cast<Index>(target.entity.size()) != entity_scores.rows())) {
    throw ShapeError("alignment does not cover the scene nodes");
  }
  auto picks = [](const std::vector<Index>& t) {
    std::vector<std::pair<Index, Index>> at;
    for (std::size_t i = 0; i < t.size(); ++i) at.emplace_back(static_cast<Index>(i), t[i]);
    return at;
  };
  Var total = tape.constant(Matrix::Zero(1, 1));
  if (with_entities && !target.entity.empty()) {
    total = add(total, sum(log(pick(entity_scores, picks(target.entity)))));
  }
  if (!target.predicate.empty()) {
    Var lp = log(pick(predicate_scores, picks(target.predicate)));
    if (balance != nullptr) {
      Matrix w(static_cast<Index>(target.predicate.size()), 1);
      for (std::size_t j = 0; j < target.predicate.size(); ++j) w(static_cast<Index>(j), 0) = balance->weight(target.predicate[j]);
      lp = mul(lp, tape.constant(std::move(w)));
    }
    total = add(total, sum(lp));
  }
  return scale(total, -1.0);
}

inline double compute_loss(const Matrix& entity_scores, const Matrix& predicate_scores, const Alignment& target,
                           const ClassBalanceTable* balance = nullptr, bool with_entities = true) {
  Tape tape;
  return bridge_loss(tape.constant(entity_scores), tape.constant(predicate_scores), target, balance, with_entities)
      .value()(0, 0);
}

struct AdamConfig {
  double lr = 3e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

struct AdamState {
  AdamConfig config;
  std::vector<Matrix> m;
  std::vector<Matrix> v;
  std::uint64_t step = 0;

  static AdamState for_params(const ParameterSet& params, AdamConfig config = {}) {
    AdamState s;
    s.config = config;
    s.m = params.zero_like();
    s.v = params.zero_like();
    return s;
  }
};

inline void adam_step(ParameterSet& params, const std::vector<Matrix>& grads, AdamState& st) {
  if (grads.size() != params.size() || st.m.size() != params.size()) {
    throw ShapeError("optimizer state does not match the parameters");
  }
  const AdamConfig& c = st.config;
  ++st.step;
  const double t = static_cast<double>(st.step);
  const double c1 = 1.0 - std::pow(c.beta1, t);
  const double c2 = 1.0 - std::pow(c.beta2, t);
  for (std::size_t i = 0; i < params.size(); ++i) {
    const Matrix& g = grads[i];
    if (!g.allFinite()) throw NumericError("non-finite gradient for " + params[i].name);
    st.m[i] = c.beta1 * st.m[i] + (1.0 - c.beta1) * g;
    st.v[i] = c.beta2 * st.v[i] + (1.0 - c.beta2) * g.cwiseProduct(g);
    params[i].value.array() -= c.lr * (st.m[i].array() / c1) / ((st.v[i].array() / c2).sqrt() + c.eps);
  }
}

inline void adam_step(ParameterSet& params, AdamState& st) {
  std::vector<Matrix> grads;
  for (const Parameter& p : params.items()) grads.push_back(p.grad);
  adam_step(params, grads, st);
}

struct TrainConfig {
  ModelConfig model;
  AdamConfig adam;
  int max_steps = 2000;
  int epochs = 1000;  // upper bound; training stops at whichever limit comes first
  int batch_size = 8;
  std::uint64_t seed = 1;
  double balance_beta = 0.0;
  Task mode = Task::SGCls;
  double iou_threshold = 0.5;
  int threads = 1;
  int log_every = 50;
};

struct TrainLogEntry {
  int step = 0;
  int epoch = 0;
  double loss = 0.0;  // batch mean
};

struct TrainResult {
  ModelParams params;
  AdamState adam;
  ClassBalanceTable balance;
  std::vector<TrainLogEntry> log;
};

// A scene prepared once for repeated forward/backward passes.
struct TrainSample {
  std::int64_t image_id = 0;
  HeteroGraph graph;
  SceneInputs inputs;
  Alignment target;
};

inline std::vector<TrainSample> prepare_samples(const Dataset& ds, const CommonsenseGraph& kg, Task mode,
                                                double iou_threshold) {
  const LabelMap labels = map_labels(ds, kg);
  std::vector<TrainSample> out;
  out.reserve(ds.records.size());
  for (const SceneRecord& r : ds.records) {
    TrainSample s;
    s.image_id = r.image_id;
    s.inputs = make_scene_inputs(r, labels, kg, mode);
    s.graph = build_scene_graph(s.inputs.boxes, kg);
    std::vector<Index> truth_classes;
    for (int c : r.gt_classes) truth_classes.push_back(labels.entity[static_cast<std::size_t>(c)]);
    s.target = align(s.inputs.boxes, r.gt_boxes, truth_classes, truth_triplets(r, labels), labels.background_entity,
                     labels.background_predicate, iou_threshold);
    out.push_back(std::move(s));
  }
  return out;
}

// Loss and parameter gradient for one scene, accumulated into `grads`.
inline double scene_gradient(const TrainSample& s, const ModelParams& params, const CommonsenseGraph& kg,
                             const ClassBalanceTable* balance, Task mode, std::vector<Matrix>& grads) {
  try {
    Tape tape;
    const auto bound = params.tensors.bind(tape, &grads);
    GraphPass pass(tape, params, bound, s.graph, kg);
    const GraphPass::Trace t = pass.run(s.inputs, mode);
    if (!t.bridges.predicate_scores.valid()) throw ConfigError("training needs at least one message-passing step");
    const Var loss = bridge_loss(t.bridges.entity_scores, t.bridges.predicate_scores, s.target, balance,
                                 mode != Task::PredCls);
    const double value = loss.value()(0, 0);
    tape.backward(loss);
    return value;
  } catch (const NumericError& e) {
    throw NumericError("image " + std::to_string(s.image_id) + ": " + e.what());
  }
}

inline std::vector<std::uint64_t> predicate_counts(const std::vector<TrainSample>& samples, Index n_classes) {
  std::vector<std::uint64_t> counts(static_cast<std::size_t>(n_classes), 0);
  for (const TrainSample& s : samples) {
    for (Index c : s.target.predicate) ++counts[static_cast<std::size_t>(c)];
  }
  return counts;
}

using TrainCallback = std::function<void(const TrainLogEntry&)>;

// Mini-batch training. Per-scene gradients go into separate buffers and are
// summed in scene order, so the result does not depend on the thread count.
// `resume` continues from existing parameters and optimizer state.
inline TrainResult train(const Dataset& ds, const CommonsenseGraph& kg, const TrainConfig& cfg,
                         const TrainResult* resume = nullptr, const TrainCallback& on_log = {}) {
  if (cfg.batch_size < 1 || cfg.max_steps < 0 || cfg.epochs < 0) throw ConfigError("bad training schedule");
  if (cfg.threads < 1) throw ConfigError("threads must be at least 1");
  if (ds.records.empty()) throw InputError("training set is empty");
  const ModelConfig model = configure_model(cfg.model, ds, kg);
  const std::vector<TrainSample> samples = prepare_samples(ds, kg, cfg.mode, cfg.iou_threshold);

  TrainResult res;
  if (resume != nullptr) {
    res.params = resume->params;
    res.adam = resume->adam;
    if (!(res.params.config.layout == model.layout) || res.params.tensors.size() == 0) {
      throw ShapeError("resumed parameters do not match the model layout");
    }
  } else {
    res.params = ModelParams::initialize(model, cfg.seed);
    res.adam = AdamState::for_params(res.params.tensors, cfg.adam);
  }
  res.adam.config = cfg.adam;
  res.balance = ClassBalanceTable::from_counts(predicate_counts(samples, kg.predicate_count()), cfg.balance_beta);
  const ClassBalanceTable* balance = cfg.balance_beta > 0.0 ? &res.balance : nullptr;

  std::mt19937_64 rng(splitmix64(cfg.seed ^ 0x5eedULL) + res.adam.step);
  std::vector<std::size_t> order(samples.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  int step = 0;
  for (int epoch = 0; epoch < cfg.epochs && step < cfg.max_steps; ++epoch) {
    std::shuffle(order.begin(), order.end(), rng);
    for (std::size_t start = 0; start < order.size() && step < cfg.max_steps; start += static_cast<std::size_t>(cfg.batch_size)) {
      const std::size_t end = std::min(order.size(), start + static_cast<std::size_t>(cfg.batch_size));
      const std::size_t b = end - start;
      // reduction runs in image-id order
      std::sort(order.begin() + static_cast<std::ptrdiff_t>(start), order.begin() + static_cast<std::ptrdiff_t>(end),
                [&samples](std::size_t x, std::size_t y) { return samples[x].image_id < samples[y].image_id; });
      std::vector<std::vector<Matrix>> grads(b);
      std::vector<double> losses(b, 0.0);
      std::vector<std::exception_ptr> errors(b);
      auto work = [&](std::size_t w, std::size_t stride) {
        for (std::size_t i = w; i < b; i += stride) {
          try {
            grads[i] = res.params.tensors.zero_like();
            losses[i] = scene_gradient(samples[order[start + i]], res.params, kg, balance, cfg.mode, grads[i]);
          } catch (...) {
            errors[i] = std::current_exception();
          }
        }
      };
      const std::size_t nt = std::min<std::size_t>(static_cast<std::size_t>(cfg.threads), b);
      if (nt <= 1) {
        work(0, 1);
      } else {
        std::vector<std::thread> pool;
        for (std::size_t w = 0; w < nt; ++w) pool.emplace_back(work, w, nt);
        for (auto& t : pool) t.join();
      }
      for (const auto& e : errors) {
        if (e) std::rethrow_exception(e);
      }
      std::vector<Matrix> total = res.params.tensors.zero_like();
      double loss = 0.0;
      for (std::size_t i = 0; i < b; ++i) {
        if (!std::isfinite(losses[i])) {
          throw NumericError("non-finite loss on image " + std::to_string(samples[order[start + i]].image_id));
        }
        loss += losses[i];
        for (std::size_t p = 0; p < total.size(); ++p) total[p] += grads[i][p];
      }
      for (Matrix& g : total) g /= static_cast<double>(b);
      loss /= static_cast<double>(b);
      adam_step(res.params.tensors, total, res.adam);
      ++step;
      const TrainLogEntry entry{step, epoch, loss};
      res.log.push_back(entry);
      if (on_log && (step % std::max(1, cfg.log_every) == 0 || step == cfg.max_steps)) on_log(entry);
    }
  }
  return res;
}

inline std::vector<NamedTensor> checkpoint_tensors(const ModelParams& params, const AdamState* adam) {
  std::vector<NamedTensor> out;
  for (const Parameter& p : params.tensors.items()) out.push_back({p.name, p.value});
  if (adam != nullptr) {
    for (std::size_t i = 0; i < params.tensors.size(); ++i) {
      out.push_back({"adam.m/" + params.tensors[i].name, adam->m.at(i)});
      out.push_back({"adam.v/" + params.tensors[i].name, adam->v.at(i)});
    }
    out.push_back({"adam.step", Matrix::Constant(1, 1, static_cast<double>(adam->step))});
  }
  return out;
}

inline void save_checkpoint(const std::string& path, const ModelParams& params, const AdamState* adam = nullptr) {
  write_checkpoint_file(path, checkpoint_tensors(params, adam));
}

// Loads into parameters already shaped by `params.config`; optimizer state is
// restored when present in the file and `adam` is given.
inline void load_checkpoint(const std::string& path, ModelParams& params, AdamState* adam = nullptr) {
  const std::vector<NamedTensor> tensors = read_checkpoint_file(path);
  assign_tensors(params.tensors, tensors);
  if (adam == nullptr) return;
  const bool has_state = std::any_of(tensors.begin(), tensors.end(), [](const NamedTensor& t) { return t.name == "adam.step"; });
  *adam = AdamState::for_params(params.tensors, adam->config);
  if (!has_state) return;
  ParameterSet m, v;
  for (const Parameter& p : params.tensors.items()) {
    m.add(p.name, Matrix::Zero(p.value.rows(), p.value.cols()));
    v.add(p.name, Matrix::Zero(p.value.rows(), p.value.cols()));
  }
  assign_tensors(m, tensors, "adam.m/");
  assign_tensors(v, tensors, "adam.v/");
  for (std::size_t i = 0; i < params.tensors.size(); ++i) {
    adam->m[i] = m[i].value;
    adam->v[i] = v[i].value;
  }
  for (const NamedTensor& t : tensors) {
    if (t.name == "adam.step") adam->step = static_cast<std::uint64_t>(t.value(0, 0));
  }
}

}  // namespace gbnet
