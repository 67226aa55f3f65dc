// Acceptance run: one PASS/FAIL line per criterion A1..A7.
// Usage: acceptance [A1 A2 ...]   (no arguments runs all of them)

#include <algorithm>
#include <chrono>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <map>
#include <numeric>
#include <set>
#include <sstream>
#include <string>
#include <unistd.h>
#include <vector>

#include "gbnet/checkpoint.hpp"
#include "gbnet/cli.hpp"
#include "gbnet/commonsense.hpp"
#include "gbnet/evaluator.hpp"
#include "gbnet/graph.hpp"
#include "gbnet/pipeline.hpp"
#include "gbnet/synth.hpp"
#include "gbnet/trainer.hpp"
#include "support.hpp"

#ifndef GBNET_CLI_PATH
#define GBNET_CLI_PATH "gbnet"
#endif

namespace fs = std::filesystem;
using namespace gbnet;

namespace {

struct Outcome {
  bool pass = false;
  std::string detail;
};

std::string fmt(const char* f, double a) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), f, a);
  return buf;
}

fs::path scratch_dir(const std::string& name) {
  const fs::path p = fs::temp_directory_path() / ("gbnet_acceptance_" + std::to_string(::getpid())) / name;
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

// ---- A1 -------------------------------------------------------------------

Outcome gradient_fidelity() {
  gbtest::Gen g(101);
  gbtest::GradCheck total;
  for (int inst = 0; inst < 50; ++inst) {
    const CommonsenseGraph kg = gbtest::small_kg(g, 2, 1, 4);  // + background: 3 CE, 2 CP
    const Index feat = 4;
    const gbtest::TinyScene scene = gbtest::tiny_scene(g, kg, 3, feat);
    const ModelConfig cfg = gbtest::tiny_config(kg, 8, 2, feat, 2);
    ModelParams params = ModelParams::initialize(cfg, 1000 + static_cast<std::uint64_t>(inst));
    gbtest::randomize(params, g);
    const auto balance = ClassBalanceTable::from_counts({3, 40}, 0.9);
    const auto res = gbtest::check_gradients(gbtest::values(params.tensors),
                                             gbtest::model_loss(params, scene, kg, Task::SGCls, &balance));
    total.max_rel = std::max(total.max_rel, res.max_rel);
    total.max_rel_nonzero = std::max(total.max_rel_nonzero, res.max_rel_nonzero);
    total.entries += res.entries;
    total.over += res.over;
    total.over_nonzero += res.over_nonzero;
  }
  return {total.max_rel <= 1e-4,
          "max relative error " + fmt("%.3g", total.max_rel) + " (" + std::to_string(total.over) + " of " +
              std::to_string(total.entries) + " entries above 1e-4); excluding entries with |analytic| <= 1e-12 and " +
              "|fd| <= 1e-9: max " + fmt("%.3g", total.max_rel_nonzero) + " (" + std::to_string(total.over_nonzero) +
              " above)"};
}

// ---- A2 -------------------------------------------------------------------

struct OracleResult {
  double recall = 0.0;
  std::vector<std::uint64_t> hits, totals;
};

// Exhaustive reference: enumerate candidates, rank by counting how many beat
// each one, then try every assignment of ground truth to predictions.
OracleResult brute_force(const Matrix& ent, const Matrix& pred, const std::vector<Box>& boxes,
                         const std::vector<TruthTriplet>& truth, Index k, bool constrained, Index bg, Task task) {
  struct Cand {
    Index s, sc, p, o, oc;
    double conf;
  };
  const Index n = ent.rows();
  auto best_class = [&](Index i) {
    const double m = ent.row(i).maxCoeff();
    for (Index c = 0; c < ent.cols(); ++c) {
      if (ent(i, c) == m) return std::pair<Index, double>{c, m};
    }
    return std::pair<Index, double>{0, 0.0};
  };
  std::vector<Cand> all;
  Index row = 0;
  for (Index s = 0; s < n; ++s) {
    for (Index o = 0; o < n; ++o) {
      if (s == o) continue;
      const auto [sc, ss] = best_class(s);
      const auto [oc, os] = best_class(o);
      std::vector<Cand> here;
      for (Index p = 0; p < pred.cols(); ++p) {
        if (p != bg && pred(row, p) > 0.0) here.push_back({s, sc, p, o, oc, ss * os * pred(row, p)});
      }
      if (constrained && !here.empty()) {
        Cand top = here.front();
        for (const Cand& c : here) {
          if (pred(row, c.p) > pred(row, top.p)) top = c;
        }
        here = {top};
      }
      all.insert(all.end(), here.begin(), here.end());
      ++row;
    }
  }
  auto beats = [](const Cand& a, const Cand& b) {
    if (a.conf != b.conf) return a.conf > b.conf;
    if (a.s != b.s) return a.s < b.s;
    if (a.o != b.o) return a.o < b.o;
    return a.p < b.p;
  };
  std::vector<Cand> top;
  for (const Cand& c : all) {
    Index rank = 0;
    for (const Cand& d : all) rank += beats(d, c) ? 1 : 0;
    if (rank < k) top.push_back(c);
  }
  auto matches = [&](const Cand& c, const TruthTriplet& t) {
    if (c.p != t.predicate || c.sc != t.subject_class || c.oc != t.object_class) return false;
    if (task == Task::SGGen) {
      return iou(boxes[static_cast<std::size_t>(c.s)], t.subject_box) >= 0.5 &&
             iou(boxes[static_cast<std::size_t>(c.o)], t.object_box) >= 0.5;
    }
    return c.s == t.subject && c.o == t.object;
  };
  // assignment[g] = prediction index + 1, or 0 for unmatched
  std::vector<std::size_t> assign(truth.size(), 0);
  std::vector<std::size_t> best_assign = assign;
  std::size_t best = 0;
  std::function<void(std::size_t, std::vector<char>&, std::size_t)> search = [&](std::size_t g, std::vector<char>& used,
                                                                                std::size_t count) {
    if (g == truth.size()) {
      if (count > best) {
        best = count;
        best_assign = assign;
      }
      return;
    }
    assign[g] = 0;
    search(g + 1, used, count);
    for (std::size_t i = 0; i < top.size(); ++i) {
      if (used[i] || !matches(top[i], truth[g])) continue;
      used[i] = 1;
      assign[g] = i + 1;
      search(g + 1, used, count + 1);
      used[i] = 0;
      assign[g] = 0;
    }
  };
  std::vector<char> used(top.size(), 0);
  search(0, used, 0);
  OracleResult r;
  r.hits.assign(static_cast<std::size_t>(pred.cols()), 0);
  r.totals.assign(static_cast<std::size_t>(pred.cols()), 0);
  for (std::size_t g = 0; g < truth.size(); ++g) {
    ++r.totals[static_cast<std::size_t>(truth[g].predicate)];
    if (best_assign[g]) ++r.hits[static_cast<std::size_t>(truth[g].predicate)];
  }
  r.recall = static_cast<double>(best) / static_cast<double>(truth.size());
  return r;
}

Outcome oracle_equivalence() {
  gbtest::Gen g(202);
  int mismatches = 0;
  std::vector<ImageRecall> fast_images;
  std::vector<OracleResult> slow_images;
  const Index n_pred_classes = 3;
  for (int inst = 0; inst < 200; ++inst) {
    const Index n = g.integer(2, 3);
    const Index n_ent_classes = g.integer(1, 3);
    const Index bg = g.integer(0, static_cast<int>(n_pred_classes) - 1);
    // Coarse values so ties in scores and confidences are common.
    auto coarse = [&g](Index r, Index c) {
      Matrix m(r, c);
      for (Index i = 0; i < m.size(); ++i) m.data()[i] = 0.25 * g.integer(0, 4);
      return m;
    };
    const Matrix ent = coarse(n, n_ent_classes);
    const Matrix pred = coarse(n * (n - 1), n_pred_classes);
    const std::vector<Box> boxes = g.boxes(static_cast<int>(n));
    const Task task = static_cast<Task>(g.integer(0, 2));
    const bool constrained = g.coin();
    const Index k = g.integer(1, 8);
    std::vector<TruthTriplet> truth;
    const int nt = g.integer(1, 4);
    for (int t = 0; t < nt; ++t) {
      TruthTriplet tt;
      tt.subject = g.integer(0, static_cast<int>(n) - 1);
      do tt.object = g.integer(0, static_cast<int>(n) - 1); while (tt.object == tt.subject);
      tt.subject_class = g.integer(0, static_cast<int>(n_ent_classes) - 1);
      tt.object_class = g.integer(0, static_cast<int>(n_ent_classes) - 1);
      do tt.predicate = g.integer(0, static_cast<int>(n_pred_classes) - 1); while (tt.predicate == bg);
      // Boxes either coincide with a prediction's box or are drawn afresh.
      tt.subject_box = g.coin(0.7) ? boxes[static_cast<std::size_t>(g.integer(0, static_cast<int>(n) - 1))] : g.box();
      tt.object_box = g.coin(0.7) ? boxes[static_cast<std::size_t>(g.integer(0, static_cast<int>(n) - 1))] : g.box();
      truth.push_back(tt);
    }
    const auto preds = extract_topk(ent, pred, boxes, k, constrained, bg);
    const ImageRecall fast = match_and_recall(preds, truth, k, task, n_pred_classes);
    const OracleResult slow = brute_force(ent, pred, boxes, truth, k, constrained, bg, task);
    if (fast.recall != slow.recall || fast.hits != slow.hits || fast.totals != slow.totals) ++mismatches;
    fast_images.push_back(fast);
    slow_images.push_back(slow);
  }
  // Dataset-level summary against a direct recomputation.
  const RecallSummary sum = aggregate_recall(fast_images, 0);
  double r = 0.0;
  for (const auto& s : slow_images) r += s.recall;
  r /= static_cast<double>(slow_images.size());
  double mr = 0.0;
  int present = 0;
  for (std::size_t c = 1; c < static_cast<std::size_t>(n_pred_classes); ++c) {
    std::uint64_t h = 0, t = 0;
    for (const auto& s : slow_images) {
      h += s.hits[c];
      t += s.totals[c];
    }
    if (t == 0) continue;
    mr += static_cast<double>(h) / static_cast<double>(t);
    ++present;
  }
  mr = present ? mr / present : 0.0;
  const bool summary_ok = sum.recall == r && sum.mean_recall == mr;
  return {mismatches == 0 && summary_ok, std::to_string(200 - mismatches) + "/200 instances identical, summary " +
                                             (summary_ok ? "identical" : "differs")};
}

// ---- shared toy-world training -------------------------------------------

struct ToyRun {
  Dataset train, test;
  CommonsenseGraph kg;
};

ToyRun toy_world(std::uint64_t seed, double sigma, double zipf) {
  ToyRun r;
  const ToyWorld w = generate_world(seed, 8, 6, 16, sigma, zipf);
  r.train = generate_dataset(w, 500, seed, 3, 5, 0);
  r.test = generate_dataset(w, 100, seed, 3, 5, 500);
  r.kg = compile_world_graph(w, r.train);
  return r;
}

double recall_at_50(const ToyRun& run, const ModelParams& params, Task task, const std::string& metric) {
  EvalOptions opt;
  opt.tasks = {task};
  opt.ks = {50};
  opt.constrained = {true};
  return *evaluate_dataset(run.test, run.kg, params, opt).find(task, metric, 50, true);
}

// ---- A3 -------------------------------------------------------------------

Outcome toy_learning() {
  const ToyRun run = toy_world(12, 0.1, 1.0);
  TrainConfig cfg;  // defaults throughout
  const TrainResult res = train(run.train, run.kg, cfg);
  const double pred = recall_at_50(run, res.params, Task::PredCls, "R");
  const double cls = recall_at_50(run, res.params, Task::SGCls, "R");
  return {pred >= 0.90 && cls >= 0.80, "PredCls R@50 " + fmt("%.4f", pred) + " (>= 0.90), SGCls R@50 " +
                                           fmt("%.4f", cls) + " (>= 0.80), " + std::to_string(res.adam.step) +
                                           " steps"};
}

// ---- A4 -------------------------------------------------------------------

Outcome class_balance() {
  const ToyRun run = toy_world(21, 0.1, 2.0);
  TrainConfig cfg;
  cfg.mode = Task::PredCls;
  cfg.balance_beta = 0.0;
  const TrainResult plain = train(run.train, run.kg, cfg);
  cfg.balance_beta = 0.999;
  const TrainResult balanced = train(run.train, run.kg, cfg);
  const double r0 = recall_at_50(run, plain.params, Task::PredCls, "R");
  const double m0 = recall_at_50(run, plain.params, Task::PredCls, "mR");
  const double r1 = recall_at_50(run, balanced.params, Task::PredCls, "R");
  const double m1 = recall_at_50(run, balanced.params, Task::PredCls, "mR");
  const bool pass = m1 > m0 && std::abs(r1 - r0) <= 0.05;
  return {pass, "mR@50 " + fmt("%.4f", m0) + " -> " + fmt("%.4f", m1) + ", R@50 " + fmt("%.4f", r0) + " -> " +
                    fmt("%.4f", r1) + " (beta 0 -> 0.999)"};
}

// ---- A5 -------------------------------------------------------------------

Outcome message_depth() {
  const ToyRun run = toy_world(31, 0.5, 1.0);
  TrainConfig cfg;
  cfg.mode = Task::PredCls;
  cfg.model.steps = 1;
  const double r1 = recall_at_50(run, train(run.train, run.kg, cfg).params, Task::PredCls, "R");
  cfg.model.steps = 3;
  const double r3 = recall_at_50(run, train(run.train, run.kg, cfg).params, Task::PredCls, "R");
  return {r3 >= r1, "PredCls R@50 T=1 " + fmt("%.4f", r1) + ", T=3 " + fmt("%.4f", r3)};
}

// ---- A6 -------------------------------------------------------------------

struct Invariant {
  std::string name;
  int cases = 0;
  int failures = 0;
};

Invariant softmax_rows(gbtest::Gen& g) {
  Invariant inv{"softmax rows"};
  for (; inv.cases < 200; ++inv.cases) {
    const Matrix x = g.matrix(g.integer(1, 6), g.integer(1, 9), std::pow(10.0, g.integer(-2, 3)));
    const Matrix y = row_softmax_values(x);
    for (Index i = 0; i < y.rows(); ++i) {
      if (std::abs(y.row(i).sum() - 1.0) > 1e-9 || (y.row(i).array() < 0.0).any()) {
        ++inv.failures;
        break;
      }
    }
  }
  return inv;
}

Invariant top_k_bounds(gbtest::Gen& g) {
  Invariant inv{"top-K nonzero bounds"};
  for (; inv.cases < 100; ++inv.cases) {
    const CommonsenseGraph kg = gbtest::small_kg(g, g.integer(2, 5), g.integer(1, 4));
    const Index k = g.integer(1, 4);
    const gbtest::TinyScene scene = gbtest::tiny_scene(g, kg, g.integer(1, 4), 3);
    const ModelParams params = ModelParams::initialize(gbtest::tiny_config(kg, 4, 1, 3, k), g.integer(0, 1000));
    const ForwardOutput out = forward(scene.graph, scene.inputs, kg, params, Task::SGCls);
    const BridgeSet init = init_entity_bridges(scene.inputs.label_dists, k);
    bool ok = true;
    for (const Matrix* m : {&out.bridges.entity, &out.bridges.predicate, &init.entity}) {
      for (Index i = 0; i < m->rows(); ++i) ok = ok && (m->row(i).array() != 0.0).count() <= k;
    }
    inv.failures += ok ? 0 : 1;
  }
  return inv;
}

Invariant skeleton_edges(gbtest::Gen& g) {
  Invariant inv{"scene skeleton edge counts"};
  for (; inv.cases < 100; ++inv.cases) {
    const int n = g.integer(0, 12);
    std::vector<Detection> dets;
    for (int i = 0; i < n; ++i) dets.push_back({g.box(), i});
    const HeteroGraph sk = build_scene_skeleton(dets);
    const std::size_t want = 4 * static_cast<std::size_t>(n) * static_cast<std::size_t>(std::max(n - 1, 0));
    inv.failures += sk.edges().size() == want && sk.count(NodeKind::SP) == want / 4 ? 0 : 1;
  }
  return inv;
}

Invariant checkpoint_round_trip(gbtest::Gen& g) {
  Invariant inv{"checkpoint round trip"};
  for (; inv.cases < 100; ++inv.cases) {
    std::vector<NamedTensor> tensors;
    const int count = g.integer(0, 6);
    for (int t = 0; t < count; ++t) {
      const Matrix m = g.matrix(g.integer(0, 5), g.integer(0, 5), 10.0);
      tensors.push_back({"t" + std::to_string(t) + ".W", m.cast<float>().cast<double>()});
    }
    const std::string bytes = encode_checkpoint(tensors);
    const auto back = decode_checkpoint(bytes);
    bool ok = back.size() == tensors.size() && encode_checkpoint(back) == bytes;
    for (std::size_t i = 0; ok && i < back.size(); ++i) {
      ok = back[i].name == tensors[i].name && back[i].value.rows() == tensors[i].value.rows() &&
           back[i].value.cols() == tensors[i].value.cols() && back[i].value == tensors[i].value;
    }
    inv.failures += ok ? 0 : 1;
  }
  return inv;
}

Invariant conditional_sums(gbtest::Gen& g) {
  Invariant inv{"conditional distributions"};
  for (; inv.cases < 100; ++inv.cases) {
    TripletCounts counts;
    const int e = g.integer(1, 5), p = g.integer(1, 4);
    for (int t = g.integer(1, 30); t > 0; --t) {
      counts[{"e" + std::to_string(g.integer(0, e - 1)), "p" + std::to_string(g.integer(0, p - 1)),
              "e" + std::to_string(g.integer(0, e - 1))}] += static_cast<std::uint64_t>(g.integer(1, 1000));
    }
    std::map<std::pair<std::string, std::string>, double> mass;  // (relation, condition) -> sum
    for (const ConditionalEdge& c : compile_conditional_edges(counts)) mass[{c.relation, c.dst_label}] += c.weight;
    bool ok = !mass.empty();
    for (const auto& [key, total] : mass) ok = ok && std::abs(total - 1.0) <= 1e-9;
    inv.failures += ok ? 0 : 1;
  }
  return inv;
}

Invariant recall_monotone(gbtest::Gen& g) {
  Invariant inv{"R@100 >= R@50"};
  for (; inv.cases < 100; ++inv.cases) {
    const Index n = g.integer(2, 9);
    const Index classes = g.integer(2, 6);
    const Matrix ent = g.distributions(n, 4);
    const Matrix pred = g.distributions(n * (n - 1), classes);
    const auto boxes = g.boxes(static_cast<int>(n));
    std::vector<TruthTriplet> truth;
    for (int t = g.integer(1, 12); t > 0; --t) {
      TruthTriplet tt;
      tt.subject = g.integer(0, static_cast<int>(n) - 1);
      do tt.object = g.integer(0, static_cast<int>(n) - 1); while (tt.object == tt.subject);
      tt.subject_class = g.integer(0, 3);
      tt.object_class = g.integer(0, 3);
      tt.predicate = g.integer(1, static_cast<int>(classes) - 1);
      tt.subject_box = boxes[static_cast<std::size_t>(tt.subject)];
      tt.object_box = boxes[static_cast<std::size_t>(tt.object)];
      truth.push_back(tt);
    }
    bool ok = true;
    for (bool constrained : {true, false}) {
      const auto preds = extract_topk(ent, pred, boxes, 100, constrained, 0);
      for (Task task : {Task::SGGen, Task::SGCls, Task::PredCls}) {
        const double r50 = match_and_recall(preds, truth, 50, task, classes).recall;
        const double r100 = match_and_recall(preds, truth, 100, task, classes).recall;
        ok = ok && r100 >= r50;
      }
    }
    inv.failures += ok ? 0 : 1;
  }
  return inv;
}

Outcome invariant_suites() {
  gbtest::Gen g(606);
  std::vector<Invariant> all{softmax_rows(g),     top_k_bounds(g),     skeleton_edges(g),
                             checkpoint_round_trip(g), conditional_sums(g), recall_monotone(g)};
  bool pass = true;
  std::string detail;
  for (const Invariant& inv : all) {
    pass = pass && inv.failures == 0 && inv.cases >= 100;
    if (!detail.empty()) detail += "; ";
    detail += inv.name + " " + std::to_string(inv.cases - inv.failures) + "/" + std::to_string(inv.cases);
  }
  return {pass, detail};
}

// ---- A7 -------------------------------------------------------------------

int shell(const std::string& cmd) { return std::system((cmd + " > /dev/null 2>&1").c_str()); }

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

Outcome determinism() {
  const fs::path dir = scratch_dir("determinism");
  const std::string cli = GBNET_CLI_PATH;
  const std::string d = dir.string();
  if (shell(cli + " synth --seed 5 --train 40 --test 10 -o " + d + "/world") != 0) return {false, "synth failed"};
  std::vector<std::string> files;
  for (const char* tag : {"a", "b"}) {
    const std::string ckpt = d + "/" + tag + ".ckpt";
    const std::string metrics = d + "/" + tag + ".metrics.tsv";
    if (shell(cli + " train --data " + d + "/world/train.gbds --kg " + d + "/world/kg.gbkg --max-steps 40 --seed 3" +
              " --threads 1 -o " + ckpt) != 0) {
      return {false, "train failed"};
    }
    if (shell(cli + " eval --data " + d + "/world/test.gbds --kg " + d + "/world/kg.gbkg --checkpoint " + ckpt +
              " -o " + metrics) != 0) {
      return {false, "eval failed"};
    }
    files.push_back(slurp(ckpt));
    files.push_back(slurp(d + "/" + tag + ".loss.tsv"));
    files.push_back(slurp(metrics));
  }
  const bool ckpt_same = !files[0].empty() && files[0] == files[3];
  const bool loss_same = files[1] == files[4];
  const bool metrics_same = !files[2].empty() && files[2] == files[5];
  fs::remove_all(dir.parent_path());
  return {ckpt_same && loss_same && metrics_same,
          std::string("checkpoint ") + (ckpt_same ? "identical" : "differs") + ", loss log " +
              (loss_same ? "identical" : "differs") + ", metrics " + (metrics_same ? "identical" : "differs")};
}

}  // namespace

int main(int argc, char** argv) {
  const std::vector<std::pair<std::string, std::function<Outcome()>>> criteria{
      {"A1 gradient fidelity", gradient_fidelity},   {"A2 oracle equivalence", oracle_equivalence},
      {"A3 toy learning", toy_learning},             {"A4 class-balance effect", class_balance},
      {"A5 message-depth effect", message_depth},    {"A6 invariant suites", invariant_suites},
      {"A7 determinism", determinism},
  };
  std::set<std::string> only;
  for (int i = 1; i < argc; ++i) only.insert(argv[i]);
  bool all_pass = true;
  for (const auto& [name, check] : criteria) {
    if (!only.empty() && !only.count(name.substr(0, 2))) continue;
    const auto t0 = std::chrono::steady_clock::now();
    Outcome o;
    try {
      o = check();
    } catch (const std::exception& e) {
      o = {false, std::string("exception: ") + e.what()};
    }
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    all_pass = all_pass && o.pass;
    std::cout << (o.pass ? "PASS " : "FAIL ") << name << ": " << o.detail << " [" << fmt("%.1f", secs) << " s]"
              << std::endl;
  }
  return all_pass ? 0 : 1;
}
