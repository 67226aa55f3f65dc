#pragma once

// Toy scene world: entity prototypes in feature space, a hidden rule table
// (subject class, object class, spatial relation) -> predicate with a
// Zipf-skewed share of cells per predicate, and per-scene sampling.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <istream>
#include <numeric>
#include <ostream>
#include <random>
#include <string>
#include <vector>

#include "gbnet/box.hpp"
#include "gbnet/commonsense.hpp"
#include "gbnet/dataset.hpp"
#include "gbnet/errors.hpp"
#include "gbnet/random.hpp"
#include "gbnet/tensor.hpp"
#include "gbnet/text.hpp"

namespace gbnet {

inline constexpr int kSpatialRelations = 2;  // object right of subject, or not

inline std::uint64_t scene_seed(std::uint64_t global_seed, std::int64_t image_id) {
  return splitmix64(global_seed ^ splitmix64(static_cast<std::uint64_t>(image_id)));
}

inline int spatial_relation(const Box& subject, const Box& object) {
  return object.center_x() > subject.center_x() ? 0 : 1;
}

struct WorldOptions {
  double temperature = 0.5;      // detector softmax temperature over prototype distances
  double pair_label_prob = 0.5;  // chance an ordered pair carries its rule predicate
  double box_jitter = 0.05;      // detector box noise, relative to box size
  Index embedding_dim = 16;
};

struct ToyWorld {
  std::uint64_t seed = 0;
  Index feat_dim = 0;
  double sigma = 0.0;
  double zipf_exponent = 1.0;
  WorldOptions options;
  std::vector<std::string> entity_labels;
  std::vector<std::string> predicate_labels;
  Matrix prototypes;       // E x feat_dim, unit rows
  std::vector<int> rules;  // ((s * E) + o) * R + rel -> predicate
  EmbeddingTable embeddings;
  std::vector<OntologyEdgeRecord> ontology;

  int entity_count() const { return static_cast<int>(entity_labels.size()); }
  int predicate_count() const { return static_cast<int>(predicate_labels.size()); }

  int rule(int s, int o, int rel) const {
    return rules.at(static_cast<std::size_t>((s * entity_count() + o) * kSpatialRelations + rel));
  }
};

// Zipf shares p_r proportional to 1 / (r + 1)^s.
inline std::vector<double> zipf_shares(int n, double s) {
  std::vector<double> p(static_cast<std::size_t>(n));
  for (int r = 0; r < n; ++r) p[static_cast<std::size_t>(r)] = 1.0 / std::pow(r + 1.0, s);
  const double total = std::accumulate(p.begin(), p.end(), 0.0);
  for (double& v : p) v /= total;
  return p;
}

// Largest-remainder apportionment of `cells` by `shares`, at least one each.
inline std::vector<int> apportion(const std::vector<double>& shares, int cells) {
  const int n = static_cast<int>(shares.size());
  if (cells < n) throw ConfigError("rule table has fewer cells than predicate classes");
  std::vector<int> q(shares.size(), 1);
  const int rest = cells - n;
  std::vector<std::pair<double, int>> rem;
  int used = 0;
  for (int i = 0; i < n; ++i) {
    const double exact = shares[static_cast<std::size_t>(i)] * rest;
    const int whole = static_cast<int>(std::floor(exact));
    q[static_cast<std::size_t>(i)] += whole;
    used += whole;
    rem.emplace_back(exact - whole, i);
  }
  std::stable_sort(rem.begin(), rem.end(), [](const auto& a, const auto& b) { return a.first > b.first; });
  for (int i = 0; used < rest; ++i, ++used) ++q[static_cast<std::size_t>(rem[static_cast<std::size_t>(i)].second)];
  return q;
}

inline ToyWorld generate_world(std::uint64_t seed, int n_entity_classes, int n_predicate_classes, Index feat_dim,
                               double sigma, double zipf_exponent = 1.0, WorldOptions options = {}) {
  if (n_entity_classes < 2 || n_predicate_classes < 2) throw ConfigError("a world needs at least 2 entity and 2 predicate classes");
  if (feat_dim < 1) throw ConfigError("feature dimension must be positive");
  if (sigma < 0.0 || options.temperature <= 0.0) throw ConfigError("sigma must be >= 0 and temperature > 0");
  if (options.pair_label_prob < 0.0 || options.pair_label_prob > 1.0) throw ConfigError("pair_label_prob outside [0,1]");
  if (options.embedding_dim < 1) throw ConfigError("embedding dimension must be positive");

  ToyWorld w;
  w.seed = seed;
  w.feat_dim = feat_dim;
  w.sigma = sigma;
  w.zipf_exponent = zipf_exponent;
  w.options = options;
  for (int i = 0; i < n_entity_classes; ++i) w.entity_labels.push_back("ent" + std::to_string(i));
  for (int i = 0; i < n_predicate_classes; ++i) w.predicate_labels.push_back("pred" + std::to_string(i));

  std::mt19937_64 rng(seed);
  std::normal_distribution<double> gauss(0.0, 1.0);
  if (feat_dim == 1 && n_entity_classes > 2) throw ConfigError("1-dimensional features fit at most 2 distinct prototypes");
  w.prototypes = Matrix(n_entity_classes, feat_dim);
  for (Index i = 0; i < w.prototypes.rows(); ++i) {
    // redraw until distinct from the earlier prototypes
    for (bool clash = true; clash;) {
      for (Index j = 0; j < feat_dim; ++j) w.prototypes(i, j) = gauss(rng);
      w.prototypes.row(i).normalize();
      clash = false;
      for (Index k = 0; k < i; ++k) clash = clash || (w.prototypes.row(i) - w.prototypes.row(k)).norm() < 1e-3;
    }
  }

  const int cells = n_entity_classes * n_entity_classes * kSpatialRelations;
  const std::vector<int> quota = apportion(zipf_shares(n_predicate_classes, zipf_exponent), cells);
  std::vector<int> order(static_cast<std::size_t>(cells));
  std::iota(order.begin(), order.end(), 0);
  std::shuffle(order.begin(), order.end(), rng);
  w.rules.assign(static_cast<std::size_t>(cells), 0);
  std::size_t at = 0;
  for (int p = 0; p < n_predicate_classes; ++p) {
    for (int c = 0; c < quota[static_cast<std::size_t>(p)]; ++c) w.rules[static_cast<std::size_t>(order[at++])] = p;
  }

  const double emb_scale = 1.0 / std::sqrt(static_cast<double>(options.embedding_dim));
  for (const auto* labels : {&w.entity_labels, &w.predicate_labels}) {
    for (const std::string& l : *labels) {
      std::vector<double> v(static_cast<std::size_t>(options.embedding_dim));
      for (double& x : v) x = emb_scale * gauss(rng);
      w.embeddings[l] = std::move(v);
    }
  }

  // Each entity class is SimilarTo its nearest prototype and RelatedTo the
  // predicate it most often governs as a subject.
  for (int i = 0; i < n_entity_classes; ++i) {
    int best = -1;
    double best_d = 0.0;
    for (int j = 0; j < n_entity_classes; ++j) {
      if (j == i) continue;
      const double d = (w.prototypes.row(i) - w.prototypes.row(j)).norm();
      if (best < 0 || d < best_d) best = j, best_d = d;
    }
    w.ontology.push_back({w.entity_labels[static_cast<std::size_t>(i)], "SimilarTo",
                          w.entity_labels[static_cast<std::size_t>(best)], 1.0, 0});
  }
  for (int s = 0; s < n_entity_classes; ++s) {
    std::vector<int> hits(static_cast<std::size_t>(n_predicate_classes), 0);
    for (int o = 0; o < n_entity_classes; ++o) {
      for (int r = 0; r < kSpatialRelations; ++r) ++hits[static_cast<std::size_t>(w.rule(s, o, r))];
    }
    const auto top = std::max_element(hits.begin(), hits.end()) - hits.begin();
    w.ontology.push_back({w.entity_labels[static_cast<std::size_t>(s)], "RelatedTo",
                          w.predicate_labels[static_cast<std::size_t>(top)], 0.5, 0});
  }
  return w;
}

// Detector class distribution: softmax of negative prototype distance.
inline Eigen::RowVectorXd detector_distribution(const ToyWorld& w, const Eigen::RowVectorXd& feature) {
  Matrix logits(1, w.entity_count());
  for (int c = 0; c < w.entity_count(); ++c) logits(0, c) = -(feature - w.prototypes.row(c)).norm() / w.options.temperature;
  return row_softmax_values(logits).row(0);
}

inline SceneRecord sample_scene(const ToyWorld& w, int n_entities, std::uint64_t seed, std::int64_t image_id = 0) {
  if (n_entities < 2 || n_entities > 20) throw ConfigError("scenes hold 2 to 20 entities");
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  std::uniform_int_distribution<int> cls(0, w.entity_count() - 1);
  std::normal_distribution<double> gauss(0.0, 1.0);

  SceneRecord r;
  r.image_id = image_id;
  const Index n = n_entities;
  r.features = Matrix(n, w.feat_dim);
  r.detector_dists = Matrix(n, w.entity_count());
  for (Index i = 0; i < n; ++i) {
    const int c = cls(rng);
    r.gt_classes.push_back(c);
    const double bw = 0.1 + 0.3 * unit(rng);
    const double bh = 0.1 + 0.3 * unit(rng);
    const double x1 = (1.0 - bw) * unit(rng);
    const double y1 = (1.0 - bh) * unit(rng);
    const Box gt{x1, y1, x1 + bw, y1 + bh};
    r.gt_boxes.push_back(gt);
    const double j = w.options.box_jitter;
    Box det{std::clamp(gt.x1 + j * bw * gauss(rng), 0.0, 1.0), std::clamp(gt.y1 + j * bh * gauss(rng), 0.0, 1.0),
            std::clamp(gt.x2 + j * bw * gauss(rng), 0.0, 1.0), std::clamp(gt.y2 + j * bh * gauss(rng), 0.0, 1.0)};
    r.boxes.push_back(is_valid_box(det) ? det : gt);
    for (Index d = 0; d < w.feat_dim; ++d) {
      r.features(i, d) = w.prototypes(c, d) + (w.sigma > 0.0 ? w.sigma * gauss(rng) : 0.0);
    }
    r.detector_dists.row(i) = detector_distribution(w, r.features.row(i));
  }
  r.union_features = union_features(r.features, r.gt_boxes);
  for (int s = 0; s < n_entities; ++s) {
    for (int o = 0; o < n_entities; ++o) {
      if (s == o) continue;
      if (unit(rng) >= w.options.pair_label_prob) continue;
      const int rel = spatial_relation(r.gt_boxes[static_cast<std::size_t>(s)], r.gt_boxes[static_cast<std::size_t>(o)]);
      r.triplets.push_back({s, w.rule(r.gt_classes[static_cast<std::size_t>(s)], r.gt_classes[static_cast<std::size_t>(o)], rel), o});
    }
  }
  return r;
}

// `count` scenes with ids first_id, first_id + 1, ...; scene sizes uniform in
// [min_entities, max_entities].
inline Dataset generate_dataset(const ToyWorld& w, int count, std::uint64_t seed, int min_entities = 2,
                                int max_entities = 6, std::int64_t first_id = 0) {
  if (count < 0 || max_entities < min_entities) throw ConfigError("bad dataset size parameters");
  Dataset ds;
  ds.feat_dim = w.feat_dim;
  ds.entity_labels = w.entity_labels;
  ds.predicate_labels = w.predicate_labels;
  for (int i = 0; i < count; ++i) {
    const std::int64_t id = first_id + i;
    const std::uint64_t s = scene_seed(seed, id);
    const int n = min_entities + static_cast<int>(splitmix64(s) % static_cast<std::uint64_t>(max_entities - min_entities + 1));
    ds.records.push_back(sample_scene(w, n, s, id));
  }
  return ds;
}

inline TripletCounts count_triplets(const Dataset& ds) {
  TripletCounts counts;
  for (const SceneRecord& r : ds.records) {
    for (const SceneTriplet& t : r.triplets) {
      ++counts[{ds.entity_labels[static_cast<std::size_t>(r.gt_classes[static_cast<std::size_t>(t.subject)])],
                ds.predicate_labels[static_cast<std::size_t>(t.predicate)],
                ds.entity_labels[static_cast<std::size_t>(r.gt_classes[static_cast<std::size_t>(t.object)])]}];
    }
  }
  return counts;
}

// Commonsense graph from the world's ontology and embeddings plus statistics
// counted on a (training) split.
inline CommonsenseGraph compile_world_graph(const ToyWorld& w, const Dataset& train) {
  return assemble(w.entity_labels, w.predicate_labels, w.ontology, compile_conditional_edges(count_triplets(train)),
                  w.embeddings);
}

// GBWORLD 1 followed by tab-separated key/value records.
inline void write_world(std::ostream& out, const ToyWorld& w) {
  out << "GBWORLD 1\n";
  out << "seed\t" << w.seed << "\nfeat_dim\t" << w.feat_dim << "\nsigma\t" << text::format_double(w.sigma)
      << "\nzipf\t" << text::format_double(w.zipf_exponent) << "\ntemperature\t"
      << text::format_double(w.options.temperature) << "\npair_label_prob\t"
      << text::format_double(w.options.pair_label_prob) << "\nbox_jitter\t" << text::format_double(w.options.box_jitter)
      << "\nembedding_dim\t" << w.options.embedding_dim << '\n';
  for (int c = 0; c < w.entity_count(); ++c) {
    const Eigen::RowVectorXd row = w.prototypes.row(c);
    out << "entity\t" << w.entity_labels[static_cast<std::size_t>(c)] << '\t'
        << text::join_doubles(std::vector<double>(row.data(), row.data() + row.size())) << '\n';
  }
  for (const std::string& l : w.predicate_labels) out << "predicate\t" << l << '\n';
  for (std::size_t i = 0; i < w.rules.size(); ++i) out << "rule\t" << i << '\t' << w.rules[i] << '\n';
  for (const auto& [label, v] : w.embeddings) out << "embedding\t" << label << '\t' << text::join_doubles(v) << '\n';
  for (const OntologyEdgeRecord& e : w.ontology) {
    out << "ontology\t" << e.src_label << '\t' << e.relation << '\t' << e.dst_label << '\t'
        << text::format_double(e.weight) << '\n';
  }
}

inline ToyWorld read_world(std::istream& in) {
  ToyWorld w;
  std::string raw;
  std::size_t line = 1;
  if (!std::getline(in, raw) || text::trim(raw) != "GBWORLD 1") throw ParseError("missing 'GBWORLD 1' header", line);
  std::vector<std::vector<double>> protos;
  std::vector<std::pair<std::size_t, int>> rules;
  while (std::getline(in, raw)) {
    ++line;
    const std::string_view s = text::strip_cr(raw);
    if (text::trim(s).empty()) continue;
    const auto f = text::split(s, '\t');
    const std::string_view key = f[0];
    auto need = [&](std::size_t n) {
      if (f.size() != n) throw ParseError("'" + std::string(key) + "' expects " + std::to_string(n - 1) + " values", line);
    };
    if (key == "seed") need(2), w.seed = text::parse_int<std::uint64_t>(f[1], line);
    else if (key == "feat_dim") need(2), w.feat_dim = text::parse_int<Index>(f[1], line);
    else if (key == "sigma") need(2), w.sigma = text::parse_double(f[1], line);
    else if (key == "zipf") need(2), w.zipf_exponent = text::parse_double(f[1], line);
    else if (key == "temperature") need(2), w.options.temperature = text::parse_double(f[1], line);
    else if (key == "pair_label_prob") need(2), w.options.pair_label_prob = text::parse_double(f[1], line);
    else if (key == "box_jitter") need(2), w.options.box_jitter = text::parse_double(f[1], line);
    else if (key == "embedding_dim") need(2), w.options.embedding_dim = text::parse_int<Index>(f[1], line);
    else if (key == "entity") {
      need(3);
      w.entity_labels.emplace_back(f[1]);
      protos.push_back(text::parse_double_list(f[2], line));
    } else if (key == "predicate") {
      need(2);
      w.predicate_labels.emplace_back(f[1]);
    } else if (key == "rule") {
      need(3);
      rules.emplace_back(text::parse_int<std::size_t>(f[1], line), text::parse_int<int>(f[2], line));
    } else if (key == "embedding") {
      need(3);
      w.embeddings[std::string(f[1])] = text::parse_double_list(f[2], line);
    } else if (key == "ontology") {
      need(5);
      w.ontology.push_back({std::string(f[1]), std::string(f[2]), std::string(f[3]), text::parse_double(f[4], line), line});
    } else {
      throw ParseError("unknown world record '" + std::string(key) + "'", line);
    }
  }
  w.prototypes = Matrix(static_cast<Index>(protos.size()), w.feat_dim);
  for (std::size_t i = 0; i < protos.size(); ++i) {
    if (static_cast<Index>(protos[i].size()) != w.feat_dim) throw ParseError("prototype width does not match feat_dim", line);
    for (Index d = 0; d < w.feat_dim; ++d) w.prototypes(static_cast<Index>(i), d) = protos[i][static_cast<std::size_t>(d)];
  }
  const std::size_t cells = protos.size() * protos.size() * kSpatialRelations;
  if (rules.size() != cells) throw ParseError("rule table has " + std::to_string(rules.size()) + " cells, expected " + std::to_string(cells), line);
  w.rules.assign(cells, -1);
  for (auto [at, p] : rules) {
    if (at >= cells || p < 0 || p >= w.predicate_count()) throw ParseError("rule entry out of range", line);
    w.rules[at] = p;
  }
  if (std::count(w.rules.begin(), w.rules.end(), -1) > 0) throw ParseError("rule table has gaps", line);
  return w;
}

inline void save_world(const std::string& path, const ToyWorld& w) {
  auto out = text::open_output(path);
  write_world(out, w);
}

inline ToyWorld load_world(const std::string& path) {
  auto in = text::open_input(path);
  return read_world(in);
}

}  // namespace gbnet
