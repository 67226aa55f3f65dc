#pragma once

// Compiles the fixed commonsense graph: class nodes (plus one background node
// per kind), ontology relations, triplet-statistics conditionals, and the
// label embedding table.

#include <algorithm>
#include <array>
#include <cstdint>
#include <istream>
#include <map>
#include <ostream>
#include <set>
#include <sstream>
#include <string>
#include <tuple>
#include <vector>

#include "gbnet/errors.hpp"
#include "gbnet/graph.hpp"
#include "gbnet/tensor.hpp"
#include "gbnet/text.hpp"

namespace gbnet {

inline const std::array<std::string_view, 6> kOntologyRelations{"SimilarTo", "PartOf",   "RelatedTo",
                                                                "IsA",       "MannerOf", "UsedFor"};

inline bool is_ontology_relation(std::string_view r) {
  return std::find(kOntologyRelations.begin(), kOntologyRelations.end(), r) != kOntologyRelations.end();
}

struct OntologyEdgeRecord {
  std::string src_label;
  std::string relation;
  std::string dst_label;
  double weight = 1.0;
  std::size_t line = 0;
};

// Parses `src<TAB>relation<TAB>dst[<TAB>weight]` lines; '#' starts a comment.
inline std::vector<OntologyEdgeRecord> parse_ontology_edges(std::istream& in) {
  std::vector<OntologyEdgeRecord> out;
  std::string raw;
  std::size_t line = 0;
  while (std::getline(in, raw)) {
    ++line;
    std::string_view s = text::strip_cr(raw);
    if (text::trim(s).empty() || text::trim(s).front() == '#') continue;
    const auto cols = text::split(s, '\t');
    if (cols.size() != 3 && cols.size() != 4) {
      throw ParseError("expected 3 or 4 tab-separated columns, got " + std::to_string(cols.size()), line);
    }
    OntologyEdgeRecord r;
    r.src_label = std::string(text::trim(cols[0]));
    r.relation = std::string(text::trim(cols[1]));
    r.dst_label = std::string(text::trim(cols[2]));
    r.line = line;
    if (r.src_label.empty() || r.dst_label.empty()) throw ParseError("empty label", line);
    if (!is_ontology_relation(r.relation)) throw VocabularyError("unknown relation '" + r.relation + "'", line);
    if (cols.size() == 4) r.weight = text::parse_double(cols[3], line);
    if (!(r.weight > 0.0 && r.weight <= 1.0)) throw ParseError("ontology weight must lie in (0,1]", line);
    out.push_back(std::move(r));
  }
  return out;
}

inline std::vector<OntologyEdgeRecord> load_ontology_edges(const std::string& path) {
  auto in = text::open_input(path);
  return parse_ontology_edges(in);
}

using TripletKey = std::tuple<std::string, std::string, std::string>;  // subject, predicate, object
using TripletCounts = std::map<TripletKey, std::uint64_t>;

inline TripletCounts parse_triplet_counts(std::istream& in) {
  TripletCounts counts;
  std::string raw;
  std::size_t line = 0;
  while (std::getline(in, raw)) {
    ++line;
    std::string_view s = text::strip_cr(raw);
    if (text::trim(s).empty() || text::trim(s).front() == '#') continue;
    const auto cols = text::split(s, '\t');
    if (cols.size() != 4) throw ParseError("expected subj, pred, obj, count", line);
    const long long c = text::parse_int(cols[3], line);
    if (c < 0) throw ParseError("negative count", line);
    counts[{std::string(text::trim(cols[0])), std::string(text::trim(cols[1])), std::string(text::trim(cols[2]))}] +=
        static_cast<std::uint64_t>(c);
  }
  return counts;
}

inline TripletCounts load_triplet_counts(const std::string& path) {
  auto in = text::open_input(path);
  return parse_triplet_counts(in);
}

inline void write_triplet_counts(std::ostream& out, const TripletCounts& counts) {
  for (const auto& [key, c] : counts) {
    out << std::get<0>(key) << '\t' << std::get<1>(key) << '\t' << std::get<2>(key) << '\t' << c << '\n';
  }
}

using EmbeddingTable = std::map<std::string, std::vector<double>>;

// `label<TAB>v1,v2,...,vd`
inline EmbeddingTable parse_embeddings(std::istream& in) {
  EmbeddingTable table;
  std::string raw;
  std::size_t line = 0;
  std::size_t dim = 0;
  while (std::getline(in, raw)) {
    ++line;
    std::string_view s = text::strip_cr(raw);
    if (text::trim(s).empty() || text::trim(s).front() == '#') continue;
    const auto cols = text::split(s, '\t');
    if (cols.size() != 2) throw ParseError("expected label and vector", line);
    std::vector<double> v = text::parse_double_list(cols[1], line);
    if (v.empty()) throw ParseError("empty embedding", line);
    if (dim == 0) dim = v.size();
    if (v.size() != dim) throw ParseError("embedding dimension " + std::to_string(v.size()) + " != " + std::to_string(dim), line);
    if (!table.emplace(std::string(text::trim(cols[0])), std::move(v)).second) {
      throw ParseError("duplicate embedding label", line);
    }
  }
  return table;
}

inline EmbeddingTable load_embeddings(const std::string& path) {
  auto in = text::open_input(path);
  return parse_embeddings(in);
}

inline void write_embeddings(std::ostream& out, const EmbeddingTable& table) {
  for (const auto& [label, v] : table) out << label << '\t' << text::join_doubles(v) << '\n';
}

// Conditional-probability edge between class labels with a declared signature.
struct ConditionalEdge {
  std::string relation;
  std::string src_label;
  NodeKind src_kind = NodeKind::CE;
  std::string dst_label;
  NodeKind dst_kind = NodeKind::CE;
  double weight = 0.0;
};

// The six conditional families. Each edge runs from the outcome class to the
// conditioning class, so a node aggregates the expectation of its neighbours'
// messages under P(neighbour | node).
namespace conditional {
inline constexpr std::string_view subj_given_pred = "subjGivenPred";  // CE -> CP
inline constexpr std::string_view pred_given_subj = "predGivenSubj";  // CP -> CE
inline constexpr std::string_view obj_given_pred = "objGivenPred";    // CE -> CP
inline constexpr std::string_view pred_given_obj = "predGivenObj";    // CP -> CE
inline constexpr std::string_view subj_given_obj = "subjGivenObj";    // CE -> CE
inline constexpr std::string_view obj_given_subj = "objGivenSubj";    // CE -> CE
}  // namespace conditional

inline std::vector<ConditionalEdge> compile_conditional_edges(const TripletCounts& counts) {
  std::uint64_t total = 0;
  for (const auto& [key, c] : counts) total += c;
  if (total == 0) throw InputError("triplet counts are empty");

  // joint[(a, b)] summed over the third slot; a is the outcome, b the condition.
  using Pair = std::pair<std::string, std::string>;
  struct Family {
    std::string_view relation;
    int outcome;    // 0 subject, 1 predicate, 2 object
    int condition;
    NodeKind outcome_kind;
    NodeKind condition_kind;
  };
  const std::array<Family, 6> families{{
      {conditional::subj_given_pred, 0, 1, NodeKind::CE, NodeKind::CP},
      {conditional::pred_given_subj, 1, 0, NodeKind::CP, NodeKind::CE},
      {conditional::obj_given_pred, 2, 1, NodeKind::CE, NodeKind::CP},
      {conditional::pred_given_obj, 1, 2, NodeKind::CP, NodeKind::CE},
      {conditional::subj_given_obj, 0, 2, NodeKind::CE, NodeKind::CE},
      {conditional::obj_given_subj, 2, 0, NodeKind::CE, NodeKind::CE},
  }};

  auto slot = [](const TripletKey& k, int i) -> const std::string& {
    return i == 0 ? std::get<0>(k) : (i == 1 ? std::get<1>(k) : std::get<2>(k));
  };

  std::vector<ConditionalEdge> out;
  for (const Family& f : families) {
    std::map<Pair, std::uint64_t> joint;
    std::map<std::string, std::uint64_t> marginal;
    for (const auto& [key, c] : counts) {
      if (c == 0) continue;
      joint[{slot(key, f.outcome), slot(key, f.condition)}] += c;
      marginal[slot(key, f.condition)] += c;
    }
    for (const auto& [pair, c] : joint) {
      ConditionalEdge e;
      e.relation = std::string(f.relation);
      e.src_label = pair.first;
      e.src_kind = f.outcome_kind;
      e.dst_label = pair.second;
      e.dst_kind = f.condition_kind;
      e.weight = static_cast<double>(c) / static_cast<double>(marginal.at(pair.second));
      out.push_back(std::move(e));
    }
  }
  return out;
}

struct CommonsenseGraph {
  HeteroGraph graph;
  Matrix entity_embeddings;     // |CE| x dim, row = CE local index
  Matrix predicate_embeddings;  // |CP| x dim

  Index entity_count() const { return static_cast<Index>(graph.count(NodeKind::CE)); }
  Index predicate_count() const { return static_cast<Index>(graph.count(NodeKind::CP)); }
  Index embedding_dim() const { return entity_embeddings.cols(); }

  const std::string& label(NodeKind k, Index local) const {
    return *graph.node(graph.members(k)[static_cast<std::size_t>(local)]).label;
  }

  std::optional<Index> class_index(NodeKind k, std::string_view label) const {
    if (auto id = graph.find_label(k, label)) return graph.local_index(*id);
    return std::nullopt;
  }

  Index background(NodeKind k) const { return *class_index(k, kBackgroundLabel); }

  // Commonsense edge types present, in a stable sorted order.
  std::vector<EdgeType> commonsense_types() const {
    std::vector<EdgeType> types;
    for (const EdgeType& t : graph.edge_types()) {
      if (t.family == EdgeFamily::commonsense) types.push_back(t);
    }
    std::sort(types.begin(), types.end());
    return types;
  }
};

namespace detail {

inline void check_labels(const std::vector<std::string>& labels, std::string_view what) {
  std::set<std::string> seen;
  for (const std::string& l : labels) {
    if (l.empty() || text::has_whitespace(l)) throw InputError(std::string(what) + " label '" + l + "' is empty or has whitespace");
    if (l == kBackgroundLabel) throw InputError(std::string(what) + " labels must not include the background label");
    if (!seen.insert(l).second) throw UniquenessError("duplicate " + std::string(what) + " label '" + l + "'");
  }
}

}  // namespace detail

// Builds the commonsense graph. CE nodes come first, sorted by label, then CP
// nodes sorted by label; background nodes get zero embeddings and no edges.
inline CommonsenseGraph assemble(const std::vector<std::string>& entity_labels,
                                 const std::vector<std::string>& predicate_labels,
                                 const std::vector<OntologyEdgeRecord>& ontology,
                                 const std::vector<ConditionalEdge>& conditionals, const EmbeddingTable& embeddings) {
  detail::check_labels(entity_labels, "entity");
  detail::check_labels(predicate_labels, "predicate");

  std::size_t dim = 0;
  for (const auto* labels : {&entity_labels, &predicate_labels}) {
    for (const std::string& l : *labels) {
      auto it = embeddings.find(l);
      if (it == embeddings.end()) throw InputError("missing embedding for label '" + l + "'");
      if (dim == 0) dim = it->second.size();
      if (it->second.size() != dim) throw ShapeError("embedding for '" + l + "' has inconsistent dimension");
    }
  }

  std::vector<std::string> ce = entity_labels;
  std::vector<std::string> cp = predicate_labels;
  ce.emplace_back(kBackgroundLabel);
  cp.emplace_back(kBackgroundLabel);
  std::sort(ce.begin(), ce.end());
  std::sort(cp.begin(), cp.end());

  CommonsenseGraph out;
  out.entity_embeddings = Matrix::Zero(static_cast<Index>(ce.size()), static_cast<Index>(dim));
  out.predicate_embeddings = Matrix::Zero(static_cast<Index>(cp.size()), static_cast<Index>(dim));
  for (NodeKind kind : {NodeKind::CE, NodeKind::CP}) {
    const auto& labels = kind == NodeKind::CE ? ce : cp;
    Matrix& emb = kind == NodeKind::CE ? out.entity_embeddings : out.predicate_embeddings;
    for (std::size_t i = 0; i < labels.size(); ++i) {
      Node n;
      n.kind = kind;
      n.label = labels[i];
      out.graph.add_node(std::move(n));
      if (labels[i] == kBackgroundLabel) continue;
      const auto& v = embeddings.at(labels[i]);
      for (std::size_t d = 0; d < dim; ++d) emb(static_cast<Index>(i), static_cast<Index>(d)) = v[d];
    }
  }

  const std::set<std::string> entity_set(entity_labels.begin(), entity_labels.end());
  const std::set<std::string> predicate_set(predicate_labels.begin(), predicate_labels.end());

  auto resolve = [&](const std::string& label, std::size_t line) -> NodeId {
    const bool is_e = entity_set.count(label) > 0;
    const bool is_p = predicate_set.count(label) > 0;
    const std::string where = line ? " (line " + std::to_string(line) + ")" : "";
    if (is_e && is_p) throw SignatureError("label '" + label + "' is both an entity and a predicate class" + where);
    if (!is_e && !is_p) throw InputError("unknown label '" + label + "'" + where);
    return *out.graph.find_label(is_e ? NodeKind::CE : NodeKind::CP, label);
  };

  struct Pending {
    NodeId src, dst;
    EdgeType type;
    double weight;
  };
  std::vector<Pending> pending;
  for (const OntologyEdgeRecord& r : ontology) {
    if (!is_ontology_relation(r.relation)) throw VocabularyError("unknown relation '" + r.relation + "'", r.line);
    const NodeId s = resolve(r.src_label, r.line);
    const NodeId d = resolve(r.dst_label, r.line);
    pending.push_back({s, d, EdgeType{r.relation, EdgeFamily::commonsense, out.graph.node(s).kind, out.graph.node(d).kind},
                       r.weight});
  }
  for (const ConditionalEdge& e : conditionals) {
    auto s = out.graph.find_label(e.src_kind, e.src_label);
    auto d = out.graph.find_label(e.dst_kind, e.dst_label);
    if (!s || !d || e.src_label == kBackgroundLabel || e.dst_label == kBackgroundLabel) {
      throw SignatureError(e.relation + " edge " + e.src_label + "->" + e.dst_label + " does not match its " +
                           std::string(to_string(e.src_kind)) + "->" + std::string(to_string(e.dst_kind)) + " signature");
    }
    if (!(e.weight >= 0.0 && e.weight <= 1.0)) throw InputError("conditional weight outside [0,1]");
    if (e.weight == 0.0) continue;
    pending.push_back({*s, *d, EdgeType{e.relation, EdgeFamily::commonsense, e.src_kind, e.dst_kind}, e.weight});
  }
  std::sort(pending.begin(), pending.end(), [](const Pending& a, const Pending& b) {
    return std::tie(a.src, a.dst, a.type.name) < std::tie(b.src, b.dst, b.type.name);
  });
  for (const Pending& p : pending) out.graph.add_edge(p.src, p.dst, p.type, p.weight);
  out.graph.validate_commonsense();
  return out;
}

// `GBKG 1`, NODE lines, EDGE lines, then EMBED lines carrying the label vectors.
inline void write_commonsense_graph(std::ostream& out, const CommonsenseGraph& kg) {
  out << "GBKG 1\n";
  for (const Node& n : kg.graph.nodes()) out << "NODE " << n.id << ' ' << to_string(n.kind) << ' ' << *n.label << '\n';
  std::vector<Edge> edges = kg.graph.edges();
  std::sort(edges.begin(), edges.end(), [&kg](const Edge& a, const Edge& b) {
    return std::tie(a.src, a.dst, kg.graph.type_of(a).name) < std::tie(b.src, b.dst, kg.graph.type_of(b).name);
  });
  for (const Edge& e : edges) {
    out << "EDGE " << e.src << ' ' << e.dst << ' ' << kg.graph.type_of(e).name << ' ' << text::format_double(e.weight)
        << '\n';
  }
  for (const Node& n : kg.graph.nodes()) {
    const Index local = kg.graph.local_index(n.id);
    const Matrix& emb = n.kind == NodeKind::CE ? kg.entity_embeddings : kg.predicate_embeddings;
    out << "EMBED " << n.id << ' ' << text::join_doubles(emb.row(local)) << '\n';
  }
}

inline CommonsenseGraph read_commonsense_graph(std::istream& in) {
  std::string raw;
  std::size_t line = 0;
  if (!std::getline(in, raw) || text::trim(raw) != "GBKG 1") throw ParseError("missing 'GBKG 1' header", 1);
  ++line;
  CommonsenseGraph kg;
  std::vector<std::vector<double>> emb;
  std::size_t dim = 0;
  while (std::getline(in, raw)) {
    ++line;
    std::string_view s = text::trim(raw);
    if (s.empty()) continue;
    std::istringstream ls{std::string(s)};
    std::string tag;
    ls >> tag;
    if (tag == "NODE") {
      long long id = -1;
      std::string kind, label;
      if (!(ls >> id >> kind >> label)) throw ParseError("malformed NODE line", line);
      const auto k = parse_node_kind(kind);
      if (!k || (*k != NodeKind::CE && *k != NodeKind::CP)) throw ParseError("NODE kind must be CE or CP", line);
      if (id != static_cast<long long>(kg.graph.nodes().size())) throw ParseError("node ids must be dense and ordered", line);
      if (!kg.graph.edges().empty() || !emb.empty()) throw ParseError("NODE after EDGE/EMBED", line);
      Node n;
      n.kind = *k;
      n.label = label;
      try {
        kg.graph.add_node(std::move(n));
      } catch (const Error& e) {
        throw ParseError(e.what(), line);
      }
    } else if (tag == "EDGE") {
      long long src = -1, dst = -1;
      std::string type, weight;
      if (!(ls >> src >> dst >> type >> weight)) throw ParseError("malformed EDGE line", line);
      const auto n = static_cast<long long>(kg.graph.nodes().size());
      if (src < 0 || dst < 0 || src >= n || dst >= n) throw ParseError("edge endpoint out of range", line);
      const auto s_id = static_cast<NodeId>(src);
      const auto d_id = static_cast<NodeId>(dst);
      try {
        kg.graph.add_edge(s_id, d_id,
                          EdgeType{type, EdgeFamily::commonsense, kg.graph.node(s_id).kind, kg.graph.node(d_id).kind},
                          text::parse_double(weight, line));
      } catch (const ParseError&) {
        throw;
      } catch (const Error& e) {
        throw ParseError(e.what(), line);
      }
    } else if (tag == "EMBED") {
      long long id = -1;
      std::string values;
      if (!(ls >> id >> values)) throw ParseError("malformed EMBED line", line);
      if (id != static_cast<long long>(emb.size())) throw ParseError("EMBED ids must be dense and ordered", line);
      emb.push_back(text::parse_double_list(values, line));
      if (emb.size() == 1) dim = emb.back().size();
      if (emb.back().size() != dim) throw ParseError("inconsistent embedding dimension", line);
    } else {
      throw ParseError("unknown record '" + tag + "'", line);
    }
  }
  if (!emb.empty() && emb.size() != kg.graph.nodes().size()) throw ParseError("EMBED count does not match NODE count", line);
  kg.entity_embeddings = Matrix::Zero(kg.entity_count(), static_cast<Index>(dim));
  kg.predicate_embeddings = Matrix::Zero(kg.predicate_count(), static_cast<Index>(dim));
  for (std::size_t id = 0; id < emb.size(); ++id) {
    const Node& n = kg.graph.node(static_cast<NodeId>(id));
    Matrix& target = n.kind == NodeKind::CE ? kg.entity_embeddings : kg.predicate_embeddings;
    for (std::size_t d = 0; d < dim; ++d) target(kg.graph.local_index(n.id), static_cast<Index>(d)) = emb[id][d];
  }
  try {
    kg.graph.validate_commonsense();
  } catch (const Error& e) {
    throw ParseError(e.what(), 0);
  }
  return kg;
}

inline void save_commonsense_graph(const std::string& path, const CommonsenseGraph& kg) {
  auto out = text::open_output(path);
  write_commonsense_graph(out, kg);
}

inline CommonsenseGraph load_commonsense_graph(const std::string& path) {
  auto in = text::open_input(path);
  return read_commonsense_graph(in);
}

}  // namespace gbnet
