#pragma once

// Scene records and the line-oriented dataset file.
//
//   GBDS 1 feat_dim=<d> entities=<l1,l2,..> predicates=<l1,l2,..>
//   one record per line, tab separated:
//     image_id  n  boxes  gt_boxes  gt_classes  features  detector_dists  union_features  triplets
//
// Float lists are comma separated ("-" when empty); triplets are
// "subject:predicate:object" index triples separated by commas.

#include <array>
#include <cmath>
#include <cstdint>
#include <istream>
#include <ostream>
#include <sstream>
#include <string>
#include <vector>

#include "gbnet/box.hpp"
#include "gbnet/errors.hpp"
#include "gbnet/tensor.hpp"
#include "gbnet/text.hpp"

namespace gbnet {

inline constexpr Index kGeometryDim = 8;

struct SceneTriplet {
  int subject = 0;    // entity index within the scene
  int predicate = 0;  // index into Dataset::predicate_labels
  int object = 0;

  bool operator==(const SceneTriplet&) const = default;
};

struct SceneRecord {
  std::int64_t image_id = 0;
  std::vector<Box> boxes;     // detector boxes
  std::vector<Box> gt_boxes;
  std::vector<int> gt_classes;  // index into Dataset::entity_labels
  Matrix features;              // n x feat_dim
  Matrix detector_dists;        // n x |entity_labels|
  Matrix union_features;        // n(n-1) x (feat_dim + 8), ordered pairs
  std::vector<SceneTriplet> triplets;

  std::size_t size() const { return gt_boxes.size(); }
  bool operator==(const SceneRecord&) const = default;
};

struct Dataset {
  Index feat_dim = 0;
  std::vector<std::string> entity_labels;
  std::vector<std::string> predicate_labels;
  std::vector<SceneRecord> records;
};

// Pair geometry: center offsets relative to the subject size, log size
// ratios, raw offsets, overlap, and which axis dominates the offset.
inline std::array<double, kGeometryDim> pair_geometry(const Box& s, const Box& o) {
  const double dx = o.center_x() - s.center_x();
  const double dy = o.center_y() - s.center_y();
  return {dx / s.width(),
          dy / s.height(),
          std::log(o.width() / s.width()),
          std::log(o.height() / s.height()),
          dx,
          dy,
          iou(s, o),
          std::abs(dx) - std::abs(dy)};
}

// Synthesized stand-in for a union-box region feature: the mean of the two
// endpoint features followed by their pair geometry.
inline Matrix union_features(const Matrix& features, const std::vector<Box>& boxes) {
  const Index n = features.rows();
  const Index f = features.cols();
  Matrix out(n > 1 ? n * (n - 1) : 0, f + kGeometryDim);
  Index row = 0;
  for (Index i = 0; i < n; ++i) {
    for (Index j = 0; j < n; ++j) {
      if (i == j) continue;
      out.row(row).head(f) = 0.5 * (features.row(i) + features.row(j));
      const auto g = pair_geometry(boxes[static_cast<std::size_t>(i)], boxes[static_cast<std::size_t>(j)]);
      for (Index k = 0; k < kGeometryDim; ++k) out(row, f + k) = g[static_cast<std::size_t>(k)];
      ++row;
    }
  }
  return out;
}

namespace detail {

inline std::string join_labels(const std::vector<std::string>& labels) {
  std::string out;
  for (std::size_t i = 0; i < labels.size(); ++i) out += (i ? "," : "") + labels[i];
  return out;
}

inline std::string boxes_field(const std::vector<Box>& boxes) {
  std::vector<double> flat;
  for (const Box& b : boxes) flat.insert(flat.end(), {b.x1, b.y1, b.x2, b.y2});
  return text::join_doubles(flat);
}

inline std::string matrix_field(const Matrix& m) {
  return text::join_doubles(std::vector<double>(m.data(), m.data() + m.size()));
}

inline Matrix matrix_from(const std::vector<double>& v, Index rows, Index cols, std::size_t line, const char* what) {
  if (static_cast<Index>(v.size()) != rows * cols) {
    throw ParseError(std::string(what) + ": expected " + std::to_string(rows * cols) + " values, got " +
                         std::to_string(v.size()),
                     line);
  }
  Matrix m(rows, cols);
  for (Index i = 0; i < m.size(); ++i) m.data()[i] = v[static_cast<std::size_t>(i)];
  return m;
}

inline std::vector<Box> boxes_from(const std::vector<double>& v, Index n, std::size_t line, const char* what) {
  if (static_cast<Index>(v.size()) != 4 * n) throw ParseError(std::string(what) + ": wrong number of coordinates", line);
  std::vector<Box> out;
  for (Index i = 0; i < n; ++i) {
    const auto k = static_cast<std::size_t>(4 * i);
    Box b{v[k], v[k + 1], v[k + 2], v[k + 3]};
    if (!is_valid_box(b)) throw ParseError(std::string(what) + ": malformed box " + to_string(b), line);
    out.push_back(b);
  }
  return out;
}

}  // namespace detail

inline void write_dataset(std::ostream& out, const Dataset& ds) {
  out << "GBDS 1 feat_dim=" << ds.feat_dim << " entities=" << detail::join_labels(ds.entity_labels)
      << " predicates=" << detail::join_labels(ds.predicate_labels) << '\n';
  for (const SceneRecord& r : ds.records) {
    out << r.image_id << '\t' << r.size() << '\t' << detail::boxes_field(r.boxes) << '\t'
        << detail::boxes_field(r.gt_boxes) << '\t';
    if (r.gt_classes.empty()) out << '-';
    for (std::size_t i = 0; i < r.gt_classes.size(); ++i) out << (i ? "," : "") << r.gt_classes[i];
    out << '\t' << detail::matrix_field(r.features) << '\t' << detail::matrix_field(r.detector_dists) << '\t'
        << detail::matrix_field(r.union_features) << '\t';
    if (r.triplets.empty()) out << '-';
    for (std::size_t i = 0; i < r.triplets.size(); ++i) {
      const SceneTriplet& t = r.triplets[i];
      out << (i ? "," : "") << t.subject << ':' << t.predicate << ':' << t.object;
    }
    out << '\n';
  }
}

inline Dataset read_dataset(std::istream& in) {
  Dataset ds;
  std::string raw;
  std::size_t line = 1;
  if (!std::getline(in, raw)) throw ParseError("missing GBDS header", line);
  {
    std::istringstream hs(std::string(text::trim(raw)));
    std::string magic, version, token;
    hs >> magic >> version;
    if (magic != "GBDS" || version != "1") throw ParseError("missing 'GBDS 1' header", line);
    bool have_dim = false;
    while (hs >> token) {
      const auto eq = token.find('=');
      if (eq == std::string::npos) throw ParseError("malformed header field '" + token + "'", line);
      const std::string key = token.substr(0, eq);
      const std::string val = token.substr(eq + 1);
      if (key == "feat_dim") {
        ds.feat_dim = text::parse_int<Index>(val, line);
        have_dim = true;
      } else if (key == "entities" || key == "predicates") {
        auto& labels = key == "entities" ? ds.entity_labels : ds.predicate_labels;
        if (!val.empty()) {
          for (auto part : text::split(val, ',')) labels.emplace_back(part);
        }
      } else {
        throw ParseError("unknown header field '" + key + "'", line);
      }
    }
    if (!have_dim || ds.feat_dim < 0) throw ParseError("header lacks feat_dim", line);
  }
  const auto n_classes = static_cast<Index>(ds.entity_labels.size());
  const auto n_preds = static_cast<int>(ds.predicate_labels.size());
  while (std::getline(in, raw)) {
    ++line;
    std::string_view s = text::strip_cr(raw);
    if (text::trim(s).empty()) continue;
    const auto f = text::split(s, '\t');
    if (f.size() != 9) throw ParseError("expected 9 fields, got " + std::to_string(f.size()), line);
    SceneRecord r;
    r.image_id = text::parse_int<std::int64_t>(f[0], line);
    const Index n = text::parse_int<Index>(f[1], line);
    if (n < 0) throw ParseError("negative entity count", line);
    r.boxes = detail::boxes_from(text::parse_double_list(f[2], line), n, line, "boxes");
    r.gt_boxes = detail::boxes_from(text::parse_double_list(f[3], line), n, line, "gt_boxes");
    if (text::trim(f[4]) != "-" && !text::trim(f[4]).empty()) {
      for (auto part : text::split(f[4], ',')) {
        const int c = text::parse_int<int>(part, line);
        if (c < 0 || c >= n_classes) throw ParseError("ground-truth class out of range", line);
        r.gt_classes.push_back(c);
      }
    }
    if (static_cast<Index>(r.gt_classes.size()) != n) throw ParseError("gt_classes: wrong count", line);
    r.features = detail::matrix_from(text::parse_double_list(f[5], line), n, ds.feat_dim, line, "features");
    r.detector_dists = detail::matrix_from(text::parse_double_list(f[6], line), n, n_classes, line, "detector_dists");
    for (Index i = 0; i < n; ++i) {
      if ((r.detector_dists.row(i).array() < 0.0).any() || std::abs(r.detector_dists.row(i).sum() - 1.0) > 1e-6) {
        throw ParseError("detector distribution does not sum to 1", line);
      }
    }
    r.union_features = detail::matrix_from(text::parse_double_list(f[7], line), n > 1 ? n * (n - 1) : 0,
                                           ds.feat_dim + kGeometryDim, line, "union_features");
    const std::string_view trip = text::trim(f[8]);
    if (trip != "-" && !trip.empty()) {
      for (auto part : text::split(trip, ',')) {
        const auto idx = text::split(part, ':');
        if (idx.size() != 3) throw ParseError("malformed triplet '" + std::string(part) + "'", line);
        SceneTriplet t{text::parse_int<int>(idx[0], line), text::parse_int<int>(idx[1], line),
                       text::parse_int<int>(idx[2], line)};
        if (t.subject < 0 || t.subject >= n || t.object < 0 || t.object >= n || t.subject == t.object ||
            t.predicate < 0 || t.predicate >= n_preds) {
          throw ParseError("triplet index out of range", line);
        }
        r.triplets.push_back(t);
      }
    }
    ds.records.push_back(std::move(r));
  }
  return ds;
}

inline void save_dataset(const std::string& path, const Dataset& ds) {
  auto out = text::open_output(path);
  write_dataset(out, ds);
}

inline Dataset load_dataset(const std::string& path) {
  auto in = text::open_input(path);
  return read_dataset(in);
}

}  // namespace gbnet
