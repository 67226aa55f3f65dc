#pragma once

#include <algorithm>
#include <string>

#include "gbnet/errors.hpp"

namespace gbnet {

// Axis-aligned box in normalized image coordinates.
struct Box {
  double x1 = 0.0;
  double y1 = 0.0;
  double x2 = 0.0;
  double y2 = 0.0;

  double width() const { return x2 - x1; }
  double height() const { return y2 - y1; }
  double area() const { return std::max(0.0, width()) * std::max(0.0, height()); }
  double center_x() const { return 0.5 * (x1 + x2); }
  double center_y() const { return 0.5 * (y1 + y2); }

  bool operator==(const Box&) const = default;
};

inline std::string to_string(const Box& b) {
  return "(" + std::to_string(b.x1) + "," + std::to_string(b.y1) + "," + std::to_string(b.x2) + "," +
         std::to_string(b.y2) + ")";
}

inline bool is_valid_box(const Box& b) {
  auto unit = [](double v) { return v >= 0.0 && v <= 1.0; };
  return unit(b.x1) && unit(b.y1) && unit(b.x2) && unit(b.y2) && b.x2 > b.x1 && b.y2 > b.y1;
}

inline void require_valid_box(const Box& b) {
  if (!is_valid_box(b)) throw MalformedBoxError("malformed box " + to_string(b));
}

// Intersection over union; 0 for disjoint or zero-area boxes.
inline double iou(const Box& a, const Box& b) {
  const double iw = std::min(a.x2, b.x2) - std::max(a.x1, b.x1);
  const double ih = std::min(a.y2, b.y2) - std::max(a.y1, b.y1);
  if (iw <= 0.0 || ih <= 0.0) return 0.0;
  const double inter = iw * ih;
  const double uni = a.area() + b.area() - inter;
  if (uni <= 0.0) return 0.0;
  return inter / uni;
}

}  // namespace gbnet
