// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <span>
#include <vector>

#include "arcnn/rng.hpp"

namespace arcnn::geom {

/// Axis-aligned rectangle in pixel coordinates, corner + size form.
/// Width and height are strictly positive; degenerate boxes cannot be built.
struct Box {
  double x_min = 0.0;
  double y_min = 0.0;
  double width = 1.0;
  double height = 1.0;

  Box() = default;
  Box(double x, double y, double w, double h);

  double x_max() const { return x_min + width; }
  double y_max() const { return y_min + height; }
  double center_x() const { return x_min + width / 2.0; }
  double center_y() const { return y_min + height / 2.0; }
  double area() const { return width * height; }

  static Box from_center(double cx, double cy, double w, double h) {
    return Box(cx - w / 2.0, cy - h / 2.0, w, h);
  }

  bool operator==(const Box&) const = default;
};

/// Normalized inter-modality offset for one region: t_x is width-normalized,
/// t_y height-normalized. No range restriction.
struct ShiftTarget {
  double tx = 0.0;
  double ty = 0.0;

  bool operator==(const ShiftTarget&) const = default;
};

struct ScoredBox {
  Box box;
  double score = 0.0;
};

/// Intersection over union. Symmetric, 0 for disjoint boxes, 1 for identity.
double iou(const Box& a, const Box& b);

/// Shift target of the sensed box relative to the reference box:
/// t_x = (cx_s - cx_r) / w_r, t_y = (cy_s - cy_r) / h_r.
ShiftTarget encode_shift(const Box& reference, const Box& sensed);

/// Inverse of encode_shift: moves the box center by (t_x * w, t_y * h),
/// size unchanged. Result is intentionally not clipped to any bounds.
Box apply_shift(const Box& box, const ShiftTarget& target);

/// Perturbs the box center with t_x ~ N(0, sigma_x^2), t_y ~ N(0, sigma_y^2)
/// applied through apply_shift. sigma = 0 leaves the box untouched.
Box jitter_box(const Box& box, double sigma_x, double sigma_y, Rng& rng);

/// Scales the box about its center by factor >= 1, then clips to
/// [0, bound_w] x [0, bound_h].
Box enlarge_context(const Box& box, double factor, double bound_w, double bound_h);

/// Greedy score-descending non-maximum suppression; ties broken by lower
/// original index. Returns indices of kept boxes in suppression order.
/// A box is suppressed when its IoU with an already-kept box exceeds
/// iou_threshold (strictly).
std::vector<size_t> nms(std::span<const ScoredBox> boxes, double iou_threshold);

}  // namespace arcnn::geom
