// SPDX-License-Identifier: Apache-2.0
#include "arcnn/geom.hpp"

#include <algorithm>
#include <tuple>
#include <cmath>
#include <numeric>
#include <stdexcept>
#include <string>

namespace arcnn::geom {

Box::Box(double x, double y, double w, double h)
    : x_min(x), y_min(y), width(w), height(h) {
  if (!(w > 0.0) || !(h > 0.0) || !std::isfinite(x) || !std::isfinite(y) ||
      !std::isfinite(w) || !std::isfinite(h)) {
    throw std::invalid_argument("Box: degenerate dimensions (w=" +
                                std::to_string(w) + ", h=" + std::to_string(h) + ")");
  }
}

double iou(const Box& a, const Box& b) {
  // Canonical operand order keeps the result bitwise symmetric even when the
  // compiler contracts the area products into FMAs.
  const auto key = [](const Box& v) {
    return std::tie(v.x_min, v.y_min, v.width, v.height);
  };
  const Box& p = key(a) <= key(b) ? a : b;
  const Box& q = key(a) <= key(b) ? b : a;
  const double ix = std::min(p.x_max(), q.x_max()) - std::max(p.x_min, q.x_min);
  const double iy = std::min(p.y_max(), q.y_max()) - std::max(p.y_min, q.y_min);
  if (ix <= 0.0 || iy <= 0.0) return 0.0;
  const double inter = ix * iy;
  return inter / (p.area() + q.area() - inter);
}

ShiftTarget encode_shift(const Box& reference, const Box& sensed) {
  return {(sensed.center_x() - reference.center_x()) / reference.width,
          (sensed.center_y() - reference.center_y()) / reference.height};
}

Box apply_shift(const Box& box, const ShiftTarget& target) {
  return Box::from_center(box.center_x() + target.tx * box.width,
                          box.center_y() + target.ty * box.height,
                          box.width, box.height);
}

Box jitter_box(const Box& box, double sigma_x, double sigma_y, Rng& rng) {
  if (sigma_x < 0.0 || sigma_y < 0.0) {
    throw std::invalid_argument("jitter_box: negative sigma");
  }
  const ShiftTarget draw{rng.normal(0.0, sigma_x), rng.normal(0.0, sigma_y)};
  return apply_shift(box, draw);
}

Box enlarge_context(const Box& box, double factor, double bound_w, double bound_h) {
  if (factor < 1.0) {
    throw std::invalid_argument("enlarge_context: factor must be >= 1");
  }
  const double w = box.width * factor;
  const double h = box.height * factor;
  double x0 = box.center_x() - w / 2.0;
  double y0 = box.center_y() - h / 2.0;
  double x1 = x0 + w;
  double y1 = y0 + h;
  x0 = std::clamp(x0, 0.0, bound_w);
  x1 = std::clamp(x1, 0.0, bound_w);
  y0 = std::clamp(y0, 0.0, bound_h);
  y1 = std::clamp(y1, 0.0, bound_h);
  // A box overlapping the image always clips to a non-degenerate region;
  // keep a minimal sliver at the border otherwise so pooling stays total.
  constexpr double kMin = 1e-6;
  if (x1 - x0 < kMin) {
    x0 = std::clamp(x0 - kMin / 2.0, 0.0, bound_w - kMin);
    x1 = x0 + kMin;
  }
  if (y1 - y0 < kMin) {
    y0 = std::clamp(y0 - kMin / 2.0, 0.0, bound_h - kMin);
    y1 = y0 + kMin;
  }
  return Box(x0, y0, x1 - x0, y1 - y0);
}

std::vector<size_t> nms(std::span<const ScoredBox> boxes, double iou_threshold) {
  if (iou_threshold < 0.0 || iou_threshold > 1.0) {
    throw std::invalid_argument("nms: threshold outside [0,1]");
  }
  std::vector<size_t> order(boxes.size());
  std::iota(order.begin(), order.end(), size_t{0});
  std::stable_sort(order.begin(), order.end(), [&](size_t a, size_t b) {
    if (boxes[a].score != boxes[b].score) return boxes[a].score > boxes[b].score;
    return a < b;
  });
  std::vector<size_t> kept;
  for (size_t idx : order) {
    bool suppressed = false;
    for (size_t k : kept) {
      if (iou(boxes[idx].box, boxes[k].box) > iou_threshold) {
        suppressed = true;
        break;
      }
    }
    if (!suppressed) kept.push_back(idx);
  }
  return kept;
}

}  // namespace arcnn::geom
