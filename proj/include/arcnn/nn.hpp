// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstddef>
#include <filesystem>
#include <functional>
#include <utility>
#include <vector>

#include "arcnn/geom.hpp"

namespace arcnn::nn {

/// Dense N-dimensional float64 array, row-major.
struct Tensor {
  std::vector<size_t> shape;
  std::vector<double> data;

  Tensor() = default;
  explicit Tensor(std::vector<size_t> s);
  Tensor(std::vector<size_t> s, std::vector<double> values);

  static Tensor zeros(std::vector<size_t> s) { return Tensor(std::move(s)); }
  static Tensor full(std::vector<size_t> s, double value);

  size_t numel() const { return data.size(); }
  size_t rank() const { return shape.size(); }
  size_t dim(size_t i) const { return shape.at(i); }

  double& operator[](size_t i) { return data[i]; }
  double operator[](size_t i) const { return data[i]; }

  // CHW accessors for rank-3 feature maps.
  double& at3(size_t c, size_t y, size_t x) {
    return data[(c * shape[1] + y) * shape[2] + x];
  }
  double at3(size_t c, size_t y, size_t x) const {
    return data[(c * shape[1] + y) * shape[2] + x];
  }
  double& at2(size_t i, size_t j) { return data[i * shape[1] + j]; }
  double at2(size_t i, size_t j) const { return data[i * shape[1] + j]; }

  bool all_finite() const;
  Tensor flattened() const { return Tensor({numel()}, data); }

  bool operator==(const Tensor&) const = default;
};

/// Fully connected layer: weights [out x in], bias [out].
struct FcLayer {
  Tensor weights;
  Tensor bias;

  FcLayer() = default;
  FcLayer(Tensor w, Tensor b);

  size_t in_dim() const { return weights.shape[1]; }
  size_t out_dim() const { return weights.shape[0]; }
};

/// y = Wx + b on a rank-1 input.
Tensor fc_forward(const FcLayer& layer, const Tensor& input);

Tensor relu(const Tensor& t);

/// Two-way softmax over a pair of logits; returns (p0, p1), positive and
/// summing to one.
std::pair<double, double> softmax2(double logit0, double logit1);

/// Bilinear interpolation on a [C x H x W] map with pixel centers at integer
/// coordinates. Neighbors outside [0,H-1] x [0,W-1] contribute zero.
/// Returns the per-channel values as a [C] tensor.
Tensor bilinear_sample(const Tensor& featmap, double x, double y);

/// RoIAlign: averages samples_per_bin^2 bilinear samples on a regular grid
/// inside each output bin. The roi is given in feature-map coordinates and
/// never quantized. Output is [C x out_h x out_w].
Tensor roi_align(const Tensor& featmap, const geom::Box& roi, size_t out_h,
                 size_t out_w, size_t samples_per_bin);

/// Huber-style loss: 0.5 x^2 for |x| < 1, |x| - 0.5 otherwise.
double smooth_l1(double x);

/// Derivative of smooth_l1: x on the quadratic branch, sign(x) outside.
double smooth_l1_grad(double x);

/// Central finite differences of f at `at`, coordinate by coordinate, against
/// analytic_grad. Returns the max relative error over coordinates, where the
/// relative error uses denominator max(|numeric|, |analytic|, 1e-6) and is 0
/// when both sides vanish. Throws on non-finite intermediate values.
double grad_check(const std::function<double(const Tensor&)>& f, const Tensor& at,
                  const Tensor& analytic_grad, double eps);

// Raw tensor file I/O (magic-tagged little-endian binary).
void write_tensor(const std::filesystem::path& path, const Tensor& t);
Tensor read_tensor(const std::filesystem::path& path);

/// Whole-pixel translation with zero fill, for [C x H x W] maps.
Tensor translate_image(const Tensor& image, int dx, int dy);

}  // namespace arcnn::nn
