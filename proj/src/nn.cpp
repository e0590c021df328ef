// SPDX-License-Identifier: Apache-2.0
#include "arcnn/nn.hpp"

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <stdexcept>
#include <string>

namespace arcnn::nn {

namespace {

size_t shape_numel(const std::vector<size_t>& shape) {
  size_t n = 1;
  for (size_t d : shape) n *= d;
  return n;
}

}  // namespace

Tensor::Tensor(std::vector<size_t> s) : shape(std::move(s)) {
  data.assign(shape_numel(shape), 0.0);
}

Tensor::Tensor(std::vector<size_t> s, std::vector<double> values)
    : shape(std::move(s)), data(std::move(values)) {
  if (shape_numel(shape) != data.size()) {
    throw std::invalid_argument("Tensor: shape/data size mismatch");
  }
}

Tensor Tensor::full(std::vector<size_t> s, double value) {
  Tensor t(std::move(s));
  std::fill(t.data.begin(), t.data.end(), value);
  return t;
}

bool Tensor::all_finite() const {
  for (double v : data) {
    if (!std::isfinite(v)) return false;
  }
  return true;
}

FcLayer::FcLayer(Tensor w, Tensor b) : weights(std::move(w)), bias(std::move(b)) {
  if (weights.rank() != 2 || bias.rank() != 1 || bias.dim(0) != weights.dim(0)) {
    throw std::invalid_argument("FcLayer: inconsistent weight/bias shapes");
  }
}

Tensor fc_forward(const FcLayer& layer, const Tensor& input) {
  if (input.numel() != layer.in_dim()) {
    throw std::invalid_argument("fc_forward: input size " +
                                std::to_string(input.numel()) +
                                " does not match layer in_dim " +
                                std::to_string(layer.in_dim()));
  }
  const size_t out = layer.out_dim();
  const size_t in = layer.in_dim();
  Tensor y({out});
  const double* w = layer.weights.data.data();
  const double* x = input.data.data();
  for (size_t o = 0; o < out; ++o) {
    const double* row = w + o * in;
    double acc = 0.0;
    for (size_t i = 0; i < in; ++i) acc += row[i] * x[i];
    y[o] = acc + layer.bias[o];
  }
  return y;
}

Tensor relu(const Tensor& t) {
  Tensor out = t;
  for (double& v : out.data) v = v > 0.0 ? v : 0.0;
  return out;
}

std::pair<double, double> softmax2(double logit0, double logit1) {
  const double m = std::max(logit0, logit1);
  const double e0 = std::exp(logit0 - m);
  const double e1 = std::exp(logit1 - m);
  // Clamp into the largest representable open interval so both
  // probabilities stay strictly inside (0, 1) even for huge logit gaps.
  constexpr double kMin = 0x1.0p-53;
  const double p1 = std::clamp(e1 / (e0 + e1), kMin, 1.0 - kMin);
  return {1.0 - p1, p1};
}

Tensor bilinear_sample(const Tensor& featmap, double x, double y) {
  if (featmap.rank() != 3) {
    throw std::invalid_argument("bilinear_sample: expected CHW map");
  }
  const size_t channels = featmap.dim(0);
  const long h = static_cast<long>(featmap.dim(1));
  const long w = static_cast<long>(featmap.dim(2));
  const long x0 = static_cast<long>(std::floor(x));
  const long y0 = static_cast<long>(std::floor(y));
  const long x1 = x0 + 1;
  const long y1 = y0 + 1;
  const double fx = x - static_cast<double>(x0);
  const double fy = y - static_cast<double>(y0);
  const double w00 = (1.0 - fx) * (1.0 - fy);
  const double w01 = fx * (1.0 - fy);
  const double w10 = (1.0 - fx) * fy;
  const double w11 = fx * fy;
  const bool in_x0 = x0 >= 0 && x0 < w;
  const bool in_x1 = x1 >= 0 && x1 < w;
  const bool in_y0 = y0 >= 0 && y0 < h;
  const bool in_y1 = y1 >= 0 && y1 < h;

  Tensor out({channels});
  for (size_t c = 0; c < channels; ++c) {
    double v = 0.0;
    if (in_y0 && in_x0) v += w00 * featmap.at3(c, y0, x0);
    if (in_y0 && in_x1) v += w01 * featmap.at3(c, y0, x1);
    if (in_y1 && in_x0) v += w10 * featmap.at3(c, y1, x0);
    if (in_y1 && in_x1) v += w11 * featmap.at3(c, y1, x1);
    out[c] = v;
  }
  return out;
}

Tensor roi_align(const Tensor& featmap, const geom::Box& roi, size_t out_h,
                 size_t out_w, size_t samples_per_bin) {
  if (featmap.rank() != 3) {
    throw std::invalid_argument("roi_align: expected CHW map");
  }
  if (out_h < 1 || out_w < 1 || samples_per_bin < 1) {
    throw std::invalid_argument("roi_align: output size and sampling density must be >= 1");
  }
  const size_t channels = featmap.dim(0);
  const size_t s = samples_per_bin;
  const double bin_h = roi.height / static_cast<double>(out_h);
  const double bin_w = roi.width / static_cast<double>(out_w);
  const double inv_count = 1.0 / static_cast<double>(s * s);

  Tensor out({channels, out_h, out_w});
  for (size_t oy = 0; oy < out_h; ++oy) {
    for (size_t ox = 0; ox < out_w; ++ox) {
      const double y_start = roi.y_min + static_cast<double>(oy) * bin_h;
      const double x_start = roi.x_min + static_cast<double>(ox) * bin_w;
      for (size_t a = 0; a < s; ++a) {
        const double sy = y_start + (static_cast<double>(a) + 0.5) * bin_h / static_cast<double>(s);
        for (size_t b = 0; b < s; ++b) {
          const double sx = x_start + (static_cast<double>(b) + 0.5) * bin_w / static_cast<double>(s);
          const Tensor v = bilinear_sample(featmap, sx, sy);
          for (size_t c = 0; c < channels; ++c) {
            out.at3(c, oy, ox) += v[c];
          }
        }
      }
      for (size_t c = 0; c < channels; ++c) out.at3(c, oy, ox) *= inv_count;
    }
  }
  return out;
}

double smooth_l1(double x) {
  const double ax = std::abs(x);
  return ax < 1.0 ? 0.5 * x * x : ax - 0.5;
}

double smooth_l1_grad(double x) {
  if (std::abs(x) < 1.0) return x;
  return x > 0.0 ? 1.0 : -1.0;
}

double grad_check(const std::function<double(const Tensor&)>& f, const Tensor& at,
                  const Tensor& analytic_grad, double eps) {
  if (eps <= 0.0) throw std::invalid_argument("grad_check: eps must be > 0");
  if (analytic_grad.numel() != at.numel()) {
    throw std::invalid_argument("grad_check: gradient shape mismatch");
  }
  Tensor probe = at;
  double max_rel = 0.0;
  for (size_t i = 0; i < at.numel(); ++i) {
    const double saved = probe[i];
    probe[i] = saved + eps;
    const double fp = f(probe);
    probe[i] = saved - eps;
    const double fm = f(probe);
    probe[i] = saved;
    if (!std::isfinite(fp) || !std::isfinite(fm)) {
      throw std::runtime_error("grad_check: non-finite value at coordinate " +
                               std::to_string(i));
    }
    const double numeric = (fp - fm) / (2.0 * eps);
    const double analytic = analytic_grad[i];
    const double denom = std::max({std::abs(numeric), std::abs(analytic), 1e-6});
    const double diff = std::abs(numeric - analytic);
    const double rel = (std::abs(numeric) < 1e-12 && std::abs(analytic) < 1e-12)
                           ? 0.0
                           : diff / denom;
    max_rel = std::max(max_rel, rel);
  }
  return max_rel;
}

namespace {
constexpr char kTensorMagic[8] = {'A', 'R', 'C', 'N', 'N', 'T', '0', '1'};
}

void write_tensor(const std::filesystem::path& path, const Tensor& t) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("write_tensor: cannot open " + path.string());
  out.write(kTensorMagic, sizeof(kTensorMagic));
  const uint32_t ndim = static_cast<uint32_t>(t.rank());
  out.write(reinterpret_cast<const char*>(&ndim), sizeof(ndim));
  for (size_t d : t.shape) {
    const uint64_t v = d;
    out.write(reinterpret_cast<const char*>(&v), sizeof(v));
  }
  out.write(reinterpret_cast<const char*>(t.data.data()),
            static_cast<std::streamsize>(t.data.size() * sizeof(double)));
  if (!out) throw std::runtime_error("write_tensor: write failed for " + path.string());
}

Tensor read_tensor(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("read_tensor: cannot open " + path.string());
  char magic[8];
  in.read(magic, sizeof(magic));
  if (!in || std::memcmp(magic, kTensorMagic, sizeof(magic)) != 0) {
    throw std::runtime_error("read_tensor: bad magic in " + path.string());
  }
  uint32_t ndim = 0;
  in.read(reinterpret_cast<char*>(&ndim), sizeof(ndim));
  std::vector<size_t> shape(ndim);
  for (uint32_t i = 0; i < ndim; ++i) {
    uint64_t v = 0;
    in.read(reinterpret_cast<char*>(&v), sizeof(v));
    shape[i] = static_cast<size_t>(v);
  }
  Tensor t(shape);
  in.read(reinterpret_cast<char*>(t.data.data()),
          static_cast<std::streamsize>(t.data.size() * sizeof(double)));
  if (!in) throw std::runtime_error("read_tensor: truncated file " + path.string());
  return t;
}

Tensor translate_image(const Tensor& image, int dx, int dy) {
  if (image.rank() != 3) {
    throw std::invalid_argument("translate_image: expected CHW map");
  }
  const size_t c_n = image.dim(0);
  const long h = static_cast<long>(image.dim(1));
  const long w = static_cast<long>(image.dim(2));
  Tensor out({c_n, static_cast<size_t>(h), static_cast<size_t>(w)});
  for (size_t c = 0; c < c_n; ++c) {
    for (long y = 0; y < h; ++y) {
      const long sy = y - dy;
      if (sy < 0 || sy >= h) continue;
      for (long x = 0; x < w; ++x) {
        const long sx = x - dx;
        if (sx < 0 || sx >= w) continue;
        out.at3(c, y, x) = image.at3(c, sy, sx);
      }
    }
  }
  return out;
}

}  // namespace arcnn::nn
