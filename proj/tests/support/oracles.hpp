#pragma once

// Test-only reference implementations. Nothing here calls into the library's
// kernels, so they can serve as independent oracles.

#include <cmath>
#include <cstdint>
#include <functional>
#include <random>
#include <vector>

#include "odeforge/tensor.hpp"

namespace oracle {

using odeforge::Shape;
using odeforge::Tensor;

inline Tensor random_tensor(const Shape& shape, std::mt19937_64& rng, double lo = -1.0, double hi = 1.0) {
  std::uniform_real_distribution<double> d(lo, hi);
  Tensor t(shape);
  for (auto& v : t.values()) v = d(rng);
  return t;
}

// Direct six-loop cross-correlation with zero padding over a (C,H,W) sample.
inline Tensor naive_conv(const Tensor& in, const Tensor& w, std::size_t stride, std::size_t pad,
                         const Tensor* bias = nullptr) {
  const long n_in = in.dim(0), h = in.dim(1), wd = in.dim(2);
  const long m_out = w.dim(0), k = w.dim(2);
  const long oh = (h + 2 * pad - k) / stride + 1, ow = (wd + 2 * pad - k) / stride + 1;
  Tensor out({std::size_t(m_out), std::size_t(oh), std::size_t(ow)});
  for (long m = 0; m < m_out; ++m)
    for (long y = 0; y < oh; ++y)
      for (long x = 0; x < ow; ++x) {
        double s = bias ? (*bias)[m] : 0.0;
        for (long n = 0; n < n_in; ++n)
          for (long i = 0; i < k; ++i)
            for (long j = 0; j < k; ++j) {
              const long iy = y * long(stride) + i - long(pad), ix = x * long(stride) + j - long(pad);
              if (iy < 0 || ix < 0 || iy >= h || ix >= wd) continue;
              s += w[((m * n_in + n) * k + i) * k + j] * in[(n * h + iy) * wd + ix];
            }
        out[(m * oh + y) * ow + x] = s;
      }
  return out;
}

// Per-channel convolution: each channel gets its own (K,K) kernel.
inline Tensor naive_depthwise(const Tensor& in, const Tensor& w, std::size_t stride, std::size_t pad) {
  const std::size_t c = in.dim(0), h = in.dim(1), wd = in.dim(2), k = w.dim(1);
  Tensor out;
  std::vector<double> all;
  Shape out_shape;
  for (std::size_t ch = 0; ch < c; ++ch) {
    Tensor plane({1, h, wd});
    for (std::size_t i = 0; i < h * wd; ++i) plane[i] = in[ch * h * wd + i];
    Tensor kern({1, 1, k, k});
    for (std::size_t i = 0; i < k * k; ++i) kern[i] = w[ch * k * k + i];
    Tensor o = naive_conv(plane, kern, stride, pad);
    out_shape = {c, o.dim(1), o.dim(2)};
    all.insert(all.end(), o.vec().begin(), o.vec().end());
  }
  return Tensor(out_shape, all);
}

// Matrix-vector product at every spatial site.
inline Tensor naive_pointwise(const Tensor& in, const Tensor& w) {
  const std::size_t n = in.dim(0), hw = in.dim(1) * in.dim(2), m = w.dim(0);
  Tensor out({m, in.dim(1), in.dim(2)});
  for (std::size_t p = 0; p < hw; ++p)
    for (std::size_t i = 0; i < m; ++i) {
      double s = 0.0;
      for (std::size_t j = 0; j < n; ++j) s += w[i * n + j] * in[j * hw + p];
      out[i * hw + p] = s;
    }
  return out;
}

// Central finite-difference gradient of a scalar function w.r.t. every
// element of `x` (which is perturbed in place and restored).
inline Tensor numeric_grad(Tensor& x, const std::function<double()>& loss, double step = 1e-4) {
  Tensor g(x.shape());
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double orig = x[i];
    x[i] = orig + step;
    const double up = loss();
    x[i] = orig - step;
    const double down = loss();
    x[i] = orig;
    g[i] = (up - down) / (2.0 * step);
  }
  return g;
}

// max |a - b| / max(1, max|b|): relative to the gradient's overall scale so
// near-zero entries do not dominate.
inline double rel_error(const Tensor& analytic, const Tensor& numeric) {
  double diff = 0.0, scale = 0.0;
  for (std::size_t i = 0; i < analytic.size(); ++i) {
    diff = std::max(diff, std::abs(analytic[i] - numeric[i]));
    scale = std::max(scale, std::abs(numeric[i]));
  }
  return diff / std::max(scale, 1e-8);
}

// Fixed random projection used to turn tensor outputs into scalar losses.
inline double dot(const Tensor& a, const Tensor& b) {
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
  return s;
}

}  // namespace oracle
