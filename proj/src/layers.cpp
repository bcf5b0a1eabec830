#include "odeforge/layers.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>

#include "odeforge/error.hpp"

namespace odeforge {

namespace {

struct Dims {
  std::size_t b, c, h, w;
  bool batched;
};

Dims feature_dims(const Tensor& t, const char* what) {
  if (t.rank() == 3) return {1, t.dim(0), t.dim(1), t.dim(2), false};
  if (t.rank() == 4) return {t.dim(0), t.dim(1), t.dim(2), t.dim(3), true};
  throw ShapeError(std::string(what) + ": expected a (C,H,W) or (B,C,H,W) tensor, got " + shape_str(t.shape()));
}

Shape make_shape(const Dims& d, std::size_t c, std::size_t h, std::size_t w) {
  if (d.batched) return {d.b, c, h, w};
  return {c, h, w};
}

void require_channels(const char* what, std::size_t got, std::size_t expected) {
  if (got != expected)
    throw ShapeError(std::string(what) + ": input channel count " + std::to_string(got) + " != expected " +
                     std::to_string(expected));
}

void require_weights(const char* what, const Tensor& w, const Shape& expected) {
  if (w.shape() != expected)
    throw ShapeError(std::string(what) + ": weight shape " + shape_str(w.shape()) + " != expected " +
                     shape_str(expected));
}

// Output columns [lo, hi) whose tap `k` lands inside the input row of width `in`.
struct Span {
  std::size_t lo, hi;
};

Span valid_range(std::size_t out, std::size_t in, std::size_t k, std::size_t stride, std::size_t pad) {
  // input index = o * stride + k - pad must lie in [0, in)
  std::size_t lo = 0;
  if (k < pad) lo = (pad - k + stride - 1) / stride;
  std::size_t hi = 0;
  if (in + pad > k) hi = std::min(out, (in + pad - k - 1) / stride + 1);
  if (lo > hi) lo = hi;
  return {lo, hi};
}

// Accumulates one K x K spatial correlation of `in` (h x w) with `kern` into
// `out` (oh x ow). Summation order per output element is the row-major
// kernel scan.
void correlate_plane(const double* in, std::size_t h, std::size_t w, const double* kern, std::size_t k,
                     std::size_t stride, std::size_t pad, double* out, std::size_t oh, std::size_t ow) {
  for (std::size_t kh = 0; kh < k; ++kh) {
    const Span rows = valid_range(oh, h, kh, stride, pad);
    for (std::size_t kw = 0; kw < k; ++kw) {
      const double wv = kern[kh * k + kw];
      const Span cols = valid_range(ow, w, kw, stride, pad);
      if (cols.lo == cols.hi) continue;
      const std::size_t n = cols.hi - cols.lo;
      for (std::size_t y = rows.lo; y < rows.hi; ++y) {
        const double* src = in + (y * stride + kh - pad) * w + (cols.lo * stride + kw - pad);
        double* dst = out + y * ow + cols.lo;
        for (std::size_t x = 0; x < n; ++x) dst[x] += wv * src[x * stride];
      }
    }
  }
}

// Transposed counterpart of correlate_plane: scatters grad_out through the
// kernel into grad_in and accumulates the kernel gradient into grad_kern.
void correlate_plane_backward(const double* in, std::size_t h, std::size_t w, const double* kern, std::size_t k,
                              std::size_t stride, std::size_t pad, const double* gout, std::size_t oh,
                              std::size_t ow, double* grad_in, double* grad_kern) {
  for (std::size_t kh = 0; kh < k; ++kh) {
    const Span rows = valid_range(oh, h, kh, stride, pad);
    for (std::size_t kw = 0; kw < k; ++kw) {
      const double wv = kern[kh * k + kw];
      const Span cols = valid_range(ow, w, kw, stride, pad);
      double gk = 0.0;
      const std::size_t n = cols.hi - cols.lo;
      for (std::size_t y = rows.lo; y < rows.hi && n > 0; ++y) {
        const std::size_t off = (y * stride + kh - pad) * w + (cols.lo * stride + kw - pad);
        const double* src = in + off;
        double* gsrc = grad_in + off;
        const double* g = gout + y * ow + cols.lo;
        for (std::size_t x = 0; x < n; ++x) {
          gk += g[x] * src[x * stride];
          gsrc[x * stride] += wv * g[x];
        }
      }
      grad_kern[kh * k + kw] += gk;
    }
  }
}

}  // namespace

std::string to_string(ConvKind kind) {
  switch (kind) {
    case ConvKind::standard: return "standard";
    case ConvKind::depthwise: return "depthwise";
    case ConvKind::pointwise: return "pointwise";
  }
  return "?";
}

std::size_t ConvSpec::out_extent(std::size_t in) const {
  if (in + 2 * padding < kernel)
    throw ShapeError("input extent " + std::to_string(in) + " smaller than kernel " + std::to_string(kernel));
  return (in + 2 * padding - kernel) / stride + 1;
}

void ConvSpec::validate(ConvKind kind) const {
  if (in_channels == 0 || out_channels == 0) throw InvalidArgument("conv channel counts must be positive");
  if (kernel == 0 || kernel % 2 == 0) throw InvalidArgument("conv kernel must be a positive odd integer");
  if (stride == 0) throw InvalidArgument("conv stride must be positive");
  if (kind == ConvKind::depthwise && out_channels != in_channels)
    throw InvalidArgument("depthwise conv requires out_channels == in_channels");
  if (kind == ConvKind::pointwise && (kernel != 1 || padding != 0))
    throw InvalidArgument("pointwise conv requires kernel 1 and padding 0");
}

Shape weight_shape(const ConvSpec& spec, ConvKind kind) {
  switch (kind) {
    case ConvKind::standard: return {spec.out_channels, spec.in_channels, spec.kernel, spec.kernel};
    case ConvKind::depthwise: return {spec.in_channels, spec.kernel, spec.kernel};
    case ConvKind::pointwise: return {spec.out_channels, spec.in_channels};
  }
  return {};
}

std::size_t weight_count(const ConvSpec& spec, ConvKind kind) { return shape_size(weight_shape(spec, kind)); }

Tensor conv2d_forward(const Tensor& input, const ConvSpec& spec, const Tensor& weights, const Tensor* bias) {
  const Dims d = feature_dims(input, "conv2d");
  require_channels("conv2d", d.c, spec.in_channels);
  require_weights("conv2d", weights, weight_shape(spec, ConvKind::standard));
  if (bias && bias->size() != spec.out_channels) throw ShapeError("conv2d: bias length != out_channels");
  const std::size_t oh = spec.out_extent(d.h), ow = spec.out_extent(d.w);
  const std::size_t k = spec.kernel, kk = k * k;
  Tensor out(make_shape(d, spec.out_channels, oh, ow));
  for (std::size_t b = 0; b < d.b; ++b) {
    const double* in_b = input.data() + b * d.c * d.h * d.w;
    for (std::size_t m = 0; m < spec.out_channels; ++m) {
      double* o = out.data() + (b * spec.out_channels + m) * oh * ow;
      for (std::size_t n = 0; n < d.c; ++n)
        correlate_plane(in_b + n * d.h * d.w, d.h, d.w, weights.data() + (m * d.c + n) * kk, k, spec.stride,
                        spec.padding, o, oh, ow);
      if (bias)
        for (std::size_t p = 0; p < oh * ow; ++p) o[p] += (*bias)[m];
    }
  }
  return out;
}

Tensor depthwise_forward(const Tensor& input, const ConvSpec& spec, const Tensor& weights) {
  const Dims d = feature_dims(input, "depthwise");
  require_channels("depthwise", d.c, spec.in_channels);
  require_weights("depthwise", weights, weight_shape(spec, ConvKind::depthwise));
  const std::size_t oh = spec.out_extent(d.h), ow = spec.out_extent(d.w);
  const std::size_t k = spec.kernel, kk = k * k;
  Tensor out(make_shape(d, d.c, oh, ow));
  for (std::size_t b = 0; b < d.b; ++b)
    for (std::size_t n = 0; n < d.c; ++n)
      correlate_plane(input.data() + (b * d.c + n) * d.h * d.w, d.h, d.w, weights.data() + n * kk, k, spec.stride,
                      spec.padding, out.data() + (b * d.c + n) * oh * ow, oh, ow);
  return out;
}

Tensor pointwise_forward(const Tensor& input, const Tensor& weights, const Tensor* bias) {
  const Dims d = feature_dims(input, "pointwise");
  if (weights.rank() != 2) throw ShapeError("pointwise: weights must be (M, N), got " + shape_str(weights.shape()));
  const std::size_t m_out = weights.dim(0);
  require_channels("pointwise", d.c, weights.dim(1));
  if (bias && bias->size() != m_out) throw ShapeError("pointwise: bias length != out_channels");
  const std::size_t hw = d.h * d.w;
  Tensor out(make_shape(d, m_out, d.h, d.w));
  for (std::size_t b = 0; b < d.b; ++b) {
    const double* in_b = input.data() + b * d.c * hw;
    for (std::size_t m = 0; m < m_out; ++m) {
      double* o = out.data() + (b * m_out + m) * hw;
      const double* wrow = weights.data() + m * d.c;
      for (std::size_t n = 0; n < d.c; ++n) {
        const double wv = wrow[n];
        const double* src = in_b + n * hw;
        for (std::size_t p = 0; p < hw; ++p) o[p] += wv * src[p];
      }
      if (bias)
        for (std::size_t p = 0; p < hw; ++p) o[p] += (*bias)[m];
    }
  }
  return out;
}

BatchNormParams BatchNormParams::identity(std::size_t channels, double eps) {
  return {Tensor({channels}, 1.0), Tensor({channels}, 0.0), Tensor({channels}, 0.0), Tensor({channels}, 1.0), eps};
}

void BatchNormParams::validate() const {
  const std::size_t c = gamma.size();
  if (beta.size() != c || running_mean.size() != c || running_var.size() != c)
    throw ShapeError("batchnorm: parameter arrays differ in length");
  if (eps < 0.0) throw InvalidArgument("batchnorm: eps must be non-negative");
  for (std::size_t i = 0; i < c; ++i)
    if (running_var[i] < 0.0) throw InvalidArgument("batchnorm: negative running variance");
}

Tensor batchnorm_forward(const Tensor& input, const BatchNormParams& params) {
  params.validate();
  const Dims d = feature_dims(input, "batchnorm");
  require_channels("batchnorm", d.c, params.channels());
  const std::size_t hw = d.h * d.w;
  Tensor out(input.shape());
  for (std::size_t c = 0; c < d.c; ++c) {
    const double scale = params.gamma[c] / std::sqrt(params.running_var[c] + params.eps);
    const double mean = params.running_mean[c];
    const double beta = params.beta[c];
    for (std::size_t b = 0; b < d.b; ++b) {
      const std::size_t off = (b * d.c + c) * hw;
      for (std::size_t p = 0; p < hw; ++p) out[off + p] = scale * (input[off + p] - mean) + beta;
    }
  }
  return out;
}

Tensor relu_forward(const Tensor& input) {
  Tensor out(input.shape());
  for (std::size_t i = 0; i < input.size(); ++i) out[i] = input[i] > 0.0 ? input[i] : 0.0;
  return out;
}

Tensor fc_forward(const Tensor& input, const Tensor& weights, const Tensor& bias) {
  if (weights.rank() != 2) throw ShapeError("fc: weights must be (m, n)");
  const std::size_t m = weights.dim(0), n = weights.dim(1);
  if (bias.size() != m) throw ShapeError("fc: bias length " + std::to_string(bias.size()) + " != " + std::to_string(m));
  std::size_t batch = 1;
  Shape out_shape{m};
  if (input.rank() == 1) {
    if (input.dim(0) != n) throw ShapeError("fc: input length " + std::to_string(input.dim(0)) + " != " + std::to_string(n));
  } else if (input.rank() == 2) {
    if (input.dim(1) != n) throw ShapeError("fc: input length " + std::to_string(input.dim(1)) + " != " + std::to_string(n));
    batch = input.dim(0);
    out_shape = {batch, m};
  } else {
    throw ShapeError("fc: expected (n) or (B, n) input, got " + shape_str(input.shape()));
  }
  Tensor out(out_shape);
  for (std::size_t b = 0; b < batch; ++b)
    for (std::size_t i = 0; i < m; ++i) {
      double acc = 0.0;
      for (std::size_t j = 0; j < n; ++j) acc += weights[i * n + j] * input[b * n + j];
      out[b * m + i] = acc + bias[i];
    }
  return out;
}

Tensor add_time(const Tensor& input, double t) {
  const Dims d = feature_dims(input, "add_time");
  const std::size_t plane = d.c * d.h * d.w, hw = d.h * d.w;
  Tensor out(make_shape(d, d.c + 1, d.h, d.w));
  for (std::size_t b = 0; b < d.b; ++b) {
    std::copy_n(input.data() + b * plane, plane, out.data() + b * (plane + hw));
    std::fill_n(out.data() + b * (plane + hw) + plane, hw, t);
  }
  return out;
}

Tensor global_avg_pool(const Tensor& input) {
  const Dims d = feature_dims(input, "global_avg_pool");
  const std::size_t hw = d.h * d.w;
  Tensor out(d.batched ? Shape{d.b, d.c} : Shape{d.c});
  for (std::size_t i = 0; i < d.b * d.c; ++i) {
    double s = 0.0;
    for (std::size_t p = 0; p < hw; ++p) s += input[i * hw + p];
    out[i] = s / static_cast<double>(hw);
  }
  return out;
}

ConvBackward conv2d_backward(const Tensor& input, const ConvSpec& spec, const Tensor& weights,
                             const Tensor& grad_output, bool has_bias) {
  const Dims d = feature_dims(input, "conv2d_backward");
  const std::size_t oh = spec.out_extent(d.h), ow = spec.out_extent(d.w);
  require_same_shape(grad_output.shape(), make_shape(d, spec.out_channels, oh, ow), "conv2d_backward grad_output");
  const std::size_t k = spec.kernel, kk = k * k;
  ConvBackward g{Tensor(input.shape()), Tensor(weights.shape()), has_bias ? Tensor({spec.out_channels}) : Tensor()};
  for (std::size_t b = 0; b < d.b; ++b) {
    const double* in_b = input.data() + b * d.c * d.h * d.w;
    double* gin_b = g.input.data() + b * d.c * d.h * d.w;
    for (std::size_t m = 0; m < spec.out_channels; ++m) {
      const double* go = grad_output.data() + (b * spec.out_channels + m) * oh * ow;
      for (std::size_t n = 0; n < d.c; ++n)
        correlate_plane_backward(in_b + n * d.h * d.w, d.h, d.w, weights.data() + (m * d.c + n) * kk, k,
                                 spec.stride, spec.padding, go, oh, ow, gin_b + n * d.h * d.w,
                                 g.weights.data() + (m * d.c + n) * kk);
      if (has_bias)
        for (std::size_t p = 0; p < oh * ow; ++p) g.bias[m] += go[p];
    }
  }
  return g;
}

ConvBackward depthwise_backward(const Tensor& input, const ConvSpec& spec, const Tensor& weights,
                                const Tensor& grad_output) {
  const Dims d = feature_dims(input, "depthwise_backward");
  const std::size_t oh = spec.out_extent(d.h), ow = spec.out_extent(d.w);
  require_same_shape(grad_output.shape(), make_shape(d, d.c, oh, ow), "depthwise_backward grad_output");
  const std::size_t k = spec.kernel, kk = k * k;
  ConvBackward g{Tensor(input.shape()), Tensor(weights.shape()), Tensor()};
  for (std::size_t b = 0; b < d.b; ++b)
    for (std::size_t n = 0; n < d.c; ++n)
      correlate_plane_backward(input.data() + (b * d.c + n) * d.h * d.w, d.h, d.w, weights.data() + n * kk, k,
                               spec.stride, spec.padding, grad_output.data() + (b * d.c + n) * oh * ow, oh, ow,
                               g.input.data() + (b * d.c + n) * d.h * d.w, g.weights.data() + n * kk);
  return g;
}

ConvBackward pointwise_backward(const Tensor& input, const Tensor& weights, const Tensor& grad_output,
                                bool has_bias) {
  const Dims d = feature_dims(input, "pointwise_backward");
  const std::size_t m_out = weights.dim(0);
  require_same_shape(grad_output.shape(), make_shape(d, m_out, d.h, d.w), "pointwise_backward grad_output");
  const std::size_t hw = d.h * d.w;
  ConvBackward g{Tensor(input.shape()), Tensor(weights.shape()), has_bias ? Tensor({m_out}) : Tensor()};
  for (std::size_t b = 0; b < d.b; ++b) {
    const double* in_b = input.data() + b * d.c * hw;
    double* gin_b = g.input.data() + b * d.c * hw;
    for (std::size_t m = 0; m < m_out; ++m) {
      const double* go = grad_output.data() + (b * m_out + m) * hw;
      for (std::size_t n = 0; n < d.c; ++n) {
        const double wv = weights[m * d.c + n];
        const double* src = in_b + n * hw;
        double* gsrc = gin_b + n * hw;
        double gw = 0.0;
        for (std::size_t p = 0; p < hw; ++p) {
          gw += go[p] * src[p];
          gsrc[p] += wv * go[p];
        }
        g.weights[m * d.c + n] += gw;
      }
      if (has_bias)
        for (std::size_t p = 0; p < hw; ++p) g.bias[m] += go[p];
    }
  }
  return g;
}

Tensor relu_backward(const Tensor& input, const Tensor& grad_output) {
  require_same_shape(grad_output.shape(), input.shape(), "relu_backward");
  Tensor g(input.shape());
  for (std::size_t i = 0; i < input.size(); ++i) g[i] = input[i] > 0.0 ? grad_output[i] : 0.0;
  return g;
}

Tensor add_time_backward(const Tensor& grad_output) {
  const Dims d = feature_dims(grad_output, "add_time_backward");
  if (d.c < 2) throw ShapeError("add_time_backward: gradient has no time channel to drop");
  const std::size_t hw = d.h * d.w, plane = (d.c - 1) * hw;
  Tensor g(make_shape(d, d.c - 1, d.h, d.w));
  for (std::size_t b = 0; b < d.b; ++b) std::copy_n(grad_output.data() + b * (plane + hw), plane, g.data() + b * plane);
  return g;
}

Tensor global_avg_pool_backward(const Shape& input_shape, const Tensor& grad_output) {
  Tensor g(input_shape);
  const Dims d = feature_dims(g, "global_avg_pool_backward");
  const std::size_t hw = d.h * d.w;
  if (grad_output.size() != d.b * d.c) throw ShapeError("global_avg_pool_backward: gradient length mismatch");
  for (std::size_t i = 0; i < d.b * d.c; ++i)
    for (std::size_t p = 0; p < hw; ++p) g[i * hw + p] = grad_output[i] / static_cast<double>(hw);
  return g;
}

// ---------------------------------------------------------------------------

namespace {
std::atomic<std::uint64_t> next_layer_id{1};
}

LayerId::LayerId() : value_(next_layer_id++) {}
LayerId::LayerId(const LayerId&) : value_(next_layer_id++) {}
LayerId& LayerId::operator=(const LayerId&) {
  value_ = next_layer_id++;
  return *this;
}

void check_cache(std::uint64_t uid, std::uint64_t version, const LayerCache& cache) {
  if (cache.layer != uid) throw InvalidArgument("backward: cache was produced by a different layer");
  if (cache.version != version) throw InvalidArgument("backward: stale cache, layer weights changed since forward");
}

namespace {
template <typename L>
void fill_cache(LayerCache* cache, const L& layer, const Tensor& input, Mode mode) {
  if (!cache) return;
  cache->layer = layer.uid();
  cache->version = layer.version();
  cache->mode = mode;
  cache->input = input;
}
}  // namespace

ConvLayer::ConvLayer(std::string name, ConvKind kind, ConvSpec spec)
    : name_(std::move(name)), kind_(kind), spec_(spec) {
  spec_.validate(kind_);
  weight_ = Param(name_ + ".weight", Tensor(weight_shape(spec_, kind_)));
  if (spec_.bias) bias_ = Param(name_ + ".bias", Tensor({spec_.out_channels}));
}

void ConvLayer::enable_bias() {
  if (spec_.bias) return;
  spec_.bias = true;
  bias_ = Param(name_ + ".bias", Tensor({spec_.out_channels}));
}

Tensor ConvLayer::forward(const Tensor& input, const ForwardContext& ctx, LayerCache* cache) const {
  fill_cache(cache, *this, input, ctx.mode);
  const Tensor* b = spec_.bias ? &bias_.value : nullptr;
  switch (kind_) {
    case ConvKind::standard: return conv2d_forward(input, spec_, weight_.value, b);
    case ConvKind::depthwise: {
      Tensor out = depthwise_forward(input, spec_, weight_.value);
      if (b) {
        const Dims d = feature_dims(out, "depthwise bias");
        const std::size_t hw = d.h * d.w;
        for (std::size_t i = 0; i < d.b * d.c; ++i)
          for (std::size_t p = 0; p < hw; ++p) out[i * hw + p] += (*b)[i % d.c];
      }
      return out;
    }
    case ConvKind::pointwise: return pointwise_forward(input, weight_.value, b);
  }
  return {};
}

LayerGradients ConvLayer::backward(const LayerCache& cache, const Tensor& grad_output) const {
  check_cache(uid(), version(), cache);
  ConvBackward g;
  switch (kind_) {
    case ConvKind::standard: g = conv2d_backward(cache.input, spec_, weight_.value, grad_output, spec_.bias); break;
    case ConvKind::depthwise:
      g = depthwise_backward(cache.input, spec_, weight_.value, grad_output);
      if (spec_.bias) {
        const Dims d = feature_dims(grad_output, "depthwise bias");
        const std::size_t hw = d.h * d.w;
        g.bias = Tensor({d.c});
        for (std::size_t i = 0; i < d.b * d.c; ++i)
          for (std::size_t p = 0; p < hw; ++p) g.bias[i % d.c] += grad_output[i * hw + p];
      }
      break;
    case ConvKind::pointwise: g = pointwise_backward(cache.input, weight_.value, grad_output, spec_.bias); break;
  }
  LayerGradients out{std::move(g.input), {std::move(g.weights)}};
  if (spec_.bias) out.grad_params.push_back(std::move(g.bias));
  return out;
}

std::vector<Param*> ConvLayer::params() {
  if (spec_.bias) return {&weight_, &bias_};
  return {&weight_};
}

std::vector<const Param*> ConvLayer::params() const {
  if (spec_.bias) return {&weight_, &bias_};
  return {&weight_};
}

BatchNormLayer::BatchNormLayer(std::string name, std::size_t channels, double eps, double momentum)
    : name_(std::move(name)),
      gamma_(name_ + ".gamma", Tensor({channels}, 1.0)),
      beta_(name_ + ".beta", Tensor({channels}, 0.0)),
      running_mean_({channels}, 0.0),
      running_var_({channels}, 1.0),
      eps_(eps),
      momentum_(momentum) {}

BatchNormParams BatchNormLayer::params_snapshot() const {
  return {gamma_.value, beta_.value, running_mean_, running_var_, eps_};
}

void BatchNormLayer::set_state(const BatchNormParams& p) {
  p.validate();
  if (p.channels() != channels()) throw ShapeError("batchnorm " + name_ + ": channel count mismatch");
  gamma_.value = p.gamma;
  beta_.value = p.beta;
  running_mean_ = p.running_mean;
  running_var_ = p.running_var;
  eps_ = p.eps;
  ++gamma_.version;
}

Tensor BatchNormLayer::forward(const Tensor& input) const { return batchnorm_forward(input, params_snapshot()); }

Tensor BatchNormLayer::forward(const Tensor& input, const ForwardContext& ctx, LayerCache* cache) {
  fill_cache(cache, *this, input, ctx.mode);
  const Dims d = feature_dims(input, "batchnorm");
  require_channels("batchnorm", d.c, channels());
  const std::size_t hw = d.h * d.w;
  const double count = static_cast<double>(d.b * hw);
  Tensor xhat(input.shape());
  Tensor inv_std({d.c});
  Tensor out(input.shape());
  for (std::size_t c = 0; c < d.c; ++c) {
    double mean, var;
    if (ctx.mode == Mode::train) {
      double s = 0.0;
      for (std::size_t b = 0; b < d.b; ++b)
        for (std::size_t p = 0; p < hw; ++p) s += input[(b * d.c + c) * hw + p];
      mean = s / count;
      double ss = 0.0;
      for (std::size_t b = 0; b < d.b; ++b)
        for (std::size_t p = 0; p < hw; ++p) {
          const double dv = input[(b * d.c + c) * hw + p] - mean;
          ss += dv * dv;
        }
      var = ss / count;
      const double unbiased = count > 1.0 ? ss / (count - 1.0) : var;
      running_mean_[c] = (1.0 - momentum_) * running_mean_[c] + momentum_ * mean;
      running_var_[c] = (1.0 - momentum_) * running_var_[c] + momentum_ * unbiased;
    } else {
      mean = running_mean_[c];
      var = running_var_[c];
    }
    const double is = 1.0 / std::sqrt(var + eps_);
    // same expression as batchnorm_forward so both paths agree bitwise
    const double scale = gamma_.value[c] / std::sqrt(var + eps_);
    inv_std[c] = is;
    for (std::size_t b = 0; b < d.b; ++b) {
      const std::size_t off = (b * d.c + c) * hw;
      for (std::size_t p = 0; p < hw; ++p) {
        xhat[off + p] = (input[off + p] - mean) * is;
        out[off + p] = scale * (input[off + p] - mean) + beta_.value[c];
      }
    }
  }
  if (cache) {
    cache->aux = std::move(xhat);
    cache->aux_stat = std::move(inv_std);
  }
  return out;
}

LayerGradients BatchNormLayer::backward(const LayerCache& cache, const Tensor& grad_output) const {
  check_cache(uid(), version(), cache);
  require_same_shape(grad_output.shape(), cache.input.shape(), "batchnorm backward");
  const Dims d = feature_dims(grad_output, "batchnorm backward");
  const std::size_t hw = d.h * d.w;
  const double count = static_cast<double>(d.b * hw);
  Tensor gin(grad_output.shape());
  Tensor ggamma({d.c}), gbeta({d.c});
  const Tensor& xhat = cache.aux;
  for (std::size_t c = 0; c < d.c; ++c) {
    double sum_g = 0.0, sum_gx = 0.0;
    for (std::size_t b = 0; b < d.b; ++b)
      for (std::size_t p = 0; p < hw; ++p) {
        const std::size_t i = (b * d.c + c) * hw + p;
        sum_g += grad_output[i];
        sum_gx += grad_output[i] * xhat[i];
      }
    ggamma[c] = sum_gx;
    gbeta[c] = sum_g;
    const double scale = gamma_.value[c] * cache.aux_stat[c];
    for (std::size_t b = 0; b < d.b; ++b)
      for (std::size_t p = 0; p < hw; ++p) {
        const std::size_t i = (b * d.c + c) * hw + p;
        if (cache.mode == Mode::train)
          gin[i] = scale * (grad_output[i] - sum_g / count - xhat[i] * sum_gx / count);
        else
          gin[i] = scale * grad_output[i];
      }
  }
  return {std::move(gin), {std::move(ggamma), std::move(gbeta)}};
}

std::vector<Param*> BatchNormLayer::params() { return {&gamma_, &beta_}; }
std::vector<const Param*> BatchNormLayer::params() const { return {&gamma_, &beta_}; }

LinearLayer::LinearLayer(std::string name, std::size_t in_features, std::size_t out_features)
    : name_(std::move(name)),
      weight_(name_ + ".weight", Tensor({out_features, in_features})),
      bias_(name_ + ".bias", Tensor({out_features})) {}

Tensor LinearLayer::forward(const Tensor& input, const ForwardContext& ctx, LayerCache* cache) const {
  fill_cache(cache, *this, input, ctx.mode);
  return fc_forward(input, weight_.value, bias_.value);
}

LayerGradients LinearLayer::backward(const LayerCache& cache, const Tensor& grad_output) const {
  check_cache(uid(), version(), cache);
  const Tensor& in = cache.input;
  const std::size_t m = out_features(), n = in_features();
  const std::size_t batch = in.rank() == 1 ? 1 : in.dim(0);
  if (grad_output.size() != batch * m) throw ShapeError("fc backward: gradient length mismatch");
  Tensor gin(in.shape()), gw({m, n}), gb({m});
  for (std::size_t b = 0; b < batch; ++b)
    for (std::size_t i = 0; i < m; ++i) {
      const double g = grad_output[b * m + i];
      gb[i] += g;
      for (std::size_t j = 0; j < n; ++j) {
        gw[i * n + j] += g * in[b * n + j];
        gin[b * n + j] += g * weight_.value[i * n + j];
      }
    }
  return {std::move(gin), {std::move(gw), std::move(gb)}};
}

std::vector<Param*> LinearLayer::params() { return {&weight_, &bias_}; }
std::vector<const Param*> LinearLayer::params() const { return {&weight_, &bias_}; }

Tensor ReluLayer::forward(const Tensor& input, const ForwardContext& ctx, LayerCache* cache) const {
  fill_cache(cache, *this, input, ctx.mode);
  return relu_forward(input);
}

LayerGradients ReluLayer::backward(const LayerCache& cache, const Tensor& grad_output) const {
  check_cache(uid(), version(), cache);
  return {relu_backward(cache.input, grad_output), {}};
}

Tensor AddTimeLayer::forward(const Tensor& input, const ForwardContext& ctx, LayerCache* cache) const {
  fill_cache(cache, *this, input, ctx.mode);
  return add_time(input, ctx.time);
}

LayerGradients AddTimeLayer::backward(const LayerCache& cache, const Tensor& grad_output) const {
  check_cache(uid(), version(), cache);
  Tensor g = add_time_backward(grad_output);
  require_same_shape(g.shape(), cache.input.shape(), "add_time backward");
  return {std::move(g), {}};
}

}  // namespace odeforge
