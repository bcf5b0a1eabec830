#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "odeforge/tensor.hpp"

namespace odeforge {

// ---------------------------------------------------------------------------
// Stateless kernels. Every kernel accepts a single sample (C, H, W) or a batch
// (B, C, H, W) and returns a tensor of the same rank.
// ---------------------------------------------------------------------------

enum class ConvKind { standard, depthwise, pointwise };

std::string to_string(ConvKind kind);

struct ConvSpec {
  std::size_t in_channels = 1;
  std::size_t out_channels = 1;
  std::size_t kernel = 3;
  std::size_t stride = 1;
  std::size_t padding = 1;
  bool bias = false;

  std::size_t out_extent(std::size_t in) const;
  // Throws InvalidArgument on a spec that cannot describe a `kind` layer.
  void validate(ConvKind kind) const;
};

// standard (M, N, K, K); depthwise (N, K, K); pointwise (M, N)
Shape weight_shape(const ConvSpec& spec, ConvKind kind);
// Weight count only: N*M*K^2, N*K^2 or N*M.
std::size_t weight_count(const ConvSpec& spec, ConvKind kind);

Tensor conv2d_forward(const Tensor& input, const ConvSpec& spec, const Tensor& weights,
                      const Tensor* bias = nullptr);
Tensor depthwise_forward(const Tensor& input, const ConvSpec& spec, const Tensor& weights);
Tensor pointwise_forward(const Tensor& input, const Tensor& weights, const Tensor* bias = nullptr);

struct BatchNormParams {
  Tensor gamma;
  Tensor beta;
  Tensor running_mean;
  Tensor running_var;
  double eps = 1e-5;

  static BatchNormParams identity(std::size_t channels, double eps = 1e-5);
  std::size_t channels() const { return gamma.size(); }
  void validate() const;
};

// Inference mode: gamma * (x - mean) / sqrt(var + eps) + beta per channel.
Tensor batchnorm_forward(const Tensor& input, const BatchNormParams& params);
Tensor relu_forward(const Tensor& input);
// input (n) or (B, n); weights (m, n); bias (m).
Tensor fc_forward(const Tensor& input, const Tensor& weights, const Tensor& bias);
// Appends one channel filled with t.
Tensor add_time(const Tensor& input, double t);
// (C, H, W) -> (C); (B, C, H, W) -> (B, C)
Tensor global_avg_pool(const Tensor& input);

// Backward kernels return dL/d(input) and dL/d(params) for the matching
// forward kernel above.
struct ConvBackward {
  Tensor input;
  Tensor weights;
  Tensor bias;  // empty when the layer has none
};

ConvBackward conv2d_backward(const Tensor& input, const ConvSpec& spec, const Tensor& weights,
                             const Tensor& grad_output, bool has_bias);
ConvBackward depthwise_backward(const Tensor& input, const ConvSpec& spec, const Tensor& weights,
                                const Tensor& grad_output);
ConvBackward pointwise_backward(const Tensor& input, const Tensor& weights, const Tensor& grad_output,
                                bool has_bias);
Tensor relu_backward(const Tensor& input, const Tensor& grad_output);
Tensor add_time_backward(const Tensor& grad_output);
Tensor global_avg_pool_backward(const Shape& input_shape, const Tensor& grad_output);

// ---------------------------------------------------------------------------
// Parameterized layers with cached forward state.
// ---------------------------------------------------------------------------

enum class Mode { inference, train };

struct ForwardContext {
  Mode mode = Mode::inference;
  double time = 0.0;  // consumed by AddTime
};

struct Param {
  std::string name;
  Tensor value;
  Tensor grad;
  std::uint64_t version = 0;  // bumped on every in-place update

  Param() = default;
  Param(std::string n, Tensor v) : name(std::move(n)), value(std::move(v)), grad(value.shape()) {}
  void zero_grad() { grad.fill(0.0); }
};

// Identity of a layer instance; copies receive a fresh id so caches from the
// original are rejected by the copy.
class LayerId {
 public:
  LayerId();
  LayerId(const LayerId&);
  LayerId& operator=(const LayerId&);
  std::uint64_t value() const { return value_; }

 private:
  std::uint64_t value_;
};

struct LayerCache {
  std::uint64_t layer = 0;
  std::uint64_t version = 0;
  Mode mode = Mode::inference;
  Tensor input;
  Tensor aux;       // batchnorm: normalized input
  Tensor aux_stat;  // batchnorm: per-channel 1/sqrt(var + eps) used
};

struct LayerGradients {
  Tensor grad_input;
  std::vector<Tensor> grad_params;  // same order as the layer's params()
};

class ConvLayer {
 public:
  ConvLayer() = default;
  ConvLayer(std::string name, ConvKind kind, ConvSpec spec);

  ConvKind kind() const { return kind_; }
  const ConvSpec& spec() const { return spec_; }
  const std::string& name() const { return name_; }
  bool has_bias() const { return spec_.bias; }
  Param& weight() { return weight_; }
  const Param& weight() const { return weight_; }
  Param& bias() { return bias_; }
  const Param& bias() const { return bias_; }
  // Adds a zero bias to a bias-free layer.
  void enable_bias();

  Tensor forward(const Tensor& input, const ForwardContext& ctx, LayerCache* cache) const;
  LayerGradients backward(const LayerCache& cache, const Tensor& grad_output) const;
  std::vector<Param*> params();
  std::vector<const Param*> params() const;
  std::uint64_t version() const { return weight_.version + bias_.version; }
  std::uint64_t uid() const { return id_.value(); }

 private:
  std::string name_;
  ConvKind kind_ = ConvKind::standard;
  ConvSpec spec_;
  Param weight_;
  Param bias_;
  LayerId id_;
};

class BatchNormLayer {
 public:
  BatchNormLayer() = default;
  BatchNormLayer(std::string name, std::size_t channels, double eps = 1e-5, double momentum = 0.1);

  const std::string& name() const { return name_; }
  std::size_t channels() const { return gamma_.value.size(); }
  // Snapshot of the affine parameters and running statistics.
  BatchNormParams params_snapshot() const;
  void set_state(const BatchNormParams& p);
  Param& gamma() { return gamma_; }
  Param& beta() { return beta_; }
  const Tensor& running_mean() const { return running_mean_; }
  const Tensor& running_var() const { return running_var_; }
  double eps() const { return eps_; }

  // Train mode normalizes with batch statistics (over B, H, W) and updates
  // the running statistics; inference mode uses the running statistics.
  Tensor forward(const Tensor& input, const ForwardContext& ctx, LayerCache* cache);
  Tensor forward(const Tensor& input) const;
  LayerGradients backward(const LayerCache& cache, const Tensor& grad_output) const;
  std::vector<Param*> params();
  std::vector<const Param*> params() const;
  std::uint64_t version() const { return gamma_.version + beta_.version; }
  std::uint64_t uid() const { return id_.value(); }

 private:
  std::string name_;
  Param gamma_;
  Param beta_;
  Tensor running_mean_;
  Tensor running_var_;
  double eps_ = 1e-5;
  double momentum_ = 0.1;
  LayerId id_;
};

class LinearLayer {
 public:
  LinearLayer() = default;
  LinearLayer(std::string name, std::size_t in_features, std::size_t out_features);

  const std::string& name() const { return name_; }
  std::size_t in_features() const { return weight_.value.dim(1); }
  std::size_t out_features() const { return weight_.value.dim(0); }
  Param& weight() { return weight_; }
  const Param& weight() const { return weight_; }
  Param& bias() { return bias_; }
  const Param& bias() const { return bias_; }

  Tensor forward(const Tensor& input, const ForwardContext& ctx, LayerCache* cache) const;
  LayerGradients backward(const LayerCache& cache, const Tensor& grad_output) const;
  std::vector<Param*> params();
  std::vector<const Param*> params() const;
  std::uint64_t version() const { return weight_.version + bias_.version; }
  std::uint64_t uid() const { return id_.value(); }

 private:
  std::string name_;
  Param weight_;
  Param bias_;
  LayerId id_;
};

class ReluLayer {
 public:
  Tensor forward(const Tensor& input, const ForwardContext& ctx, LayerCache* cache) const;
  LayerGradients backward(const LayerCache& cache, const Tensor& grad_output) const;
  std::vector<Param*> params() { return {}; }
  std::uint64_t version() const { return 0; }
  std::uint64_t uid() const { return id_.value(); }

 private:
  LayerId id_;
};

class AddTimeLayer {
 public:
  Tensor forward(const Tensor& input, const ForwardContext& ctx, LayerCache* cache) const;
  LayerGradients backward(const LayerCache& cache, const Tensor& grad_output) const;
  std::vector<Param*> params() { return {}; }
  std::uint64_t version() const { return 0; }
  std::uint64_t uid() const { return id_.value(); }

 private:
  LayerId id_;
};

// Checks that `cache` was produced by `layer` with its current weights, then
// runs the layer's backward pass. Throws InvalidArgument on a stale or
// foreign cache.
template <typename LayerT>
LayerGradients layer_backward(const LayerT& layer, const LayerCache& cache, const Tensor& grad_output);

void check_cache(std::uint64_t uid, std::uint64_t version, const LayerCache& cache);

template <typename LayerT>
LayerGradients layer_backward(const LayerT& layer, const LayerCache& cache, const Tensor& grad_output) {
  check_cache(layer.uid(), layer.version(), cache);
  return layer.backward(cache, grad_output);
}

}  // namespace odeforge
