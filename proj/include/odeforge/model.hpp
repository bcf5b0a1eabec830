#pragma once

#include <cstdint>
#include <functional>
#include <optional>
#include <string>
#include <string_view>
#include <variant>
#include <vector>

#include "odeforge/layers.hpp"
#include "odeforge/tensor.hpp"

namespace odeforge {

enum class Variant { resnet, odenet, dsodenet };

std::string to_string(Variant v);
Variant parse_variant(std::string_view s);

// Declarative description of a ResNet / ODENet / dsODENet network.
struct ModelSpec {
  Variant variant = Variant::dsodenet;
  int num_blocks = 3;  // residual stages: 2 or 3
  std::size_t base_channels = 64;
  int iterations = 10;  // C
  double step = 1.0;    // h
  Shape input_shape{3, 8, 8};
  std::size_t classes = 10;
  // Per-stage DSC flags. Empty means the variant's default placement.
  std::vector<bool> separable_blocks;
  std::vector<bool> separable_downsampling;

  void validate() const;
  bool block_separable(int i) const;
  bool downsampling_separable(int i) const;
  std::size_t block_channels(int i) const { return base_channels << i; }
  std::size_t feature_dim() const { return block_channels(num_blocks - 1); }
  // Output shape of every stage in execution order (block, down, block, ...).
  std::vector<Shape> stage_shapes() const;
  std::string stage_name(std::size_t stage_index) const;
};

// `key = value` lines; '#' starts a comment. Keys: variant, blocks,
// base_channels, C, h, input_shape, classes, separable_blocks,
// separable_downsampling. Unknown keys are rejected.
ModelSpec parse_model_config(std::string_view text);
ModelSpec load_model_config(const std::string& path);
std::string to_config_text(const ModelSpec& spec);

// A standard K x K convolution, or a depthwise + pointwise pair.
class ConvUnit {
 public:
  ConvUnit() = default;
  ConvUnit(const std::string& name, std::size_t in, std::size_t out, std::size_t stride, bool separable);

  bool separable() const { return layers_.size() == 2; }
  std::vector<ConvLayer>& layers() { return layers_; }
  const std::vector<ConvLayer>& layers() const { return layers_; }
  ConvLayer& last() { return layers_.back(); }

  Tensor forward(const Tensor& input, const ForwardContext& ctx, std::vector<LayerCache>* caches,
                 std::size_t* invocations) const;
  Tensor backward(const std::vector<LayerCache>& caches, const Tensor& grad_output);

 private:
  std::vector<ConvLayer> layers_;
};

struct BodyTape {
  LayerCache time1;
  std::vector<LayerCache> conv1;
  LayerCache bn1, relu1, time2;
  std::vector<LayerCache> conv2;
  LayerCache bn2, relu2;
};

// f(z, t) = ReLU(BN(conv2(AddTime(ReLU(BN(conv1(AddTime(z, t))))), t)))
// AddTime layers are present only in ODE variants; batchnorms disappear
// once folded into the preceding convolution.
class ResidualBody {
 public:
  ResidualBody() = default;
  ResidualBody(const std::string& name, std::size_t channels, bool with_time, bool separable);

  bool with_time() const { return with_time_; }
  ConvUnit& conv1() { return conv1_; }
  ConvUnit& conv2() { return conv2_; }
  const ConvUnit& conv1() const { return conv1_; }
  const ConvUnit& conv2() const { return conv2_; }
  std::optional<BatchNormLayer>& bn1() { return bn1_; }
  std::optional<BatchNormLayer>& bn2() { return bn2_; }
  const std::optional<BatchNormLayer>& bn1() const { return bn1_; }
  const std::optional<BatchNormLayer>& bn2() const { return bn2_; }

  Tensor forward(const Tensor& z, const ForwardContext& ctx, BodyTape* tape, std::size_t* invocations);
  Tensor forward(const Tensor& z, double t, std::size_t* invocations) const;
  Tensor backward(const BodyTape& tape, const Tensor& grad_output);

 private:
  std::string name_;
  bool with_time_ = true;
  AddTimeLayer time1_, time2_;
  ConvUnit conv1_, conv2_;
  std::optional<BatchNormLayer> bn1_, bn2_;
  ReluLayer relu1_, relu2_;
};

struct ResidualStageTape {
  std::vector<BodyTape> steps;
};

// An ODEBlock (one shared body, C Euler steps of size h) or a ResNet stage
// (C distinct bodies, each executed once with unit step).
class ResidualStage {
 public:
  ResidualStage() = default;
  static ResidualStage ode_block(const std::string& name, std::size_t channels, bool separable, int iterations,
                                 double step);
  static ResidualStage resnet_stage(const std::string& name, std::size_t channels, bool separable, int blocks);

  const std::string& name() const { return name_; }
  bool shared() const { return shared_; }
  int steps() const { return steps_; }
  double step_size() const { return h_; }
  std::size_t channels() const { return channels_; }
  std::vector<ResidualBody>& bodies() { return bodies_; }
  const std::vector<ResidualBody>& bodies() const { return bodies_; }
  const ResidualBody& body_for_step(int i) const { return bodies_[shared_ ? 0 : i]; }

  // z <- z + h * f(z, t_i), t_i = i * h, for i = 0 .. steps-1.
  Tensor forward(const Tensor& z, const ForwardContext& ctx, ResidualStageTape* tape, std::size_t* invocations);
  Tensor forward(const Tensor& z, std::size_t* invocations) const;
  Tensor backward(const ResidualStageTape& tape, const Tensor& grad_output);

 private:
  std::string name_;
  std::size_t channels_ = 0;
  bool shared_ = true;
  int steps_ = 1;
  double h_ = 1.0;
  std::vector<ResidualBody> bodies_;
};

struct DownsamplingTape {
  std::vector<LayerCache> conv1;
  LayerCache bn1, relu1;
  std::vector<LayerCache> conv2;
  LayerCache bn2, shortcut, relu_out;
};

// out = ReLU(BN2(conv2(ReLU(BN1(conv1_s2(x))))) + shortcut_1x1_s2(x))
class Downsampling {
 public:
  Downsampling() = default;
  Downsampling(const std::string& name, std::size_t in_channels, bool separable);

  const std::string& name() const { return name_; }
  std::size_t in_channels() const { return in_channels_; }
  ConvUnit& conv1() { return conv1_; }
  ConvUnit& conv2() { return conv2_; }
  const ConvUnit& conv1() const { return conv1_; }
  const ConvUnit& conv2() const { return conv2_; }
  std::optional<BatchNormLayer>& bn1() { return bn1_; }
  std::optional<BatchNormLayer>& bn2() { return bn2_; }
  const std::optional<BatchNormLayer>& bn1() const { return bn1_; }
  const std::optional<BatchNormLayer>& bn2() const { return bn2_; }
  ConvLayer& shortcut() { return shortcut_; }
  const ConvLayer& shortcut() const { return shortcut_; }

  Tensor forward(const Tensor& x, const ForwardContext& ctx, DownsamplingTape* tape, std::size_t* invocations);
  Tensor forward(const Tensor& x, std::size_t* invocations) const;
  Tensor backward(const DownsamplingTape& tape, const Tensor& grad_output);

 private:
  std::string name_;
  std::size_t in_channels_ = 0;
  ConvUnit conv1_, conv2_;
  std::optional<BatchNormLayer> bn1_, bn2_;
  ConvLayer shortcut_;
  ReluLayer relu1_, relu_out_;
};

using Stage = std::variant<ResidualStage, Downsampling>;
using StageTape = std::variant<ResidualStageTape, DownsamplingTape>;

struct ModelTape {
  LayerCache pre_conv, pre_bn, pre_relu;
  std::vector<StageTape> stages;
  Shape pooled_shape;
  LayerCache fc;
};

struct ModelOutput {
  Tensor features;  // pre-fc vector: (d) or (B, d)
  Tensor logits;    // (classes) or (B, classes)
  std::size_t layer_invocations = 0;
};

class Model {
 public:
  Model() = default;
  explicit Model(const ModelSpec& spec);

  const ModelSpec& spec() const { return spec_; }
  ConvLayer& pre_conv() { return pre_conv_; }
  const ConvLayer& pre_conv() const { return pre_conv_; }
  std::optional<BatchNormLayer>& pre_bn() { return pre_bn_; }
  const std::optional<BatchNormLayer>& pre_bn() const { return pre_bn_; }
  std::vector<Stage>& stages() { return stages_; }
  const std::vector<Stage>& stages() const { return stages_; }
  LinearLayer& fc() { return fc_; }
  const LinearLayer& fc() const { return fc_; }

  // Inference-mode forward of a sample (C,H,W) or batch (B,C,H,W).
  ModelOutput forward(const Tensor& input) const;
  // Recording forward; train mode uses batch statistics and updates the
  // batchnorm running statistics.
  ModelOutput forward(const Tensor& input, Mode mode, ModelTape* tape);
  // Accumulates parameter gradients into Param::grad and returns dL/d(input).
  // Either gradient may be empty (treated as zero).
  Tensor backward(const ModelTape& tape, const Tensor& grad_features, const Tensor& grad_logits);

  // Host pre-processing: conv -> BN -> ReLU.
  Tensor preprocess(const Tensor& input) const;
  // Residual and downsampling stages only, from the entry feature map.
  Tensor forward_blocks(const Tensor& entry, std::size_t* invocations = nullptr) const;

  std::vector<Param*> parameters();
  std::vector<const Param*> parameters() const;
  void zero_grad();

  // Visits every batchnorm layer that is present (pre, stages).
  void for_each_batchnorm(const std::function<void(BatchNormLayer&)>& fn);
  void for_each_batchnorm(const std::function<void(const BatchNormLayer&)>& fn) const;

 private:
  ModelSpec spec_;
  ConvLayer pre_conv_;
  std::optional<BatchNormLayer> pre_bn_;
  ReluLayer pre_relu_;
  std::vector<Stage> stages_;
  LinearLayer fc_;
};

// Builds the graph and draws He-normal conv/fc weights from `seed`.
Model build_model(const ModelSpec& spec, std::uint64_t seed = 0);
void init_weights(Model& model, std::uint64_t seed);

// Forward-only convenience wrapper for a single sample.
ModelOutput model_forward(const Model& model, const Tensor& input);

// Single-sample Euler step count helper used by the scalar surrogate tests:
// repeats z <- z + h f(z, i h) for C steps.
double euler_integrate(const std::function<double(double, double)>& f, double z0, double h, int steps);

// Float model state (weights + batchnorm statistics) as JSON.
std::string save_state(const Model& model);
void load_state(Model& model, std::string_view json_text);
void save_state_file(const Model& model, const std::string& path);
void load_state_file(Model& model, const std::string& path);

}  // namespace odeforge
