#pragma once

#include <cstddef>
#include <map>
#include <optional>
#include <string>
#include <variant>
#include <vector>

#include "odeforge/fixed_point.hpp"
#include "odeforge/model.hpp"

namespace odeforge {

struct QuantScheme {
  FixedPointFormat conv_fmt = kQ4_16;   // conv weight arrays
  FixedPointFormat other_fmt = kQ8_16;  // biases, affine params, step sizes, activations
  std::map<std::string, FixedPointFormat> overrides;  // by array name
  bool fold_batchnorm = true;
  // Drop fraction bits of an array whose values exceed its format range.
  bool auto_frac_reduction = false;

  void validate() const;
  FixedPointFormat act_fmt() const { return other_fmt; }
};

// "20/24" -> Q4.16 conv, Q8.16 other. Also accepts "<conv>/<other>" bit
// widths with 16 fraction bits each.
QuantScheme parse_scheme(const std::string& s);

// Returns a copy with every batchnorm folded into the convolution before it
// (bias added where needed). The pre-layer batchnorm is folded as well.
Model fold_batchnorm(const Model& model);

struct QConv {
  std::string name;
  ConvKind kind = ConvKind::standard;
  ConvSpec spec;
  QTensor weight;
  std::optional<QTensor> bias;
};

// Unfolded inference batchnorm: y = scale * x + shift.
struct QAffine {
  std::string name;
  QTensor scale;
  QTensor shift;
};

struct QBody {
  bool with_time = true;
  std::vector<QConv> conv1;
  std::optional<QAffine> bn1;
  std::vector<QConv> conv2;
  std::optional<QAffine> bn2;
};

struct QResidualStage {
  std::string name;
  bool shared = true;
  int steps = 1;
  double step = 1.0;
  QTensor h;  // one word
  std::vector<QBody> bodies;
  const QBody& body_for_step(int i) const { return bodies[shared ? 0 : i]; }
};

struct QDownsampling {
  std::string name;
  std::vector<QConv> conv1;
  std::optional<QAffine> bn1;
  std::vector<QConv> conv2;
  std::optional<QAffine> bn2;
  QConv shortcut;
};

using QStage = std::variant<QResidualStage, QDownsampling>;

struct ArraySaturation {
  std::string name;
  std::size_t saturated = 0;
  std::size_t size = 0;
  FixedPointFormat fmt;
};

struct QModel {
  ModelSpec spec;
  QuantScheme scheme;
  // Host side (float): pre-conv, its batchnorm if unfolded, and the fc.
  ConvLayer pre_conv;
  std::optional<BatchNormLayer> pre_bn;
  LinearLayer fc;
  std::vector<QStage> stages;
  std::vector<ArraySaturation> saturation;  // one entry per quantized array

  std::size_t weight_saturations() const;
};

QModel quantize_model(const Model& model, const QuantScheme& scheme = {});

// Visits every quantized array in graph declaration order.
void for_each_array(const QModel& q, const std::function<void(const std::string&, const QTensor&)>& fn);

// Fixed-point kernels on single-sample (C, H, W) tensors. Activations must be
// in the scheme's activation format; results are requantized into it.
// `saturations` (optional) accumulates clamped output words.
QTensor qconv_forward(const QTensor& input, const QConv& conv, FixedPointFormat act, std::size_t* saturations);
QTensor qaffine_forward(const QTensor& input, const QAffine& bn, FixedPointFormat act, std::size_t* saturations);
QTensor qrelu(const QTensor& input);
QTensor qadd_time(const QTensor& input, Word t);
// z + h * f
QTensor qeuler_step(const QTensor& z, const QTensor& f, const QTensor& h, std::size_t* saturations);
QTensor qadd(const QTensor& a, const QTensor& b, std::size_t* saturations);
// (C, H, W) -> (C, 1, 1), mean rounded half to even.
QTensor qavg_pool(const QTensor& input);
std::int64_t div_round_even(std::int64_t num, std::int64_t den);

// Float host pre-processing followed by quantization to the entry format.
QTensor host_entry(const QModel& q, const Tensor& image, std::size_t* saturations = nullptr);
// The device subgraph: every residual/downsampling stage, then the pool.
QTensor quantized_blocks(const QModel& q, const QTensor& entry, std::size_t* saturations = nullptr);
// Dequantize the pooled vector and apply the float fc.
Tensor host_logits(const QModel& q, const QTensor& pooled, Tensor* features = nullptr);

struct QuantizedOutput {
  Tensor features;  // (d) or (B, d)
  Tensor logits;    // (classes) or (B, classes)
  std::size_t activation_saturations = 0;
};

QuantizedOutput quantized_forward(const QModel& q, const Tensor& input);

struct QuantErrorStats {
  std::size_t samples = 0;
  double max_abs_logit_dev = 0.0;
  double mean_abs_logit_dev = 0.0;
  std::size_t argmax_flips = 0;
  double flip_rate = 0.0;
  std::size_t weight_saturations = 0;
  std::size_t activation_saturations = 0;
};

// `inputs` holds samples (C, H, W) or one batch (B, C, H, W).
QuantErrorStats quantization_error_report(const Model& model, const QModel& q, const Tensor& inputs);
// Float-vs-float comparison (identical models give zero deviation).
QuantErrorStats quantization_error_report(const Model& model, const Model& other, const Tensor& inputs);

// One header row and one data row, plus per-array saturation rows.
std::string render_error_csv(const QuantErrorStats& s, const QModel* q = nullptr);

std::size_t argmax(const double* v, std::size_t n);

}  // namespace odeforge
