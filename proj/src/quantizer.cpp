#include "odeforge/quantizer.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>

#include "odeforge/error.hpp"

namespace odeforge {

void QuantScheme::validate() const {
  conv_fmt.validate();
  other_fmt.validate();
  for (const auto& [name, fmt] : overrides) fmt.validate();
}

QuantScheme parse_scheme(const std::string& s) {
  const auto slash = s.find('/');
  if (slash == std::string::npos) throw InvalidArgument("scheme '" + s + "': expected <conv bits>/<other bits>");
  int conv = 0, other = 0;
  try {
    std::size_t used = 0;
    conv = std::stoi(s.substr(0, slash), &used);
    if (used != slash) throw std::invalid_argument(s);
    const std::string rest = s.substr(slash + 1);
    other = std::stoi(rest, &used);
    if (used != rest.size()) throw std::invalid_argument(s);
  } catch (const std::logic_error&) {
    throw InvalidArgument("scheme '" + s + "': bit widths must be integers");
  }
  QuantScheme q;
  q.conv_fmt = FixedPointFormat{conv, 16};
  q.other_fmt = FixedPointFormat{other, 16};
  q.validate();
  return q;
}

// ---------------------------------------------------------------------------
// Folding
// ---------------------------------------------------------------------------

namespace {

void fold_into(ConvLayer& conv, std::optional<BatchNormLayer>& bn) {
  if (!bn) return;
  const BatchNormParams p = bn->params_snapshot();
  if (!conv.has_bias()) conv.enable_bias();
  Tensor& w = conv.weight().value;
  Tensor& b = conv.bias().value;
  const std::size_t m_count = p.channels();
  if (w.dim(0) != m_count) throw ShapeError("cannot fold " + bn->name() + " into " + conv.name());
  const std::size_t per = w.size() / m_count;
  for (std::size_t m = 0; m < m_count; ++m) {
    const double scale = p.gamma[m] / std::sqrt(p.running_var[m] + p.eps);
    for (std::size_t i = 0; i < per; ++i) w[m * per + i] *= scale;
    b[m] = scale * (b[m] - p.running_mean[m]) + p.beta[m];
  }
  ++conv.weight().version;
  ++conv.bias().version;
  bn.reset();
}

}  // namespace

Model fold_batchnorm(const Model& model) {
  Model m = model;
  fold_into(m.pre_conv(), m.pre_bn());
  for (auto& stage : m.stages()) {
    if (auto* rs = std::get_if<ResidualStage>(&stage)) {
      for (auto& body : rs->bodies()) {
        fold_into(body.conv1().last(), body.bn1());
        fold_into(body.conv2().last(), body.bn2());
      }
    } else {
      auto& ds = std::get<Downsampling>(stage);
      fold_into(ds.conv1().last(), ds.bn1());
      fold_into(ds.conv2().last(), ds.bn2());
    }
  }
  return m;
}

// ---------------------------------------------------------------------------
// Quantization of the graph
// ---------------------------------------------------------------------------

namespace {

class Quantizer {
 public:
  Quantizer(const QuantScheme& s, std::vector<ArraySaturation>& log) : scheme_(s), log_(log) {}

  QTensor array(const std::string& name, const Tensor& t, FixedPointFormat fmt) {
    if (auto it = scheme_.overrides.find(name); it != scheme_.overrides.end()) fmt = it->second;
    if (scheme_.auto_frac_reduction) {
      double peak = 0.0;
      for (double v : t.values()) peak = std::max(peak, std::abs(v));
      while (fmt.frac_bits > 0 && peak > dequantize(fmt.max_word(), fmt)) --fmt.frac_bits;
    }
    std::size_t sat = 0;
    QTensor q = quantize(t, fmt, &sat);
    log_.push_back({name, sat, q.size(), fmt});
    return q;
  }

  QConv conv(const ConvLayer& l) {
    QConv q{l.name(), l.kind(), l.spec(), array(l.name() + ".weight", l.weight().value, scheme_.conv_fmt), {}};
    if (l.has_bias()) q.bias = array(l.name() + ".bias", l.bias().value, scheme_.other_fmt);
    return q;
  }

  std::vector<QConv> unit(const ConvUnit& u) {
    std::vector<QConv> out;
    for (const auto& l : u.layers()) out.push_back(conv(l));
    return out;
  }

  std::optional<QAffine> affine(const std::optional<BatchNormLayer>& bn) {
    if (!bn) return std::nullopt;
    const BatchNormParams p = bn->params_snapshot();
    const std::size_t c = p.channels();
    Tensor scale({c}), shift({c});
    for (std::size_t i = 0; i < c; ++i) {
      scale[i] = p.gamma[i] / std::sqrt(p.running_var[i] + p.eps);
      shift[i] = p.beta[i] - scale[i] * p.running_mean[i];
    }
    return QAffine{bn->name(), array(bn->name() + ".scale", scale, scheme_.other_fmt),
                   array(bn->name() + ".shift", shift, scheme_.other_fmt)};
  }

  QTensor step(const std::string& stage, double h) {
    return array(stage + ".h", Tensor({1}, {h}), scheme_.other_fmt);
  }

 private:
  const QuantScheme& scheme_;
  std::vector<ArraySaturation>& log_;
};

}  // namespace

std::size_t QModel::weight_saturations() const {
  std::size_t s = 0;
  for (const auto& a : saturation) s += a.saturated;
  return s;
}

QModel quantize_model(const Model& model, const QuantScheme& scheme) {
  scheme.validate();
  const Model src = scheme.fold_batchnorm ? fold_batchnorm(model) : model;
  QModel q;
  q.spec = src.spec();
  q.scheme = scheme;
  q.pre_conv = src.pre_conv();
  q.pre_bn = src.pre_bn();
  q.fc = src.fc();
  Quantizer qz(scheme, q.saturation);
  for (const auto& stage : src.stages()) {
    if (const auto* rs = std::get_if<ResidualStage>(&stage)) {
      QResidualStage s;
      s.name = rs->name();
      s.shared = rs->shared();
      s.steps = rs->steps();
      s.step = rs->step_size();
      s.h = qz.step(rs->name(), rs->step_size());
      for (const auto& body : rs->bodies())
        s.bodies.push_back(
            QBody{body.with_time(), qz.unit(body.conv1()), qz.affine(body.bn1()), qz.unit(body.conv2()), qz.affine(body.bn2())});
      q.stages.emplace_back(std::move(s));
    } else {
      const auto& ds = std::get<Downsampling>(stage);
      QDownsampling d;
      d.name = ds.name();
      d.conv1 = qz.unit(ds.conv1());
      d.bn1 = qz.affine(ds.bn1());
      d.conv2 = qz.unit(ds.conv2());
      d.bn2 = qz.affine(ds.bn2());
      d.shortcut = qz.conv(ds.shortcut());
      q.stages.emplace_back(std::move(d));
    }
  }
  return q;
}

void for_each_array(const QModel& q, const std::function<void(const std::string&, const QTensor&)>& fn) {
  auto convs = [&](const std::vector<QConv>& u) {
    for (const auto& c : u) {
      fn(c.name + ".weight", c.weight);
      if (c.bias) fn(c.name + ".bias", *c.bias);
    }
  };
  auto aff = [&](const std::optional<QAffine>& a) {
    if (!a) return;
    fn(a->name + ".scale", a->scale);
    fn(a->name + ".shift", a->shift);
  };
  for (const auto& stage : q.stages) {
    if (const auto* rs = std::get_if<QResidualStage>(&stage)) {
      fn(rs->name + ".h", rs->h);
      for (const auto& b : rs->bodies) {
        convs(b.conv1);
        aff(b.bn1);
        convs(b.conv2);
        aff(b.bn2);
      }
    } else {
      const auto& d = std::get<QDownsampling>(stage);
      convs(d.conv1);
      aff(d.bn1);
      convs(d.conv2);
      aff(d.bn2);
      convs({d.shortcut});
    }
  }
}

// ---------------------------------------------------------------------------
// Fixed-point kernels
// ---------------------------------------------------------------------------

namespace {

void require_rank3(const QTensor& t, const char* what) {
  if (t.shape.size() != 3) throw ShapeError(std::string(what) + ": expected (C, H, W), got " + shape_str(t.shape));
}

Word out_word(WideAcc acc, int acc_frac, FixedPointFormat act, std::size_t* saturations) {
  bool sat = false;
  const Word w = requantize(acc, acc_frac, act, &sat);
  if (sat && saturations) ++*saturations;
  return w;
}

// Bias word aligned onto an accumulator with `acc_frac` fraction bits.
WideAcc aligned(Word b, int b_frac, int acc_frac) { return shift_round_even(WideAcc{b}, b_frac - acc_frac); }

}  // namespace

QTensor qconv_forward(const QTensor& input, const QConv& conv, FixedPointFormat act, std::size_t* saturations) {
  require_rank3(input, conv.name.c_str());
  const ConvSpec& s = conv.spec;
  const std::size_t n_in = input.shape[0], h = input.shape[1], w = input.shape[2];
  if (n_in != s.in_channels)
    throw ShapeError(conv.name + ": expected " + std::to_string(s.in_channels) + " input channels, got " +
                     std::to_string(n_in));
  const std::size_t k = conv.kind == ConvKind::pointwise ? 1 : s.kernel;
  const std::size_t pad = conv.kind == ConvKind::pointwise ? 0 : s.padding;
  const std::size_t oh = (h + 2 * pad - k) / s.stride + 1, ow = (w + 2 * pad - k) / s.stride + 1;
  const std::size_t m_out = conv.kind == ConvKind::depthwise ? n_in : s.out_channels;
  const int acc_frac = conv.weight.fmt.frac_bits + input.fmt.frac_bits;
  QTensor out({m_out, oh, ow}, act);
  const Word* x = input.words.data();
  const Word* wt = conv.weight.words.data();
  for (std::size_t m = 0; m < m_out; ++m) {
    const WideAcc bias = conv.bias ? aligned(conv.bias->words[m], conv.bias->fmt.frac_bits, acc_frac) : 0;
    const std::size_t n_lo = conv.kind == ConvKind::depthwise ? m : 0;
    const std::size_t n_hi = conv.kind == ConvKind::depthwise ? m + 1 : n_in;
    for (std::size_t oy = 0; oy < oh; ++oy)
      for (std::size_t ox = 0; ox < ow; ++ox) {
        WideAcc acc = bias;
        for (std::size_t n = n_lo; n < n_hi; ++n)
          for (std::size_t ky = 0; ky < k; ++ky) {
            const std::ptrdiff_t iy = static_cast<std::ptrdiff_t>(oy * s.stride + ky) - static_cast<std::ptrdiff_t>(pad);
            if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(h)) continue;
            for (std::size_t kx = 0; kx < k; ++kx) {
              const std::ptrdiff_t ix =
                  static_cast<std::ptrdiff_t>(ox * s.stride + kx) - static_cast<std::ptrdiff_t>(pad);
              if (ix < 0 || ix >= static_cast<std::ptrdiff_t>(w)) continue;
              std::size_t wi;
              if (conv.kind == ConvKind::standard)
                wi = ((m * n_in + n) * k + ky) * k + kx;
              else if (conv.kind == ConvKind::depthwise)
                wi = (n * k + ky) * k + kx;
              else
                wi = m * n_in + n;
              acc = qmac(acc, wt[wi], x[(n * h + iy) * w + ix]);
            }
          }
        out.words[(m * oh + oy) * ow + ox] = out_word(acc, acc_frac, act, saturations);
      }
  }
  return out;
}

QTensor qaffine_forward(const QTensor& input, const QAffine& bn, FixedPointFormat act, std::size_t* saturations) {
  require_rank3(input, bn.name.c_str());
  const std::size_t c = input.shape[0], plane = input.shape[1] * input.shape[2];
  if (bn.scale.size() != c) throw ShapeError(bn.name + ": channel mismatch");
  const int acc_frac = bn.scale.fmt.frac_bits + input.fmt.frac_bits;
  QTensor out(input.shape, act);
  for (std::size_t ch = 0; ch < c; ++ch) {
    const WideAcc shift = aligned(bn.shift.words[ch], bn.shift.fmt.frac_bits, acc_frac);
    for (std::size_t i = 0; i < plane; ++i) {
      const std::size_t j = ch * plane + i;
      out.words[j] = out_word(qmac(shift, bn.scale.words[ch], input.words[j]), acc_frac, act, saturations);
    }
  }
  return out;
}

QTensor qrelu(const QTensor& input) {
  QTensor out = input;
  for (Word& w : out.words) w = std::max<Word>(w, 0);
  return out;
}

QTensor qadd_time(const QTensor& input, Word t) {
  require_rank3(input, "add_time");
  QTensor out({input.shape[0] + 1, input.shape[1], input.shape[2]}, input.fmt);
  std::copy(input.words.begin(), input.words.end(), out.words.begin());
  std::fill(out.words.begin() + static_cast<std::ptrdiff_t>(input.size()), out.words.end(), t);
  return out;
}

QTensor qeuler_step(const QTensor& z, const QTensor& f, const QTensor& h, std::size_t* saturations) {
  require_same_shape(z.shape, f.shape, "euler step");
  const int acc_frac = z.fmt.frac_bits + h.fmt.frac_bits;
  const int f_shift = f.fmt.frac_bits + h.fmt.frac_bits - acc_frac;
  QTensor out(z.shape, z.fmt);
  for (std::size_t i = 0; i < z.size(); ++i) {
    const WideAcc acc = (WideAcc{z.words[i]} << h.fmt.frac_bits) +
                        shift_round_even(WideAcc{h.words[0]} * f.words[i], f_shift);
    out.words[i] = out_word(acc, acc_frac, z.fmt, saturations);
  }
  return out;
}

QTensor qadd(const QTensor& a, const QTensor& b, std::size_t* saturations) {
  require_same_shape(a.shape, b.shape, "add");
  if (a.fmt != b.fmt) throw InvalidArgument("add: operand formats differ");
  QTensor out(a.shape, a.fmt);
  for (std::size_t i = 0; i < a.size(); ++i) {
    bool sat = false;
    out.words[i] = saturate(WideAcc{a.words[i]} + b.words[i], a.fmt, &sat);
    if (sat && saturations) ++*saturations;
  }
  return out;
}

std::int64_t div_round_even(std::int64_t num, std::int64_t den) {
  if (den <= 0) throw InvalidArgument("div_round_even: non-positive divisor");
  std::int64_t q = num / den, r = num % den;
  if (r < 0) {
    q -= 1;
    r += den;
  }
  if (2 * r > den || (2 * r == den && (q & 1))) ++q;
  return q;
}

QTensor qavg_pool(const QTensor& input) {
  require_rank3(input, "avg_pool");
  const std::size_t c = input.shape[0], plane = input.shape[1] * input.shape[2];
  QTensor out({c, 1, 1}, input.fmt);
  for (std::size_t ch = 0; ch < c; ++ch) {
    std::int64_t sum = 0;
    for (std::size_t i = 0; i < plane; ++i) sum += input.words[ch * plane + i];
    out.words[ch] = static_cast<Word>(div_round_even(sum, static_cast<std::int64_t>(plane)));
  }
  return out;
}

// ---------------------------------------------------------------------------
// Forward passes
// ---------------------------------------------------------------------------

namespace {

QTensor run_unit(const std::vector<QConv>& unit, QTensor x, FixedPointFormat act, std::size_t* sat) {
  for (const auto& c : unit) x = qconv_forward(x, c, act, sat);
  return x;
}

QTensor run_body(const QBody& b, const QTensor& z, Word t, FixedPointFormat act, std::size_t* sat) {
  QTensor x = b.with_time ? qadd_time(z, t) : z;
  x = run_unit(b.conv1, x, act, sat);
  if (b.bn1) x = qaffine_forward(x, *b.bn1, act, sat);
  x = qrelu(x);
  if (b.with_time) x = qadd_time(x, t);
  x = run_unit(b.conv2, x, act, sat);
  if (b.bn2) x = qaffine_forward(x, *b.bn2, act, sat);
  return qrelu(x);
}

}  // namespace

QTensor host_entry(const QModel& q, const Tensor& image, std::size_t* saturations) {
  if (image.rank() != 3) throw ShapeError("host pre-processing expects (C, H, W), got " + shape_str(image.shape()));
  if (image.shape() != q.spec.input_shape)
    throw ShapeError("input " + shape_str(image.shape()) + " does not match model input " + shape_str(q.spec.input_shape));
  Tensor x = q.pre_conv.forward(image, {}, nullptr);
  if (q.pre_bn) x = q.pre_bn->forward(x);
  return quantize(relu_forward(x), q.scheme.act_fmt(), saturations);
}

QTensor quantized_blocks(const QModel& q, const QTensor& entry, std::size_t* saturations) {
  const FixedPointFormat act = q.scheme.act_fmt();
  if (entry.fmt != act) throw InvalidArgument("entry map is not in the activation format " + act.name());
  const Shape want{q.spec.base_channels, q.spec.input_shape[1], q.spec.input_shape[2]};
  if (entry.shape != want) throw ShapeError("entry map " + shape_str(entry.shape) + ", expected " + shape_str(want));
  QTensor x = entry;
  for (const auto& stage : q.stages) {
    if (const auto* rs = std::get_if<QResidualStage>(&stage)) {
      for (int i = 0; i < rs->steps; ++i) {
        // t_i = i * h from the stored step word, as the device computes it
        bool t_sat = false;
        const Word t = requantize(WideAcc{i} * rs->h.words[0], rs->h.fmt.frac_bits, act, &t_sat);
        if (t_sat && saturations) ++*saturations;
        const QTensor f = run_body(rs->body_for_step(i), x, t, act, saturations);
        x = qeuler_step(x, f, rs->h, saturations);
      }
    } else {
      const auto& d = std::get<QDownsampling>(stage);
      QTensor m = run_unit(d.conv1, x, act, saturations);
      if (d.bn1) m = qaffine_forward(m, *d.bn1, act, saturations);
      m = qrelu(m);
      m = run_unit(d.conv2, m, act, saturations);
      if (d.bn2) m = qaffine_forward(m, *d.bn2, act, saturations);
      x = qrelu(qadd(m, qconv_forward(x, d.shortcut, act, saturations), saturations));
    }
  }
  return qavg_pool(x);
}

Tensor host_logits(const QModel& q, const QTensor& pooled, Tensor* features) {
  const Tensor f = dequantize(pooled).reshaped({pooled.size()});
  if (features) *features = f;
  return q.fc.forward(f, {}, nullptr);
}

QuantizedOutput quantized_forward(const QModel& q, const Tensor& input) {
  QuantizedOutput out;
  auto one = [&](const Tensor& image, Tensor& features) {
    const QTensor entry = host_entry(q, image, &out.activation_saturations);
    return host_logits(q, quantized_blocks(q, entry, &out.activation_saturations), &features);
  };
  if (input.rank() == 3) {
    out.logits = one(input, out.features);
    return out;
  }
  if (input.rank() != 4) throw ShapeError("quantized_forward expects (C, H, W) or (B, C, H, W)");
  const std::size_t b = input.dim(0), per = input.size() / b;
  const Shape sample(input.shape().begin() + 1, input.shape().end());
  const std::size_t d = q.spec.feature_dim(), k = q.spec.classes;
  out.features = Tensor({b, d});
  out.logits = Tensor({b, k});
  for (std::size_t i = 0; i < b; ++i) {
    Tensor image(sample, std::vector<double>(input.data() + i * per, input.data() + (i + 1) * per));
    Tensor f;
    const Tensor l = one(image, f);
    std::copy(f.data(), f.data() + d, out.features.data() + i * d);
    std::copy(l.data(), l.data() + k, out.logits.data() + i * k);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Error statistics
// ---------------------------------------------------------------------------

std::size_t argmax(const double* v, std::size_t n) {
  return static_cast<std::size_t>(std::max_element(v, v + n) - v);
}

namespace {

QuantErrorStats compare(const Tensor& ref, const Tensor& got, std::size_t classes) {
  require_same_shape(ref.shape(), got.shape(), "logit comparison");
  QuantErrorStats s;
  s.samples = ref.size() / classes;
  double total = 0.0;
  for (std::size_t i = 0; i < s.samples; ++i) {
    const double* a = ref.data() + i * classes;
    const double* b = got.data() + i * classes;
    for (std::size_t j = 0; j < classes; ++j) {
      const double dev = std::abs(a[j] - b[j]);
      s.max_abs_logit_dev = std::max(s.max_abs_logit_dev, dev);
      total += dev;
    }
    if (argmax(a, classes) != argmax(b, classes)) ++s.argmax_flips;
  }
  if (s.samples) {
    s.mean_abs_logit_dev = total / static_cast<double>(ref.size());
    s.flip_rate = static_cast<double>(s.argmax_flips) / static_cast<double>(s.samples);
  }
  return s;
}

Tensor as_batch(const Tensor& inputs) {
  if (inputs.rank() == 4) return inputs;
  if (inputs.rank() == 3) {
    Shape s{1};
    s.insert(s.end(), inputs.shape().begin(), inputs.shape().end());
    return inputs.reshaped(s);
  }
  throw ShapeError("error report expects (C, H, W) or (B, C, H, W) inputs");
}

}  // namespace

QuantErrorStats quantization_error_report(const Model& model, const QModel& q, const Tensor& inputs) {
  const Tensor batch = as_batch(inputs);
  const Tensor ref = model.forward(batch).logits;
  const QuantizedOutput qo = quantized_forward(q, batch);
  QuantErrorStats s = compare(ref, qo.logits, model.spec().classes);
  s.weight_saturations = q.weight_saturations();
  s.activation_saturations = qo.activation_saturations;
  return s;
}

QuantErrorStats quantization_error_report(const Model& model, const Model& other, const Tensor& inputs) {
  const Tensor batch = as_batch(inputs);
  return compare(model.forward(batch).logits, other.forward(batch).logits, model.spec().classes);
}

std::string render_error_csv(const QuantErrorStats& s, const QModel* q) {
  std::ostringstream o;
  o.precision(12);
  o << "samples,max_abs_logit_dev,mean_abs_logit_dev,argmax_flips,flip_rate,weight_saturations,activation_saturations\n";
  o << s.samples << "," << s.max_abs_logit_dev << "," << s.mean_abs_logit_dev << "," << s.argmax_flips << ","
    << s.flip_rate << "," << s.weight_saturations << "," << s.activation_saturations << "\n";
  if (q) {
    o << "\narray,format,size,saturated\n";
    for (const auto& a : q->saturation) o << a.name << "," << a.fmt.name() << "," << a.size << "," << a.saturated << "\n";
  }
  return o.str();
}

}  // namespace odeforge
