#include "odeforge/model.hpp"

#include <cmath>
#include <fstream>
#include <random>
#include <sstream>

#include <json.hpp>

#include "odeforge/error.hpp"

namespace odeforge {

std::string to_string(Variant v) {
  switch (v) {
    case Variant::resnet: return "resnet";
    case Variant::odenet: return "odenet";
    case Variant::dsodenet: return "dsodenet";
  }
  return "?";
}

Variant parse_variant(std::string_view s) {
  if (s == "resnet" || s == "ResNet") return Variant::resnet;
  if (s == "odenet" || s == "ODENet") return Variant::odenet;
  if (s == "dsodenet" || s == "dsODENet") return Variant::dsodenet;
  throw InvalidArgument("unknown model variant '" + std::string(s) + "'");
}

// ---------------------------------------------------------------------------
// ModelSpec

void ModelSpec::validate() const {
  if (num_blocks != 2 && num_blocks != 3) throw InvalidArgument("blocks must be 2 or 3");
  if (base_channels == 0) throw InvalidArgument("base_channels must be positive");
  if (iterations < 1) throw InvalidArgument("C must be at least 1");
  if (!(step > 0.0) || !std::isfinite(step)) throw InvalidArgument("h must be positive");
  if (input_shape.size() != 3 || shape_size(input_shape) == 0)
    throw InvalidArgument("input_shape must be three positive dimensions (C,H,W)");
  if (classes == 0) throw InvalidArgument("classes must be positive");
  if (!separable_blocks.empty() && separable_blocks.size() != static_cast<std::size_t>(num_blocks))
    throw InvalidArgument("separable_blocks needs one flag per block (" + std::to_string(num_blocks) + ")");
  if (!separable_downsampling.empty() && separable_downsampling.size() != static_cast<std::size_t>(num_blocks - 1))
    throw InvalidArgument("separable_downsampling needs one flag per downsampling block (" +
                          std::to_string(num_blocks - 1) + ")");
}

bool ModelSpec::block_separable(int i) const {
  if (!separable_blocks.empty()) return separable_blocks.at(i);
  return variant == Variant::dsodenet;
}

bool ModelSpec::downsampling_separable(int i) const {
  if (!separable_downsampling.empty()) return separable_downsampling.at(i);
  // dsODENet: only the second downsampling block of the three-block topology
  return variant == Variant::dsodenet && num_blocks == 3 && i == 1;
}

std::vector<Shape> ModelSpec::stage_shapes() const {
  std::vector<Shape> out;
  std::size_t h = input_shape[1], w = input_shape[2];
  for (int i = 0; i < num_blocks; ++i) {
    out.push_back({block_channels(i), h, w});
    if (i + 1 < num_blocks) {
      h = (h + 1) / 2;
      w = (w + 1) / 2;
      out.push_back({block_channels(i + 1), h, w});
    }
  }
  return out;
}

std::string ModelSpec::stage_name(std::size_t stage_index) const {
  const std::size_t k = stage_index / 2 + 1;
  if (stage_index % 2 == 1) return "Downsampling" + std::to_string(k);
  if (variant == Variant::resnet) return "Building block" + std::to_string(k);
  return "ODEBlock" + std::to_string(k);
}

namespace {

std::string trim(std::string_view s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string_view::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return std::string(s.substr(b, e - b + 1));
}

std::vector<std::string> split_list(const std::string& v) {
  std::vector<std::string> out;
  std::string cur;
  for (char c : v) {
    if (c == ',' || c == 'x' || c == ' ') {
      if (!cur.empty()) out.push_back(cur);
      cur.clear();
    } else {
      cur += c;
    }
  }
  if (!cur.empty()) out.push_back(cur);
  return out;
}

long parse_int(const std::string& key, const std::string& v) {
  std::size_t pos = 0;
  long r = 0;
  try {
    r = std::stol(v, &pos);
  } catch (const std::exception&) {
    pos = 0;
  }
  if (pos != v.size() || v.empty()) throw InvalidArgument("config key '" + key + "': expected an integer, got '" + v + "'");
  return r;
}

double parse_real(const std::string& key, const std::string& v) {
  std::size_t pos = 0;
  double r = 0;
  try {
    r = std::stod(v, &pos);
  } catch (const std::exception&) {
    pos = 0;
  }
  if (pos != v.size() || v.empty()) throw InvalidArgument("config key '" + key + "': expected a number, got '" + v + "'");
  return r;
}

std::vector<bool> parse_flags(const std::string& key, const std::string& v) {
  std::vector<bool> out;
  for (const auto& item : split_list(v)) {
    if (item == "1" || item == "true") out.push_back(true);
    else if (item == "0" || item == "false") out.push_back(false);
    else throw InvalidArgument("config key '" + key + "': expected 0/1 flags, got '" + item + "'");
  }
  return out;
}

}  // namespace

ModelSpec parse_model_config(std::string_view text) {
  ModelSpec spec;
  std::istringstream in{std::string(text)};
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
    const std::string t = trim(line);
    if (t.empty()) continue;
    const auto eq = t.find('=');
    if (eq == std::string::npos)
      throw InvalidArgument("model config line " + std::to_string(lineno) + ": expected 'key = value'");
    const std::string key = trim(t.substr(0, eq));
    const std::string value = trim(t.substr(eq + 1));
    if (key == "variant") {
      spec.variant = parse_variant(value);
    } else if (key == "blocks") {
      spec.num_blocks = static_cast<int>(parse_int(key, value));
    } else if (key == "base_channels") {
      const long v = parse_int(key, value);
      if (v <= 0) throw InvalidArgument("config key 'base_channels' must be positive");
      spec.base_channels = static_cast<std::size_t>(v);
    } else if (key == "C") {
      spec.iterations = static_cast<int>(parse_int(key, value));
    } else if (key == "h") {
      spec.step = parse_real(key, value);
    } else if (key == "input_shape") {
      Shape s;
      for (const auto& item : split_list(value)) {
        const long v = parse_int(key, item);
        if (v <= 0) throw InvalidArgument("config key 'input_shape' must hold positive dimensions");
        s.push_back(static_cast<std::size_t>(v));
      }
      spec.input_shape = s;
    } else if (key == "classes") {
      const long v = parse_int(key, value);
      if (v <= 0) throw InvalidArgument("config key 'classes' must be positive");
      spec.classes = static_cast<std::size_t>(v);
    } else if (key == "separable_blocks") {
      spec.separable_blocks = parse_flags(key, value);
    } else if (key == "separable_downsampling") {
      spec.separable_downsampling = parse_flags(key, value);
    } else {
      throw InvalidArgument("model config line " + std::to_string(lineno) + ": unknown key '" + key + "'");
    }
  }
  spec.validate();
  return spec;
}

ModelSpec load_model_config(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw InvalidArgument("cannot open model config '" + path + "'");
  std::stringstream ss;
  ss << f.rdbuf();
  return parse_model_config(ss.str());
}

std::string to_config_text(const ModelSpec& spec) {
  std::ostringstream o;
  o << "variant = " << to_string(spec.variant) << "\n";
  o << "blocks = " << spec.num_blocks << "\n";
  o << "base_channels = " << spec.base_channels << "\n";
  o << "C = " << spec.iterations << "\n";
  o << "h = " << spec.step << "\n";
  o << "input_shape = " << spec.input_shape[0] << "," << spec.input_shape[1] << "," << spec.input_shape[2] << "\n";
  o << "classes = " << spec.classes << "\n";
  auto flags = [&](const char* key, const std::vector<bool>& v) {
    if (v.empty()) return;
    o << key << " = ";
    for (std::size_t i = 0; i < v.size(); ++i) o << (i ? "," : "") << (v[i] ? 1 : 0);
    o << "\n";
  };
  flags("separable_blocks", spec.separable_blocks);
  flags("separable_downsampling", spec.separable_downsampling);
  return o.str();
}

// ---------------------------------------------------------------------------
// ConvUnit

ConvUnit::ConvUnit(const std::string& name, std::size_t in, std::size_t out, std::size_t stride, bool separable) {
  if (separable) {
    layers_.emplace_back(name + ".depthwise", ConvKind::depthwise, ConvSpec{in, in, 3, stride, 1, false});
    layers_.emplace_back(name + ".pointwise", ConvKind::pointwise, ConvSpec{in, out, 1, 1, 0, false});
  } else {
    layers_.emplace_back(name, ConvKind::standard, ConvSpec{in, out, 3, stride, 1, false});
  }
}

Tensor ConvUnit::forward(const Tensor& input, const ForwardContext& ctx, std::vector<LayerCache>* caches,
                         std::size_t* invocations) const {
  if (caches) caches->assign(layers_.size(), {});
  Tensor x = input;
  for (std::size_t i = 0; i < layers_.size(); ++i) {
    x = layers_[i].forward(x, ctx, caches ? &(*caches)[i] : nullptr);
    if (invocations) ++*invocations;
  }
  return x;
}

namespace {
void accumulate(std::vector<Param*> params, const LayerGradients& g) {
  for (std::size_t i = 0; i < params.size(); ++i) params[i]->grad += g.grad_params[i];
}
}  // namespace

Tensor ConvUnit::backward(const std::vector<LayerCache>& caches, const Tensor& grad_output) {
  if (caches.size() != layers_.size()) throw InvalidArgument("conv unit backward: cache count mismatch");
  Tensor g = grad_output;
  for (std::size_t i = layers_.size(); i-- > 0;) {
    LayerGradients lg = layers_[i].backward(caches[i], g);
    accumulate(layers_[i].params(), lg);
    g = std::move(lg.grad_input);
  }
  return g;
}

// ---------------------------------------------------------------------------
// ResidualBody

ResidualBody::ResidualBody(const std::string& name, std::size_t channels, bool with_time, bool separable)
    : name_(name),
      with_time_(with_time),
      conv1_(name + ".conv1", channels + (with_time ? 1 : 0), channels, 1, separable),
      conv2_(name + ".conv2", channels + (with_time ? 1 : 0), channels, 1, separable),
      bn1_(BatchNormLayer(name + ".bn1", channels)),
      bn2_(BatchNormLayer(name + ".bn2", channels)) {}

Tensor ResidualBody::forward(const Tensor& z, const ForwardContext& ctx, BodyTape* tape, std::size_t* invocations) {
  auto count = [&] {
    if (invocations) ++*invocations;
  };
  Tensor x = z;
  if (with_time_) {
    x = time1_.forward(x, ctx, tape ? &tape->time1 : nullptr);
    count();
  }
  x = conv1_.forward(x, ctx, tape ? &tape->conv1 : nullptr, invocations);
  if (bn1_) {
    x = bn1_->forward(x, ctx, tape ? &tape->bn1 : nullptr);
    count();
  }
  x = relu1_.forward(x, ctx, tape ? &tape->relu1 : nullptr);
  count();
  if (with_time_) {
    x = time2_.forward(x, ctx, tape ? &tape->time2 : nullptr);
    count();
  }
  x = conv2_.forward(x, ctx, tape ? &tape->conv2 : nullptr, invocations);
  if (bn2_) {
    x = bn2_->forward(x, ctx, tape ? &tape->bn2 : nullptr);
    count();
  }
  x = relu2_.forward(x, ctx, tape ? &tape->relu2 : nullptr);
  count();
  return x;
}

Tensor ResidualBody::forward(const Tensor& z, double t, std::size_t* invocations) const {
  // Inference never touches the running statistics, so the const_cast is
  // confined to a mode that does not mutate.
  ForwardContext ctx{Mode::inference, t};
  return const_cast<ResidualBody*>(this)->forward(z, ctx, nullptr, invocations);
}

Tensor ResidualBody::backward(const BodyTape& tape, const Tensor& grad_output) {
  LayerGradients lg = relu2_.backward(tape.relu2, grad_output);
  Tensor g = std::move(lg.grad_input);
  if (bn2_) {
    lg = bn2_->backward(tape.bn2, g);
    accumulate(bn2_->params(), lg);
    g = std::move(lg.grad_input);
  }
  g = conv2_.backward(tape.conv2, g);
  if (with_time_) g = time2_.backward(tape.time2, g).grad_input;
  g = relu1_.backward(tape.relu1, g).grad_input;
  if (bn1_) {
    lg = bn1_->backward(tape.bn1, g);
    accumulate(bn1_->params(), lg);
    g = std::move(lg.grad_input);
  }
  g = conv1_.backward(tape.conv1, g);
  if (with_time_) g = time1_.backward(tape.time1, g).grad_input;
  return g;
}

// ---------------------------------------------------------------------------
// ResidualStage

ResidualStage ResidualStage::ode_block(const std::string& name, std::size_t channels, bool separable, int iterations,
                                       double step) {
  if (iterations < 1) throw InvalidArgument("ODEBlock iterations must be >= 1");
  if (!(step > 0.0)) throw InvalidArgument("ODEBlock step size must be positive");
  ResidualStage s;
  s.name_ = name;
  s.channels_ = channels;
  s.shared_ = true;
  s.steps_ = iterations;
  s.h_ = step;
  s.bodies_.emplace_back(name, channels, true, separable);
  return s;
}

ResidualStage ResidualStage::resnet_stage(const std::string& name, std::size_t channels, bool separable, int blocks) {
  if (blocks < 1) throw InvalidArgument("ResNet stage needs at least one building block");
  ResidualStage s;
  s.name_ = name;
  s.channels_ = channels;
  s.shared_ = false;
  s.steps_ = blocks;
  s.h_ = 1.0;
  for (int i = 0; i < blocks; ++i) s.bodies_.emplace_back(name + "." + std::to_string(i), channels, false, separable);
  return s;
}

Tensor ResidualStage::forward(const Tensor& z0, const ForwardContext& ctx, ResidualStageTape* tape,
                              std::size_t* invocations) {
  if (tape) tape->steps.assign(steps_, {});
  Tensor z = z0;
  for (int i = 0; i < steps_; ++i) {
    ForwardContext step_ctx{ctx.mode, i * h_};
    ResidualBody& body = bodies_[shared_ ? 0 : i];
    Tensor f = body.forward(z, step_ctx, tape ? &tape->steps[i] : nullptr, invocations);
    if (f.shape() != z.shape())
      throw ShapeError(name_ + ": feature map shape drifted from " + shape_str(z.shape()) + " to " +
                       shape_str(f.shape()) + " at step " + std::to_string(i));
    for (std::size_t k = 0; k < z.size(); ++k) z[k] += h_ * f[k];
    if (invocations) ++*invocations;  // skip add
  }
  return z;
}

Tensor ResidualStage::forward(const Tensor& z, std::size_t* invocations) const {
  return const_cast<ResidualStage*>(this)->forward(z, ForwardContext{}, nullptr, invocations);
}

Tensor ResidualStage::backward(const ResidualStageTape& tape, const Tensor& grad_output) {
  if (tape.steps.size() != static_cast<std::size_t>(steps_))
    throw InvalidArgument(name_ + " backward: tape holds " + std::to_string(tape.steps.size()) + " steps, expected " +
                          std::to_string(steps_));
  Tensor g = grad_output;
  for (int i = steps_; i-- > 0;) {
    Tensor scaled = g;
    scaled *= h_;
    Tensor gf = bodies_[shared_ ? 0 : i].backward(tape.steps[i], scaled);
    g += gf;
  }
  return g;
}

// ---------------------------------------------------------------------------
// Downsampling

Downsampling::Downsampling(const std::string& name, std::size_t in_channels, bool separable)
    : name_(name),
      in_channels_(in_channels),
      conv1_(name + ".conv1", in_channels, 2 * in_channels, 2, separable),
      conv2_(name + ".conv2", 2 * in_channels, 2 * in_channels, 1, separable),
      bn1_(BatchNormLayer(name + ".bn1", 2 * in_channels)),
      bn2_(BatchNormLayer(name + ".bn2", 2 * in_channels)),
      shortcut_(name + ".shortcut", ConvKind::standard, ConvSpec{in_channels, 2 * in_channels, 1, 2, 0, true}) {}

Tensor Downsampling::forward(const Tensor& x, const ForwardContext& ctx, DownsamplingTape* tape,
                             std::size_t* invocations) {
  auto count = [&] {
    if (invocations) ++*invocations;
  };
  Tensor m = conv1_.forward(x, ctx, tape ? &tape->conv1 : nullptr, invocations);
  if (bn1_) {
    m = bn1_->forward(m, ctx, tape ? &tape->bn1 : nullptr);
    count();
  }
  m = relu1_.forward(m, ctx, tape ? &tape->relu1 : nullptr);
  count();
  m = conv2_.forward(m, ctx, tape ? &tape->conv2 : nullptr, invocations);
  if (bn2_) {
    m = bn2_->forward(m, ctx, tape ? &tape->bn2 : nullptr);
    count();
  }
  Tensor s = shortcut_.forward(x, ctx, tape ? &tape->shortcut : nullptr);
  count();
  require_same_shape(m.shape(), s.shape(), name_ + " main path vs shortcut");
  m += s;
  count();
  Tensor out = relu_out_.forward(m, ctx, tape ? &tape->relu_out : nullptr);
  count();
  return out;
}

Tensor Downsampling::forward(const Tensor& x, std::size_t* invocations) const {
  return const_cast<Downsampling*>(this)->forward(x, ForwardContext{}, nullptr, invocations);
}

Tensor Downsampling::backward(const DownsamplingTape& tape, const Tensor& grad_output) {
  Tensor g = relu_out_.backward(tape.relu_out, grad_output).grad_input;
  LayerGradients sg = shortcut_.backward(tape.shortcut, g);
  accumulate(shortcut_.params(), sg);
  Tensor gm = g;
  if (bn2_) {
    LayerGradients lg = bn2_->backward(tape.bn2, gm);
    accumulate(bn2_->params(), lg);
    gm = std::move(lg.grad_input);
  }
  gm = conv2_.backward(tape.conv2, gm);
  gm = relu1_.backward(tape.relu1, gm).grad_input;
  if (bn1_) {
    LayerGradients lg = bn1_->backward(tape.bn1, gm);
    accumulate(bn1_->params(), lg);
    gm = std::move(lg.grad_input);
  }
  gm = conv1_.backward(tape.conv1, gm);
  gm += sg.grad_input;
  return gm;
}

// ---------------------------------------------------------------------------
// Model

Model::Model(const ModelSpec& spec) : spec_(spec) {
  spec_.validate();
  const std::size_t base = spec_.base_channels;
  pre_conv_ = ConvLayer("pre.conv", ConvKind::standard, ConvSpec{spec_.input_shape[0], base, 3, 1, 1, false});
  pre_bn_ = BatchNormLayer("pre.bn", base);
  for (int i = 0; i < spec_.num_blocks; ++i) {
    const std::size_t ch = spec_.block_channels(i);
    const bool sep = spec_.block_separable(i);
    if (spec_.variant == Variant::resnet)
      stages_.emplace_back(ResidualStage::resnet_stage("block" + std::to_string(i + 1), ch, sep, spec_.iterations));
    else
      stages_.emplace_back(
          ResidualStage::ode_block("odeblock" + std::to_string(i + 1), ch, sep, spec_.iterations, spec_.step));
    if (i + 1 < spec_.num_blocks)
      stages_.emplace_back(Downsampling("downsampling" + std::to_string(i + 1), ch, spec_.downsampling_separable(i)));
  }
  fc_ = LinearLayer("fc", spec_.feature_dim(), spec_.classes);
}

Tensor Model::preprocess(const Tensor& input) const {
  Tensor x = pre_conv_.forward(input, {}, nullptr);
  if (pre_bn_) x = pre_bn_->forward(x);
  return relu_forward(x);
}

Tensor Model::forward_blocks(const Tensor& entry, std::size_t* invocations) const {
  Tensor z = entry;
  for (const auto& stage : stages_) z = std::visit([&](const auto& s) { return s.forward(z, invocations); }, stage);
  return z;
}

ModelOutput Model::forward(const Tensor& input) const {
  return const_cast<Model*>(this)->forward(input, Mode::inference, nullptr);
}

ModelOutput Model::forward(const Tensor& input, Mode mode, ModelTape* tape) {
  const bool batched = input.rank() == 4;
  const Shape sample = batched ? Shape(input.shape().begin() + 1, input.shape().end()) : input.shape();
  if (sample != spec_.input_shape)
    throw ShapeError("model input shape " + shape_str(sample) + " != configured " + shape_str(spec_.input_shape));
  ForwardContext ctx{mode, 0.0};
  ModelOutput out;
  std::size_t* inv = &out.layer_invocations;
  Tensor x = pre_conv_.forward(input, ctx, tape ? &tape->pre_conv : nullptr);
  ++*inv;
  if (pre_bn_) {
    x = pre_bn_->forward(x, ctx, tape ? &tape->pre_bn : nullptr);
    ++*inv;
  }
  x = pre_relu_.forward(x, ctx, tape ? &tape->pre_relu : nullptr);
  ++*inv;
  if (tape) tape->stages.clear();
  for (auto& stage : stages_) {
    if (auto* rs = std::get_if<ResidualStage>(&stage)) {
      ResidualStageTape st;
      x = rs->forward(x, ctx, tape ? &st : nullptr, inv);
      if (tape) tape->stages.emplace_back(std::move(st));
    } else {
      DownsamplingTape dt;
      x = std::get<Downsampling>(stage).forward(x, ctx, tape ? &dt : nullptr, inv);
      if (tape) tape->stages.emplace_back(std::move(dt));
    }
  }
  if (tape) tape->pooled_shape = x.shape();
  out.features = global_avg_pool(x);
  ++*inv;
  out.logits = fc_.forward(out.features, ctx, tape ? &tape->fc : nullptr);
  ++*inv;
  require_finite(out.logits, "model forward");
  return out;
}

Tensor Model::backward(const ModelTape& tape, const Tensor& grad_features, const Tensor& grad_logits) {
  if (tape.stages.size() != stages_.size()) throw InvalidArgument("model backward: tape does not match model");
  Tensor g;
  if (!grad_logits.empty()) {
    LayerGradients lg = fc_.backward(tape.fc, grad_logits);
    accumulate(fc_.params(), lg);
    g = std::move(lg.grad_input);
  }
  if (!grad_features.empty()) {
    if (g.empty()) g = grad_features;
    else g += grad_features;
  }
  if (g.empty()) g = Tensor(tape.fc.input.shape());
  g = global_avg_pool_backward(tape.pooled_shape, g);
  for (std::size_t i = stages_.size(); i-- > 0;) {
    if (auto* rs = std::get_if<ResidualStage>(&stages_[i]))
      g = rs->backward(std::get<ResidualStageTape>(tape.stages[i]), g);
    else
      g = std::get<Downsampling>(stages_[i]).backward(std::get<DownsamplingTape>(tape.stages[i]), g);
  }
  g = pre_relu_.backward(tape.pre_relu, g).grad_input;
  if (pre_bn_) {
    LayerGradients lg = pre_bn_->backward(tape.pre_bn, g);
    accumulate(pre_bn_->params(), lg);
    g = std::move(lg.grad_input);
  }
  LayerGradients lg = pre_conv_.backward(tape.pre_conv, g);
  accumulate(pre_conv_.params(), lg);
  return std::move(lg.grad_input);
}

namespace {

template <typename Fn>
void visit_unit(ConvUnit& u, Fn&& fn) {
  for (auto& l : u.layers()) fn(l);
}

// Visits every parameterized layer in declaration order.
template <typename ModelT, typename ConvFn, typename BnFn, typename FcFn>
void visit_layers(ModelT& m, ConvFn&& conv, BnFn&& bn, FcFn&& fc) {
  conv(m.pre_conv());
  if (m.pre_bn()) bn(*m.pre_bn());
  for (auto& stage : m.stages()) {
    if (auto* rs = std::get_if<ResidualStage>(&stage)) {
      for (auto& body : rs->bodies()) {
        for (auto& l : body.conv1().layers()) conv(l);
        if (body.bn1()) bn(*body.bn1());
        for (auto& l : body.conv2().layers()) conv(l);
        if (body.bn2()) bn(*body.bn2());
      }
    } else {
      auto& ds = std::get<Downsampling>(stage);
      for (auto& l : ds.conv1().layers()) conv(l);
      if (ds.bn1()) bn(*ds.bn1());
      for (auto& l : ds.conv2().layers()) conv(l);
      if (ds.bn2()) bn(*ds.bn2());
      conv(ds.shortcut());
    }
  }
  fc(m.fc());
}

}  // namespace

std::vector<Param*> Model::parameters() {
  std::vector<Param*> out;
  auto add = [&](auto& layer) {
    for (Param* p : layer.params()) out.push_back(p);
  };
  visit_layers(*this, add, add, add);
  return out;
}

std::vector<const Param*> Model::parameters() const {
  std::vector<const Param*> out;
  for (Param* p : const_cast<Model*>(this)->parameters()) out.push_back(p);
  return out;
}

void Model::zero_grad() {
  for (Param* p : parameters()) p->zero_grad();
}

void Model::for_each_batchnorm(const std::function<void(BatchNormLayer&)>& fn) {
  visit_layers(*this, [](ConvLayer&) {}, fn, [](LinearLayer&) {});
}

void Model::for_each_batchnorm(const std::function<void(const BatchNormLayer&)>& fn) const {
  const_cast<Model*>(this)->for_each_batchnorm([&](BatchNormLayer& b) { fn(b); });
}

void init_weights(Model& model, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  for (Param* p : model.parameters()) {
    const Shape& s = p->value.shape();
    const bool is_bias = p->name.ends_with(".bias");
    const bool is_bn = p->name.ends_with(".gamma") || p->name.ends_with(".beta");
    if (is_bn) {
      p->value.fill(p->name.ends_with(".gamma") ? 1.0 : 0.0);
    } else if (is_bias) {
      p->value.fill(0.0);
    } else {
      // fan-in: every dimension except the leading output one; depthwise
      // kernels see K*K inputs.
      std::size_t fan_in = shape_size(s) / s[0];
      if (s.size() == 3) fan_in = s[1] * s[2];
      std::normal_distribution<double> dist(0.0, std::sqrt(2.0 / static_cast<double>(fan_in)));
      for (auto& v : p->value.values()) v = dist(rng);
    }
    ++p->version;
  }
}

Model build_model(const ModelSpec& spec, std::uint64_t seed) {
  Model m(spec);
  init_weights(m, seed);
  return m;
}

ModelOutput model_forward(const Model& model, const Tensor& input) { return model.forward(input); }

double euler_integrate(const std::function<double(double, double)>& f, double z0, double h, int steps) {
  double z = z0;
  for (int i = 0; i < steps; ++i) z = z + h * f(z, i * h);
  return z;
}

// ---------------------------------------------------------------------------
// State serialization

namespace {

nlohmann::json tensor_json(const Tensor& t) { return {{"shape", t.shape()}, {"data", t.vec()}}; }

Tensor tensor_from_json(const nlohmann::json& j, const std::string& name) {
  try {
    return Tensor(j.at("shape").get<Shape>(), j.at("data").get<std::vector<double>>());
  } catch (const nlohmann::json::exception& e) {
    throw InvalidArgument("model state entry '" + name + "': " + e.what());
  }
}

}  // namespace

std::string save_state(const Model& model) {
  nlohmann::json j;
  j["config"] = to_config_text(model.spec());
  nlohmann::json params = nlohmann::json::object();
  for (const Param* p : model.parameters()) params[p->name] = tensor_json(p->value);
  model.for_each_batchnorm([&](const BatchNormLayer& bn) {
    params[bn.name() + ".running_mean"] = tensor_json(bn.running_mean());
    params[bn.name() + ".running_var"] = tensor_json(bn.running_var());
  });
  j["params"] = std::move(params);
  return j.dump();
}

void load_state(Model& model, std::string_view json_text) {
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(json_text);
  } catch (const nlohmann::json::exception& e) {
    throw InvalidArgument(std::string("model state is not valid JSON: ") + e.what());
  }
  if (!j.contains("params")) throw InvalidArgument("model state has no 'params' object");
  const auto& params = j["params"];
  auto fetch = [&](const std::string& name, const Shape& shape) {
    if (!params.contains(name)) throw InvalidArgument("model state is missing '" + name + "'");
    Tensor t = tensor_from_json(params[name], name);
    if (t.shape() != shape)
      throw ShapeError("model state '" + name + "' has shape " + shape_str(t.shape()) + ", expected " +
                       shape_str(shape));
    return t;
  };
  for (Param* p : model.parameters()) {
    p->value = fetch(p->name, p->value.shape());
    ++p->version;
  }
  model.for_each_batchnorm([&](BatchNormLayer& bn) {
    BatchNormParams s = bn.params_snapshot();
    s.running_mean = fetch(bn.name() + ".running_mean", s.running_mean.shape());
    s.running_var = fetch(bn.name() + ".running_var", s.running_var.shape());
    bn.set_state(s);
  });
}

void save_state_file(const Model& model, const std::string& path) {
  std::ofstream f(path);
  if (!f) throw InvalidArgument("cannot write model state '" + path + "'");
  f << save_state(model);
}

void load_state_file(Model& model, const std::string& path) {
  std::ifstream f(path);
  if (!f) throw InvalidArgument("cannot open model state '" + path + "'");
  std::stringstream ss;
  ss << f.rdbuf();
  load_state(model, ss.str());
}

}  // namespace odeforge
