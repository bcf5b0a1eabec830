#include "odeforge/gradcheck.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <functional>
#include <random>
#include <sstream>

#include "odeforge/distill.hpp"
#include "odeforge/model.hpp"

namespace odeforge {

namespace {

class Checker {
 public:
  Checker(std::uint64_t seed, double tol) : rng_(seed), tol_(tol) {}

  Tensor random(const Shape& s, double lo = -1.0, double hi = 1.0) {
    std::uniform_real_distribution<double> d(lo, hi);
    Tensor t(s);
    for (double& v : t.values()) v = d(rng_);
    return t;
  }

  // ReLU inputs kept away from the kink so the difference quotient is smooth.
  Tensor away_from_zero(const Shape& s) {
    Tensor t = random(s, 0.1, 1.0);
    std::bernoulli_distribution flip(0.5);
    for (double& v : t.values())
      if (flip(rng_)) v = -v;
    return t;
  }

  void compare(const std::string& name, Tensor& x, const Tensor& analytic, const std::function<double()>& loss,
               double step = 1e-5) {
    double diff = 0.0, scale = 0.0;
    for (std::size_t i = 0; i < x.size(); ++i) {
      const double orig = x[i];
      x[i] = orig + step;
      const double up = loss();
      x[i] = orig - step;
      const double down = loss();
      x[i] = orig;
      const double num = (up - down) / (2.0 * step);
      diff = std::max(diff, std::abs(analytic[i] - num));
      scale = std::max(scale, std::abs(num));
    }
    const double err = diff / std::max(scale, 1e-8);
    out.push_back({name, err, err <= tol_});
  }

  std::uint64_t seed() { return rng_(); }

  std::vector<GradCheckResult> out;

 private:
  std::mt19937_64 rng_;
  double tol_;
};

double dot(const Tensor& a, const Tensor& b) {
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
  return s;
}

// Input and parameter gradients of any single layer under a random projection.
template <typename Layer>
void check_layer(Checker& c, const std::string& name, Layer& layer, Tensor x, const ForwardContext& ctx) {
  LayerCache cache;
  const Tensor y = layer.forward(x, ctx, &cache);
  const Tensor proj = c.random(y.shape());
  const LayerGradients g = layer.backward(cache, proj);
  auto loss = [&] { return dot(layer.forward(x, ctx, nullptr), proj); };
  c.compare(name + "/input", x, g.grad_input, loss);
  const auto params = layer.params();
  for (std::size_t i = 0; i < params.size(); ++i) {
    const std::string pname = params[i]->name.substr(params[i]->name.rfind('.') + 1);
    c.compare(name + "/" + pname, params[i]->value, g.grad_params[i], loss);
  }
}

void randomize_units(Checker& c, std::vector<ConvUnit*> units, std::vector<BatchNormLayer*> bns) {
  for (ConvUnit* u : units)
    for (auto& l : u->layers()) l.weight().value = c.random(l.weight().value.shape(), -0.5, 0.5);
  for (BatchNormLayer* bn : bns) {
    const std::size_t ch = bn->channels();
    bn->gamma().value = c.random({ch}, 0.5, 1.5);
    bn->beta().value = c.random({ch}, -0.2, 0.2);
  }
}

void collect(std::vector<Param*>& ps, ConvUnit& u) {
  for (auto& l : u.layers())
    for (Param* p : l.params()) ps.push_back(p);
}

void collect(std::vector<Param*>& ps, std::optional<BatchNormLayer>& bn) {
  if (bn)
    for (Param* p : bn->params()) ps.push_back(p);
}

}  // namespace

std::vector<GradCheckResult> run_gradcheck(std::uint64_t seed, double tolerance) {
  Checker c(seed, tolerance);
  const ForwardContext inf{Mode::inference, 0.0}, train{Mode::train, 0.0};

  {
    ConvLayer l("c", ConvKind::standard, ConvSpec{2, 3, 3, 2, 1, true});
    l.weight().value = c.random(l.weight().value.shape());
    l.bias().value = c.random(l.bias().value.shape());
    check_layer(c, "conv.standard", l, c.random({2, 2, 5, 5}), inf);
  }
  {
    ConvLayer l("c", ConvKind::depthwise, ConvSpec{3, 3, 3, 1, 1, false});
    l.weight().value = c.random(l.weight().value.shape());
    check_layer(c, "conv.depthwise", l, c.random({2, 3, 4, 4}), inf);
  }
  {
    ConvLayer l("c", ConvKind::pointwise, ConvSpec{3, 4, 1, 1, 0, true});
    l.weight().value = c.random(l.weight().value.shape());
    l.bias().value = c.random(l.bias().value.shape());
    check_layer(c, "conv.pointwise", l, c.random({2, 3, 3, 3}), inf);
  }
  for (const ForwardContext& ctx : {inf, train}) {
    BatchNormLayer bn("bn", 3);
    BatchNormParams p = bn.params_snapshot();
    const Tensor g = c.random({3}, 0.5, 1.5), b = c.random({3}, -0.3, 0.3), m = c.random({3}, -0.3, 0.3),
                 v = c.random({3}, 0.5, 1.5);
    for (std::size_t i = 0; i < 3; ++i) {
      p.gamma[i] = g[i];
      p.beta[i] = b[i];
      p.running_mean[i] = m[i];
      p.running_var[i] = v[i];
    }
    bn.set_state(p);
    check_layer(c, ctx.mode == Mode::train ? "batchnorm.train" : "batchnorm.inference", bn, c.random({4, 3, 2, 2}), ctx);
  }
  {
    LinearLayer l("fc", 5, 3);
    l.weight().value = c.random(l.weight().value.shape());
    l.bias().value = c.random(l.bias().value.shape());
    check_layer(c, "linear", l, c.random({4, 5}), inf);
  }
  {
    ReluLayer r;
    check_layer(c, "relu", r, c.away_from_zero({2, 3, 3}), inf);
  }
  {
    AddTimeLayer t;
    check_layer(c, "add_time", t, c.random({2, 2, 3, 3}), ForwardContext{Mode::inference, 0.7});
  }

  // unrolled ODE blocks and a downsampling block under train-mode batchnorm
  for (int steps : {1, 2, 3}) {
    ResidualStage s = ResidualStage::ode_block("ode", 2, true, steps, 0.5);
    ResidualBody& body = s.bodies()[0];
    randomize_units(c, {&body.conv1(), &body.conv2()}, {&*body.bn1(), &*body.bn2()});
    Tensor z = c.random({3, 2, 3, 3});
    ResidualStageTape tape;
    const Tensor out = s.forward(z, train, &tape, nullptr);
    const Tensor proj = c.random(out.shape());
    std::vector<Param*> ps;
    collect(ps, body.conv1());
    collect(ps, body.bn1());
    collect(ps, body.conv2());
    collect(ps, body.bn2());
    for (Param* p : ps) p->zero_grad();
    const Tensor gz = s.backward(tape, proj);
    auto loss = [&] { return dot(s.forward(z, train, nullptr, nullptr), proj); };
    const std::string name = "odeblock.C" + std::to_string(steps);
    c.compare(name + "/input", z, gz, loss, 1e-6);
    for (Param* p : ps) c.compare(name + "/" + p->name, p->value, Tensor(p->grad), loss, 1e-6);
  }
  {
    Downsampling d("down", 2, true);
    randomize_units(c, {&d.conv1(), &d.conv2()}, {&*d.bn1(), &*d.bn2()});
    d.shortcut().weight().value = c.random(d.shortcut().weight().value.shape());
    Tensor x = c.random({3, 2, 4, 4});
    DownsamplingTape tape;
    const Tensor out = d.forward(x, train, &tape, nullptr);
    const Tensor proj = c.random(out.shape());
    std::vector<Param*> ps;
    collect(ps, d.conv1());
    collect(ps, d.bn1());
    collect(ps, d.conv2());
    collect(ps, d.bn2());
    for (Param* p : d.shortcut().params()) ps.push_back(p);
    for (Param* p : ps) p->zero_grad();
    const Tensor gx = d.backward(tape, proj);
    auto loss = [&] { return dot(d.forward(x, train, nullptr, nullptr), proj); };
    c.compare("downsampling/input", x, gx, loss, 1e-6);
    for (Param* p : ps) c.compare("downsampling/" + p->name, p->value, Tensor(p->grad), loss, 1e-6);
  }

  // losses
  {
    const Tensor t = c.random({3, 5}, -2, 2);
    Tensor s = c.random({3, 5}, -2, 2);
    c.compare("soft_target_loss", s, soft_target_grad(t, s, 4.0), [&] { return soft_target_loss(t, s, 4.0); });
  }
  {
    Tensor a = c.random({6, 4}), b = c.random({5, 4}, -1, 2);
    const auto [ga, gb] = coral_grad(a, b);
    auto loss = [&] { return coral_loss(a, b); };
    c.compare("coral_loss/source", a, ga, loss);
    c.compare("coral_loss/target", b, gb, loss);
  }
  {
    Tensor z = c.random({4, 3}, -2, 2);
    const std::vector<std::size_t> y{0, 2, 1, 2};
    c.compare("cross_entropy", z, cross_entropy_grad(z, y), [&] { return cross_entropy(z, y); });
  }

  // combined distillation objective on a toy teacher/student pair
  {
    ModelSpec s;
    s.num_blocks = 2;
    s.base_channels = 2;
    s.iterations = 1;
    s.step = 0.5;
    s.input_shape = {3, 4, 4};
    s.classes = 3;
    ModelSpec ts = s;
    ts.variant = Variant::resnet;
    const Model teacher = build_model(ts, c.seed());
    Model student = build_model(s, c.seed());
    const Tensor xs = c.random({3, 3, 4, 4}), xt = c.random({3, 3, 4, 4}, 0.0, 1.0);
    TrainConfig cfg;
    student.zero_grad();
    distill_batch(teacher, student, xs, xt, cfg, 0.0, true);
    auto loss = [&] {
      const BatchLosses r = distill_batch(teacher, student, xs, xt, cfg, 0.0, false);
      return combined_loss(r.l_soft, r.l_dc, cfg.lambda);
    };
    for (Param* p : student.parameters()) c.compare("distill/" + p->name, p->value, Tensor(p->grad), loss, 1e-6);
  }
  return c.out;
}

std::string render_gradcheck_csv(const std::vector<GradCheckResult>& results) {
  std::ostringstream o;
  o << "check,rel_error,pass\n";
  char buf[64];
  for (const auto& r : results) {
    std::snprintf(buf, sizeof buf, "%.3e", r.rel_error);
    o << r.name << "," << buf << "," << (r.pass ? "true" : "false") << "\n";
  }
  return o.str();
}

}  // namespace odeforge
