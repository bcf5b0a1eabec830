#include <doctest.h>

#include <cmath>
#include <random>

#include "odeforge/error.hpp"
#include "odeforge/quantizer.hpp"
#include "support/oracles.hpp"

using namespace odeforge;

namespace {

ModelSpec small_spec(Variant v = Variant::dsodenet, int blocks = 3) {
  ModelSpec s;
  s.variant = v;
  s.num_blocks = blocks;
  s.base_channels = 8;
  s.iterations = 2;
  s.step = 0.5;
  return s;
}

// Non-trivial running statistics so folding actually changes the weights.
void randomize_batchnorm(Model& m, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> u(-0.3, 0.3), pos(0.5, 1.5);
  m.for_each_batchnorm([&](BatchNormLayer& bn) {
    BatchNormParams p = bn.params_snapshot();
    for (std::size_t i = 0; i < p.channels(); ++i) {
      p.gamma[i] = pos(rng);
      p.beta[i] = u(rng);
      p.running_mean[i] = u(rng);
      p.running_var[i] = pos(rng);
    }
    bn.set_state(p);
  });
}

void scale_weights(Model& m, double s) {
  for (Param* p : m.parameters())
    if (p->name.find(".weight") != std::string::npos) p->value *= s;
}

Tensor random_batch(std::size_t n, std::uint64_t seed, double lo = 0.0, double hi = 1.0) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> u(lo, hi);
  Tensor t({n, 3, 8, 8});
  for (double& v : t.values()) v = u(rng);
  return t;
}

}  // namespace

TEST_CASE("scheme parsing and defaults") {
  const QuantScheme d;
  CHECK(d.conv_fmt == kQ4_16);
  CHECK(d.other_fmt == kQ8_16);
  const QuantScheme s = parse_scheme("20/24");
  CHECK(s.conv_fmt.total_bits == 20);
  CHECK(s.other_fmt.total_bits == 24);
  CHECK_THROWS_AS(parse_scheme("20"), InvalidArgument);
  CHECK_THROWS_AS(parse_scheme("x/24"), InvalidArgument);
  CHECK_THROWS_AS(parse_scheme("4/24"), InvalidArgument);
}

TEST_CASE("all-zero model quantizes to all-zero words") {
  Model m(small_spec());
  for (Param* p : m.parameters()) p->value.fill(0.0);
  const QModel q = quantize_model(m);
  std::size_t arrays = 0;
  for_each_array(q, [&](const std::string& name, const QTensor& t) {
    ++arrays;
    if (name.size() > 2 && name.substr(name.size() - 2) == ".h") return;
    for (Word w : t.words) CHECK(w == 0);
  });
  CHECK(arrays > 0);
}

TEST_CASE("weight 0.5 becomes raw 32768 in Q4.16") {
  Model m = build_model(small_spec(), 1);
  auto& ds = std::get<Downsampling>(m.stages()[1]);
  ds.shortcut().weight().value[0] = 0.5;
  QuantScheme s;
  s.fold_batchnorm = false;
  const QModel q = quantize_model(m, s);
  CHECK(std::get<QDownsampling>(q.stages[1]).shortcut.weight.words[0] == 32768);
}

TEST_CASE("unfolded weights stay within half an LSB") {
  Model m = build_model(small_spec(), 2);
  QuantScheme s;
  s.fold_batchnorm = false;
  const QModel q = quantize_model(m, s);
  const auto& body = std::get<QResidualStage>(q.stages[0]).bodies[0];
  const auto& src = std::get<ResidualStage>(m.stages()[0]).bodies()[0];
  for (std::size_t i = 0; i < body.conv1.size(); ++i) {
    const Tensor orig = src.conv1().layers()[i].weight().value;
    const Tensor deq = dequantize(body.conv1[i].weight);
    for (std::size_t j = 0; j < orig.size(); ++j) CHECK(std::abs(deq[j] - orig[j]) <= std::ldexp(1.0, -17));
  }
  CHECK(q.weight_saturations() == 0);
}

TEST_CASE("batchnorm folding preserves float logits") {
  for (Variant v : {Variant::resnet, Variant::odenet, Variant::dsodenet}) {
    Model m = build_model(small_spec(v), 3);
    randomize_batchnorm(m, 4);
    const Model f = fold_batchnorm(m);
    bool any_bn = false;
    f.for_each_batchnorm([&](const BatchNormLayer&) { any_bn = true; });
    CHECK_FALSE(any_bn);
    const Tensor x = random_batch(8, 5);
    CHECK(max_abs_diff(m.forward(x).logits, f.forward(x).logits) <= 1e-9);
  }
}

TEST_CASE("fixed-point conv equals the exact float convolution on small words") {
  // Words below 2^10 keep every product and sum exact in double precision,
  // so requantizing the float result must reproduce the integer kernel.
  std::mt19937_64 rng(6);
  std::uniform_int_distribution<int> word(-1000, 1000);
  for (ConvKind kind : {ConvKind::standard, ConvKind::depthwise, ConvKind::pointwise}) {
    for (std::size_t stride : {1, 2}) {
      ConvSpec spec{4, 6, 3, stride, 1, true};
      if (kind == ConvKind::depthwise) spec.out_channels = 4;
      if (kind == ConvKind::pointwise) spec = ConvSpec{4, 6, 1, 1, 0, true};
      QTensor x({4, 5, 5}, kQ8_16);
      for (Word& w : x.words) w = word(rng);
      QConv c{"c", kind, spec, QTensor(weight_shape(spec, kind), kQ4_16), QTensor({spec.out_channels}, kQ8_16)};
      for (Word& w : c.weight.words) w = word(rng);
      for (Word& w : c.bias->words) w = word(rng);
      const QTensor got = qconv_forward(x, c, kQ8_16, nullptr);

      const Tensor xf = dequantize(x), wf = dequantize(c.weight), bf = dequantize(*c.bias);
      Tensor ref;
      if (kind == ConvKind::standard) ref = conv2d_forward(xf, spec, wf, &bf);
      if (kind == ConvKind::pointwise) ref = pointwise_forward(xf, wf, &bf);
      if (kind == ConvKind::depthwise) {
        ref = depthwise_forward(xf, spec, wf);
        for (std::size_t m = 0; m < ref.dim(0); ++m)
          for (std::size_t i = 0; i < ref.dim(1) * ref.dim(2); ++i) ref[m * ref.dim(1) * ref.dim(2) + i] += bf[m];
      }
      CHECK(got == quantize(ref, kQ8_16));
    }
  }
}

TEST_CASE("elementwise kernels") {
  QTensor a({1, 1, 3}, {5, -7, 8388607}, kQ8_16), b({1, 1, 3}, {1, 2, 1}, kQ8_16);
  std::size_t sat = 0;
  CHECK(qadd(a, b, &sat).words == std::vector<Word>{6, -5, 8388607});
  CHECK(sat == 1);
  CHECK(qrelu(a).words == std::vector<Word>{5, 0, 8388607});
  const QTensor t = qadd_time(a, 42);
  CHECK(t.shape == Shape{2, 1, 3});
  CHECK(t.words[3] == 42);
  CHECK(t.words[5] == 42);

  // z + h f with h = 0.5: 10 + 0.5 * 3 = 11.5 -> ties to even 12 (words)
  const QTensor h({1}, {quantize(0.5, kQ8_16)}, kQ8_16);
  const QTensor z({1, 1, 2}, {10, 10}, kQ8_16), f({1, 1, 2}, {3, 1}, kQ8_16);
  CHECK(qeuler_step(z, f, h, nullptr).words == std::vector<Word>{12, 10});

  CHECK(div_round_even(5, 2) == 2);
  CHECK(div_round_even(7, 2) == 4);
  CHECK(div_round_even(-5, 2) == -2);
  CHECK(div_round_even(-7, 2) == -4);
  CHECK(div_round_even(-7, 4) == -2);
  CHECK(div_round_even(9, 4) == 2);
  CHECK(qavg_pool(QTensor({2, 1, 2}, {1, 2, -3, -4}, kQ8_16)).words == std::vector<Word>{2, -4});
}

TEST_CASE("zero input and weights give the fc bias") {
  Model m(small_spec());
  for (Param* p : m.parameters()) p->value.fill(0.0);
  for (std::size_t i = 0; i < m.fc().bias().value.size(); ++i) m.fc().bias().value[i] = 0.1 * i - 0.3;
  const QModel q = quantize_model(m);
  const auto out = quantized_forward(q, Tensor({3, 8, 8}));
  for (std::size_t i = 0; i < out.logits.size(); ++i) CHECK(out.logits[i] == m.fc().bias().value[i]);
}

TEST_CASE("quantized argmax agrees with float on random inputs") {
  for (bool fold : {true, false}) {
    Model m = build_model(small_spec(), 8);
    randomize_batchnorm(m, 9);
    QuantScheme s;
    s.fold_batchnorm = fold;
    const QModel q = quantize_model(m, s);
    const Tensor x = random_batch(1000, 10);
    const QuantErrorStats st = quantization_error_report(m, q, x);
    CHECK(st.samples == 1000);
    CHECK(st.flip_rate <= 0.01);
    CHECK(st.max_abs_logit_dev < 1e-2);
    CHECK(st.weight_saturations == 0);
  }
}

TEST_CASE("quantized forward is deterministic and batch-consistent") {
  const Model m = build_model(small_spec(), 11);
  const QModel q = quantize_model(m);
  const Tensor x = random_batch(3, 12);
  const auto a = quantized_forward(q, x), b = quantized_forward(q, x);
  CHECK(a.logits == b.logits);
  CHECK(a.features == b.features);
  const Tensor one = Tensor({3, 8, 8}, std::vector<double>(x.data() + 192, x.data() + 384));
  const auto single = quantized_forward(q, one);
  for (std::size_t i = 0; i < single.logits.size(); ++i) CHECK(single.logits[i] == a.logits[10 + i]);
}

TEST_CASE("error report limits") {
  Model m = build_model(small_spec(), 13);
  randomize_batchnorm(m, 14);
  scale_weights(m, 0.3);
  const Tensor x = random_batch(50, 15, 0.0, 0.5);

  const QuantErrorStats same = quantization_error_report(m, m, x);
  CHECK(same.max_abs_logit_dev == 0.0);
  CHECK(same.argmax_flips == 0);

  QuantScheme fine;
  fine.conv_fmt = FixedPointFormat{32, 30};
  fine.other_fmt = FixedPointFormat{32, 30};
  const QuantErrorStats st = quantization_error_report(m, quantize_model(m, fine), x);
  CHECK(st.activation_saturations == 0);
  CHECK(st.weight_saturations == 0);
  CHECK(st.max_abs_logit_dev < 1e-6);
}

TEST_CASE("more fraction bits never increase the deviation") {
  Model m = build_model(small_spec(Variant::odenet), 16);
  randomize_batchnorm(m, 17);
  const Tensor x = random_batch(40, 18);
  double prev = INFINITY;
  for (int frac : {8, 12, 16, 20, 24}) {
    QuantScheme s;
    s.conv_fmt = FixedPointFormat{frac + 4, frac};
    s.other_fmt = FixedPointFormat{frac + 8, frac};
    const double dev = quantization_error_report(m, quantize_model(m, s), x).max_abs_logit_dev;
    CHECK(dev <= prev);
    prev = dev;
  }
}

TEST_CASE("saturation count matches a recount of words at the bounds") {
  Model m = build_model(small_spec(), 19);
  scale_weights(m, 40.0);
  const QModel q = quantize_model(m);
  CHECK(q.weight_saturations() > 0);
  std::size_t recount = 0;
  for_each_array(q, [&](const std::string&, const QTensor& t) { recount += count_at_bounds(t); });
  CHECK(recount == q.weight_saturations());
}

TEST_CASE("automatic fraction-bit reduction avoids saturation") {
  Model m = build_model(small_spec(), 20);
  auto& ds = std::get<Downsampling>(m.stages()[1]);
  ds.shortcut().weight().value[0] = 20.0;
  QuantScheme s;
  s.fold_batchnorm = false;
  CHECK(quantize_model(m, s).weight_saturations() == 1);
  s.auto_frac_reduction = true;
  const QModel q = quantize_model(m, s);
  CHECK(q.weight_saturations() == 0);
  const QTensor& w = std::get<QDownsampling>(q.stages[1]).shortcut.weight;
  CHECK(w.fmt == FixedPointFormat{20, 14});
  CHECK(dequantize(w)[0] == 20.0);
}

TEST_CASE("entry map validation") {
  const QModel q = quantize_model(build_model(small_spec(), 21));
  CHECK_THROWS_AS(quantized_blocks(q, QTensor({8, 4, 4}, kQ8_16)), ShapeError);
  CHECK_THROWS_AS(quantized_blocks(q, QTensor({8, 8, 8}, kQ4_16)), InvalidArgument);
  CHECK_THROWS_AS(host_entry(q, Tensor({3, 4, 4})), ShapeError);
  CHECK(quantized_blocks(q, QTensor({8, 8, 8}, kQ8_16)).shape == Shape{32, 1, 1});
}
