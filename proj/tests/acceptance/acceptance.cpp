// One PASS/FAIL line per acceptance criterion. Expected values are either
// published constants or recomputed here from closed forms and the test-only
// oracles; tolerances are fixed below and not configurable.

#include <algorithm>
#include <array>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <functional>
#include <random>
#include <set>
#include <sstream>
#include <string>

#include "odeforge/distill.hpp"
#include "odeforge/emulator.hpp"
#include "odeforge/error.hpp"
#include "odeforge/gradcheck.hpp"
#include "odeforge/memory_planner.hpp"
#include "odeforge/param_count.hpp"
#include "odeforge/quantizer.hpp"
#include "support/oracles.hpp"

using namespace odeforge;

namespace {

constexpr double kGradTol = 1e-4;       // criterion 4
constexpr double kMaxFlipRate = 0.005;  // criterion 5
constexpr double kLossDrop = 0.5;       // criterion 8a
constexpr double kStudent1Slack = 5.0;  // criterion 8b, points
constexpr double kStudent2Slack = 2.0;  // criterion 8c, points
constexpr double kLrTol = 1e-12;        // criterion 9

// Collects failed expectations with a short reason each.
struct Check {
  std::vector<std::string> failures;
  std::string note;

  void expect(bool ok, const std::string& what) {
    if (!ok) failures.push_back(what);
  }
  template <typename T>
  void equal(const T& got, const T& want, const std::string& what) {
    if (got == want) return;
    std::ostringstream o;
    o << what << ": got " << got << ", want " << want;
    failures.push_back(o.str());
  }
};

int g_failed = 0;

void criterion(int id, const std::string& title, const std::function<void(Check&)>& body) {
  const auto t0 = std::chrono::steady_clock::now();
  Check c;
  try {
    body(c);
  } catch (const std::exception& e) {
    c.failures.push_back(std::string("exception: ") + e.what());
  }
  const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  const bool pass = c.failures.empty();
  g_failed += pass ? 0 : 1;
  std::printf("criterion %d: %s %s (%.2fs)%s%s\n", id, pass ? "PASS" : "FAIL", title.c_str(), secs,
              c.note.empty() ? "" : " ", c.note.c_str());
  for (const auto& f : c.failures) std::printf("    %s\n", f.c_str());
  std::fflush(stdout);
}

std::string pct1(double p) {
  char b[32];
  std::snprintf(b, sizeof b, "%.1f", p);
  return b;
}

ModelSpec digit_spec(Variant v, int blocks) {
  ModelSpec s;
  s.variant = v;
  s.num_blocks = blocks;
  s.base_channels = 64;
  s.iterations = 10;
  s.step = 1.0;
  s.input_shape = {3, 8, 8};
  s.classes = 10;
  return s;
}

std::uint64_t row_of(const CountReport& r, const std::string& block, const std::string& layer) {
  for (const auto& row : r.rows)
    if (row.block == block && row.layer == layer) return row.count;
  throw InvalidArgument("missing row " + block + "/" + layer);
}

// ---------------------------------------------------------------------------

void table_reproduction(Check& c) {
  struct Row {
    const char* block;
    const char* layer;
    std::uint64_t count;
  };
  const Row resnet[] = {
      {"Building block1", "Conv1", 368'640}, {"Building block1", "Conv2", 368'640}, {"Downsampling1", "Conv", 8'192},
      {"Downsampling1", "Conv1", 73'728},    {"Downsampling1", "Conv2", 147'456},   {"Building block2", "Conv1", 1'474'560},
      {"Building block2", "Conv2", 1'474'560}, {"Downsampling2", "Conv", 32'768},   {"Downsampling2", "Conv1", 294'912},
      {"Downsampling2", "Conv2", 589'824},   {"Building block3", "Conv1", 5'898'240}, {"Building block3", "Conv2", 5'898'240},
      {"Others", "", 9'728}};
  struct Row2 {
    const char* block;
    const char* layer;
    std::uint64_t ode, ds;
    const char *ode_pct, *ds_pct;
  };
  const Row2 ode[] = {
      {"ODEBlock1", "Conv1", 36'864, 4'672, "10.0", "1.3"},       {"ODEBlock1", "Conv2", 36'864, 4'672, "10.0", "1.3"},
      {"Downsampling1", "Conv", 8'192, 8'192, "100.0", "100.0"},  {"Downsampling1", "Conv1", 73'728, 73'728, "100.0", "100.0"},
      {"Downsampling1", "Conv2", 147'456, 147'456, "100.0", "100.0"}, {"ODEBlock2", "Conv1", 147'456, 17'536, "10.0", "1.2"},
      {"ODEBlock2", "Conv2", 147'456, 17'536, "10.0", "1.2"},     {"Downsampling2", "Conv", 32'768, 32'768, "100.0", "100.0"},
      {"Downsampling2", "Conv1", 294'912, 33'920, "100.0", "11.5"}, {"Downsampling2", "Conv2", 589'824, 67'840, "100.0", "11.5"},
      {"ODEBlock3", "Conv1", 589'824, 67'840, "10.0", "1.2"},     {"ODEBlock3", "Conv2", 589'824, 67'840, "10.0", "1.2"},
      {"Others", "", 1'664, 1'664, "", ""}};

  const CountReport res3 = count_model(digit_spec(Variant::resnet, 3), CountMode::paper_faithful);
  const CountReport ode3 = count_model(digit_spec(Variant::odenet, 3), CountMode::paper_faithful);
  const CountReport ds3 = count_model(digit_spec(Variant::dsodenet, 3), CountMode::paper_faithful);
  for (const Row& r : resnet) c.equal(row_of(res3, r.block, r.layer), r.count, std::string("ResNet ") + r.block + " " + r.layer);
  c.equal(res3.total, std::uint64_t{16'639'488}, "ResNet total");

  const ReductionReport rode = reduction_report(ode3, res3), rds = reduction_report(ds3, res3);
  for (const Row2& r : ode) {
    c.equal(row_of(ode3, r.block, r.layer), r.ode, std::string("ODENet ") + r.block + " " + r.layer);
    c.equal(row_of(ds3, r.block, r.layer), r.ds, std::string("dsODENet ") + r.block + " " + r.layer);
    if (!*r.ode_pct) continue;
    for (const auto& [rep, want, tag] : {std::tuple{&rode, r.ode_pct, "ODENet"}, std::tuple{&rds, r.ds_pct, "dsODENet"}})
      for (const auto& row : rep->rows)
        if (row.block == r.block && row.layer == r.layer)
          c.equal(row.ratio_percent ? format_percent(*row.ratio_percent) : std::string("-"), std::string(want),
                  std::string(tag) + " percent " + r.block + " " + r.layer);
  }
  c.equal(ode3.total, std::uint64_t{2'696'832}, "ODENet total");
  c.equal(ds3.total, std::uint64_t{545'664}, "dsODENet total");
  c.equal(pct1(100.0 * double(ode3.total) / double(res3.total)), std::string("16.2"), "ODENet percent");
  c.equal(pct1(100.0 * double(ds3.total) / double(res3.total)), std::string("3.3"), "dsODENet percent");

  // section sums: two-block totals, and three-block conv rows only
  const CountReport ode2 = count_model(digit_spec(Variant::odenet, 2), CountMode::paper_faithful);
  const CountReport ds2 = count_model(digit_spec(Variant::dsodenet, 2), CountMode::paper_faithful);
  c.equal(ode2.total, std::uint64_t{598'016}, "two-block ODENet");
  c.equal(ds2.total, std::uint64_t{273'792}, "two-block dsODENet");
  c.equal(pct1(100.0 * (1.0 - double(ds2.total) / double(ode2.total))), std::string("54.2"), "two-block reduction");
  c.equal(ode3.conv_total(), std::uint64_t{2'695'168}, "three-block ODENet conv rows");
  c.equal(ds3.conv_total(), std::uint64_t{544'000}, "three-block dsODENet conv rows");
  c.equal(pct1(100.0 * (1.0 - double(ds3.conv_total()) / double(ode3.conv_total()))), std::string("79.8"),
          "three-block reduction");
  c.equal(pct1(100.0 * (1.0 - double(ds3.total) / double(res3.total))), std::string("96.7"), "block family reduction");

  // the CLI-facing text ends with the published total
  const std::string table = render_table(ds3, &res3);
  const std::string tail = "Total 545,664 (3.3%)\n";
  c.expect(table.size() >= tail.size() && table.compare(table.size() - tail.size(), tail.size(), tail) == 0,
           "rendered table ending");
}

void dsc_algebra(Check& c) {
  std::mt19937_64 rng(2024);
  std::uniform_int_distribution<std::size_t> ch(1, 512), kk(0, 3);
  for (int i = 0; i < 200; ++i) {
    const std::size_t n = ch(rng), m = ch(rng), k = 2 * kk(rng) + 1;
    const ConvSpec std_spec{n, m, k, 1, k / 2};
    const ConvSpec dw{n, n, k, 1, k / 2}, pw{n, m, 1, 1, 0};
    const std::uint64_t standard = count_layer(std_spec, ConvKind::standard);
    const std::uint64_t dsc = count_layer(dw, ConvKind::depthwise) + count_layer(pw, ConvKind::pointwise);
    c.equal(standard, std::uint64_t(n * m * k * k), "standard N*M*K^2");
    c.equal(dsc, std::uint64_t(n * k * k + n * m), "DSC N*K^2+N*M");
  }
  for (std::size_t n : {32, 48, 64, 100, 128, 256, 512, 1024}) {
    const double ratio = double(count_layer({n, n, 3, 1, 0}, ConvKind::depthwise) + count_layer({n, n, 1, 1, 0}, ConvKind::pointwise)) /
                         double(count_layer({n, n, 3, 1, 1}, ConvKind::standard));
    c.expect(ratio < 2.0 / 9.0 + 1.0 / 32.0, "ratio bound at N=" + std::to_string(n));
  }
}

void euler_order(Check& c) {
  const auto f = [](double z, double) { return z; };
  double prev = std::abs(euler_integrate(f, 1.0, 0.1, 10) - std::exp(1.0));
  std::string factors;
  for (int halving = 1; halving <= 3; ++halving) {
    const int steps = 10 << halving;
    const double err = std::abs(euler_integrate(f, 1.0, 1.0 / steps, steps) - std::exp(1.0));
    const double factor = err / prev;
    factors += (factors.empty() ? "" : ",") + pct1(factor * 100.0) + "%";
    c.expect(factor >= 0.4 && factor <= 0.6, "halving " + std::to_string(halving) + " factor " + std::to_string(factor));
    prev = err;
  }
  // (1 + h)^C as an exact product, with no library involvement
  double product = 1.0;
  for (int i = 0; i < 10; ++i) product *= 1.1;
  const double got = euler_integrate(f, 1.0, 0.1, 10);
  // z + h z and z * 1.1 round differently, so agreement is to a few ulps
  c.expect(std::abs(got - product) <= 1e-13, "h=0.1, C=10 differs from the geometric product");
  char printed[32];
  std::snprintf(printed, sizeof printed, "%.10f", got);
  c.equal(std::string(printed), std::string("2.5937424601"), "h=0.1, C=10");
  c.note = "error ratios " + factors;
}

// Every gradient compared against central differences computed here.
void gradient_suite(Check& c) {
  double worst = 0.0;
  auto gate = [&](double err, const std::string& what) {
    worst = std::max(worst, err);
    c.expect(err <= kGradTol, what + " rel error " + std::to_string(err));
  };
  for (std::uint64_t seed : {1, 2, 3}) {
    const std::string s = " seed " + std::to_string(seed);
    std::mt19937_64 rng(seed);

    // every layer kind, through whole models in train mode
    for (Variant v : {Variant::resnet, Variant::odenet, Variant::dsodenet}) {
      ModelSpec spec;
      spec.variant = v;
      spec.num_blocks = 2;
      spec.base_channels = 2;
      spec.iterations = 2;
      spec.step = 0.5;
      spec.input_shape = {3, 4, 4};
      spec.classes = 3;
      Model m = build_model(spec, seed);
      Tensor x = oracle::random_tensor({3, 3, 4, 4}, rng);
      ModelTape tape;
      const ModelOutput out = m.forward(x, Mode::train, &tape);
      const Tensor pf = oracle::random_tensor(out.features.shape(), rng), pl = oracle::random_tensor(out.logits.shape(), rng);
      m.zero_grad();
      const Tensor gx = m.backward(tape, pf, pl);
      auto loss = [&] {
        const ModelOutput o = m.forward(x, Mode::train, nullptr);
        return oracle::dot(o.features, pf) + oracle::dot(o.logits, pl);
      };
      gate(oracle::rel_error(gx, oracle::numeric_grad(x, loss, 1e-6)), to_string(v) + " input" + s);
      for (Param* p : m.parameters()) gate(oracle::rel_error(p->grad, oracle::numeric_grad(p->value, loss, 1e-6)), p->name + s);
    }

    // unrolled ODEBlock at C = 1, 2, 3
    for (int steps : {1, 2, 3})
      for (bool sep : {false, true}) {
        ResidualStage st = ResidualStage::ode_block("b", 3, sep, steps, 0.5);
        for (auto& body : st.bodies())
          for (auto* u : {&body.conv1(), &body.conv2()})
            for (auto& l : u->layers()) l.weight().value = oracle::random_tensor(l.weight().value.shape(), rng, -0.5, 0.5);
        const Tensor z0 = oracle::random_tensor({2, 3, 3, 3}, rng);
        Tensor z = z0;
        ResidualStageTape tape;
        const Tensor out = st.forward(z, ForwardContext{Mode::train, 0.0}, &tape, nullptr);
        const Tensor proj = oracle::random_tensor(out.shape(), rng);
        for (auto& body : st.bodies())
          for (auto* u : {&body.conv1(), &body.conv2()})
            for (auto& l : u->layers()) l.weight().zero_grad();
        const Tensor gz = st.backward(tape, proj);
        auto loss = [&] { return oracle::dot(st.forward(z, ForwardContext{Mode::train, 0.0}, nullptr, nullptr), proj); };
        const std::string tag = "odeblock C=" + std::to_string(steps) + (sep ? " dsc" : " std") + s;
        gate(oracle::rel_error(gz, oracle::numeric_grad(z, loss, 1e-6)), tag + " input");
        for (auto* u : {&st.bodies()[0].conv1(), &st.bodies()[0].conv2()})
          for (auto& l : u->layers())
            gate(oracle::rel_error(l.weight().grad, oracle::numeric_grad(l.weight().value, loss, 1e-6)), tag + " weight");
      }

    // the two training losses
    const Tensor teacher = oracle::random_tensor({5, 4}, rng, -3.0, 3.0);
    Tensor student = oracle::random_tensor({5, 4}, rng, -3.0, 3.0);
    gate(oracle::rel_error(soft_target_grad(teacher, student, 4.0),
                           oracle::numeric_grad(student, [&] { return soft_target_loss(teacher, student, 4.0); })),
         "soft_target_loss" + s);
    Tensor fs = oracle::random_tensor({6, 4}, rng), ft = oracle::random_tensor({5, 4}, rng, -2.0, 2.0);
    const auto [gs, gt] = coral_grad(fs, ft);
    gate(oracle::rel_error(gs, oracle::numeric_grad(fs, [&] { return coral_loss(fs, ft); })), "coral_loss source" + s);
    gate(oracle::rel_error(gt, oracle::numeric_grad(ft, [&] { return coral_loss(fs, ft); })), "coral_loss target" + s);

    // and the library's own suite must agree
    for (const auto& r : run_gradcheck(seed, kGradTol)) gate(r.rel_error, "gradcheck " + r.name + s);
  }
  char b[64];
  std::snprintf(b, sizeof b, "worst rel error %.2e", worst);
  c.note = b;
}

std::size_t oracle_argmax(const double* v, std::size_t n) {
  std::size_t best = 0;
  for (std::size_t i = 1; i < n; ++i)
    if (v[i] > v[best]) best = i;
  return best;
}

void quantization_fidelity(Check& c) {
  GlyphConfig g;
  g.seed = 11;
  DomainDataset data = make_glyph_dataset(g);
  Model m = build_model(default_student_spec(), 11);
  TrainConfig cfg;
  cfg.optimizer = OptimizerKind::adam;
  cfg.epochs = 6;
  cfg.lambda = 0.0;
  cfg.seed = 11;
  pretrain_teacher(m, data, cfg);

  const LabeledSet held = make_glyphs(1000, false, g, 777);
  const Tensor fl = m.forward(held.x).logits;
  const Tensor ql = quantized_forward(quantize_model(m, QuantScheme{}), held.x).logits;
  const std::size_t k = fl.dim(1);
  std::size_t flips = 0, correct = 0;
  for (std::size_t i = 0; i < held.size(); ++i) {
    const std::size_t a = oracle_argmax(fl.data() + i * k, k), b = oracle_argmax(ql.data() + i * k, k);
    flips += a != b;
    correct += a == held.y[i];
  }
  const double acc = 100.0 * double(correct) / double(held.size());
  c.expect(acc >= 90.0, "float model is not trained (accuracy " + pct1(acc) + "%)");
  c.expect(double(flips) <= kMaxFlipRate * double(held.size()), std::to_string(flips) + " argmax flips of 1000");
  c.note = "float acc " + pct1(acc) + "%, flips " + std::to_string(flips) + "/1000";
}

void randomize_bn(Model& m, std::mt19937_64& rng) {
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

void emulator_equivalence(Check& c) {
  std::mt19937_64 rng(6);
  std::uniform_int_distribution<int> blocks(2, 3), base(2, 6), iters(1, 3), hsel(0, 2), vsel(0, 1);
  std::size_t pairs = 0, mismatches = 0;
  for (int model = 0; model < 100; ++model) {
    ModelSpec s;
    s.variant = vsel(rng) ? Variant::dsodenet : Variant::odenet;
    s.num_blocks = blocks(rng);
    s.base_channels = static_cast<std::size_t>(base(rng));
    s.iterations = iters(rng);
    s.step = std::array<double, 3>{0.25, 0.5, 1.0}[hsel(rng)];
    s.input_shape = {3, 8, 8};
    Model m = build_model(s, 1000 + model);
    randomize_bn(m, rng);
    const QModel q = quantize_model(m, QuantScheme{});
    Emulator dev(s);
    if (dev.load_weights(serialize_weights(q)) != Emulator::kAck) {
      c.expect(false, "model " + std::to_string(model) + " image refused: " + dev.last_error());
      continue;
    }
    dev.select_mode(EmulatorMode::compute);
    for (int i = 0; i < 10; ++i, ++pairs) {
      const QTensor entry = host_entry(q, oracle::random_tensor({3, 8, 8}, rng, 0.0, 1.0));
      if (dev.compute(entry).words != quantized_blocks(q, entry).words) ++mismatches;
    }
  }
  c.equal(pairs, std::size_t{1000}, "pairs");
  c.equal(mismatches, std::size_t{0}, "bitwise mismatches");

  // protocol contract
  ModelSpec s;
  s.base_channels = 4;
  s.iterations = 2;
  const QModel q = quantize_model(build_model(s, 3), QuantScheme{});
  const std::vector<std::uint8_t> image = serialize_weights(q);
  const QTensor entry = host_entry(q, oracle::random_tensor({3, 8, 8}, rng, 0.0, 1.0));
  auto throws_protocol = [](const std::function<void()>& f) {
    try {
      f();
    } catch (const ProtocolError&) {
      return true;
    } catch (...) {
      return false;
    }
    return false;
  };
  Emulator e(s);
  c.expect(throws_protocol([&] { e.select_mode(EmulatorMode::compute); }), "compute before load accepted");
  c.expect(throws_protocol([&] { e.compute(entry); }), "compute in idle mode accepted");
  std::size_t rejected = 0, tried = 0;
  for (std::size_t cut : {std::size_t{0}, std::size_t{3}, std::size_t{11}, image.size() / 2, image.size() - 1}) {
    ++tried;
    const std::vector<std::uint8_t> part(image.begin(), image.begin() + static_cast<long>(cut));
    if (e.load_weights(part) == Emulator::kNak && !e.loaded() && e.mode() == EmulatorMode::idle) ++rejected;
  }
  std::vector<std::uint8_t> flipped = image;
  flipped[flipped.size() / 3] ^= 0x01;
  ++tried;
  if (e.load_weights(flipped) == Emulator::kNak && !e.loaded()) ++rejected;
  c.equal(rejected, tried, "rejected malformed streams");
  c.expect(throws_protocol([&] { e.select_mode(EmulatorMode::compute); }), "compute after rejected load accepted");
  c.expect(e.load_weights(image) == Emulator::kAck, "valid image refused");
  e.select_mode(EmulatorMode::compute);
  c.expect(throws_protocol([&] { e.load_weights(image); }), "weight transfer during compute accepted");
  c.expect(e.compute(entry).words == quantized_blocks(q, entry).words, "post-protocol output mismatch");
  c.note = std::to_string(pairs) + " pairs, " + std::to_string(rejected) + "/" + std::to_string(tried) + " bad streams rejected";
}

void memory_feasibility(Check& c) {
  const QModel q = quantize_model(Model(digit_spec(Variant::dsodenet, 3)), QuantScheme{});
  const DeviceSpec dev;
  c.equal(dev.bram_instances, std::uint64_t{312}, "default BRAM instances");
  c.equal(dev.uram_instances, std::uint64_t{96}, "default URAM instances");
  const MemoryPlan p = plan(q, dev, PlacementPolicy::paper);
  c.expect(p.fits, "pinned placement does not fit");
  for (MemoryKind k : {MemoryKind::bram, MemoryKind::uram}) {
    const std::uint64_t ib = dev.instance_bits(k);
    std::uint64_t packed = 0, used = 0;
    for (const Assignment& a : p.arrays) {
      if (a.kind != k) continue;
      packed += a.bits;
      const std::uint64_t n = (a.bits + ib - 1) / ib;
      c.equal(a.instances, n, a.id + " instances");
      c.equal(a.waste, n * ib - a.bits, a.id + " waste");
      used += n;
    }
    const KindTotals& t = p.totals(k);
    c.equal(t.packed_bits, packed, to_string(k) + " packed");
    c.equal(t.instances, used, to_string(k) + " used");
    c.equal(t.packed_bits + t.waste_bits, t.instances * ib, to_string(k) + " conservation");
    c.expect(t.instances <= dev.instances(k), to_string(k) + " over capacity");
  }
  c.note = "BRAM " + std::to_string(p.bram.instances) + "/312, URAM " + std::to_string(p.uram.instances) + "/96";
}

double oracle_accuracy(const Model& m, const LabeledSet& set) {
  const Tensor logits = m.forward(set.x).logits;
  const std::size_t k = logits.dim(1);
  std::size_t ok = 0;
  for (std::size_t i = 0; i < set.size(); ++i) ok += oracle_argmax(logits.data() + i * k, k) == set.y[i];
  return 100.0 * double(ok) / double(set.size());
}

// Rows whose max softmax probability exceeds `thr`, computed independently.
std::set<std::size_t> oracle_confident(const Tensor& logits, double thr) {
  std::set<std::size_t> rows;
  const std::size_t k = logits.dim(1);
  for (std::size_t i = 0; i < logits.dim(0); ++i) {
    const double* l = logits.data() + i * k;
    const double mx = l[oracle_argmax(l, k)];
    double z = 0.0;
    for (std::size_t j = 0; j < k; ++j) z += std::exp(l[j] - mx);
    if (1.0 / z > thr) rows.insert(i);
  }
  return rows;
}

void domain_adaptation(Check& c) {
  GlyphConfig g;
  g.seed = 1;
  const DomainDataset data = make_glyph_dataset(g);
  TrainConfig cfg;
  cfg.optimizer = OptimizerKind::adam;
  cfg.epochs = 12;
  cfg.seed = 1;
  Model teacher = build_model(default_teacher_spec(), cfg.seed);
  pretrain_teacher(teacher, data, cfg);
  const std::string frozen = save_state(teacher);
  const double t_acc = oracle_accuracy(teacher, data.target_eval);

  // (d) selection monotonicity on the teacher's target logits
  const Tensor tl = teacher.forward(data.target).logits;
  std::set<std::size_t> prev;
  bool first = true;
  for (int i = 0; i <= 20; ++i) {
    const double thr = 0.05 * i;
    const Selection sel = select_samples(teacher, data.target, thr);
    const std::set<std::size_t> got(sel.indices.begin(), sel.indices.end());
    c.expect(got == oracle_confident(tl, thr), "selection at " + std::to_string(thr) + " differs from the oracle");
    if (!first) c.expect(std::includes(prev.begin(), prev.end(), got.begin(), got.end()), "selection not nested");
    prev = got;
    first = false;
  }

  const PipelineResult r = run_pipeline(teacher, default_student_spec(), data, cfg);
  c.expect(save_state(teacher) == frozen, "teacher changed during distillation");
  const double s1 = oracle_accuracy(r.student1, data.target_eval), s2 = oracle_accuracy(r.student2, data.target_eval);
  c.expect(std::abs(s1 - r.stage1.epochs.back().acc) < 1e-9, "reported student1 accuracy disagrees with the oracle");

  for (const LossReport* rep : {&r.stage1, &r.stage2}) {
    const double l0 = rep->epochs.front().l, l1 = rep->epochs.back().l;
    c.expect(l1 <= (1.0 - kLossDrop) * l0, rep->stage + " combined loss " + std::to_string(l0) + " -> " + std::to_string(l1));
  }
  c.expect(s1 >= t_acc - kStudent1Slack, "student1 " + pct1(s1) + " vs teacher " + pct1(t_acc));
  c.expect(s2 >= s1 - kStudent2Slack, "student2 " + pct1(s2) + " vs student1 " + pct1(s1));
  c.note = "target acc teacher " + pct1(t_acc) + ", student1 " + pct1(s1) + ", student2 " + pct1(s2) + "; loss " +
           pct1(r.stage1.epochs.front().l) + " -> " + pct1(r.stage1.epochs.back().l);
}

void lr_schedule(Check& c) {
  c.expect(lr_at(0.0) == 0.01, "lr_at(0) != 0.01");
  const double want = 0.01 * std::pow(11.0, -0.75);
  c.expect(std::abs(lr_at(1.0) - want) <= kLrTol, "lr_at(1) off by " + std::to_string(std::abs(lr_at(1.0) - want)));
  double prev = lr_at(0.0);
  for (int i = 1; i < 1000; ++i) {
    const double v = lr_at(i / 999.0);
    c.expect(v < prev, "not strictly decreasing at grid point " + std::to_string(i));
    prev = v;
  }
}

}  // namespace

int main() {
  criterion(1, "parameter tables reproduced exactly", table_reproduction);
  criterion(2, "separable convolution count algebra", dsc_algebra);
  criterion(3, "Euler solver first-order convergence", euler_order);
  criterion(4, "finite-difference gradient suite", gradient_suite);
  criterion(5, "20/24-bit quantization argmax fidelity", quantization_fidelity);
  criterion(6, "emulator bitwise equivalence and protocol", emulator_equivalence);
  criterion(7, "memory placement feasibility and conservation", memory_feasibility);
  criterion(8, "two-stage domain-adaptation pipeline", domain_adaptation);
  criterion(9, "learning-rate schedule", lr_schedule);
  std::printf("%d of 9 criteria failed\n", g_failed);
  return g_failed == 0 ? 0 : 1;
}
