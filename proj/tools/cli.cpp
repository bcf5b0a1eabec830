#include "cli.hpp"

#include <cstdlib>
#include <filesystem>
#include <functional>
#include <map>
#include <optional>
#include <ostream>
#include <sstream>

#include <CLI11.hpp>

#include "odeforge/distill.hpp"
#include "odeforge/emulator.hpp"
#include "odeforge/error.hpp"
#include "odeforge/gradcheck.hpp"
#include "odeforge/memory_planner.hpp"
#include "odeforge/param_count.hpp"
#include "odeforge/quantizer.hpp"
#include "odeforge/tensor_io.hpp"

namespace odeforge::cli {

namespace {

// Loads an input named by a flag; failures become field-level messages.
template <typename F>
auto load(const std::string& flag, F&& f) -> decltype(f()) {
  try {
    return f();
  } catch (const Error& e) {
    throw InvalidArgument(flag + ": " + e.what());
  } catch (const std::exception& e) {
    throw InvalidArgument(flag + ": " + e.what());
  }
}

ModelSpec load_spec(const std::string& flag, const std::string& path) {
  return load(flag, [&] { return load_model_config(path); });
}

Model load_model(const ModelSpec& spec, const std::string& flag, const std::string& path) {
  return load(flag, [&] {
    Model m(spec);
    load_state_file(m, path);
    return m;
  });
}

// ODEFORGE_SEED overrides any seed from flags or config files.
std::uint64_t effective_seed(std::uint64_t seed) {
  const char* env = std::getenv("ODEFORGE_SEED");
  if (!env) return seed;
  const std::string s(env);
  std::size_t used = 0;
  unsigned long long v = 0;
  try {
    v = std::stoull(s, &used);
  } catch (const std::exception&) {
    used = 0;
  }
  if (s.empty() || used != s.size() || s[0] == '-') throw InvalidArgument("ODEFORGE_SEED: '" + s + "' is not an unsigned integer");
  return v;
}

void emit(std::ostream& out, const std::string& path, const std::string& text) {
  if (path.empty()) out << text;
  else write_text_file(path, text);
}

std::vector<std::uint8_t> read_bytes(const std::string& path) {
  const std::string s = read_text_file(path);
  return {s.begin(), s.end()};
}

void write_bytes(const std::string& path, const std::vector<std::uint8_t>& b) {
  write_text_file(path, std::string(b.begin(), b.end()));
}

// (C,H,W) or (B,C,H,W) input matched against the model's sample shape.
Tensor as_batch(const Tensor& x, const ModelSpec& spec) {
  if (x.shape() == spec.input_shape) {
    Shape s{1};
    s.insert(s.end(), x.shape().begin(), x.shape().end());
    return x.reshaped(s);
  }
  if (x.rank() == 4 && Shape(x.shape().begin() + 1, x.shape().end()) == spec.input_shape) return x;
  throw ShapeError("--input: shape " + shape_str(x.shape()) + " does not match model input " + shape_str(spec.input_shape));
}

Tensor sample(const Tensor& batch, std::size_t i) {
  const std::size_t per = batch.size() / batch.dim(0);
  return Tensor(Shape(batch.shape().begin() + 1, batch.shape().end()),
                std::vector<double>(batch.data() + i * per, batch.data() + (i + 1) * per));
}

std::string logits_csv(const Tensor& logits) {
  const std::size_t b = logits.rank() == 1 ? 1 : logits.dim(0), k = logits.size() / b;
  std::ostringstream o;
  o << "sample,argmax";
  for (std::size_t j = 0; j < k; ++j) o << ",logit" << j;
  o << "\n";
  char buf[40];
  for (std::size_t i = 0; i < b; ++i) {
    o << i << "," << argmax(logits.data() + i * k, k);
    for (std::size_t j = 0; j < k; ++j) {
      std::snprintf(buf, sizeof buf, ",%.9g", logits[i * k + j]);
      o << buf;
    }
    o << "\n";
  }
  return o.str();
}

// ---------------------------------------------------------------------------
// Subcommands

struct CountArgs {
  std::string model, baseline, mode = "paper", out;
  bool csv = false;
};

int run_count(const CountArgs& a, std::ostream& out) {
  const CountMode mode = parse_count_mode(a.mode);
  const ModelSpec spec = load_spec("--model", a.model);
  const CountReport r = count_model(spec, mode);
  if (a.baseline.empty()) {
    emit(out, a.out, a.csv ? render_csv(r, nullptr) : render_table(r, nullptr));
    return kOk;
  }
  const CountReport base = count_model(load_spec("--baseline", a.baseline), mode);
  emit(out, a.out, a.csv ? render_csv(r, &base) : render_table(r, &base));
  return kOk;
}

struct PlanArgs {
  std::string model, weights, policy = "paper", scheme = "20/24", out;
  bool shared = false, csv = false;
  std::size_t bram = 0, uram = 0;
};

int run_plan(const PlanArgs& a, std::ostream& out, std::ostream& err) {
  const ModelSpec spec = load_spec("--model", a.model);
  const PlacementPolicy policy = load("--policy", [&] { return parse_policy(a.policy); });
  const QuantScheme scheme = load("--scheme", [&] { return parse_scheme(a.scheme); });
  const Model m = a.weights.empty() ? Model(spec) : load_model(spec, "--weights", a.weights);
  DeviceSpec device;
  if (a.bram) device.bram_instances = a.bram;
  if (a.uram) device.uram_instances = a.uram;
  const MemoryPlan p = plan(quantize_model(m, scheme), device, policy, a.shared);
  emit(out, a.out, a.csv ? render_plan_csv(p) : render_plan_text(p, device));
  if (!p.fits) {
    err << "error: plan does not fit the device (overflow " << p.overflow_bits << " bits)\n";
    return kDomainError;
  }
  return kOk;
}

struct QuantizeArgs {
  std::string model, weights, scheme = "20/24", out, eval_input, report;
  bool no_fold = false;
  std::size_t eval = 0;
  std::uint64_t seed = 1;
};

int run_quantize(const QuantizeArgs& a, std::ostream& out) {
  const ModelSpec spec = load_spec("--model", a.model);
  QuantScheme scheme = load("--scheme", [&] { return parse_scheme(a.scheme); });
  scheme.fold_batchnorm = !a.no_fold;
  const Model m = load_model(spec, "--weights", a.weights);
  Tensor inputs;
  if (!a.eval_input.empty()) inputs = as_batch(load("--eval-input", [&] { return load_tensor_file(a.eval_input); }), spec);
  const QModel q = quantize_model(m, scheme);
  write_bytes(a.out, serialize_weights(q));
  if (inputs.empty() && a.eval > 0) {
    if (spec.input_shape != Shape{3, 8, 8}) throw InvalidArgument("--eval: synthetic glyphs need a 3,8,8 model input");
    GlyphConfig g;
    inputs = make_glyphs(a.eval, false, g, effective_seed(a.seed)).x;
  }
  if (!inputs.empty()) emit(out, a.report, render_error_csv(quantization_error_report(m, q, inputs), &q));
  return kOk;
}

struct InferArgs {
  std::string model, weights, input, scheme = "20/24", out;
  bool quantized = false;
};

int run_infer(const InferArgs& a, std::ostream& out) {
  const ModelSpec spec = load_spec("--model", a.model);
  const QuantScheme scheme = load("--scheme", [&] { return parse_scheme(a.scheme); });
  const Model m = load_model(spec, "--weights", a.weights);
  const Tensor x = as_batch(load("--input", [&] { return load_tensor_file(a.input); }), spec);
  const Tensor logits = a.quantized ? quantized_forward(quantize_model(m, scheme), x).logits : m.forward(x).logits;
  emit(out, a.out, logits_csv(logits));
  return kOk;
}

struct EmulateArgs {
  std::string model, image, input, host_weights, scheme = "20/24", out;
  bool check = false;
};

// Without host weights the input holds device entry feature maps and the
// output is the device's pooled feature tensor. With host weights the input
// holds images and the output is logits.
int run_emulate(const EmulateArgs& a, std::ostream& out, std::ostream& err) {
  const ModelSpec spec = load_spec("--model", a.model);
  const QuantScheme scheme = load("--scheme", [&] { return parse_scheme(a.scheme); });
  const std::vector<std::uint8_t> stream = load("--weights", [&] { return read_bytes(a.image); });
  const Tensor raw = load("--input", [&] { return load_tensor_file(a.input); });
  std::optional<QModel> q;
  if (!a.host_weights.empty()) q = quantize_model(load_model(spec, "--host-weights", a.host_weights), scheme);
  if (a.check && !q) throw InvalidArgument("--check: needs --host-weights for the reference");

  Emulator dev(spec);
  if (dev.load_weights(stream) != Emulator::kAck)
    throw InvalidArgument("--weights: device refused the weight stream: " + dev.last_error());
  dev.select_mode(EmulatorMode::compute);

  if (!q) {
    const bool single = raw.rank() == 3;
    const Tensor x = single ? raw.reshaped({1, raw.dim(0), raw.dim(1), raw.dim(2)}) : raw;
    if (x.rank() != 4) throw ShapeError("--input: expected (C,H,W) or (B,C,H,W), got " + shape_str(raw.shape()));
    std::vector<double> values;
    Shape per;
    for (std::size_t i = 0; i < x.dim(0); ++i) {
      const Tensor y = dequantize(dev.compute(quantize(sample(x, i), kQ8_16)));
      per = y.shape();
      values.insert(values.end(), y.data(), y.data() + y.size());
    }
    Shape shape = per;
    if (!single) shape.insert(shape.begin(), x.dim(0));
    emit(out, a.out, tensor_to_text(Tensor(shape, std::move(values))));
    err << "emulated " << x.dim(0) << " samples, " << dev.last_ops() << " device ops per sample\n";
    return kOk;
  }

  const Tensor x = as_batch(raw, spec);
  const HostWeights host = host_weights(*q);
  const std::size_t b = x.dim(0), k = spec.classes;
  Tensor logits({b, k});
  for (std::size_t i = 0; i < b; ++i) {
    const Tensor l = host_postprocess(dev.compute(host_preprocess(sample(x, i), host)), host);
    std::copy_n(l.data(), k, logits.data() + i * k);
  }
  emit(out, a.out, logits_csv(logits));
  err << "emulated " << b << " samples, " << dev.last_ops() << " device ops per sample\n";
  if (a.check && quantized_forward(*q, x).logits != logits) {
    err << "error: emulator output differs from the quantized reference\n";
    return kDomainError;
  }
  return kOk;
}

struct TrainArgs {
  std::string config, out1, out2, out_teacher, teacher, report_dir;
};

int run_train(const TrainArgs& a, std::ostream& out, std::ostream& err) {
  const std::string base = std::filesystem::path(a.config).parent_path().string();
  TrainJob job = load("--config", [&] { return parse_train_config(read_text_file(a.config), base.empty() ? "." : base); });
  job.train.seed = effective_seed(job.train.seed);
  job.glyphs.seed = job.train.seed;
  const DomainDataset data =
      job.dataset == "synthetic" ? make_glyph_dataset(job.glyphs) : load("dataset", [&] { return load_dataset_file(job.dataset); });
  Model teacher = a.teacher.empty() ? build_model(job.teacher, job.train.seed) : load_model(job.teacher, "--teacher", a.teacher);
  std::map<std::string, std::string> reports;
  if (a.teacher.empty()) {
    TrainConfig tc = job.train;
    tc.epochs = job.teacher_epochs;
    reports["teacher.csv"] = render_loss_csv(pretrain_teacher(teacher, data, tc));
  }
  const PipelineResult r = run_pipeline(teacher, job.student, data, job.train);
  save_state_file(r.student1, a.out1);
  save_state_file(r.student2, a.out2);
  if (!a.out_teacher.empty()) save_state_file(teacher, a.out_teacher);
  reports["student1.csv"] = render_loss_csv(r.stage1);
  reports["student2.csv"] = render_loss_csv(r.stage2);
  if (!a.report_dir.empty()) {
    std::filesystem::create_directories(a.report_dir);
    for (const auto& [name, text] : reports) write_text_file(a.report_dir + "/" + name, text);
  }
  for (const auto* rep : {&r.stage1, &r.stage2})
    for (const auto& w : rep->warnings) err << "warning: " << rep->stage << ": " << w << "\n";
  char line[200];
  std::snprintf(line, sizeof line, "model,threshold,acc\nteacher,,%.2f\nstudent1,%.2f,%.2f\nstudent2,%.2f,%.2f\n",
                evaluate_accuracy(teacher, data.target_eval), r.stage1.threshold,
                evaluate_accuracy(r.student1, data.target_eval), r.stage2.threshold,
                evaluate_accuracy(r.student2, data.target_eval));
  out << line;
  return kOk;
}

int run_gradcheck_cmd(std::uint64_t seed, double tol, std::ostream& out, std::ostream& err) {
  const auto results = run_gradcheck(effective_seed(seed), tol);
  out << render_gradcheck_csv(results);
  std::size_t failed = 0;
  for (const auto& r : results) failed += r.pass ? 0 : 1;
  if (failed) {
    err << "error: " << failed << " of " << results.size() << " gradient checks exceed " << tol << "\n";
    return kDomainError;
  }
  return kOk;
}

// table3: ResNet rows. table4: ODENet and dsODENet rows as percentages of
// ResNet. fig6: totals of all six two-/three-block models.
std::map<std::string, std::string> count_tables() {
  auto spec = [](Variant v, int blocks) {
    ModelSpec s;
    s.variant = v;
    s.num_blocks = blocks;
    return s;
  };
  const CountReport res3 = count_model(spec(Variant::resnet, 3), CountMode::paper_faithful);
  const CountReport ode3 = count_model(spec(Variant::odenet, 3), CountMode::paper_faithful);
  const CountReport ds3 = count_model(spec(Variant::dsodenet, 3), CountMode::paper_faithful);
  std::map<std::string, std::string> files;
  files["table3.csv"] = render_csv(res3, nullptr);

  std::ostringstream t4;
  t4 << "block,layer,odenet_count,odenet_percent,dsodenet_count,dsodenet_percent\n";
  const ReductionReport ro = reduction_report(ode3, res3), rd = reduction_report(ds3, res3);
  for (std::size_t i = 0; i < ro.rows.size(); ++i) {
    const auto& o = ro.rows[i];
    const auto& d = rd.rows[i];
    auto pct = [](const std::optional<double>& p) { return p ? format_percent(*p) : std::string(); };
    t4 << o.block << "," << o.layer << "," << o.count << "," << pct(o.ratio_percent) << "," << d.count << ","
       << pct(d.ratio_percent) << "\n";
  }
  files["table4.csv"] = t4.str();

  std::ostringstream f6;
  f6 << "model,blocks,params\n";
  for (int blocks : {2, 3})
    for (Variant v : {Variant::resnet, Variant::odenet, Variant::dsodenet})
      f6 << to_string(v) << "," << blocks << "," << count_model(spec(v, blocks), CountMode::paper_faithful).total << "\n";
  files["fig6.csv"] = f6.str();
  return files;
}

int run_tables(const std::string& dir, std::ostream& out) {
  const auto files = count_tables();
  if (dir.empty()) {
    for (const auto& [name, text] : files) out << "# " << name << "\n" << text;
    return kOk;
  }
  std::filesystem::create_directories(dir);
  for (const auto& [name, text] : files) write_text_file(dir + "/" + name, text);
  return kOk;
}

}  // namespace

int dispatch(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"dsODENet toolkit: parameter accounting, fixed-point inference, memory planning, emulation and training",
               "odeforge"};
  app.require_subcommand(1);
  std::function<int()> action;

  CountArgs ca;
  auto* count = app.add_subcommand("count-params", "Per-layer parameter table");
  count->add_option("--model", ca.model, "model config")->required();
  count->add_option("--baseline", ca.baseline, "baseline model config for percentages");
  count->add_option("--mode", ca.mode, "paper or built");
  count->add_flag("--csv", ca.csv, "CSV instead of text");
  count->add_option("--out", ca.out, "output file (default stdout)");
  count->callback([&] { action = [&] { return run_count(ca, out); }; });

  PlanArgs pa;
  auto* pl = app.add_subcommand("plan-memory", "BRAM/URAM placement of the quantized model");
  pl->add_option("--model", pa.model, "model config")->required();
  pl->add_option("--weights", pa.weights, "float weights (sizes do not depend on them)");
  pl->add_option("--policy", pa.policy, "paper or greedy");
  pl->add_flag("--shared", pa.shared, "pack arrays of one kind as a single stream (greedy only)");
  pl->add_option("--scheme", pa.scheme, "conv/other word widths, e.g. 20/24");
  pl->add_option("--bram", pa.bram, "BRAM instance count override");
  pl->add_option("--uram", pa.uram, "URAM instance count override");
  pl->add_flag("--csv", pa.csv, "CSV instead of text");
  pl->add_option("--out", pa.out, "output file (default stdout)");
  pl->callback([&] { action = [&] { return run_plan(pa, out, err); }; });

  QuantizeArgs qa;
  auto* qu = app.add_subcommand("quantize", "Write the device weight image");
  qu->add_option("--model", qa.model, "model config")->required();
  qu->add_option("--weights", qa.weights, "float weights")->required();
  qu->add_option("--out", qa.out, "weight image path")->required();
  qu->add_option("--scheme", qa.scheme, "conv/other word widths, e.g. 20/24");
  qu->add_flag("--no-fold", qa.no_fold, "keep batchnorm as a separate affine stage");
  qu->add_option("--eval", qa.eval, "measure quantization error on N synthetic glyphs");
  qu->add_option("--eval-input", qa.eval_input, "measure quantization error on a tensor file");
  qu->add_option("--seed", qa.seed, "glyph seed for --eval");
  qu->add_option("--report", qa.report, "error report path (default stdout)");
  qu->callback([&] { action = [&] { return run_quantize(qa, out); }; });

  InferArgs ia;
  auto* inf = app.add_subcommand("infer", "Float or fixed-point logits for a tensor file");
  inf->add_option("--model", ia.model, "model config")->required();
  inf->add_option("--weights", ia.weights, "float weights")->required();
  inf->add_option("--input", ia.input, "tensor file (C,H,W) or (B,C,H,W)")->required();
  inf->add_flag("--quantized", ia.quantized, "run the fixed-point path");
  inf->add_option("--scheme", ia.scheme, "conv/other word widths, e.g. 20/24");
  inf->add_option("--out", ia.out, "output file (default stdout)");
  inf->callback([&] { action = [&] { return run_infer(ia, out); }; });

  EmulateArgs ea;
  auto* em = app.add_subcommand("emulate", "Stream a weight image to the emulated device and run compute");
  em->add_option("--model", ea.model, "model config")->required();
  em->add_option("--weights", ea.image, "weight image")->required();
  em->add_option("--input", ea.input, "tensor file: entry feature maps, or images with --host-weights")->required();
  em->add_option("--host-weights", ea.host_weights, "float weights for the host pre/post layers");
  em->add_option("--scheme", ea.scheme, "conv/other word widths, e.g. 20/24");
  em->add_flag("--check", ea.check, "fail unless the logits equal the quantized reference");
  em->add_option("--out", ea.out, "output file (default stdout)");
  em->callback([&] { action = [&] { return run_emulate(ea, out, err); }; });

  TrainArgs ta;
  auto* tr = app.add_subcommand("train-da", "Two-stage distillation with domain alignment");
  tr->add_option("--config", ta.config, "training config")->required();
  tr->add_option("--out-student1", ta.out1, "student1 weights")->required();
  tr->add_option("--out-student2", ta.out2, "student2 weights")->required();
  tr->add_option("--out-teacher", ta.out_teacher, "write the pretrained teacher");
  tr->add_option("--teacher", ta.teacher, "pretrained teacher weights (skips pretraining)");
  tr->add_option("--report-dir", ta.report_dir, "directory for per-stage loss CSVs");
  tr->callback([&] { action = [&] { return run_train(ta, out, err); }; });

  std::uint64_t gseed = 7;
  double gtol = 1e-4;
  auto* gc = app.add_subcommand("gradcheck", "Finite-difference check of every backward pass");
  gc->add_option("--seed", gseed, "random seed");
  gc->add_option("--tolerance", gtol, "maximum relative error");
  gc->callback([&] { action = [&] { return run_gradcheck_cmd(gseed, gtol, out, err); }; });

  std::string tdir;
  auto* rt = app.add_subcommand("report-tables", "Regenerate the published parameter tables as CSV");
  rt->add_option("--out-dir", tdir, "directory for table3.csv, table4.csv, fig6.csv (default stdout)");
  rt->callback([&] { action = [&] { return run_tables(tdir, out); }; });

  std::vector<std::string> rev(args.rbegin(), args.rend());
  try {
    app.parse(rev);
  } catch (const CLI::CallForHelp&) {
    out << app.help();
    return kOk;
  } catch (const CLI::ParseError& e) {
    err << "usage error: " << e.what() << "\n";
    CLI::App* sub = nullptr;
    for (CLI::App* s : app.get_subcommands()) sub = s;
    err << (sub ? sub->help() : app.help());
    return kUsageError;
  }
  try {
    return action();
  } catch (const Error& e) {
    err << "error: " << e.what() << "\n";
    return kDomainError;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << "\n";
    return kDomainError;
  }
}

}  // namespace odeforge::cli
