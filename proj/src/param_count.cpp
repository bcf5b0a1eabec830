#include "odeforge/param_count.hpp"

#include <cstdio>
#include <sstream>

#include "odeforge/error.hpp"

namespace odeforge {

CountMode parse_count_mode(const std::string& s) {
  if (s == "paper" || s == "paper_faithful") return CountMode::paper_faithful;
  if (s == "built" || s == "as_built") return CountMode::as_built;
  throw InvalidArgument("unknown count mode '" + s + "' (expected paper or built)");
}

std::string to_string(CountMode m) { return m == CountMode::paper_faithful ? "paper_faithful" : "as_built"; }

std::uint64_t CountReport::conv_total() const {
  std::uint64_t s = 0;
  for (const auto& r : rows)
    if (r.conv) s += r.count;
  return s;
}

std::uint64_t CountReport::sum_blocks(const std::vector<std::string>& blocks) const {
  std::uint64_t s = 0;
  for (const auto& r : rows)
    for (const auto& b : blocks)
      if (r.block == b) s += r.count;
  return s;
}

std::uint64_t count_layer(const ConvSpec& spec, ConvKind kind) { return weight_count(spec, kind); }
std::uint64_t count_fc(std::uint64_t in_features, std::uint64_t out_features) {
  return in_features * out_features + out_features;
}
std::uint64_t count_batchnorm(std::uint64_t channels) { return 4 * channels; }

std::optional<std::uint64_t> paper_others_constant(const ModelSpec& spec) {
  if (spec.num_blocks != 3 || spec.base_channels != 64 || spec.classes != 10) return std::nullopt;
  return spec.variant == Variant::resnet ? 9'728 : 1'664;
}

namespace {

// K = 3 conv of n -> m inputs/outputs, standard or depthwise-separable.
std::uint64_t paper_conv(std::uint64_t n, std::uint64_t m, bool separable) {
  if (separable)
    return count_layer(ConvSpec{n, n, 3, 1, 1}, ConvKind::depthwise) +
           count_layer(ConvSpec{n, m, 1, 1, 0}, ConvKind::pointwise);
  return count_layer(ConvSpec{n, m, 3, 1, 1}, ConvKind::standard);
}

std::uint64_t unit_params(const ConvUnit& u) {
  std::uint64_t s = 0;
  for (const auto& l : u.layers())
    for (const Param* p : l.params()) s += p->value.size();
  return s;
}

CountReport count_paper(const ModelSpec& spec) {
  CountReport r;
  for (int i = 0; i < spec.num_blocks; ++i) {
    const std::uint64_t n = spec.block_channels(i);
    const bool sep = spec.block_separable(i);
    const std::uint64_t repeat = spec.variant == Variant::resnet ? spec.iterations : 1;
    const std::string block = spec.stage_name(2 * i);
    r.rows.push_back({block, "Conv1", repeat * paper_conv(n, n, sep)});
    r.rows.push_back({block, "Conv2", repeat * paper_conv(n, n, sep)});
    if (i + 1 < spec.num_blocks) {
      const bool dsep = spec.downsampling_separable(i);
      const std::string down = spec.stage_name(2 * i + 1);
      r.rows.push_back({down, "Conv", count_layer(ConvSpec{n, 2 * n, 1, 2, 0}, ConvKind::standard)});
      r.rows.push_back({down, "Conv1", paper_conv(n, 2 * n, dsep)});
      r.rows.push_back({down, "Conv2", paper_conv(2 * n, 2 * n, dsep)});
    }
  }
  if (auto others = paper_others_constant(spec)) r.rows.push_back({"Others", "", *others, false});
  return r;
}

CountReport count_built(const ModelSpec& spec) {
  const Model m(spec);
  CountReport r;
  for (std::size_t i = 0; i < m.stages().size(); ++i) {
    const std::string block = spec.stage_name(i);
    if (const auto* rs = std::get_if<ResidualStage>(&m.stages()[i])) {
      std::uint64_t c1 = 0, c2 = 0;
      for (const auto& body : rs->bodies()) {
        c1 += unit_params(body.conv1());
        c2 += unit_params(body.conv2());
      }
      r.rows.push_back({block, "Conv1", c1});
      r.rows.push_back({block, "Conv2", c2});
    } else {
      const auto& ds = std::get<Downsampling>(m.stages()[i]);
      std::uint64_t sc = 0;
      for (const Param* p : ds.shortcut().params()) sc += p->value.size();
      r.rows.push_back({block, "Conv", sc});
      r.rows.push_back({block, "Conv1", unit_params(ds.conv1())});
      r.rows.push_back({block, "Conv2", unit_params(ds.conv2())});
    }
  }
  std::uint64_t others = 0;
  for (const Param* p : m.pre_conv().params()) others += p->value.size();
  others += count_fc(m.fc().in_features(), m.fc().out_features());
  r.rows.push_back({"Others", "", others, false});
  std::uint64_t bn = 0;
  m.for_each_batchnorm([&](const BatchNormLayer& b) { bn += count_batchnorm(b.channels()); });
  r.rows.push_back({"BatchNorm", "", bn, false});
  return r;
}

}  // namespace

CountReport count_model(const ModelSpec& spec, CountMode mode) {
  spec.validate();
  CountReport r = mode == CountMode::paper_faithful ? count_paper(spec) : count_built(spec);
  r.model = to_string(spec.variant) + std::to_string(spec.num_blocks);
  r.mode = mode;
  for (const auto& row : r.rows) r.total += row.count;
  return r;
}

double reduction_percent(std::uint64_t subject, std::uint64_t baseline) {
  if (baseline == 0) throw InvalidArgument("reduction against a zero baseline");
  return 100.0 * (1.0 - static_cast<double>(subject) / static_cast<double>(baseline));
}

ReductionReport reduction_report(const CountReport& subject, const CountReport& baseline) {
  if (subject.rows.size() != baseline.rows.size())
    throw InvalidArgument("reduction report: row structures differ (" + std::to_string(subject.rows.size()) + " vs " +
                          std::to_string(baseline.rows.size()) + " rows)");
  ReductionReport out;
  auto make = [](std::string block, std::string layer, std::uint64_t s, std::uint64_t b) {
    ReductionRow row{std::move(block), std::move(layer), s, b, std::nullopt, std::nullopt};
    if (b != 0) {
      row.ratio_percent = 100.0 * static_cast<double>(s) / static_cast<double>(b);
      row.reduction_percent = 100.0 - *row.ratio_percent;
    }
    return row;
  };
  for (std::size_t i = 0; i < subject.rows.size(); ++i) {
    const auto& s = subject.rows[i];
    const auto& b = baseline.rows[i];
    if (s.layer != b.layer || s.conv != b.conv)
      throw InvalidArgument("reduction report: row " + std::to_string(i) + " (" + s.block + " " + s.layer +
                            ") does not line up with baseline row (" + b.block + " " + b.layer + ")");
    out.rows.push_back(make(s.block, s.layer, s.count, b.count));
  }
  out.rows.push_back(make("Total", "", subject.total, baseline.total));
  return out;
}

std::string format_percent(double p) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.1f", p);
  return buf;
}

std::string format_count(std::uint64_t n) {
  std::string digits = std::to_string(n), out;
  for (std::size_t i = 0; i < digits.size(); ++i) {
    if (i && (digits.size() - i) % 3 == 0) out += ',';
    out += digits[i];
  }
  return out;
}

std::string format_megabits(std::uint64_t count, int word_bits) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.1fMb", static_cast<double>(count) * word_bits / 1e6);
  return buf;
}

std::string render_table(const CountReport& report, const CountReport* baseline) {
  std::optional<ReductionReport> red;
  if (baseline) red = reduction_report(report, *baseline);
  std::ostringstream o;
  char line[160];
  std::snprintf(line, sizeof line, "%-16s %-6s %12s%s\n", "Block", "Layer", report.model.c_str(),
                baseline ? "  (% of baseline)" : "");
  o << line;
  auto pct = [](const std::optional<double>& p) { return p ? " (" + format_percent(*p) + "%)" : std::string(); };
  for (std::size_t i = 0; i < report.rows.size(); ++i) {
    const auto& r = report.rows[i];
    std::snprintf(line, sizeof line, "%-16s %-6s %12s", r.block.c_str(), r.layer.c_str(), format_count(r.count).c_str());
    o << line << (red && r.conv ? pct(red->rows[i].ratio_percent) : "") << "\n";
  }
  o << "Total " << format_count(report.total);
  if (red) o << pct(red->rows.back().ratio_percent);
  o << "\n";
  return o.str();
}

std::string render_csv(const CountReport& report, const CountReport* baseline) {
  std::optional<ReductionReport> red;
  if (baseline) red = reduction_report(report, *baseline);
  std::ostringstream o;
  o << "block,layer,count,baseline_count,percent\n";
  auto emit = [&](const std::string& block, const std::string& layer, std::uint64_t count, std::size_t i) {
    o << block << "," << layer << "," << count << ",";
    if (red) {
      const auto& rr = red->rows[i];
      o << rr.baseline << ",";
      if (rr.ratio_percent) o << format_percent(*rr.ratio_percent);
    } else {
      o << ",";
    }
    o << "\n";
  };
  for (std::size_t i = 0; i < report.rows.size(); ++i)
    emit(report.rows[i].block, report.rows[i].layer, report.rows[i].count, i);
  emit("Total", "", report.total, report.rows.size());
  return o.str();
}

}  // namespace odeforge
