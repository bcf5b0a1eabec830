#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "odeforge/layers.hpp"
#include "odeforge/model.hpp"

namespace odeforge {

enum class CountMode {
  // Conv weights only, AddTime channel excluded, ResNet stages multiplied by
  // C. Reproduces the published parameter tables.
  paper_faithful,
  // Every array of the instantiated graph, including biases, the AddTime
  // input channel, batchnorm and the pre/post layers.
  as_built,
};

CountMode parse_count_mode(const std::string& s);
std::string to_string(CountMode m);

struct CountRow {
  std::string block;
  std::string layer;
  std::uint64_t count = 0;
  bool conv = true;  // false for the "Others" / "BatchNorm" rows
};

struct CountReport {
  std::string model;
  CountMode mode = CountMode::paper_faithful;
  std::vector<CountRow> rows;
  std::uint64_t total = 0;

  std::uint64_t conv_total() const;
  // Sum of the rows whose block name starts with one of `blocks`.
  std::uint64_t sum_blocks(const std::vector<std::string>& blocks) const;
};

std::uint64_t count_layer(const ConvSpec& spec, ConvKind kind);
std::uint64_t count_fc(std::uint64_t in_features, std::uint64_t out_features);
std::uint64_t count_batchnorm(std::uint64_t channels);

// Published "Others" row for the three-block digit configuration (base 64,
// 10 classes): 9,728 for ResNet, 1,664 for ODENet/dsODENet. Its composition
// is not documented, so it is carried as a constant.
std::optional<std::uint64_t> paper_others_constant(const ModelSpec& spec);

CountReport count_model(const ModelSpec& spec, CountMode mode);

struct ReductionRow {
  std::string block;
  std::string layer;
  std::uint64_t count = 0;
  std::uint64_t baseline = 0;
  std::optional<double> ratio_percent;      // 100 * count / baseline
  std::optional<double> reduction_percent;  // 100 * (1 - count / baseline)
};

struct ReductionReport {
  std::vector<ReductionRow> rows;  // last row is the total
};

// Row-by-row comparison; rows are matched by position and layer name.
// Zero baseline rows are flagged (empty optionals), never divided.
ReductionReport reduction_report(const CountReport& subject, const CountReport& baseline);

double reduction_percent(std::uint64_t subject, std::uint64_t baseline);
// One decimal, e.g. "54.2".
std::string format_percent(double p);
// Thousands separators, e.g. "2,695,168".
std::string format_count(std::uint64_t n);
// count * word_bits / 10^6, one decimal, e.g. "19.1Mb".
std::string format_megabits(std::uint64_t count, int word_bits);

// Text table in the published layout; ends with "Total <n> (<p>%)" when a
// baseline is given.
std::string render_table(const CountReport& report, const CountReport* baseline);
// block,layer,count,baseline_count,percent
std::string render_csv(const CountReport& report, const CountReport* baseline);

}  // namespace odeforge
