#include <doctest.h>

#include "odeforge/error.hpp"
#include "odeforge/param_count.hpp"

using namespace odeforge;

namespace {

ModelSpec spec_of(Variant v, int blocks) {
  ModelSpec s;
  s.variant = v;
  s.num_blocks = blocks;
  return s;
}

std::uint64_t row(const CountReport& r, const std::string& block, const std::string& layer) {
  for (const auto& x : r.rows)
    if (x.block == block && x.layer == layer) return x.count;
  FAIL("missing row " << block << " " << layer);
  return 0;
}

}  // namespace

TEST_CASE("count_layer examples") {
  CHECK(count_layer(ConvSpec{64, 128, 3, 1, 1}, ConvKind::standard) == 73'728);
  CHECK(count_layer(ConvSpec{64, 64, 3, 1, 1}, ConvKind::depthwise) == 576);
  CHECK(count_layer(ConvSpec{64, 64, 1, 1, 0}, ConvKind::pointwise) == 4'096);
  CHECK(count_layer(ConvSpec{64, 128, 1, 2, 0}, ConvKind::standard) == 8'192);
  CHECK(count_fc(256, 10) == 2'570);
}

TEST_CASE("three-block count tables") {
  const auto ode = count_model(spec_of(Variant::odenet, 3), CountMode::paper_faithful);
  const auto ds = count_model(spec_of(Variant::dsodenet, 3), CountMode::paper_faithful);
  const auto res = count_model(spec_of(Variant::resnet, 3), CountMode::paper_faithful);

  CHECK(row(ode, "ODEBlock1", "Conv1") == 36'864);
  CHECK(row(ds, "ODEBlock1", "Conv1") == 4'672);
  CHECK(row(ds, "Downsampling1", "Conv") == 8'192);
  CHECK(row(ds, "Downsampling1", "Conv1") == 73'728);
  CHECK(row(ds, "Downsampling1", "Conv2") == 147'456);
  CHECK(row(ds, "ODEBlock2", "Conv1") == 17'536);
  CHECK(row(ode, "ODEBlock2", "Conv1") == 147'456);
  CHECK(row(ds, "Downsampling2", "Conv") == 32'768);
  CHECK(row(ds, "Downsampling2", "Conv1") == 33'920);
  CHECK(row(ode, "Downsampling2", "Conv1") == 294'912);
  CHECK(row(ds, "Downsampling2", "Conv2") == 67'840);
  CHECK(row(ds, "ODEBlock3", "Conv1") == 67'840);
  CHECK(row(ode, "ODEBlock3", "Conv2") == 589'824);
  CHECK(row(res, "Building block1", "Conv1") == 368'640);

  CHECK(ode.conv_total() == 2'695'168);
  CHECK(ode.total == 2'696'832);
  CHECK(ds.conv_total() == 544'000);
  CHECK(ds.total == 545'664);
  CHECK(res.conv_total() == 16'629'760);
  CHECK(res.total == 16'639'488);

  CHECK(format_percent(100.0 * ode.total / res.total) == "16.2");
  CHECK(format_percent(100.0 * ds.total / res.total) == "3.3");
  CHECK(format_percent(reduction_percent(ds.total, res.total)) == "96.7");
}

TEST_CASE("two-block totals") {
  const auto ode = count_model(spec_of(Variant::odenet, 2), CountMode::paper_faithful);
  const auto ds = count_model(spec_of(Variant::dsodenet, 2), CountMode::paper_faithful);
  CHECK(ode.total == 598'016);
  CHECK(ds.total == 273'792);
  // downsampling stays standard in the two-block dsODENet
  CHECK(row(ds, "Downsampling1", "Conv1") == 73'728);
  CHECK(format_percent(reduction_percent(ds.total, ode.total)) == "54.2");
  // offloaded pair of the three-block topology
  const auto ode3 = count_model(spec_of(Variant::odenet, 3), CountMode::paper_faithful);
  const auto ds3 = count_model(spec_of(Variant::dsodenet, 3), CountMode::paper_faithful);
  const std::vector<std::string> pl{"Downsampling2", "ODEBlock3"};
  CHECK(ode3.sum_blocks(pl) == 917'504 + 1'179'648);
  CHECK(ds3.sum_blocks(pl) == 134'528 + 135'680);
}

TEST_CASE("bit sizes at 32-bit words") {
  CHECK(format_megabits(598'016, 32) == "19.1Mb");
  CHECK(format_megabits(273'792, 32) == "8.8Mb");
  CHECK(format_megabits(2'695'168, 32) == "86.2Mb");
  CHECK(format_megabits(544'000, 32) == "17.4Mb");
  CHECK(format_percent(100.0 * 273'792 / 598'016) == "45.8");
  CHECK(format_percent(reduction_percent(273'792, 598'016)) == "54.2");
}

TEST_CASE("two-block variants have no Others row") {
  for (Variant v : {Variant::odenet, Variant::dsodenet, Variant::resnet}) {
    const auto r = count_model(spec_of(v, 2), CountMode::paper_faithful);
    CHECK(r.conv_total() == r.total);
    CHECK(r.rows.size() == 7);
  }
  const auto ode = count_model(spec_of(Variant::odenet, 2), CountMode::paper_faithful);
  const auto ds = count_model(spec_of(Variant::dsodenet, 2), CountMode::paper_faithful);
  CHECK(ode.total == 2 * 36'864 + 8'192 + 73'728 + 147'456 + 2 * 147'456);
  CHECK(ds.total < ode.total);
}

TEST_CASE("as-built counts every instantiated array") {
  for (Variant v : {Variant::odenet, Variant::dsodenet, Variant::resnet}) {
    for (int blocks : {2, 3}) {
      ModelSpec s = spec_of(v, blocks);
      s.base_channels = 8;
      s.iterations = 2;
      const auto paper = count_model(s, CountMode::paper_faithful);
      const auto built = count_model(s, CountMode::as_built);
      CHECK(built.conv_total() >= paper.conv_total());

      const Model m(s);
      std::uint64_t all = 0;
      for (const Param* p : m.parameters()) all += p->value.size();
      std::uint64_t running = 0;
      m.for_each_batchnorm([&](const BatchNormLayer& b) { running += 2 * b.channels(); });
      CHECK(built.total == all + running);
    }
  }
}

TEST_CASE("reduction report") {
  const auto ode = count_model(spec_of(Variant::odenet, 3), CountMode::paper_faithful);
  const auto ds = count_model(spec_of(Variant::dsodenet, 3), CountMode::paper_faithful);
  const auto r = reduction_report(ds, ode);
  REQUIRE(r.rows.size() == ds.rows.size() + 1);
  CHECK(format_percent(*r.rows[0].ratio_percent) == "12.7");
  CHECK(format_percent(*r.rows.back().ratio_percent) == "20.2");
  CHECK(format_percent(*r.rows.back().reduction_percent) == "79.8");

  CountReport a, b;
  a.rows = {{"X", "Conv", 5, true}};
  b.rows = {{"X", "Conv", 0, true}};
  a.total = 5;
  const auto z = reduction_report(a, b);
  CHECK_FALSE(z.rows[0].ratio_percent.has_value());
  CHECK_FALSE(z.rows[1].reduction_percent.has_value());
  CHECK_THROWS_AS(reduction_percent(1, 0), InvalidArgument);

  const auto two = count_model(spec_of(Variant::odenet, 2), CountMode::paper_faithful);
  CHECK_THROWS_AS(reduction_report(two, ode), InvalidArgument);
}

TEST_CASE("rendering") {
  CHECK(format_count(0) == "0");
  CHECK(format_count(999) == "999");
  CHECK(format_count(2'695'168) == "2,695,168");
  const auto ds = count_model(spec_of(Variant::dsodenet, 3), CountMode::paper_faithful);
  const auto res = count_model(spec_of(Variant::resnet, 3), CountMode::paper_faithful);
  const std::string table = render_table(ds, &res);
  CHECK(table.find("Total 545,664 (3.3%)") != std::string::npos);
  const std::string csv = render_csv(ds, &res);
  CHECK(csv.rfind("block,layer,count,baseline_count,percent\n", 0) == 0);
  CHECK(csv.find("Total,,545664,16639488,3.3\n") != std::string::npos);
  CHECK(parse_count_mode("paper") == CountMode::paper_faithful);
  CHECK_THROWS_AS(parse_count_mode("nope"), InvalidArgument);
}
