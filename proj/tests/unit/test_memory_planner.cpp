#include <doctest.h>

#include <random>

#include "odeforge/error.hpp"
#include "odeforge/memory_planner.hpp"
#include "odeforge/param_count.hpp"

using namespace odeforge;

namespace {

QModel digit_model(Variant v, int blocks) {
  ModelSpec s;
  s.variant = v;
  s.num_blocks = blocks;
  return quantize_model(Model(s));
}

void check_conservation(const MemoryPlan& p, const DeviceSpec& d) {
  for (MemoryKind k : {MemoryKind::bram, MemoryKind::uram}) {
    const KindTotals& t = p.totals(k);
    std::uint64_t packed = 0, waste = 0;
    for (const auto& a : p.arrays)
      if (a.kind == k) {
        packed += a.bits;
        waste += a.waste;
      }
    CHECK(t.packed_bits == packed);
    if (!p.shared_packing) CHECK(t.waste_bits == waste);
    CHECK(t.packed_bits + t.waste_bits == t.instances * d.instance_bits(k));
  }
}

}  // namespace

TEST_CASE("single-array examples") {
  const DeviceSpec d;
  MemoryPlan p = plan({{"a", "s", 73'728 * 20, true}}, d, PlacementPolicy::paper);
  REQUIRE(p.arrays.size() == 1);
  CHECK(p.arrays[0].kind == MemoryKind::uram);
  CHECK(p.arrays[0].instances == 5);
  CHECK(p.arrays[0].waste == 0);

  p = plan({{"b", "s", 4'672 * 20, false}}, d, PlacementPolicy::paper);
  CHECK(p.arrays[0].kind == MemoryKind::bram);
  CHECK(p.arrays[0].instances == 3);
  CHECK(p.arrays[0].waste == 17'152);

  p = plan(std::vector<MemoryArray>{}, d, PlacementPolicy::greedy_waste_min);
  CHECK(p.arrays.empty());
  CHECK(p.fits);
  const FitReport f = verify_fit(p, d);
  CHECK(f.bram_utilization == 0.0);
  CHECK(f.uram_utilization == 0.0);
}

TEST_CASE("utilization percentages") {
  const DeviceSpec d;
  std::vector<MemoryArray> arrays;
  for (int i = 0; i < 92; ++i) arrays.push_back({"u" + std::to_string(i), "s", d.uram_instance_bits, true});
  const FitReport f = verify_fit(plan(arrays, d, PlacementPolicy::paper), d);
  CHECK(f.uram_used == 92);
  CHECK(format_percent(f.uram_utilization) == "95.8");
}

TEST_CASE("device defaults cover the stated totals") {
  const DeviceSpec d;
  CHECK(d.bram_instances * d.bram_instance_bits >= 11'000'000);
  CHECK(d.uram_instances * d.uram_instance_bits >= 27'000'000);
}

TEST_CASE("pinned placement of the three-block digit dsODENet") {
  const DeviceSpec d;
  const QModel q = digit_model(Variant::dsodenet, 3);
  const auto arrays = collect_arrays(q);
  auto find = [&](const std::string& id) -> const MemoryArray& {
    for (const auto& a : arrays)
      if (a.id == id) return a;
    FAIL("missing array " << id);
    return arrays.front();
  };
  CHECK(find("downsampling1.conv1.weight").uram_pinned);
  CHECK(find("downsampling1.shortcut.weight").uram_pinned);
  CHECK(find("downsampling2.conv1.depthwise.weight").uram_pinned);
  CHECK(find("downsampling2.conv2.pointwise.weight").uram_pinned);
  CHECK_FALSE(find("downsampling2.shortcut.weight").uram_pinned);
  CHECK(find("odeblock3.conv1.pointwise.weight").uram_pinned);
  CHECK_FALSE(find("odeblock3.conv1.depthwise.weight").uram_pinned);
  CHECK_FALSE(find("odeblock1.conv1.pointwise.weight").uram_pinned);
  // word widths: 20 for conv weights, 24 for the rest
  CHECK(find("downsampling1.conv1.weight").bits == 73'728u * 20);
  CHECK(find("downsampling1.shortcut.bias").bits == 128u * 24);
  CHECK(find("odeblock1.fmap0").bits == 65u * 8 * 8 * 24);

  const MemoryPlan p = plan(q, d, PlacementPolicy::paper);
  CHECK(p.fits);
  check_conservation(p, d);

  // one-pass oracle: instance totals recomputed straight from the array list
  std::uint64_t bram = 0, uram = 0, bits = 0;
  for (const auto& a : arrays) {
    bits += a.bits;
    (a.uram_pinned ? uram : bram) += (a.bits + (a.uram_pinned ? d.uram_instance_bits : d.bram_instance_bits) - 1) /
                                     (a.uram_pinned ? d.uram_instance_bits : d.bram_instance_bits);
  }
  const FitReport f = verify_fit(p, d);
  CHECK(f.bram_used == bram);
  CHECK(f.uram_used == uram);
  CHECK(p.bram.packed_bits + p.uram.packed_bits == bits);
  CHECK(f.fits);
}

TEST_CASE("greedy never wastes more than pinned placement") {
  const DeviceSpec big{36'864, 294'912, 1'000'000, 1'000'000};
  for (Variant v : {Variant::odenet, Variant::dsodenet}) {
    for (int blocks : {2, 3}) {
      const QModel q = digit_model(v, blocks);
      for (bool unbounded : {false, true}) {
        const DeviceSpec d = unbounded ? big : DeviceSpec{};
        const MemoryPlan paper = plan(q, d, PlacementPolicy::paper);
        const MemoryPlan greedy = plan(q, d, PlacementPolicy::greedy_waste_min);
        check_conservation(paper, d);
        check_conservation(greedy, d);
        // ODENet3 at 20 bits exceeds the whole default device; waste of two
        // overflowing plans is not comparable
        if (paper.fits) CHECK(greedy.total_waste() <= paper.total_waste());
        if (unbounded) CHECK(paper.fits);
        const MemoryPlan shared = plan(q, d, PlacementPolicy::greedy_waste_min, true);
        check_conservation(shared, d);
        CHECK(shared.total_waste() <= greedy.total_waste());
      }
    }
  }
}

TEST_CASE("greedy tie goes to BRAM and respects capacity") {
  DeviceSpec d;
  // exactly one instance of either kind wastes nothing in neither: pick by waste
  MemoryPlan p = plan({{"x", "s", 36'864, false}}, d, PlacementPolicy::greedy_waste_min);
  CHECK(p.arrays[0].kind == MemoryKind::bram);
  p = plan({{"y", "s", 294'912, false}}, d, PlacementPolicy::greedy_waste_min);
  CHECK(p.arrays[0].kind == MemoryKind::bram);  // 8 BRAM vs 1 URAM, both zero waste
  d.bram_instances = 4;
  p = plan({{"y", "s", 294'912, false}}, d, PlacementPolicy::greedy_waste_min);
  CHECK(p.arrays[0].kind == MemoryKind::uram);
  CHECK(p.fits);
}

TEST_CASE("capacity overflow is reported") {
  DeviceSpec d;
  d.uram_instances = 2;
  const MemoryPlan p = plan({{"a", "s", 5 * d.uram_instance_bits, true}}, d, PlacementPolicy::paper);
  CHECK_FALSE(p.fits);
  CHECK(p.overflow_bits == 3 * d.uram_instance_bits);
  CHECK_FALSE(verify_fit(p, d).fits);
  CHECK_THROWS_AS(plan(std::vector<MemoryArray>{}, d, PlacementPolicy::paper, true), InvalidArgument);
}

TEST_CASE("adding an array never decreases the capacity used") {
  std::mt19937_64 rng(3);
  // kept within the default device so capacity repair never kicks in
  std::uniform_int_distribution<std::uint64_t> bits(1, 150'000);
  const DeviceSpec d;
  for (PlacementPolicy pol : {PlacementPolicy::paper, PlacementPolicy::greedy_waste_min}) {
    for (bool shared : {false, true}) {
      if (shared && pol == PlacementPolicy::paper) continue;
      std::vector<MemoryArray> arrays;
      std::uint64_t prev = 0;
      for (int i = 0; i < 60; ++i) {
        arrays.push_back({"a" + std::to_string(i), "s", bits(rng), (rng() & 1) != 0});
        const MemoryPlan p = plan(arrays, d, pol, shared);
        check_conservation(p, d);
        CHECK(p.fits);
        const std::uint64_t used = p.bram.instances * d.bram_instance_bits + p.uram.instances * d.uram_instance_bits;
        CHECK(used >= prev);
        prev = used;
      }
    }
  }
}

TEST_CASE("policy parsing and rendering") {
  CHECK(parse_policy("paper") == PlacementPolicy::paper);
  CHECK(parse_policy("greedy") == PlacementPolicy::greedy_waste_min);
  CHECK_THROWS_AS(parse_policy("best"), InvalidArgument);
  const DeviceSpec d;
  const MemoryPlan p = plan({{"a", "s", 100, false}}, d, PlacementPolicy::paper);
  CHECK(render_plan_csv(p) == "array,memory,bits,instances,waste_bits\na,BRAM,100,1,36764\n");
  CHECK(render_plan_text(p, d).find("fits=true") != std::string::npos);
}
