#include "odeforge/memory_planner.hpp"

#include <algorithm>
#include <cstdio>
#include <numeric>
#include <sstream>

#include "odeforge/error.hpp"

namespace odeforge {

std::string to_string(MemoryKind k) { return k == MemoryKind::bram ? "BRAM" : "URAM"; }

void DeviceSpec::validate() const {
  if (bram_instance_bits == 0 || uram_instance_bits == 0) throw InvalidArgument("device instance sizes must be positive");
}

PlacementPolicy parse_policy(const std::string& s) {
  if (s == "paper") return PlacementPolicy::paper;
  if (s == "greedy" || s == "greedy_waste_min") return PlacementPolicy::greedy_waste_min;
  throw InvalidArgument("unknown placement policy '" + s + "' (expected paper or greedy)");
}

std::string to_string(PlacementPolicy p) { return p == PlacementPolicy::paper ? "paper" : "greedy_waste_min"; }

std::uint64_t instances_for(std::uint64_t bits, std::uint64_t instance_bits) {
  return (bits + instance_bits - 1) / instance_bits;
}

std::vector<MemoryArray> collect_arrays(const QModel& q) {
  std::vector<MemoryArray> out;
  auto add = [&](const std::string& stage, const std::string& id, const QTensor& t, bool pinned) {
    out.push_back({id, stage, static_cast<std::uint64_t>(t.size()) * static_cast<std::uint64_t>(t.fmt.total_bits), pinned});
  };
  // pin(kind) decides URAM placement of a conv weight array under the pinned
  // policy; everything else (biases, affine params, step words) stays in BRAM.
  auto convs = [&](const std::string& stage, const std::vector<QConv>& unit, auto pin) {
    for (const auto& c : unit) {
      add(stage, c.name + ".weight", c.weight, pin(c.kind));
      if (c.bias) add(stage, c.name + ".bias", *c.bias, false);
    }
  };
  auto aff = [&](const std::string& stage, const std::optional<QAffine>& a) {
    if (!a) return;
    add(stage, a->name + ".scale", a->scale, false);
    add(stage, a->name + ".shift", a->shift, false);
  };
  const auto shapes = q.spec.stage_shapes();
  const std::size_t act_bits = static_cast<std::size_t>(q.scheme.act_fmt().total_bits);
  int block = 0, down = 0;
  for (std::size_t si = 0; si < q.stages.size(); ++si) {
    if (const auto* rs = std::get_if<QResidualStage>(&q.stages[si])) {
      ++block;
      const bool third = block == 3;
      auto pin = [&](ConvKind k) { return third && k == ConvKind::pointwise; };
      add(rs->name, rs->name + ".h", rs->h, false);
      for (const auto& b : rs->bodies) {
        convs(rs->name, b.conv1, pin);
        aff(rs->name, b.bn1);
        convs(rs->name, b.conv2, pin);
        aff(rs->name, b.bn2);
      }
      if (!rs->bodies.empty() && rs->bodies[0].with_time) {
        const Shape& s = shapes[si];
        const std::uint64_t bits = (s[0] + 1) * s[1] * s[2] * act_bits;
        for (int i = 0; i < 3; ++i)
          out.push_back({rs->name + ".fmap" + std::to_string(i), rs->name, bits, false});
      }
    } else {
      ++down;
      const auto& d = std::get<QDownsampling>(q.stages[si]);
      auto pin_main = [&](ConvKind k) {
        if (down == 1) return k == ConvKind::standard;
        if (down == 2) return k == ConvKind::depthwise || k == ConvKind::pointwise;
        return false;
      };
      convs(d.name, d.conv1, pin_main);
      aff(d.name, d.bn1);
      convs(d.name, d.conv2, pin_main);
      aff(d.name, d.bn2);
      convs(d.name, {d.shortcut}, [&](ConvKind k) { return down == 1 && k == ConvKind::standard; });
    }
  }
  return out;
}

namespace {

std::size_t idx(MemoryKind k) { return k == MemoryKind::bram ? 0 : 1; }

void finish(MemoryPlan& p, const DeviceSpec& device) {
  const FitReport f = verify_fit(p, device);
  for (MemoryKind k : {MemoryKind::bram, MemoryKind::uram}) {
    KindTotals& t = k == MemoryKind::bram ? p.bram : p.uram;
    t = {};
    for (const auto& a : p.arrays)
      if (a.kind == k) t.packed_bits += a.bits;
    t.instances = k == MemoryKind::bram ? f.bram_used : f.uram_used;
    t.waste_bits = t.instances * device.instance_bits(k) - t.packed_bits;
    if (t.instances > device.instances(k)) p.overflow_bits += (t.instances - device.instances(k)) * device.instance_bits(k);
  }
  p.fits = p.overflow_bits == 0;
}

Assignment whole(const MemoryArray& a, MemoryKind k, const DeviceSpec& d) {
  const std::uint64_t n = instances_for(a.bits, d.instance_bits(k));
  return {a.id, k, a.bits, n, n * d.instance_bits(k) - a.bits};
}

}  // namespace

MemoryPlan plan(const std::vector<MemoryArray>& arrays, const DeviceSpec& device, PlacementPolicy policy,
                bool shared_packing) {
  device.validate();
  if (shared_packing && policy != PlacementPolicy::greedy_waste_min)
    throw InvalidArgument("shared packing is only available with the greedy policy");
  MemoryPlan p;
  p.shared_packing = shared_packing;
  if (policy == PlacementPolicy::paper) {
    for (const auto& a : arrays) p.arrays.push_back(whole(a, a.uram_pinned ? MemoryKind::uram : MemoryKind::bram, device));
    finish(p, device);
    return p;
  }

  // Phase 1: largest first, each array to its least-waste kind (ties to BRAM).
  std::vector<std::size_t> order(arrays.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return arrays[a].bits > arrays[b].bits; });
  auto waste_in = [&](const MemoryArray& a, MemoryKind k) {
    return static_cast<std::int64_t>(whole(a, k, device).waste);
  };
  std::vector<MemoryKind> kind(arrays.size(), MemoryKind::bram);
  std::uint64_t used[2] = {0, 0};
  for (std::size_t i : order) {
    const MemoryArray& a = arrays[i];
    kind[i] = waste_in(a, MemoryKind::uram) < waste_in(a, MemoryKind::bram) ? MemoryKind::uram : MemoryKind::bram;
    used[idx(kind[i])] += instances_for(a.bits, device.instance_bits(kind[i]));
  }

  // Phase 2: while a kind is over capacity, move the array whose move adds
  // the least waste and still fits the other kind (larger arrays on ties).
  for (MemoryKind from : {MemoryKind::bram, MemoryKind::uram, MemoryKind::bram}) {
    const MemoryKind to = from == MemoryKind::bram ? MemoryKind::uram : MemoryKind::bram;
    while (used[idx(from)] > device.instances(from)) {
      std::size_t best = arrays.size();
      std::int64_t best_cost = 0;
      for (std::size_t i : order) {
        if (kind[i] != from) continue;
        const std::uint64_t need = instances_for(arrays[i].bits, device.instance_bits(to));
        if (used[idx(to)] + need > device.instances(to)) continue;
        const std::int64_t cost = waste_in(arrays[i], to) - waste_in(arrays[i], from);
        if (best == arrays.size() || cost < best_cost) {
          best = i;
          best_cost = cost;
        }
      }
      if (best == arrays.size()) break;  // nothing movable: reported as overflow
      used[idx(from)] -= instances_for(arrays[best].bits, device.instance_bits(from));
      used[idx(to)] += instances_for(arrays[best].bits, device.instance_bits(to));
      kind[best] = to;
    }
  }

  for (std::size_t i = 0; i < arrays.size(); ++i)
    p.arrays.push_back(shared_packing ? Assignment{arrays[i].id, kind[i], arrays[i].bits, 0, 0}
                                      : whole(arrays[i], kind[i], device));
  finish(p, device);
  return p;
}

MemoryPlan plan(const QModel& q, const DeviceSpec& device, PlacementPolicy policy, bool shared_packing) {
  return plan(collect_arrays(q), device, policy, shared_packing);
}

FitReport verify_fit(const MemoryPlan& plan, const DeviceSpec& device) {
  FitReport f;
  std::uint64_t bits[2] = {0, 0}, inst[2] = {0, 0};
  for (const auto& a : plan.arrays) {
    const std::size_t j = idx(a.kind);
    bits[j] += a.bits;
    inst[j] += plan.shared_packing ? 0 : instances_for(a.bits, device.instance_bits(a.kind));
  }
  if (plan.shared_packing) {
    inst[0] = instances_for(bits[0], device.bram_instance_bits);
    inst[1] = instances_for(bits[1], device.uram_instance_bits);
  }
  f.bram_used = inst[0];
  f.uram_used = inst[1];
  f.fits = inst[0] <= device.bram_instances && inst[1] <= device.uram_instances;
  if (device.bram_instances) f.bram_utilization = 100.0 * static_cast<double>(inst[0]) / static_cast<double>(device.bram_instances);
  if (device.uram_instances) f.uram_utilization = 100.0 * static_cast<double>(inst[1]) / static_cast<double>(device.uram_instances);
  return f;
}

std::string render_plan_csv(const MemoryPlan& plan) {
  std::ostringstream o;
  o << "array,memory,bits,instances,waste_bits\n";
  for (const auto& a : plan.arrays)
    o << a.id << "," << to_string(a.kind) << "," << a.bits << "," << a.instances << "," << a.waste << "\n";
  return o.str();
}

std::string render_plan_text(const MemoryPlan& plan, const DeviceSpec& device) {
  const FitReport f = verify_fit(plan, device);
  std::ostringstream o;
  char line[200];
  std::snprintf(line, sizeof line, "%-40s %-5s %12s %9s %12s\n", "Array", "Mem", "Bits", "Instances", "Waste");
  o << line;
  for (const auto& a : plan.arrays) {
    std::snprintf(line, sizeof line, "%-40s %-5s %12llu %9llu %12llu\n", a.id.c_str(), to_string(a.kind).c_str(),
                  static_cast<unsigned long long>(a.bits), static_cast<unsigned long long>(a.instances),
                  static_cast<unsigned long long>(a.waste));
    o << line;
  }
  std::snprintf(line, sizeof line, "BRAM %llu / %llu (%.1f%%)  URAM %llu / %llu (%.1f%%)  fits=%s",
                static_cast<unsigned long long>(f.bram_used), static_cast<unsigned long long>(device.bram_instances),
                f.bram_utilization, static_cast<unsigned long long>(f.uram_used),
                static_cast<unsigned long long>(device.uram_instances), f.uram_utilization, f.fits ? "true" : "false");
  o << line;
  if (!plan.fits) o << "  overflow=" << plan.overflow_bits << " bits";
  o << "\n";
  return o.str();
}

}  // namespace odeforge
