#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "odeforge/quantizer.hpp"

namespace odeforge {

enum class MemoryKind { bram, uram };
std::string to_string(MemoryKind k);

struct DeviceSpec {
  std::uint64_t bram_instance_bits = 36'864;
  std::uint64_t uram_instance_bits = 294'912;
  std::uint64_t bram_instances = 312;
  std::uint64_t uram_instances = 96;

  void validate() const;
  std::uint64_t instance_bits(MemoryKind k) const { return k == MemoryKind::bram ? bram_instance_bits : uram_instance_bits; }
  std::uint64_t instances(MemoryKind k) const { return k == MemoryKind::bram ? bram_instances : uram_instances; }
};

enum class PlacementPolicy { paper, greedy_waste_min };
PlacementPolicy parse_policy(const std::string& s);
std::string to_string(PlacementPolicy p);

// One on-chip array: a parameter array or a feature-map buffer.
struct MemoryArray {
  std::string id;
  std::string stage;  // owning stage name, e.g. "odeblock3"
  std::uint64_t bits = 0;
  bool uram_pinned = false;  // URAM under PlacementPolicy::paper
};

// Parameter arrays (count x word bits) in declaration order, followed by
// three (N+1) x H x W activation buffers per ODEBlock.
std::vector<MemoryArray> collect_arrays(const QModel& q);

struct Assignment {
  std::string id;
  MemoryKind kind = MemoryKind::bram;
  std::uint64_t bits = 0;
  std::uint64_t instances = 0;  // 0 under shared packing
  std::uint64_t waste = 0;      // 0 under shared packing
};

struct KindTotals {
  std::uint64_t instances = 0;
  std::uint64_t packed_bits = 0;
  std::uint64_t waste_bits = 0;
};

struct MemoryPlan {
  std::vector<Assignment> arrays;
  KindTotals bram, uram;
  bool shared_packing = false;
  bool fits = true;
  std::uint64_t overflow_bits = 0;  // bits of the instances beyond capacity

  const KindTotals& totals(MemoryKind k) const { return k == MemoryKind::bram ? bram : uram; }
  std::uint64_t total_waste() const { return bram.waste_bits + uram.waste_bits; }
};

std::uint64_t instances_for(std::uint64_t bits, std::uint64_t instance_bits);

// Shared packing lets arrays of one memory kind share instances; only the
// greedy policy supports it.
MemoryPlan plan(const std::vector<MemoryArray>& arrays, const DeviceSpec& device, PlacementPolicy policy,
                bool shared_packing = false);
MemoryPlan plan(const QModel& q, const DeviceSpec& device, PlacementPolicy policy, bool shared_packing = false);

struct FitReport {
  bool fits = true;
  std::uint64_t bram_used = 0;
  std::uint64_t uram_used = 0;
  double bram_utilization = 0.0;  // percent of available instances
  double uram_utilization = 0.0;
};

// Recomputes the totals from the per-array assignments.
FitReport verify_fit(const MemoryPlan& plan, const DeviceSpec& device);

std::string render_plan_csv(const MemoryPlan& plan);
std::string render_plan_text(const MemoryPlan& plan, const DeviceSpec& device);

}  // namespace odeforge
