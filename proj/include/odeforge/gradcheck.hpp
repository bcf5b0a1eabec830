#pragma once

#include <cstdint>
#include <string>
#include <vector>

namespace odeforge {

struct GradCheckResult {
  std::string name;  // e.g. "conv.standard/weight"
  double rel_error = 0.0;
  bool pass = false;
};

// Central finite differences against every backward pass: each layer kind,
// the unrolled ODEBlock for C = 1, 2, 3, a downsampling block, the losses
// and the distillation objective on a toy model. The error is
// max|analytic - numeric| / max|numeric|.
std::vector<GradCheckResult> run_gradcheck(std::uint64_t seed, double tolerance = 1e-4);

// Header: check,rel_error,pass
std::string render_gradcheck_csv(const std::vector<GradCheckResult>& results);

}  // namespace odeforge
