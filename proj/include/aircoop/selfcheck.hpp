#pragma once

#include <cstdint>
#include <string>
#include <vector>

namespace aircoop {

struct CheckResult {
  std::string name;
  bool pass = false;
  double metric = 0.0;  // max relative error, or deviation, as applicable
  double tolerance = 0.0;
};

// Central finite-difference verification of every differentiable op plus the
// full stage-2 composite loss on an 8x8 feature grid (every parameter).
std::vector<CheckResult> run_gradcheck(std::uint64_t seed);

// Oracle-backed invariants: 3D IoU vs Monte-Carlo, AP vs brute force,
// calibration identity, decode round-trip, scenario determinism, fusion
// permutation invariance.
std::vector<CheckResult> run_selftest(std::uint64_t seed);

// One line per check, deterministic for a fixed seed.
std::string checks_report(const std::vector<CheckResult>& results);
bool all_passed(const std::vector<CheckResult>& results);

}  // namespace aircoop
