#pragma once

#include <string>
#include <vector>

namespace stereovit {

struct CheckResult {
  std::string name;
  bool pass = false;
  std::string detail;
};

// Fast invariant suite: gradient checks, parameter-count targets, softmax
// and attention normalization, corruption statistics, metric oracles, and a
// checkpoint round trip with CRC tamper detection.
std::vector<CheckResult> run_self_checks();

}  // namespace stereovit
