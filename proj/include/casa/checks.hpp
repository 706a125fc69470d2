#pragma once

#include <cstdint>
#include <string>
#include <vector>

namespace casa {

struct CheckResult {
  std::string name;
  std::size_t instances = 0;
  std::size_t failures = 0;
  double worst = 0.0;      // largest observed error or violation
  double tolerance = 0.0;  // failure threshold applied to `worst`-style quantities
  std::string detail;

  bool passed() const { return instances > 0 && failures == 0; }
};

struct SuiteReport {
  std::string suite;
  std::uint64_t seed = 0;
  std::vector<CheckResult> checks;
  double seconds = 0.0;

  bool passed() const;
  std::string to_json() const;
};

/// Autodiff against central differences for every training loss, plus the
/// training-loop invariants (loss bookkeeping, update isolation, warmup).
SuiteReport gradient_suite(std::uint64_t seed, std::size_t instances = 20);

/// Discrepancy bounds, the support-distance orderings and the conditional
/// versus joint support equivalence on random instances.
SuiteReport oracle_suite(std::uint64_t seed, std::size_t instances = 100);

}  // namespace casa
