#pragma once

#include <cstddef>
#include <vector>

namespace casa {

/// maximize c^T x  subject to  A x <= b,  x >= 0,  with b >= 0.
///
/// Requiring b >= 0 makes the origin a feasible starting vertex, which is
/// always the case for the discrepancy programs built in imd.cpp.
struct LpProblem {
  std::vector<std::vector<double>> a;
  std::vector<double> b;
  std::vector<double> c;
};

enum class LpStatus { Optimal, Unbounded };

struct LpSolution {
  LpStatus status = LpStatus::Optimal;
  double value = 0.0;
  std::vector<double> x;
  /// Recession direction with c^T ray > 0 when status is Unbounded.
  std::vector<double> ray;
  std::size_t pivots = 0;
};

/// Dense dictionary simplex with Bland's anti-cycling rule.
LpSolution solve_lp(const LpProblem& lp);

}  // namespace casa
