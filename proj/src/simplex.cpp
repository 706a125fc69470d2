#include "casa/simplex.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <stdexcept>
#include <string>

namespace casa {

namespace {

constexpr double kPivotTol = 1e-11;
constexpr std::size_t kMaxPivots = 1'000'000;

}  // namespace

LpSolution solve_lp(const LpProblem& lp) {
  const std::size_t m = lp.a.size();
  const std::size_t n = lp.c.size();
  if (lp.b.size() != m) {
    throw std::invalid_argument("LP: row count and rhs length differ");
  }
  for (std::size_t i = 0; i < m; ++i) {
    if (lp.a[i].size() != n) {
      throw std::invalid_argument("LP: constraint row " + std::to_string(i) + " has wrong width");
    }
    if (!(lp.b[i] >= 0.0)) {
      throw std::invalid_argument("LP: right-hand sides must be non-negative");
    }
  }

  // Dictionary rows read  value = t[i][n] - sum_j t[i][j] x_N[j]; row m is the
  // objective, stored with negated reduced costs so every row pivots alike.
  const std::size_t w = n + 1;
  std::vector<double> t((m + 1) * w, 0.0);
  auto at = [&](std::size_t i, std::size_t j) -> double& { return t[i * w + j]; };
  for (std::size_t i = 0; i < m; ++i) {
    for (std::size_t j = 0; j < n; ++j) at(i, j) = lp.a[i][j];
    at(i, n) = lp.b[i];
  }
  for (std::size_t j = 0; j < n; ++j) at(m, j) = -lp.c[j];

  std::vector<std::size_t> nonbasic(n), basic(m);
  for (std::size_t j = 0; j < n; ++j) nonbasic[j] = j;
  for (std::size_t i = 0; i < m; ++i) basic[i] = n + i;

  LpSolution sol;
  for (;;) {
    // Bland: entering variable is the lowest-labelled improving one.
    std::size_t e = n;
    for (std::size_t j = 0; j < n; ++j) {
      if (at(m, j) < -kPivotTol && (e == n || nonbasic[j] < nonbasic[e])) e = j;
    }
    if (e == n) break;

    std::size_t r = m;
    double best = std::numeric_limits<double>::infinity();
    for (std::size_t i = 0; i < m; ++i) {
      const double coef = at(i, e);
      if (coef <= kPivotTol) continue;
      const double ratio = at(i, n) / coef;
      if (r == m || ratio < best - 1e-14) {
        best = ratio;
        r = i;
      } else if (ratio <= best + 1e-14 && basic[i] < basic[r]) {
        r = i;
      }
    }
    if (r == m) {
      sol.status = LpStatus::Unbounded;
      sol.ray.assign(n, 0.0);
      if (nonbasic[e] < n) sol.ray[nonbasic[e]] = 1.0;
      for (std::size_t i = 0; i < m; ++i) {
        if (basic[i] < n) sol.ray[basic[i]] = -at(i, e);
      }
      sol.value = std::numeric_limits<double>::infinity();
      return sol;
    }

    const double piv = at(r, e);
    for (std::size_t j = 0; j <= n; ++j) {
      if (j != e) at(r, j) /= piv;
    }
    at(r, e) = 1.0 / piv;
    at(r, n) = std::max(0.0, at(r, n));
    for (std::size_t i = 0; i <= m; ++i) {
      if (i == r) continue;
      const double f = at(i, e);
      if (f == 0.0) continue;
      for (std::size_t j = 0; j <= n; ++j) {
        if (j != e) at(i, j) -= f * at(r, j);
      }
      at(i, e) = -f * at(r, e);
    }
    std::swap(nonbasic[e], basic[r]);
    if (++sol.pivots > kMaxPivots) {
      throw std::runtime_error("LP: pivot limit exceeded");
    }
  }

  sol.x.assign(n, 0.0);
  for (std::size_t i = 0; i < m; ++i) {
    if (basic[i] < n) sol.x[basic[i]] = std::max(0.0, at(i, n));
  }
  sol.value = 0.0;
  for (std::size_t j = 0; j < n; ++j) sol.value += lp.c[j] * sol.x[j];
  return sol;
}

}  // namespace casa
