#include <cmath>
#include <limits>
#include <random>

#include "casa/divergences.hpp"
#include "casa/imd.hpp"
#include "casa/simplex.hpp"
#include "doctest.h"
#include "oracles.hpp"

using namespace casa;
using casa::testing::GridImdOracle;
using casa::testing::wasserstein_line;

namespace {

constexpr double kInf = std::numeric_limits<double>::infinity();

ImdInstance line_instance(std::vector<double> xs, std::vector<double> p, std::vector<double> q,
                          std::vector<std::size_t> cls, std::vector<double> eps) {
  const std::size_t n = xs.size();
  return ImdInstance::from_points(Tensor(n, 1, std::move(xs)), std::move(p), std::move(q),
                                  std::move(cls), std::move(eps));
}

void check_witness(const ImdInstance& inst, const ImdResult& r) {
  const std::size_t m = inst.size();
  REQUIRE(r.f_star.size() == m);
  for (std::size_t i = 0; i < m; ++i) {
    CHECK(r.f_star[i] >= -1e-9);
    for (std::size_t j = 0; j < m; ++j) CHECK(r.f_star[i] - r.f_star[j] <= inst.metric(i, j) + 1e-9);
  }
  const auto mass = class_masses(inst);
  for (std::size_t k = 0; k < inst.num_classes(); ++k) {
    if (mass.p[k] <= 0.0) continue;
    double e = 0.0;
    for (std::size_t i = 0; i < m; ++i) {
      if (inst.class_of[i] == k) e += inst.p[i] / mass.p[k] * r.f_star[i];
    }
    CHECK(e <= inst.epsilons[k] + 1e-9);
  }
  double obj = 0.0;
  for (std::size_t i = 0; i < m; ++i) obj += (inst.q[i] - inst.p[i]) * r.f_star[i];
  CHECK(obj == doctest::Approx(r.imd_value).epsilon(1e-9));
  CHECK(family_violation(inst, r.f_star, Localization::PerClass) <= 1e-9);
}

}  // namespace

TEST_CASE("simplex solves a textbook LP and reports unboundedness") {
  // max 3x + 5y s.t. x <= 4, 2y <= 12, 3x + 2y <= 18  -> 36 at (2, 6)
  const LpSolution s = solve_lp(LpProblem{{{1, 0}, {0, 2}, {3, 2}}, {4, 12, 18}, {3, 5}});
  REQUIRE(s.status == LpStatus::Optimal);
  CHECK(s.value == doctest::Approx(36.0));
  CHECK(s.x[0] == doctest::Approx(2.0));
  CHECK(s.x[1] == doctest::Approx(6.0));

  const LpSolution u = solve_lp(LpProblem{{{1, -1}}, {1}, {1, 1}});
  CHECK(u.status == LpStatus::Unbounded);
  REQUIRE(u.ray.size() == 2);
  CHECK(u.ray[0] + u.ray[1] > 0.0);
  CHECK(u.ray[0] - u.ray[1] <= 1e-12);
}

TEST_CASE("instance validation") {
  auto ok = line_instance({0, 1}, {0.5, 0.5}, {0.5, 0.5}, {0, 0}, {0.1});
  CHECK_NOTHROW(ok.validate());

  auto asym = ok;
  asym.metric(0, 1) = 2.0;
  CHECK_THROWS_AS(asym.validate(), std::invalid_argument);

  auto tri = line_instance({0, 1, 2}, {1, 0, 0}, {0, 0, 1}, {0, 0, 0}, {0.1});
  tri.metric(0, 2) = tri.metric(2, 0) = 5.0;
  CHECK_THROWS_AS(tri.validate(), std::invalid_argument);

  auto diag = ok;
  diag.metric(1, 1) = 0.1;
  CHECK_THROWS_AS(diag.validate(), std::invalid_argument);

  auto weights = ok;
  weights.p = {0.6, 0.6};
  CHECK_THROWS_AS(weights.validate(), std::invalid_argument);

  auto cls = ok;
  cls.class_of = {0, 3};
  CHECK_THROWS_AS(cls.validate(), std::invalid_argument);

  auto neg = ok;
  neg.epsilons = {-0.1};
  CHECK_THROWS_AS(neg.validate(), std::invalid_argument);
}

TEST_CASE("identical measures give zero discrepancy") {
  std::mt19937_64 rng(1);
  for (int rep = 0; rep < 10; ++rep) {
    auto inst = random_imd_instance(rng, 6, 2);
    inst.q = inst.p;
    const auto r = solve_imd(inst);
    CHECK(r.imd_value == doctest::Approx(0.0).epsilon(1e-12));
    CHECK(family_violation(inst, std::vector<double>(6, 0.0), Localization::PerClass) == 0.0);
  }
}

TEST_CASE("two-point instance by hand") {
  for (double eps : {0.0, 0.3, 5.0}) {
    const auto inst = line_instance({0, 1}, {1, 0}, {0, 1}, {0, 0}, {eps});
    const auto r = solve_imd(inst);
    CHECK(r.imd_value == doctest::Approx(1.0));
    check_witness(inst, r);
  }
}

TEST_CASE("LP optimum matches the 0.01 grid search on 100 instances") {
  std::mt19937_64 rng(2);
  for (int rep = 0; rep < 100; ++rep) {
    const std::size_t m = 2 + rng() % 7;  // up to 8 points; the grid is exponential in m
    const std::size_t k = std::min<std::size_t>(m, 1 + rng() % 3);
    const auto inst = random_imd_instance(rng, m, k);
    const auto r = solve_imd(inst);
    GridImdOracle oracle(inst, 0.01);
    const auto grid = oracle.solve();
    REQUIRE(grid.has_value());
    CAPTURE(rep);
    CHECK(*grid <= r.imd_value + 1e-9);
    CHECK(r.imd_value - *grid <= 0.02);
    check_witness(inst, r);
  }
}

TEST_CASE("one class with large budget is the line W1") {
  std::mt19937_64 rng(3);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  for (int rep = 0; rep < 20; ++rep) {
    const std::size_t m = 5;
    std::vector<double> xs(m), p(m), q(m);
    double sp = 0, sq = 0;
    for (std::size_t i = 0; i < m; ++i) {
      xs[i] = u(rng) * 3.0;
      p[i] = u(rng) + 0.05;
      q[i] = u(rng) + 0.05;
      sp += p[i];
      sq += q[i];
    }
    for (std::size_t i = 0; i < m; ++i) {
      p[i] /= sp;
      q[i] /= sq;
    }
    const auto inst = line_instance(xs, p, q, std::vector<std::size_t>(m, 0), {100.0});
    CHECK(solve_imd(inst).imd_value == doctest::Approx(wasserstein_line(xs, p, q)).epsilon(1e-9));
  }
}

TEST_CASE("enlarging every budget never lowers the value") {
  std::mt19937_64 rng(4);
  for (int rep = 0; rep < 30; ++rep) {
    auto inst = random_imd_instance(rng, 8, 3);
    const double before = solve_imd(inst).imd_value;
    for (double& e : inst.epsilons) e += 0.1;
    CHECK(solve_imd(inst).imd_value >= before - 1e-12);
  }
}

TEST_CASE("uncapped target mass is reported with a direction") {
  // point 1 carries q-mass, belongs to a class with no p-mass, and is not
  // within finite distance of anything constrained
  ImdInstance inst;
  inst.metric = Tensor::from_rows({{0, kInf}, {kInf, 0}});
  inst.p = {1, 0};
  inst.q = {0, 1};
  inst.class_of = {0, 1};
  inst.epsilons = {0.1, 0.1};
  try {
    (void)solve_imd(inst);
    FAIL("expected ImdUnbounded");
  } catch (const ImdUnbounded& e) {
    REQUIRE(e.direction().size() == 2);
    CHECK(e.direction()[1] > 0.0);
  }
  CHECK_THROWS_AS(sup_at_point(inst, Localization::PerClass, 1), ImdUnbounded);
  CHECK(sup_at_point(inst, Localization::PerClass, 0) == doctest::Approx(0.1));

  // the same geometry with a finite link is capped through the Lipschitz rows
  inst.metric = Tensor::from_rows({{0, 2}, {2, 0}});
  CHECK(solve_imd(inst).imd_value == doctest::Approx(2.0));
  CHECK(sup_at_point(inst, Localization::PerClass, 1) == doctest::Approx(2.1));
}

TEST_CASE("support distances") {
  const auto inst = line_instance({0, 1, 3}, {0.5, 0.5, 0}, {0, 0.5, 0.5}, {0, 1, 1}, {0, 0});
  CHECK(expected_support_distance(inst, inst.q, inst.p, -1) == doctest::Approx(0.5 * 0 + 0.5 * 2));
  // class 1: p-support {1}; q|1 is (1/2, 1/2) on {1, 3}
  CHECK(expected_support_distance(inst, inst.q, inst.p, 1) == doctest::Approx(1.0));
  // class 0 carries no q mass
  CHECK(expected_support_distance(inst, inst.q, inst.p, 0) == 0.0);
  // target class with mass but no source support in that class
  const auto bare = line_instance({0, 1}, {1, 0}, {0, 1}, {0, 1}, {0, 0});
  CHECK(std::isinf(expected_support_distance(bare, bare.q, bare.p, 1)));
}

TEST_CASE("discrepancy bounds: trivial case and random instances") {
  auto same = line_instance({0, 1, 2}, {0.2, 0.3, 0.5}, {0.2, 0.3, 0.5}, {0, 1, 1}, {0, 0});
  const auto r0 = solve_imd(same);
  CHECK(r0.imd_value == doctest::Approx(0.0).epsilon(1e-12));
  CHECK(r0.imd_value <= r0.rhs_conditional + 1e-9);
  CHECK(r0.imd_value <= r0.rhs_cssd + 1e-9);

  std::mt19937_64 rng(5);
  for (int rep = 0; rep < 100; ++rep) {
    const std::size_t m = 2 + rng() % 19;
    const std::size_t k = std::min<std::size_t>(m, 1 + rng() % 3);
    const auto inst = random_imd_instance(rng, m, k);
    const auto r = solve_imd(inst);
    const auto b = lemma1_bounds(inst);
    CAPTURE(rep);
    CHECK(r.rhs_conditional == b.rhs_conditional);
    CHECK(r.rhs_cssd == b.rhs_cssd);
    CHECK(r.imd_value - b.rhs_conditional <= 1e-9);
    CHECK(r.imd_value - b.rhs_cssd <= 1e-9);
    CHECK(r.imd_value >= -1e-12);

    // the cssd part of the second bound, recomputed from sample clouds
    const auto mass = class_masses(inst);
    double conditional = 0.0;
    for (std::size_t c = 0; c < k; ++c) {
      conditional += mass.q[c] * expected_support_distance(inst, inst.q, inst.p, std::int64_t(c)) +
                     mass.p[c] * expected_support_distance(inst, inst.p, inst.q, std::int64_t(c));
    }
    double extra = 0.0;
    for (std::size_t c = 0; c < k; ++c) extra += mass.p[c] * b.delta_k[c] + mass.q[c] * b.gamma_k[c];
    CHECK(b.rhs_cssd == doctest::Approx(conditional + extra).epsilon(1e-12));
  }
}

TEST_CASE("delta_k is the largest witness value on the class p-support") {
  std::mt19937_64 rng(6);
  for (int rep = 0; rep < 20; ++rep) {
    const auto inst = random_imd_instance(rng, 7, 2);
    const auto b = lemma1_bounds(inst);
    for (std::size_t c = 0; c < 2; ++c) {
      double want = 0.0;
      for (std::size_t i = 0; i < inst.size(); ++i) {
        if (inst.class_of[i] == c && inst.p[i] > 0.0) {
          want = std::max(want, sup_at_point(inst, Localization::PerClass, i));
        }
      }
      CHECK(b.delta_k[c] == doctest::Approx(want).epsilon(1e-12));
      // any feasible f is capped by delta_k on the class p-support
      const auto r = solve_imd(inst);
      for (std::size_t i = 0; i < inst.size(); ++i) {
        if (inst.class_of[i] == c && inst.p[i] > 0.0) CHECK(r.f_star[i] <= b.delta_k[c] + 1e-9);
      }
    }
  }
}

TEST_CASE("conditional versus marginal support orderings") {
  // single class: both orders hold with equality
  const auto one = line_instance({0, 1, 2.5}, {0.3, 0.7, 0}, {0.1, 0.2, 0.7}, {0, 0, 0}, {0.2});
  const auto r1 = remark2_check(one);
  CHECK(r1.conditional_distance == doctest::Approx(r1.marginal_distance).epsilon(1e-14));
  CHECK(r1.weighted_delta == doctest::Approx(r1.delta).epsilon(1e-12));
  CHECK(r1.distance_order_holds);
  CHECK(r1.delta_order_holds);
  CHECK(r1.marginal_bound_holds);

  // crossed two-class instance: p puts class 0 at 0 and class 1 at 1; q swaps them
  ImdInstance crossed = ImdInstance::from_points(Tensor::from_rows({{0}, {1}, {1}, {0}}),
                                                 {0.5, 0.5, 0, 0}, {0, 0, 0.5, 0.5},
                                                 {0, 1, 0, 1}, {0.1, 0.1});
  const auto rc = remark2_check(crossed);
  CHECK(rc.conditional_distance == doctest::Approx(1.0));
  CHECK(rc.marginal_distance == doctest::Approx(0.0));
  CHECK(rc.distance_order_holds);

  std::mt19937_64 rng(7);
  for (int rep = 0; rep < 100; ++rep) {
    const std::size_t m = 2 + rng() % 19;
    const std::size_t k = std::min<std::size_t>(m, 1 + rng() % 3);
    const auto inst = random_imd_instance(rng, m, k);
    const auto r = remark2_check(inst);
    CAPTURE(rep);
    CHECK(r.distance_order_holds);
    CHECK(r.delta_order_holds);
    CHECK(r.marginal_bound_holds);
    CHECK(r.imd_marginal <= r.marginal_rhs + 1e-9);
    const auto mass = class_masses(inst);
    double eps = 0.0;
    for (std::size_t c = 0; c < k; ++c) eps += mass.p[c] * inst.epsilons[c];
    CHECK(r.epsilon == doctest::Approx(eps).epsilon(1e-14));
  }
}

TEST_CASE("conditional and joint support divergences vanish together") {
  JointInstance same;
  same.points = Tensor::from_rows({{0, 0}, {1, 0}, {0, 1}});
  same.class_of = {0, 1, 1};
  same.p = {0.5, 0.25, 0.25};
  same.q = {0.5, 0.25, 0.25};
  same.num_classes = 2;

  JointInstance swapped = same;
  swapped.points = Tensor::from_rows({{0, 0}, {1, 0}, {0, 0}, {1, 0}});
  swapped.class_of = {0, 1, 1, 0};
  swapped.p = {0.5, 0.5, 0, 0};
  swapped.q = {0, 0, 0.5, 0.5};

  JointInstance degenerate = same;
  degenerate.q = {0.0, 0.5, 0.5};

  const auto rep = prop1_check({same, swapped, degenerate});
  CHECK(rep.checked == 2);
  CHECK(rep.skipped == 1);
  CHECK(rep.warnings.size() == 1);
  REQUIRE(rep.cases.size() == 2);
  CHECK(rep.cases[0].cssd == 0.0);
  CHECK(rep.cases[0].joint_ssd == 0.0);
  CHECK(rep.cases[1].cssd > 0.0);
  CHECK(rep.cases[1].joint_ssd > 0.0);
  CHECK(rep.counterexamples.empty());

  std::mt19937_64 rng(8);
  std::vector<JointInstance> batch;
  for (int i = 0; i < 200; ++i) {
    const std::size_t k = 1 + rng() % 3;
    const std::size_t m = k + rng() % (13 - k);
    batch.push_back(random_joint_instance(rng, m, k));
  }
  const auto big = prop1_check(batch);
  CHECK(big.counterexamples.empty());
  CHECK(big.checked + big.skipped == 200);
  // both sides of the equivalence actually occur
  std::size_t zeros = 0;
  for (const auto& c : big.cases) zeros += c.cssd <= kZeroTol;
  CHECK(zeros > 10);
  CHECK(big.cases.size() - zeros > 10);
}

TEST_CASE("instance and result JSON round-trip bit-for-bit") {
  std::mt19937_64 rng(9);
  auto inst = random_imd_instance(rng, 5, 2);
  for (std::size_t j = 1; j < 5; ++j) inst.metric(0, j) = inst.metric(j, 0) = kInf;  // isolate point 0
  const auto back = instance_from_json(instance_to_json(inst));
  CHECK(back.points == inst.points);
  CHECK(back.metric.data().size() == inst.metric.data().size());
  for (std::size_t i = 0; i < inst.metric.size(); ++i) {
    CHECK((back.metric[i] == inst.metric[i] || (std::isinf(back.metric[i]) && std::isinf(inst.metric[i]))));
  }
  CHECK(back.p == inst.p);
  CHECK(back.q == inst.q);
  CHECK(back.class_of == inst.class_of);
  CHECK(back.epsilons == inst.epsilons);

  const auto inst2 = random_imd_instance(rng, 6, 3);
  const auto r = solve_imd(inst2);
  const auto rb = result_from_json(result_to_json(r));
  CHECK(rb.imd_value == r.imd_value);
  CHECK(rb.f_star == r.f_star);
  CHECK(rb.delta_k == r.delta_k);
  CHECK(rb.gamma_k == r.gamma_k);
  CHECK(rb.rhs_conditional == r.rhs_conditional);
  CHECK(rb.rhs_cssd == r.rhs_cssd);
  CHECK(rb.rhs_marginal == r.rhs_marginal);
}
