#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <random>

#include "casa/divergences.hpp"
#include "doctest.h"
#include "test_support.hpp"

using namespace casa;
using casa::testing::random_tensor;

namespace {

SampleCloud line_cloud(std::vector<double> xs, std::vector<std::size_t> labels = {},
                       std::vector<double> marginal = {}) {
  SampleCloud c;
  const std::size_t n = xs.size();
  c.points = Tensor(n, 1, std::move(xs));
  c.labels = std::move(labels);
  c.class_marginal = std::move(marginal);
  return c;
}

// Enumeration oracle for a one-sided mean distance under any pair metric.
template <typename Metric>
double mean_nearest(const SampleCloud& from, const SampleCloud& to, Metric d) {
  double total = 0.0;
  for (std::size_t i = 0; i < from.size(); ++i) {
    double best = std::numeric_limits<double>::infinity();
    for (std::size_t j = 0; j < to.size(); ++j) best = std::min(best, d(from, i, to, j));
    total += best;
  }
  return total / double(from.size());
}

double euclid(const SampleCloud& a, std::size_t i, const SampleCloud& b, std::size_t j) {
  return std::sqrt(squared_distance(a.points.row(i), b.points.row(j)));
}

SampleCloud random_cloud(std::mt19937_64& rng, std::size_t n, std::size_t dim, std::size_t k) {
  SampleCloud c;
  c.points = random_tensor(rng, n, dim, 0, 1);
  c.labels.resize(n);
  for (std::size_t i = 0; i < n; ++i) c.labels[i] = i < k ? i : rng() % k;
  return c;
}

}  // namespace

TEST_CASE("distance to support") {
  const auto cloud = line_cloud({3, -1});
  const std::vector<double> zero{0.0}, three{3.0};
  CHECK(dist_to_support(zero, cloud) == 1.0);
  CHECK(dist_to_support(three, cloud) == 0.0);
  CHECK_THROWS(dist_to_support(zero, SampleCloud{}));
}

TEST_CASE("k-d tree path equals brute force exactly") {
  std::mt19937_64 rng(1);
  const Tensor pts = random_tensor(rng, 3000, 2, 0, 1);
  const SupportIndex index(pts);
  for (int q = 0; q < 500; ++q) {
    const Tensor z = random_tensor(rng, 1, 2, -0.2, 1.2);
    CHECK(index.distance(z.row(0)) == dist_to_support_brute(z.row(0), pts));
  }
  const Tensor from = random_tensor(rng, 200, 2, 0, 1);
  CHECK(mean_distance_to_support(from, pts, 0) == mean_distance_to_support(from, pts, 1u << 30));
}

TEST_CASE("ssd examples and symmetry") {
  const auto p = line_cloud({0});
  const auto q = line_cloud({1});
  CHECK(ssd(p, q) == 2.0);
  CHECK(ssd(p, p) == 0.0);

  const auto sub = line_cloud({0, 2});
  const auto super = line_cloud({0, 2, 5});
  CHECK(mean_distance_to_support(sub.points, super.points) == 0.0);
  CHECK(ssd(sub, super) == doctest::Approx(3.0 / 3.0));

  std::mt19937_64 rng(2);
  for (int rep = 0; rep < 30; ++rep) {
    const auto a = random_cloud(rng, 7, 3, 2);
    const auto b = random_cloud(rng, 9, 3, 2);
    const double v = ssd(a, b);
    CHECK(v == ssd(b, a));
    CHECK(v >= 0.0);
    CHECK(v == doctest::Approx(mean_nearest(a, b, euclid) + mean_nearest(b, a, euclid)).epsilon(1e-14));
  }
  CHECK_THROWS(ssd(p, SampleCloud{}));
}

TEST_CASE("cssd: the crossed two-class example") {
  const auto p = line_cloud({0, 1}, {0, 1}, {0.5, 0.5});
  const auto q = line_cloud({1, 0}, {0, 1}, {0.5, 0.5});
  CHECK(ssd(p, q) == 0.0);
  const auto r = cssd(p, q, 2);
  CHECK(r.value == 2.0);
  CHECK(r.per_class_terms == std::vector<double>{1.0, 1.0});
  CHECK(cssd(p, p, 2).value == 0.0);
}

TEST_CASE("cssd weighting, symmetry and enumeration oracle") {
  std::mt19937_64 rng(3);
  for (int rep = 0; rep < 30; ++rep) {
    auto a = random_cloud(rng, 10, 2, 3);
    auto b = random_cloud(rng, 8, 2, 3);
    a.class_marginal = {0.2, 0.5, 0.3};
    b.class_marginal = {0.6, 0.1, 0.3};
    double want = 0.0;
    for (std::size_t k = 0; k < 3; ++k) {
      const auto ak = a.class_slice(k), bk = b.class_slice(k);
      want += a.class_marginal[k] * mean_nearest(ak, bk, euclid) +
              b.class_marginal[k] * mean_nearest(bk, ak, euclid);
    }
    const double got = cssd(a, b, 3).value;
    CHECK(got == doctest::Approx(want).epsilon(1e-13));
    CHECK(cssd(b, a, 3).value == doctest::Approx(got).epsilon(1e-13));

    // samplewise: restricting the support can only increase distance
    const SampleCloud pooled{a.points, {}, {}};
    for (std::size_t k = 0; k < 3; ++k) {
      const auto ak = a.class_slice(k);
      for (std::size_t j = 0; j < b.size(); ++j) {
        CHECK(dist_to_support(b.points.row(j), ak) >= dist_to_support(b.points.row(j), pooled));
      }
    }
  }
}

TEST_CASE("cssd marginal defaults to label frequencies") {
  const auto p = line_cloud({0, 0, 1, 5}, {0, 0, 0, 1});
  const auto q = line_cloud({0, 4}, {0, 1});
  // P marginal (3/4, 1/4), Q marginal (1/2, 1/2)
  const double want = 0.75 * (1.0 / 3.0) + 0.5 * 0.0 + 0.25 * 1.0 + 0.5 * 1.0;
  CHECK(cssd(p, q, 2).value == doctest::Approx(want).epsilon(1e-14));
}

TEST_CASE("cssd names the class missing its samples") {
  const auto p = line_cloud({0, 1}, {0, 0}, {0.5, 0.5});
  const auto q = line_cloud({0, 1}, {0, 1}, {0.5, 0.5});
  try {
    (void)cssd(p, q, 2);
    FAIL("expected an error");
  } catch (const std::invalid_argument& e) {
    CHECK(std::string(e.what()).find("class 1") != std::string::npos);
  }
  // zero marginal classes may be empty
  const auto p0 = line_cloud({0, 1}, {0, 0}, {1.0, 0.0});
  const auto q0 = line_cloud({0, 1}, {0, 0}, {1.0, 0.0});
  CHECK(cssd(p0, q0, 2).value == 0.0);
}

TEST_CASE("sample cloud validation") {
  CHECK_THROWS(line_cloud({0, 1}, {0}).validate(2));
  CHECK_THROWS(line_cloud({0, 1}, {0, 2}).validate(2));
  CHECK_THROWS(line_cloud({0, 1}, {0, 1}, {0.7, 0.7}).validate(2));
  CHECK_THROWS(line_cloud({0, 1}, {0, 1}, {1.5, -0.5}).validate(2));
  CHECK_NOTHROW(line_cloud({0, 1}, {0, 1}, {0.25, 0.75}).validate(2));
}

TEST_CASE("joint ssd") {
  const auto p = line_cloud({0, 1, 2}, {0, 1, 2});
  CHECK(joint_ssd(p, p, 10.0) == 0.0);

  // same z, labels rotated: every nearest pair either moves in z or pays the label cost
  const auto q = line_cloud({0, 1, 2}, {1, 2, 0});
  auto joint = [](double scale) {
    return [scale](const SampleCloud& a, std::size_t i, const SampleCloud& b, std::size_t j) {
      return euclid(a, i, b, j) + (a.labels[i] != b.labels[j] ? scale : 0.0);
    };
  };
  const double v = joint_ssd(p, q, 10.0);
  CHECK(v == doctest::Approx(mean_nearest(p, q, joint(10.0)) + mean_nearest(q, p, joint(10.0))));
  CHECK(v == doctest::Approx(8.0 / 3.0).epsilon(1e-14));
  // once the scale exceeds the z-diameter and every label occurs on both
  // sides, the label cost is never paid and the value stops depending on it
  CHECK(joint_ssd(p, q, 20.0) == v);
  // below the diameter a cross-label match wins and the scale shows through
  CHECK(joint_ssd(p, q, 0.5) == doctest::Approx(1.0).epsilon(1e-14));

  std::mt19937_64 rng(4);
  for (int rep = 0; rep < 20; ++rep) {
    const auto a = random_cloud(rng, 8, 2, 3);
    auto b = a;
    std::shuffle(b.labels.begin(), b.labels.end(), rng);
    const double scale = 10.0;
    const double got = joint_ssd(a, b, scale);
    CHECK(got == doctest::Approx(mean_nearest(a, b, joint(scale)) + mean_nearest(b, a, joint(scale))).epsilon(1e-13));
    std::size_t mismatched = 0;
    for (std::size_t i = 0; i < a.size(); ++i) mismatched += a.labels[i] != b.labels[i];
    if (mismatched > 0) CHECK(got > 0.0);
  }
}

TEST_CASE("default label scale dominates same-label matches") {
  std::mt19937_64 rng(5);
  const auto a = random_cloud(rng, 20, 2, 2);
  const auto b = random_cloud(rng, 20, 2, 2);
  const double s = default_label_scale(a, b);
  double diam = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    for (std::size_t j = 0; j < b.size(); ++j) diam = std::max(diam, euclid(a, i, b, j));
  }
  CHECK(s >= diam);
}

TEST_CASE("wasserstein-1 against the permutation oracle") {
  CHECK(wasserstein_1(line_cloud({0}), line_cloud({1})) == 1.0);
  std::mt19937_64 rng(6);
  for (int rep = 0; rep < 25; ++rep) {
    const SampleCloud a{random_tensor(rng, 4, 2), {}, {}};
    const SampleCloud b{random_tensor(rng, 4, 2), {}, {}};
    CHECK(wasserstein_1(a, a) == 0.0);
    std::vector<std::size_t> perm(4);
    std::iota(perm.begin(), perm.end(), 0);
    double best = std::numeric_limits<double>::infinity();
    do {
      double c = 0.0;
      for (std::size_t i = 0; i < 4; ++i) c += euclid(a, i, b, perm[i]);
      best = std::min(best, c / 4.0);
    } while (std::next_permutation(perm.begin(), perm.end()));
    const double w = wasserstein_1(a, b);
    CHECK(w == doctest::Approx(best).epsilon(1e-12));
    CHECK(w == doctest::Approx(wasserstein_1(b, a)).epsilon(1e-12));
    CHECK(w > 0.0);
  }
  CHECK_THROWS(wasserstein_1(line_cloud({0, 1}), line_cloud({0})));
}

TEST_CASE("assignment solver returns a permutation at the stated cost") {
  std::mt19937_64 rng(7);
  const Tensor cost = random_tensor(rng, 6, 6, 0, 1);
  std::vector<std::size_t> asg;
  const double total = min_cost_assignment(cost, &asg);
  std::vector<std::size_t> sorted = asg;
  std::sort(sorted.begin(), sorted.end());
  for (std::size_t i = 0; i < 6; ++i) CHECK(sorted[i] == i);
  double sum = 0.0;
  for (std::size_t i = 0; i < 6; ++i) sum += cost(i, asg[i]);
  CHECK(sum == doctest::Approx(total).epsilon(1e-14));
}

TEST_CASE("subsample keeps order and is seeded") {
  SampleCloud c;
  c.points = Tensor(10, 1);
  for (std::size_t i = 0; i < 10; ++i) c.points[i] = double(i);
  c.labels = std::vector<std::size_t>(10, 0);
  const auto a = subsample(c, 4, 9);
  const auto b = subsample(c, 4, 9);
  CHECK(a.points == b.points);
  CHECK(a.size() == 4);
  CHECK(a.labels.size() == 4);
  for (std::size_t i = 1; i < 4; ++i) CHECK(a.points[i - 1] < a.points[i]);
  CHECK(subsample(c, 20, 1).size() == 10);
}

TEST_CASE("report JSON round-trip") {
  DivergenceReport r;
  r.step = 17;
  r.ssd = 0.1 + 0.2;
  r.cssd = 1.0 / 3.0;
  r.joint_ssd = 2.5e-17;
  r.wasserstein = 7.0;
  r.per_class_terms = {0.125, 1e-300, 3.3};
  const auto back = report_from_json(report_to_json(r));
  CHECK(back.step == r.step);
  CHECK(back.ssd == r.ssd);
  CHECK(back.cssd == r.cssd);
  CHECK(back.joint_ssd == r.joint_ssd);
  CHECK(back.wasserstein == r.wasserstein);
  CHECK(back.per_class_terms == r.per_class_terms);
  CHECK(back.metric == "euclidean");
}
