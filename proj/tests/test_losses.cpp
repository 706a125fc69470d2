#include <algorithm>
#include <cmath>
#include <numbers>
#include <numeric>
#include <random>

#include "casa/losses.hpp"
#include "doctest.h"
#include "test_support.hpp"

using namespace casa;
using casa::testing::numeric_gradient;
using casa::testing::random_tensor;
using casa::testing::relative_error;

namespace {

ModelBundle bundle(std::uint64_t seed, std::size_t in = 2, std::size_t classes = 3) {
  ArchConfig arch;
  arch.feature_hidden = {6};
  arch.discriminator_hidden = {5};
  return ModelBundle::create(ModelDims{in, 4, classes}, arch, seed);
}

double scalar(const std::function<Var(Graph&)>& build) {
  Graph g;
  return g.value(build(g)).item();
}

// Gradient of `build` with respect to every tensor in `params`, autodiff vs
// central differences; returns the worst relative error.
double worst_param_error(const std::function<Var(Graph&)>& build, const std::vector<Tensor*>& params) {
  for (Tensor* t : params) {
    t->set_requires_grad(true);
    t->zero_grad();
  }
  Graph g;
  g.backward(build(g));
  double worst = 0.0;
  for (Tensor* t : params) {
    std::vector<double> analytic(t->grad().begin(), t->grad().end());
    const auto numeric = numeric_gradient([&] { return scalar(build); }, *t);
    worst = std::max(worst, relative_error(analytic, numeric));
  }
  return worst;
}

}  // namespace

TEST_CASE("source classification loss values") {
  Graph g;
  const std::vector<std::size_t> y{0, 2};
  auto perfect = g.constant(Tensor::from_rows({{1, 0, 0}, {0, 0, 1}}));
  CHECK(g.value(source_classification_loss(g, perfect, y)).item() == 0.0);

  Tensor uni(4, 10, 0.1);
  const std::vector<std::size_t> y10{0, 3, 9, 5};
  CHECK(g.value(source_classification_loss(g, g.constant(uni), y10)).item() ==
        doctest::Approx(std::log(10.0)).epsilon(1e-14));

  auto p = g.constant(Tensor::from_rows({{0.5, 0.25, 0.25}}));
  const std::vector<std::size_t> y1{1};  // class 2 in 1-based terms
  CHECK(g.value(source_classification_loss(g, p, y1)).item() == doctest::Approx(1.386294).epsilon(1e-6));

  CHECK_THROWS_AS(source_classification_loss(g, p, std::vector<std::size_t>{}), ContractError);
  CHECK_THROWS(source_classification_loss(g, p, std::vector<std::size_t>{3}));
}

TEST_CASE("target conditional entropy values") {
  Graph g;
  CHECK(g.value(target_conditional_entropy(g, g.constant(Tensor::from_rows({{1, 0}, {0, 1}})))).item() == 0.0);
  Tensor uni(3, 9, 1.0 / 9.0);
  CHECK(g.value(target_conditional_entropy(g, g.constant(uni))).item() ==
        doctest::Approx(std::log(9.0)).epsilon(1e-12));
  CHECK(g.value(target_conditional_entropy(g, g.constant(Tensor::from_rows({{0.9, 0.1}})))).item() ==
        doctest::Approx(0.3251).epsilon(1e-3));

  std::mt19937_64 rng(2);
  for (int rep = 0; rep < 20; ++rep) {
    Graph h;
    auto p = h.softmax_rows(h.constant(random_tensor(rng, 5, 4, -3, 3)));
    const double v = h.value(target_conditional_entropy(h, p)).item();
    CHECK(v >= 0.0);
    CHECK(v <= std::log(4.0) + 1e-12);
  }
}

TEST_CASE("discriminator loss values") {
  Graph g;
  auto half = g.constant(Tensor(3, 1, 0.5));
  CHECK(g.value(discriminator_loss(g, half, half)).item() == doctest::Approx(2 * std::log(2.0)).epsilon(1e-14));

  auto ones = g.constant(Tensor(2, 1, 1.0));
  auto zeros = g.constant(Tensor(2, 1, 0.0));
  const double floor = g.value(discriminator_loss(g, ones, zeros)).item();
  CHECK(floor == doctest::Approx(-2.0 * std::log(1.0 - kProbClamp)).epsilon(1e-9));
  CHECK(floor == doctest::Approx(2e-6).epsilon(1e-5));

  auto s = g.constant(Tensor::from_rows({{0.8}}));
  auto t = g.constant(Tensor::from_rows({{0.3}}));
  CHECK(g.value(discriminator_loss(g, s, t)).item() == doctest::Approx(0.5798).epsilon(1e-4));
}

TEST_CASE("discriminator weights are renormalised per side") {
  Graph g;
  auto s = g.constant(Tensor::from_rows({{0.8}, {0.4}}));
  auto t = g.constant(Tensor::from_rows({{0.3}, {0.6}}));
  const Tensor ws = Tensor::from_rows({{2.0}, {1.0}});
  const Tensor wt = Tensor::from_rows({{1.5}, {1.5}});
  const double got = g.value(discriminator_loss(g, s, t, &ws, &wt)).item();
  const double want = (2 * -std::log(0.8) + 1 * -std::log(0.4)) / 3.0 +
                      (-std::log(0.7) - std::log(0.4)) / 2.0;
  CHECK(got == doctest::Approx(want).epsilon(1e-14));
  // scaling all weights leaves the loss unchanged
  const Tensor ws3 = Tensor::from_rows({{6.0}, {3.0}});
  CHECK(g.value(discriminator_loss(g, s, t, &ws3, &wt)).item() == doctest::Approx(got).epsilon(1e-14));
}

TEST_CASE("support alignment loss values and symmetries") {
  Graph g;
  auto a = g.constant(Tensor::from_rows({{0.1}, {0.7}, {0.4}}));
  CHECK(g.value(support_alignment_loss(g, a, a)).item() == 0.0);

  auto s = g.constant(Tensor::from_rows({{0.9}}));
  auto t = g.constant(Tensor::from_rows({{0.2}, {0.5}}));
  CHECK(g.value(support_alignment_loss(g, s, t)).item() == doctest::Approx(0.95).epsilon(1e-14));

  std::mt19937_64 rng(4);
  for (int rep = 0; rep < 20; ++rep) {
    Tensor x = random_tensor(rng, 5, 1, 0, 1);
    Tensor y = random_tensor(rng, 5, 1, 0, 1);
    Graph h;
    const double xy = h.value(support_alignment_loss(h, h.constant(x), h.constant(y))).item();
    const double yx = h.value(support_alignment_loss(h, h.constant(y), h.constant(x))).item();
    CHECK(xy == doctest::Approx(yx).epsilon(1e-14));
    CHECK(xy >= 0.0);
    std::vector<double> vx(x.data().begin(), x.data().end());
    std::shuffle(vx.begin(), vx.end(), rng);
    const double perm =
        h.value(support_alignment_loss(h, h.constant(Tensor(5, 1, vx)), h.constant(y))).item();
    CHECK(perm == doctest::Approx(xy).epsilon(1e-14));
    const double self = h.value(support_alignment_loss(h, h.constant(x), h.constant(x))).item();
    CHECK(self == 0.0);
  }
}

TEST_CASE("nearest index ties go to the lowest index") {
  const std::vector<double> q{0.5};
  const std::vector<double> set{0.4, 0.6, 0.4};
  CHECK(nearest_indices(q, set) == std::vector<std::size_t>{0});
}

TEST_CASE("VAT: zero network and zero radius give zero loss") {
  auto m = bundle(1);
  std::mt19937_64 rng(5);
  const Tensor x = random_tensor(rng, 6, 2);
  {
    Graph g;
    CHECK(g.value(vat_loss(g, m, x, VatOptions{0.0, 1e-6, 1}, rng)).item() == doctest::Approx(0.0).epsilon(1e-15));
  }
  m.zero_weights();
  for (double eps : {0.1, 1.0, 10.0}) {
    Graph g;
    CHECK(g.value(vat_loss(g, m, x, VatOptions{eps, 1e-6, 1}, rng)).item() == doctest::Approx(0.0).epsilon(1e-15));
  }
}

TEST_CASE("VAT is deterministic given the generator seed") {
  auto m = bundle(2);
  std::mt19937_64 r0(6);
  const Tensor x = random_tensor(r0, 6, 2);
  std::mt19937_64 a(77), b(77);
  CHECK(vat_perturbation(m, x, VatOptions{0.5, 1e-6, 1}, a) == vat_perturbation(m, x, VatOptions{0.5, 1e-6, 1}, b));
}

TEST_CASE("VAT loss is at least the best of 100 random perturbations") {
  // Random-search lower-bound oracle on the batch objective: each trial draws
  // an independent unit direction per row, scaled to the radius.
  std::normal_distribution<double> normal(0.0, 1.0);
  const double eps = 0.5;
  for (int inst = 0; inst < 20; ++inst) {
    std::mt19937_64 rng(1000 + inst);
    auto m = bundle(500 + inst);
    const Tensor x = random_tensor(rng, 64, 2);
    const Tensor clean = predict_proba(m, x);
    auto batch_kl = [&](const Tensor& r) {
      Tensor shifted = x;
      for (std::size_t k = 0; k < x.size(); ++k) shifted[k] += r[k];
      return mean_kl(clean, predict_proba(m, shifted));
    };
    const Tensor r_adv = vat_perturbation(m, x, VatOptions{eps, 1e-6, 1}, rng);
    for (std::size_t i = 0; i < x.rows(); ++i) {
      CHECK(std::hypot(r_adv(i, 0), r_adv(i, 1)) == doctest::Approx(eps).epsilon(1e-12));
    }
    double best = 0.0;
    for (int trial = 0; trial < 100; ++trial) {
      Tensor r(x.rows(), 2);
      for (std::size_t i = 0; i < x.rows(); ++i) {
        const double a = normal(rng), b = normal(rng);
        const double n = std::hypot(a, b);
        r(i, 0) = eps * a / n;
        r(i, 1) = eps * b / n;
      }
      best = std::max(best, batch_kl(r));
    }
    Graph g;
    const double loss = g.value(vat_loss_at(g, m, x, r_adv)).item();
    CAPTURE(inst);
    CHECK(loss == doctest::Approx(batch_kl(r_adv)).epsilon(1e-12));
    CHECK(loss >= best - 1e-6);
  }
}

TEST_CASE("converged power iteration finds the worst direction for small radii") {
  // In the quadratic regime the per-sample optimum over a fine angle sweep
  // is the top curvature direction that power iteration converges to.
  const double eps = 1e-3;
  for (int inst = 0; inst < 10; ++inst) {
    std::mt19937_64 rng(2000 + inst);
    auto m = bundle(700 + inst);
    const Tensor x = random_tensor(rng, 1, 2);
    const Tensor clean = predict_proba(m, x);
    auto kl_at = [&](double dx, double dy) {
      Tensor s = x;
      s[0] += dx;
      s[1] += dy;
      return mean_kl(clean, predict_proba(m, s));
    };
    const Tensor r = vat_perturbation(m, x, VatOptions{eps, 1e-6, 30}, rng);
    double best = 0.0;
    for (int k = 0; k < 720; ++k) {
      const double a = k * std::numbers::pi / 360.0;
      best = std::max(best, kl_at(eps * std::cos(a), eps * std::sin(a)));
    }
    CAPTURE(inst);
    CHECK(kl_at(r[0], r[1]) >= 0.99 * best);
  }
}

TEST_CASE("loss gradients with respect to network parameters") {
  std::mt19937_64 rng(31);
  for (int inst = 0; inst < 4; ++inst) {
    auto m = bundle(200 + inst);
    const Tensor xs = random_tensor(rng, 6, 2);
    const Tensor xt = random_tensor(rng, 5, 2);
    std::vector<std::size_t> ys(6);
    for (auto& y : ys) y = rng() % 3;
    std::mt19937_64 vat_rng(inst);
    const Tensor r_adv = vat_perturbation(m, xt, VatOptions{0.3, 1e-6, 1}, vat_rng);
    const Tensor w_s = entropy_weights(predict_proba(m, xs));
    const Tensor w_t = entropy_weights(predict_proba(m, xt));

    auto l_y = [&](Graph& g) {
      return source_classification_loss(g, classify(g, m, extract(g, m, g.constant(xs), true), true), ys);
    };
    auto l_ce = [&](Graph& g) {
      return target_conditional_entropy(g, classify(g, m, extract(g, m, g.constant(xt), true), true));
    };
    const Tensor clean_t = predict_proba(m, xt);  // held fixed: no gradient through g(x)
    auto l_v = [&](Graph& g) { return vat_loss_at(g, m, xt, r_adv, &clean_t); };
    auto l_d = [&](Graph& g) {
      auto side = [&](const Tensor& x) {
        auto z = extract(g, m, g.constant(x), false);
        return discriminate(g, m, outer_embed(g, z, classify(g, m, z, false)), true);
      };
      auto a = side(xs);
      auto b = side(xt);
      return discriminator_loss(g, a, b, &w_s, &w_t);
    };

    CAPTURE(inst);
    CHECK(worst_param_error(l_y, m.fc_parameters()) < 1e-4);
    CHECK(worst_param_error(l_ce, m.fc_parameters()) < 1e-4);
    CHECK(worst_param_error(l_v, m.fc_parameters()) < 1e-4);
    CHECK(worst_param_error(l_d, m.r_parameters()) < 1e-4);
  }
}

TEST_CASE("alignment loss gradient away from ties") {
  std::mt19937_64 rng(41);
  int checked = 0;
  for (int attempt = 0; attempt < 200 && checked < 10; ++attempt) {
    Tensor a = random_tensor(rng, 5, 1, 0, 1);
    Tensor b = random_tensor(rng, 4, 1, 0, 1);
    // reject near-ties and near-coincident pairs; FD would straddle a kink
    std::vector<double> all(a.data().begin(), a.data().end());
    all.insert(all.end(), b.data().begin(), b.data().end());
    std::sort(all.begin(), all.end());
    bool ok = true;
    for (std::size_t i = 1; i < all.size(); ++i) ok = ok && all[i] - all[i - 1] > 1e-3;
    for (double u : a.data()) {
      std::vector<double> d;
      for (double v : b.data()) d.push_back(std::fabs(u - v));
      std::sort(d.begin(), d.end());
      ok = ok && d[1] - d[0] > 1e-3;
    }
    for (double v : b.data()) {
      std::vector<double> d;
      for (double u : a.data()) d.push_back(std::fabs(u - v));
      std::sort(d.begin(), d.end());
      ok = ok && d[1] - d[0] > 1e-3;
    }
    if (!ok) continue;
    ++checked;
    a.set_requires_grad(true);
    b.set_requires_grad(true);
    auto build = [&](Graph& g) { return support_alignment_loss(g, g.leaf(a), g.leaf(b)); };
    Graph g;
    g.backward(build(g));
    const auto na = numeric_gradient([&] { return scalar(build); }, a);
    const auto nb = numeric_gradient([&] { return scalar(build); }, b);
    std::vector<double> ga(a.grad().begin(), a.grad().end());
    std::vector<double> gb(b.grad().begin(), b.grad().end());
    CHECK(relative_error(ga, na) < 1e-6);
    CHECK(relative_error(gb, nb) < 1e-6);
  }
  CHECK(checked == 10);
}
