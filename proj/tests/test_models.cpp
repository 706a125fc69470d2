#include <cmath>
#include <filesystem>
#include <random>

#include "casa/models.hpp"
#include "doctest.h"
#include "test_support.hpp"

using namespace casa;
using casa::testing::max_entry_error;
using casa::testing::numeric_gradient;
using casa::testing::random_tensor;

namespace {

ModelBundle small_bundle(std::uint64_t seed, bool conditioned = true) {
  ArchConfig arch;
  arch.feature_hidden = {5, 4};
  arch.discriminator_hidden = {6};
  arch.conditioned = conditioned;
  return ModelBundle::create(ModelDims{3, 4, 3}, arch, seed);
}

double entropy(std::span<const double> p) {
  double h = 0.0;
  for (double v : p) {
    if (v > 0.0) h -= v * std::log(v);
  }
  return h;
}

}  // namespace

TEST_CASE("discriminator input extent is m*K with conditioning") {
  auto m = small_bundle(1);
  CHECK(m.discriminator_input() == 12);
  CHECK(m.discriminator.input_extent() == 12);
  auto plain = small_bundle(1, false);
  CHECK(plain.discriminator.input_extent() == 4);
}

TEST_CASE("zero weights give zero features, uniform classes and r = 0.5") {
  auto m = small_bundle(2);
  m.zero_weights();
  std::mt19937_64 rng(1);
  const Tensor x = random_tensor(rng, 5, 3);
  Graph g;
  auto z = extract(g, m, g.constant(x), false);
  for (double v : g.value(z).data()) CHECK(v == 0.0);
  auto p = classify(g, m, z, false);
  for (double v : g.value(p).data()) CHECK(v == doctest::Approx(1.0 / 3.0).epsilon(1e-15));
  auto r = discriminate(g, m, outer_embed(g, z, p), false);
  for (double v : g.value(r).data()) CHECK(v == 0.5);
}

TEST_CASE("extract rejects the wrong input extent") {
  auto m = small_bundle(3);
  Graph g;
  CHECK_THROWS_AS(extract(g, m, g.constant(Tensor(2, 5)), false), DimensionError);
}

TEST_CASE("fixed seed gives bit-identical parameters and outputs") {
  auto a = small_bundle(42);
  auto b = small_bundle(42);
  auto c = small_bundle(43);
  CHECK(parameter_checksum(a.all_parameters()) == parameter_checksum(b.all_parameters()));
  CHECK(parameter_checksum(a.all_parameters()) != parameter_checksum(c.all_parameters()));
  std::mt19937_64 rng(4);
  const Tensor x = random_tensor(rng, 7, 3);
  CHECK(predict_proba(a, x) == predict_proba(b, x));
  CHECK(features(a, x) == features(b, x));
}

TEST_CASE("initialisation is Glorot-uniform with zero biases") {
  auto m = small_bundle(5);
  for (const Mlp* net : {&m.feature, &m.classifier, &m.discriminator}) {
    for (const Dense& d : net->layers) {
      const double a = std::sqrt(6.0 / double(d.weight.rows() + d.weight.cols()));
      for (double v : d.weight.data()) CHECK(std::fabs(v) <= a);
      for (double v : d.bias.data()) CHECK(v == 0.0);
    }
  }
}

TEST_CASE("classify: crafted logits and simplex rows") {
  ModelBundle m = ModelBundle::create(ModelDims{1, 3, 3}, ArchConfig{{2}, {}, {2}, 0.1, true}, 0);
  // identity classifier on z = (2, 1, 0)
  m.classifier.layers.front().weight = Tensor::identity(3);
  m.classifier.layers.front().bias = Tensor(1, 3);
  Graph g;
  auto p = classify(g, m, g.constant(Tensor::from_rows({{2, 1, 0}})), false);
  const Tensor& pv = g.value(p);
  CHECK(pv(0, 0) == doctest::Approx(0.665241).epsilon(1e-5));
  CHECK(pv(0, 1) == doctest::Approx(0.244728).epsilon(1e-5));
  CHECK(pv(0, 2) == doctest::Approx(0.090031).epsilon(1e-5));
  CHECK(argmax_rows(pv) == std::vector<std::size_t>{0});

  auto big = small_bundle(6);
  std::mt19937_64 rng(7);
  const Tensor probs = predict_proba(big, random_tensor(rng, 50, 3, -20, 20));
  for (std::size_t i = 0; i < probs.rows(); ++i) {
    double s = 0.0;
    for (double v : probs.row(i)) {
      CHECK(v >= 0.0);
      s += v;
    }
    CHECK(std::fabs(s - 1.0) <= 1e-9);
  }
}

TEST_CASE("outer_embed definition and reconstruction") {
  Graph g;
  auto s = outer_embed(g, g.constant(Tensor::from_rows({{1, 2}})), g.constant(Tensor::from_rows({{1, 0}})));
  CHECK(g.value(s) == Tensor::from_rows({{1, 0, 2, 0}}));

  auto su = outer_embed(g, g.constant(Tensor::from_rows({{3, -6}})),
                        g.constant(Tensor::from_rows({{1.0 / 3, 1.0 / 3, 1.0 / 3}})));
  const Tensor& sv = g.value(su);
  for (int b = 0; b < 3; ++b) {
    CHECK(sv(0, 0 * 3 + b) == doctest::Approx(1.0));
    CHECK(sv(0, 1 * 3 + b) == doctest::Approx(-2.0));
  }

  std::mt19937_64 rng(8);
  const Tensor z = random_tensor(rng, 6, 4);
  const Tensor p = random_tensor(rng, 6, 3, 0, 1);
  Graph h;
  const Tensor out = h.value(outer_embed(h, h.constant(z), h.constant(p)));
  double worst = 0.0;
  for (std::size_t i = 0; i < 6; ++i) {
    for (std::size_t a = 0; a < 4; ++a) {
      for (std::size_t b = 0; b < 3; ++b) worst = std::max(worst, std::fabs(out(i, a * 3 + b) - z(i, a) * p(i, b)));
    }
  }
  CHECK(worst == 0.0);

  CHECK_THROWS_AS(outer_embed(h, h.constant(Tensor(2, 4)), h.constant(Tensor(3, 3))), DimensionError);
}

TEST_CASE("discriminator outputs stay inside the clamp") {
  auto m = small_bundle(9);
  // push the output logit far positive and far negative
  m.discriminator.layers.back().bias[0] = 500.0;
  Graph g;
  std::mt19937_64 rng(1);
  auto r = discriminate(g, m, g.constant(random_tensor(rng, 4, 12)), false);
  for (double v : g.value(r).data()) CHECK(v == 1.0 - kProbClamp);
  m.discriminator.layers.back().bias[0] = -500.0;
  Graph h;
  auto r2 = discriminate(h, m, h.constant(random_tensor(rng, 4, 12)), false);
  for (double v : h.value(r2).data()) CHECK(v == kProbClamp);
}

TEST_CASE("entropy weights: formula, range and monotonicity") {
  const Tensor w = entropy_weights(Tensor::from_rows({{1, 0, 0}, {1.0 / 3, 1.0 / 3, 1.0 / 3}}));
  CHECK(w.rows() == 2);
  CHECK(w.cols() == 1);
  CHECK(w[0] == 2.0);
  CHECK(w[1] == doctest::Approx(1.0 + 1.0 / 3.0).epsilon(1e-14));

  const Tensor w2 = entropy_weights(Tensor::from_rows({{0.9, 0.1}}));
  const double h = -(0.9 * std::log(0.9) + 0.1 * std::log(0.1));
  CHECK(h == doctest::Approx(0.3251).epsilon(1e-3));
  CHECK(w2[0] == doctest::Approx(1.0 + std::exp(-h)).epsilon(1e-14));
  CHECK(w2[0] == doctest::Approx(1.7224).epsilon(1e-4));

  std::mt19937_64 rng(10);
  Graph g;
  const Tensor p = g.value(g.softmax_rows(g.constant(random_tensor(rng, 200, 4, -4, 4))));
  const Tensor wr = entropy_weights(p);
  for (std::size_t i = 0; i < p.rows(); ++i) {
    CHECK(wr[i] > 1.0);
    CHECK(wr[i] <= 2.0);
    for (std::size_t j = 0; j < i; ++j) {
      if (entropy(p.row(i)) < entropy(p.row(j))) CHECK(wr[i] >= wr[j]);
    }
  }
}

TEST_CASE("gradient through the full f, c, r composite") {
  auto m = small_bundle(11);
  std::mt19937_64 rng(12);
  const Tensor x = random_tensor(rng, 5, 3);

  auto loss_of = [&](Graph& g) {
    auto z = extract(g, m, g.constant(x), true);
    auto p = classify(g, m, z, true);
    auto r = discriminate(g, m, outer_embed(g, z, p), true);
    return g.mean(g.log(r));
  };

  for (Tensor* t : m.fc_parameters()) t->set_requires_grad(true);
  for (Tensor* t : m.r_parameters()) t->set_requires_grad(true);
  m.zero_grad();
  Graph g;
  g.backward(loss_of(g));
  auto f = [&] {
    Graph h;
    return h.value(loss_of(h)).item();
  };

  std::vector<Tensor*> all = m.fc_parameters();
  for (Tensor* t : m.r_parameters()) all.push_back(t);
  for (Tensor* t : all) {
    std::vector<double> analytic(t->grad().begin(), t->grad().end());
    const auto numeric = numeric_gradient(f, *t);
    CHECK(casa::testing::relative_error(analytic, numeric) < 1e-4);
    // entrywise with an absolute floor, for tiny components
    CHECK(max_entry_error(analytic, numeric, 1e-6) < 1e-3);
  }
}

TEST_CASE("untracked parameters receive no gradient") {
  auto m = small_bundle(13);
  for (Tensor* t : m.fc_parameters()) t->set_requires_grad(true);
  for (Tensor* t : m.r_parameters()) t->set_requires_grad(true);
  m.zero_grad();
  std::mt19937_64 rng(1);
  Graph g;
  auto z = extract(g, m, g.constant(random_tensor(rng, 3, 3)), false);
  auto r = discriminate(g, m, outer_embed(g, z, classify(g, m, z, false)), true);
  g.backward(g.mean(r));
  for (Tensor* t : m.fc_parameters()) {
    if (t->has_grad()) {
      for (double v : t->grad()) CHECK(v == 0.0);
    }
  }
}

TEST_CASE("checkpoint round-trip is exact") {
  auto m = small_bundle(14);
  const std::string text = checkpoint_to_string(m);
  const ModelBundle back = checkpoint_from_string(text);
  CHECK(back.dims == m.dims);
  CHECK(back.arch == m.arch);
  CHECK(parameter_checksum(back.all_parameters()) == parameter_checksum(m.all_parameters()));

  const auto path = std::filesystem::temp_directory_path() / "casa_ckpt_test.txt";
  save_checkpoint(m, path);
  const ModelBundle disk = load_checkpoint(path);
  CHECK(parameter_checksum(disk.all_parameters()) == parameter_checksum(m.all_parameters()));
  std::filesystem::remove(path);

  CHECK_THROWS(checkpoint_from_string("not a checkpoint"));
}
