#include "casa/losses.hpp"

#include <cmath>

namespace casa {

Var source_classification_loss(Graph& g, Var p, std::span<const std::size_t> labels) {
  if (labels.empty()) {
    throw ContractError("source classification loss on an empty batch");
  }
  const std::size_t k = g.value(p).cols();
  for (std::size_t y : labels) {
    if (y >= k) {
      throw std::out_of_range("label " + std::to_string(y) + " outside [0, K)");
    }
  }
  Var picked = g.pick(p, labels);
  return g.scale(g.mean(g.log(g.clamp(picked, kLogFloor, 1.0))), -1.0);
}

Var target_conditional_entropy(Graph& g, Var p) {
  Var logp = g.log(g.clamp(p, kLogFloor, 1.0));
  return g.scale(g.mean(g.row_sum(g.mul(p, logp))), -1.0);
}

namespace {

void normalize_rows(Tensor& t) {
  for (std::size_t i = 0; i < t.rows(); ++i) {
    auto r = t.row(i);
    double n2 = 0.0;
    for (double v : r) n2 += v * v;
    if (n2 > 0.0) {
      const double inv = 1.0 / std::sqrt(n2);
      for (double& v : r) v *= inv;
    }
  }
}

// KL(p || q) averaged over rows with p entering as a constant.
Var kl_rows(Graph& g, const Tensor& p, Var q) {
  Tensor plogp(p.rows(), 1);
  for (std::size_t i = 0; i < p.rows(); ++i) {
    for (double v : p.row(i)) {
      if (v > 0.0) plogp(i, 0) += v * std::log(v);
    }
  }
  Var pc = g.constant(p);
  Var cross = g.row_sum(g.mul(pc, g.log(g.clamp(q, kLogFloor, 1.0))));
  return g.mean(g.sub(g.constant(std::move(plogp)), cross));
}

}  // namespace

Tensor vat_perturbation(ModelBundle& m, const Tensor& x, const VatOptions& opt,
                        std::mt19937_64& rng) {
  Tensor d(x.rows(), x.cols());
  std::normal_distribution<double> normal(0.0, 1.0);
  for (double& v : d.data()) v = normal(rng);
  normalize_rows(d);
  if (opt.epsilon == 0.0) {
    return Tensor(x.rows(), x.cols());
  }
  const Tensor clean = predict_proba(m, x);
  for (int it = 0; it < opt.power_iterations; ++it) {
    Tensor probe = d;
    for (double& v : probe.data()) v *= opt.xi;
    probe.set_requires_grad(true);
    Graph h;
    Var xs = h.add(h.constant(x), h.leaf(probe));
    Var q = classify(h, m, extract(h, m, xs, false), false);
    h.backward(kl_rows(h, clean, q));
    auto grad = probe.grad();
    std::copy(grad.begin(), grad.end(), d.data().begin());
    normalize_rows(d);
  }
  for (double& v : d.data()) v *= opt.epsilon;
  return d;
}

Var vat_loss_at(Graph& g, ModelBundle& m, const Tensor& x, const Tensor& r, const Tensor* clean) {
  if (!x.same_shape(r)) {
    throw DimensionError("perturbation shape differs from input");
  }
  const Tensor target = clean != nullptr ? *clean : predict_proba(m, x);
  if (target.rows() != x.rows()) {
    throw DimensionError("clean prediction rows differ from input");
  }
  Tensor shifted = x;
  for (std::size_t i = 0; i < shifted.size(); ++i) shifted[i] += r[i];
  Var q = classify(g, m, extract(g, m, g.constant(std::move(shifted)), true), true);
  return kl_rows(g, target, q);
}

Var vat_loss(Graph& g, ModelBundle& m, const Tensor& x, const VatOptions& opt,
             std::mt19937_64& rng) {
  if (opt.epsilon < 0.0) {
    throw std::invalid_argument("VAT radius must be non-negative");
  }
  return vat_loss_at(g, m, x, vat_perturbation(m, x, opt, rng));
}

double mean_kl(const Tensor& p, const Tensor& q) {
  double total = 0.0;
  for (std::size_t i = 0; i < p.rows(); ++i) {
    for (std::size_t j = 0; j < p.cols(); ++j) {
      if (p(i, j) > 0.0) total += p(i, j) * (std::log(p(i, j)) - std::log(std::max(q(i, j), kLogFloor)));
    }
  }
  return total / static_cast<double>(p.rows());
}

namespace {

Var weighted_mean(Graph& g, Var terms, const Tensor* w) {
  if (w == nullptr) {
    return g.mean(terms);
  }
  if (w->rows() != g.value(terms).rows() || w->cols() != 1) {
    throw DimensionError("discriminator weights must be n x 1");
  }
  double total = 0.0;
  for (double v : w->data()) total += v;
  if (!(total > 0.0)) {
    throw std::invalid_argument("discriminator weights must have positive sum");
  }
  return g.scale(g.sum(g.mul(g.constant(*w), terms)), 1.0 / total);
}

}  // namespace

Var discriminator_loss(Graph& g, Var src_out, Var tgt_out, const Tensor* src_w,
                       const Tensor* tgt_w) {
  if (g.value(src_out).cols() != 1 || g.value(tgt_out).cols() != 1) {
    throw DimensionError("discriminator outputs must be n x 1");
  }
  const std::size_t n_tgt = g.value(tgt_out).rows();
  Var src = g.clamp(src_out, kProbClamp, 1.0 - kProbClamp);
  Var tgt = g.clamp(tgt_out, kProbClamp, 1.0 - kProbClamp);
  Var src_terms = g.scale(g.log(src), -1.0);
  Var one_minus = g.sub(g.constant(Tensor(n_tgt, 1, 1.0)), tgt);
  Var tgt_terms = g.scale(g.log(one_minus), -1.0);
  return g.add(weighted_mean(g, src_terms, src_w), weighted_mean(g, tgt_terms, tgt_w));
}

std::vector<std::size_t> nearest_indices(std::span<const double> query, std::span<const double> set) {
  if (set.empty()) {
    throw ContractError("nearest_indices: empty reference set");
  }
  std::vector<std::size_t> out(query.size());
  for (std::size_t i = 0; i < query.size(); ++i) {
    std::size_t best = 0;
    double best_d = std::fabs(query[i] - set[0]);
    for (std::size_t j = 1; j < set.size(); ++j) {
      const double d = std::fabs(query[i] - set[j]);
      if (d < best_d) {
        best_d = d;
        best = j;
      }
    }
    out[i] = best;
  }
  return out;
}

Var support_alignment_loss(Graph& g, Var src_out, Var tgt_out) {
  const Tensor& a = g.value(src_out);
  const Tensor& b = g.value(tgt_out);
  if (a.cols() != 1 || b.cols() != 1) {
    throw DimensionError("alignment inputs must be n x 1");
  }
  const auto src_nn = nearest_indices(a.data(), b.data());
  const auto tgt_nn = nearest_indices(b.data(), a.data());
  Var src_term = g.mean(g.abs(g.sub(src_out, g.gather_rows(tgt_out, src_nn))));
  Var tgt_term = g.mean(g.abs(g.sub(tgt_out, g.gather_rows(src_out, tgt_nn))));
  return g.add(src_term, tgt_term);
}

}  // namespace casa
