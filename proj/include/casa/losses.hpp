#pragma once

#include <cstdint>
#include <random>
#include <span>

#include "casa/models.hpp"
#include "casa/tensor.hpp"

namespace casa {

/// Per-step bookkeeping of the generator (f, c) and discriminator objectives.
struct LossBreakdown {
  double l_y = 0.0;
  double l_ce = 0.0;
  double l_v_src = 0.0;
  double l_v_tgt = 0.0;
  double l_d = 0.0;
  double l_align = 0.0;
  double total_fc = 0.0;
  double total_r = 0.0;

  double lambda_y = 1.0;
  double lambda_align = 0.0;
  double lambda_ce = 0.0;
  double lambda_v_src = 0.0;
  double lambda_v_tgt = 0.0;

  double weighted_total() const {
    return lambda_y * l_y + lambda_align * l_align + lambda_ce * l_ce + lambda_v_src * l_v_src +
           lambda_v_tgt * l_v_tgt;
  }
};

/// Lower clamp applied to classifier probabilities before taking logs.
inline constexpr double kLogFloor = 1e-12;

/// -(1/n) sum_i ln p[i, y_i].
Var source_classification_loss(Graph& g, Var p, std::span<const std::size_t> labels);

/// Mean Shannon entropy (nats) of the rows of p.
Var target_conditional_entropy(Graph& g, Var p);

struct VatOptions {
  double epsilon = 1.0;
  double xi = 1e-6;
  int power_iterations = 1;
};

/// Radius-epsilon adversarial direction per row of x, found by power
/// iteration on KL(g(x) || g(x + xi d)) with frozen parameters.
Tensor vat_perturbation(ModelBundle& m, const Tensor& x, const VatOptions& opt,
                        std::mt19937_64& rng);

/// Batch mean of KL(g(x) || g(x + r_adv)); the clean prediction is a constant.
Var vat_loss(Graph& g, ModelBundle& m, const Tensor& x, const VatOptions& opt,
             std::mt19937_64& rng);

/// Same objective at a caller-supplied perturbation (one row per sample).
/// `clean`, when given, replaces g(x) as the fixed first KL argument.
Var vat_loss_at(Graph& g, ModelBundle& m, const Tensor& x, const Tensor& r,
                const Tensor* clean = nullptr);

/// Mean of KL(p_i || q_i) over rows, computed without a graph.
double mean_kl(const Tensor& p, const Tensor& q);

/// Weighted log-loss with source labelled 1 and target 0. Weights, when
/// given, are n x 1 and renormalised by their sum on each side.
Var discriminator_loss(Graph& g, Var src_out, Var tgt_out, const Tensor* src_w = nullptr,
                       const Tensor* tgt_w = nullptr);

/// Symmetric 1-D point-to-set distance between two output sets. Nearest
/// indices are fixed per call (lowest index wins ties).
Var support_alignment_loss(Graph& g, Var src_out, Var tgt_out);

/// Index of the nearest value in `set` for each entry of `query`.
std::vector<std::size_t> nearest_indices(std::span<const double> query, std::span<const double> set);

}  // namespace casa
