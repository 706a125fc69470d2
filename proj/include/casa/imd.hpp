#pragma once

#include <cstdint>
#include <random>
#include <stdexcept>
#include <string>
#include <vector>

#include "casa/simplex.hpp"
#include "casa/tensor.hpp"

namespace casa {

/// Finite metric space carrying a source measure p, a target measure q and a
/// class assignment, plus per-class localisation budgets.
///
/// The discrepancy family is {f >= 0, |f_i - f_j| <= metric_ij,
/// E_{p|k}[f] <= epsilons[k] for every class k with p-mass}. A metric entry of
/// +inf means the pair is unconstrained.
struct ImdInstance {
  Tensor points;  // optional coordinates (m x dim); empty when only the metric is known
  Tensor metric;  // m x m
  std::vector<double> p;
  std::vector<double> q;
  std::vector<std::size_t> class_of;
  std::vector<double> epsilons;

  std::size_t size() const { return p.size(); }
  std::size_t num_classes() const { return epsilons.size(); }

  /// Checks metric axioms, simplex weights and class indices; throws
  /// std::invalid_argument naming the first violation.
  void validate() const;

  static ImdInstance from_points(Tensor points, std::vector<double> p, std::vector<double> q,
                                 std::vector<std::size_t> class_of, std::vector<double> epsilons);
};

class ImdUnbounded : public std::runtime_error {
 public:
  ImdUnbounded(const std::string& what, std::vector<double> direction)
      : std::runtime_error(what), direction_(std::move(direction)) {}
  const std::vector<double>& direction() const { return direction_; }

 private:
  std::vector<double> direction_;
};

struct ImdResult {
  double imd_value = 0.0;
  std::vector<double> f_star;
  std::vector<double> delta_k;
  std::vector<double> gamma_k;
  double rhs_conditional = 0.0;
  double rhs_cssd = 0.0;
  double rhs_marginal = 0.0;
};

enum class Localization {
  PerClass,  // E_{p|k}[f] <= eps_k for each class
  Marginal,  // E_p[f] <= sum_k p_k eps_k
};

/// Builds the linear program max_f sum_i objective_i f_i over the family.
LpProblem discrepancy_program(const ImdInstance& inst, Localization loc,
                              const std::vector<double>& objective);

/// Sup of f_i over the family; throws ImdUnbounded if f_i is uncapped.
double sup_at_point(const ImdInstance& inst, Localization loc, std::size_t i);

/// Exact value and witness of sup_f E_q f - E_p f.
ImdResult solve_imd(const ImdInstance& inst);

/// Largest violation of the family's constraints by f (0 when feasible).
double family_violation(const ImdInstance& inst, const std::vector<double>& f, Localization loc);

struct Lemma1Bounds {
  double rhs_conditional = 0.0;
  double rhs_cssd = 0.0;
  std::vector<double> delta_k;
  std::vector<double> gamma_k;
};

Lemma1Bounds lemma1_bounds(const ImdInstance& inst);

struct ClassMasses {
  std::vector<double> p;
  std::vector<double> q;
};
ClassMasses class_masses(const ImdInstance& inst);

/// Expected (under `weights`) distance from the `from_class` points to the
/// support of `support_weights` restricted to the same class; class -1 means
/// no restriction. Returns +inf when the needed support is empty.
double expected_support_distance(const ImdInstance& inst, const std::vector<double>& weights,
                                 const std::vector<double>& support_weights,
                                 std::int64_t klass);

struct Remark2Report {
  double conditional_distance = 0.0;  // sum_k q_k E_{q|k} d(z, supp p|k)
  double marginal_distance = 0.0;     // E_q d(z, supp p)
  double weighted_delta = 0.0;        // sum_k q_k delta_k
  double delta = 0.0;                 // sup over supp p, marginal family
  double epsilon = 0.0;               // sum_k p_k eps_k
  double imd_conditional = 0.0;
  double imd_marginal = 0.0;
  double marginal_rhs = 0.0;  // E_q d(z, supp p) + delta + epsilon
  bool distance_order_holds = false;
  bool delta_order_holds = false;
  bool marginal_bound_holds = false;
};

Remark2Report remark2_check(const ImdInstance& inst);

/// Discrete joint law over (point, class) atoms for both domains.
struct JointInstance {
  Tensor points;
  std::vector<std::size_t> class_of;
  std::vector<double> p;
  std::vector<double> q;
  std::size_t num_classes = 0;
};

struct Prop1Case {
  std::size_t index = 0;
  double cssd = 0.0;
  double joint_ssd = 0.0;
};

struct Prop1Report {
  std::size_t checked = 0;
  std::size_t skipped = 0;
  std::vector<std::string> warnings;
  std::vector<Prop1Case> cases;
  std::vector<Prop1Case> counterexamples;
};

inline constexpr double kZeroTol = 1e-12;

Prop1Report prop1_check(const std::vector<JointInstance>& instances);

/// Random instance on [0,1]^2 with Euclidean metric, Dirichlet(1) weights and
/// budgets uniform in [0, 0.5].
ImdInstance random_imd_instance(std::mt19937_64& rng, std::size_t m, std::size_t k);

/// Random joint law on a small integer grid so that exact coincidences occur;
/// roughly half the draws share per-class supports exactly.
JointInstance random_joint_instance(std::mt19937_64& rng, std::size_t m, std::size_t k);

std::string instance_to_json(const ImdInstance& inst);
ImdInstance instance_from_json(const std::string& text);
std::string result_to_json(const ImdResult& r);
ImdResult result_from_json(const std::string& text);

}  // namespace casa
