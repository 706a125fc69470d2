#include "casa/imd.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>

#include "casa/datagen.hpp"
#include "casa/divergences.hpp"
#include "json.hpp"

namespace casa {

namespace {

constexpr double kInf = std::numeric_limits<double>::infinity();
constexpr double kFeasTol = 1e-7;
constexpr double kCertTol = 1e-9;

void check_simplex(const std::vector<double>& w, const char* name) {
  double total = 0.0;
  for (double v : w) {
    if (!(v >= 0.0) || !std::isfinite(v)) {
      throw std::invalid_argument(std::string(name) + " has a negative or non-finite entry");
    }
    total += v;
  }
  if (std::fabs(total - 1.0) > 1e-12 * std::max<std::size_t>(1, w.size())) {
    throw std::invalid_argument(std::string(name) + " does not sum to one");
  }
}

}  // namespace

void ImdInstance::validate() const {
  const std::size_t m = p.size();
  if (m == 0) throw std::invalid_argument("instance has no points");
  if (q.size() != m || class_of.size() != m) {
    throw std::invalid_argument("p, q and class_of lengths differ");
  }
  if (metric.rows() != m || metric.cols() != m) {
    throw std::invalid_argument("metric must be m x m");
  }
  if (epsilons.empty()) throw std::invalid_argument("instance needs at least one class");
  for (double e : epsilons) {
    if (!(e >= 0.0) || !std::isfinite(e)) {
      throw std::invalid_argument("localisation budgets must be finite and non-negative");
    }
  }
  for (std::size_t c : class_of) {
    if (c >= epsilons.size()) throw std::invalid_argument("class index out of range");
  }
  check_simplex(p, "p");
  check_simplex(q, "q");
  for (std::size_t i = 0; i < m; ++i) {
    if (metric(i, i) != 0.0) throw std::invalid_argument("metric diagonal must be zero");
    for (std::size_t j = 0; j < m; ++j) {
      const double d = metric(i, j);
      if (std::isnan(d) || d < 0.0) throw std::invalid_argument("metric entries must be >= 0");
      if (d != metric(j, i)) throw std::invalid_argument("metric must be symmetric");
      if (i != j && d == 0.0) {
        // Distinct indices may coincide; allowed, the triangle check covers consistency.
      }
    }
  }
  for (std::size_t i = 0; i < m; ++i) {
    for (std::size_t j = 0; j < m; ++j) {
      for (std::size_t k = 0; k < m; ++k) {
        const double lhs = metric(i, j);
        const double rhs = metric(i, k) + metric(k, j);
        if (lhs > rhs + 1e-12 * std::max(1.0, rhs)) {
          throw std::invalid_argument("metric violates the triangle inequality at (" +
                                      std::to_string(i) + "," + std::to_string(j) + "," +
                                      std::to_string(k) + ")");
        }
      }
    }
  }
}

ImdInstance ImdInstance::from_points(Tensor points, std::vector<double> p, std::vector<double> q,
                                     std::vector<std::size_t> class_of,
                                     std::vector<double> epsilons) {
  ImdInstance inst;
  const std::size_t m = points.rows();
  inst.metric = Tensor(m, m);
  for (std::size_t i = 0; i < m; ++i) {
    for (std::size_t j = 0; j < m; ++j) {
      inst.metric(i, j) = i == j ? 0.0 : std::sqrt(squared_distance(points.row(i), points.row(j)));
    }
  }
  inst.points = std::move(points);
  inst.p = std::move(p);
  inst.q = std::move(q);
  inst.class_of = std::move(class_of);
  inst.epsilons = std::move(epsilons);
  inst.validate();
  return inst;
}

ClassMasses class_masses(const ImdInstance& inst) {
  ClassMasses out{std::vector<double>(inst.num_classes(), 0.0),
                  std::vector<double>(inst.num_classes(), 0.0)};
  for (std::size_t i = 0; i < inst.size(); ++i) {
    out.p[inst.class_of[i]] += inst.p[i];
    out.q[inst.class_of[i]] += inst.q[i];
  }
  return out;
}

LpProblem discrepancy_program(const ImdInstance& inst, Localization loc,
                              const std::vector<double>& objective) {
  const std::size_t m = inst.size();
  LpProblem lp;
  lp.c = objective;
  for (std::size_t i = 0; i < m; ++i) {
    for (std::size_t j = 0; j < m; ++j) {
      if (i == j || !std::isfinite(inst.metric(i, j))) continue;
      std::vector<double> row(m, 0.0);
      row[i] = 1.0;
      row[j] = -1.0;
      lp.a.push_back(std::move(row));
      lp.b.push_back(inst.metric(i, j));
    }
  }
  const ClassMasses mass = class_masses(inst);
  if (loc == Localization::PerClass) {
    for (std::size_t k = 0; k < inst.num_classes(); ++k) {
      if (mass.p[k] <= 0.0) continue;
      std::vector<double> row(m, 0.0);
      for (std::size_t i = 0; i < m; ++i) {
        if (inst.class_of[i] == k && inst.p[i] > 0.0) row[i] = inst.p[i] / mass.p[k];
      }
      lp.a.push_back(std::move(row));
      lp.b.push_back(inst.epsilons[k]);
    }
  } else {
    double eps = 0.0;
    for (std::size_t k = 0; k < inst.num_classes(); ++k) eps += mass.p[k] * inst.epsilons[k];
    lp.a.push_back(inst.p);
    lp.b.push_back(eps);
  }
  return lp;
}

double family_violation(const ImdInstance& inst, const std::vector<double>& f, Localization loc) {
  const LpProblem lp = discrepancy_program(inst, loc, std::vector<double>(inst.size(), 0.0));
  double worst = 0.0;
  for (double v : f) worst = std::max(worst, -v);
  for (std::size_t r = 0; r < lp.a.size(); ++r) {
    double lhs = 0.0;
    for (std::size_t i = 0; i < f.size(); ++i) lhs += lp.a[r][i] * f[i];
    worst = std::max(worst, lhs - lp.b[r]);
  }
  return worst;
}

double sup_at_point(const ImdInstance& inst, Localization loc, std::size_t i) {
  std::vector<double> obj(inst.size(), 0.0);
  obj.at(i) = 1.0;
  const LpSolution sol = solve_lp(discrepancy_program(inst, loc, obj));
  if (sol.status == LpStatus::Unbounded) {
    throw ImdUnbounded("f at point " + std::to_string(i) + " is not capped by the family",
                       sol.ray);
  }
  return sol.value;
}

double expected_support_distance(const ImdInstance& inst, const std::vector<double>& weights,
                                 const std::vector<double>& support_weights,
                                 std::int64_t klass) {
  auto in_class = [&](std::size_t i) {
    return klass < 0 || inst.class_of[i] == static_cast<std::size_t>(klass);
  };
  double mass = 0.0, total = 0.0;
  for (std::size_t i = 0; i < inst.size(); ++i) {
    if (!in_class(i) || weights[i] <= 0.0) continue;
    double best = kInf;
    for (std::size_t j = 0; j < inst.size(); ++j) {
      if (in_class(j) && support_weights[j] > 0.0) best = std::min(best, inst.metric(i, j));
    }
    mass += weights[i];
    total += weights[i] * best;
  }
  return mass > 0.0 ? total / mass : 0.0;
}

namespace {

struct PointSups {
  std::vector<double> value;  // NaN where not computed
};

PointSups point_sups(const ImdInstance& inst, Localization loc) {
  PointSups out{std::vector<double>(inst.size(), std::numeric_limits<double>::quiet_NaN())};
  for (std::size_t i = 0; i < inst.size(); ++i) {
    if (inst.p[i] > 0.0 || inst.q[i] > 0.0) out.value[i] = sup_at_point(inst, loc, i);
  }
  return out;
}

double class_sup(const ImdInstance& inst, const PointSups& sups, const std::vector<double>& w,
                 std::int64_t klass) {
  double best = 0.0;
  for (std::size_t i = 0; i < inst.size(); ++i) {
    if (w[i] <= 0.0) continue;
    if (klass >= 0 && inst.class_of[i] != static_cast<std::size_t>(klass)) continue;
    best = std::max(best, sups.value[i]);
  }
  return best;
}

double times(double weight, double value) { return weight == 0.0 ? 0.0 : weight * value; }

}  // namespace

Lemma1Bounds lemma1_bounds(const ImdInstance& inst) {
  inst.validate();
  const std::size_t k_count = inst.num_classes();
  const ClassMasses mass = class_masses(inst);
  const PointSups sups = point_sups(inst, Localization::PerClass);
  Lemma1Bounds out;
  out.delta_k.assign(k_count, 0.0);
  out.gamma_k.assign(k_count, 0.0);
  double cssd_value = 0.0;
  for (std::size_t k = 0; k < k_count; ++k) {
    const auto kk = static_cast<std::int64_t>(k);
    out.delta_k[k] = class_sup(inst, sups, inst.p, kk);
    out.gamma_k[k] = class_sup(inst, sups, inst.q, kk);
    const double target_to_source = expected_support_distance(inst, inst.q, inst.p, kk);
    const double source_to_target = expected_support_distance(inst, inst.p, inst.q, kk);
    out.rhs_conditional += times(mass.q[k], target_to_source) + times(mass.q[k], out.delta_k[k]) +
                           times(mass.p[k], inst.epsilons[k]);
    cssd_value += times(mass.q[k], target_to_source) + times(mass.p[k], source_to_target);
    out.rhs_cssd += times(mass.p[k], out.delta_k[k]) + times(mass.q[k], out.gamma_k[k]);
  }
  out.rhs_cssd += cssd_value;
  return out;
}

ImdResult solve_imd(const ImdInstance& inst) {
  inst.validate();
  std::vector<double> objective(inst.size());
  for (std::size_t i = 0; i < inst.size(); ++i) objective[i] = inst.q[i] - inst.p[i];
  const LpSolution sol = solve_lp(discrepancy_program(inst, Localization::PerClass, objective));
  if (sol.status == LpStatus::Unbounded) {
    throw ImdUnbounded("discrepancy is unbounded: some charged point has no finite cap", sol.ray);
  }
  const double violation = family_violation(inst, sol.x, Localization::PerClass);
  if (violation > kFeasTol) {
    throw std::runtime_error("LP witness violates the family by " + std::to_string(violation));
  }
  ImdResult out;
  out.imd_value = sol.value;
  out.f_star = sol.x;
  if (out.imd_value < -1e-12) {
    throw std::runtime_error("LP returned a negative discrepancy");
  }
  Lemma1Bounds lb = lemma1_bounds(inst);
  out.delta_k = std::move(lb.delta_k);
  out.gamma_k = std::move(lb.gamma_k);
  out.rhs_conditional = lb.rhs_conditional;
  out.rhs_cssd = lb.rhs_cssd;
  const Remark2Report r2 = remark2_check(inst);
  out.rhs_marginal = r2.marginal_rhs;
  return out;
}

Remark2Report remark2_check(const ImdInstance& inst) {
  inst.validate();
  const ClassMasses mass = class_masses(inst);
  Remark2Report r;
  const PointSups cond = point_sups(inst, Localization::PerClass);
  const PointSups marg = point_sups(inst, Localization::Marginal);
  for (std::size_t k = 0; k < inst.num_classes(); ++k) {
    const auto kk = static_cast<std::int64_t>(k);
    r.conditional_distance += times(mass.q[k], expected_support_distance(inst, inst.q, inst.p, kk));
    r.weighted_delta += times(mass.q[k], class_sup(inst, cond, inst.p, kk));
    r.epsilon += mass.p[k] * inst.epsilons[k];
  }
  r.marginal_distance = expected_support_distance(inst, inst.q, inst.p, -1);
  r.delta = class_sup(inst, marg, inst.p, -1);

  std::vector<double> objective(inst.size());
  for (std::size_t i = 0; i < inst.size(); ++i) objective[i] = inst.q[i] - inst.p[i];
  const LpSolution c = solve_lp(discrepancy_program(inst, Localization::PerClass, objective));
  const LpSolution m = solve_lp(discrepancy_program(inst, Localization::Marginal, objective));
  if (c.status == LpStatus::Unbounded || m.status == LpStatus::Unbounded) {
    throw ImdUnbounded("discrepancy is unbounded", c.status == LpStatus::Unbounded ? c.ray : m.ray);
  }
  r.imd_conditional = c.value;
  r.imd_marginal = m.value;
  r.marginal_rhs = r.marginal_distance + r.delta + r.epsilon;
  r.distance_order_holds = r.conditional_distance >= r.marginal_distance - kCertTol;
  r.delta_order_holds = r.weighted_delta <= r.delta + kCertTol;
  r.marginal_bound_holds =
      r.imd_marginal <= r.marginal_rhs + kCertTol && r.imd_conditional <= r.imd_marginal + kCertTol;
  return r;
}

namespace {

SampleCloud joint_side(const JointInstance& inst, const std::vector<double>& w,
                       const std::vector<double>& class_mass) {
  SampleCloud c;
  std::vector<double> data;
  std::size_t n = 0;
  for (std::size_t i = 0; i < w.size(); ++i) {
    if (w[i] <= 0.0) continue;
    auto r = inst.points.row(i);
    data.insert(data.end(), r.begin(), r.end());
    c.labels.push_back(inst.class_of[i]);
    ++n;
  }
  c.points = Tensor(n, inst.points.cols(), std::move(data));
  c.class_marginal = class_mass;
  return c;
}

}  // namespace

Prop1Report prop1_check(const std::vector<JointInstance>& instances) {
  Prop1Report rep;
  for (std::size_t idx = 0; idx < instances.size(); ++idx) {
    const JointInstance& inst = instances[idx];
    std::vector<double> pk(inst.num_classes, 0.0), qk(inst.num_classes, 0.0);
    for (std::size_t i = 0; i < inst.p.size(); ++i) {
      pk.at(inst.class_of[i]) += inst.p[i];
      qk.at(inst.class_of[i]) += inst.q[i];
    }
    const bool positive = std::all_of(pk.begin(), pk.end(), [](double v) { return v > 0.0; }) &&
                          std::all_of(qk.begin(), qk.end(), [](double v) { return v > 0.0; });
    if (!positive) {
      ++rep.skipped;
      rep.warnings.push_back("instance " + std::to_string(idx) +
                             " skipped: a class has zero probability in one domain");
      continue;
    }
    auto normalise = [](std::vector<double> v) {
      const double t = std::accumulate(v.begin(), v.end(), 0.0);
      for (double& x : v) x /= t;
      return v;
    };
    const SampleCloud src = joint_side(inst, inst.p, normalise(pk));
    const SampleCloud tgt = joint_side(inst, inst.q, normalise(qk));
    Prop1Case c;
    c.index = idx;
    c.cssd = cssd(src, tgt, inst.num_classes).value;
    c.joint_ssd = joint_ssd(src, tgt, default_label_scale(src, tgt));
    ++rep.checked;
    rep.cases.push_back(c);
    if ((c.cssd <= kZeroTol) != (c.joint_ssd <= kZeroTol)) rep.counterexamples.push_back(c);
  }
  return rep;
}

ImdInstance random_imd_instance(std::mt19937_64& rng, std::size_t m, std::size_t k) {
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  std::uniform_int_distribution<std::size_t> cls(0, k - 1);
  Tensor pts(m, 2);
  for (double& v : pts.data()) v = unit(rng);
  std::vector<std::size_t> class_of(m);
  for (std::size_t i = 0; i < m; ++i) class_of[i] = i < k ? i : cls(rng);
  std::vector<double> p = sample_dirichlet(rng, 1.0, m);
  std::vector<double> q = sample_dirichlet(rng, 1.0, m);
  std::vector<double> eps(k);
  for (double& e : eps) e = 0.5 * unit(rng);
  return ImdInstance::from_points(std::move(pts), std::move(p), std::move(q), std::move(class_of),
                                  std::move(eps));
}

JointInstance random_joint_instance(std::mt19937_64& rng, std::size_t m, std::size_t k) {
  std::uniform_int_distribution<int> coord(0, 3);
  std::uniform_int_distribution<std::size_t> cls(0, k - 1);
  std::uniform_int_distribution<int> coin(0, 1);
  std::uniform_int_distribution<int> mutation(0, 3);

  std::vector<double> coords;
  std::vector<std::size_t> labels;
  for (std::size_t i = 0; i < m; ++i) {
    coords.push_back(coord(rng));
    coords.push_back(coord(rng));
    labels.push_back(i < k ? i : cls(rng));
  }
  std::vector<double> pw = sample_dirichlet(rng, 1.0, m);
  std::vector<double> qw = sample_dirichlet(rng, 1.0, m);

  if (coin(rng) == 1) {
    std::uniform_int_distribution<std::size_t> atom(0, m - 1);
    const std::size_t a = atom(rng);
    switch (mutation(rng)) {
      case 0:  // target drops an atom
        qw[a] = 0.0;
        break;
      case 1:  // target relabels an atom
        labels.push_back((labels[a] + 1) % k);
        coords.push_back(coords[2 * a]);
        coords.push_back(coords[2 * a + 1]);
        pw.push_back(0.0);
        qw.push_back(qw[a]);
        qw[a] = 0.0;
        break;
      case 2:  // target moves an atom
        labels.push_back(labels[a]);
        coords.push_back(coords[2 * a] + 1.0 + coord(rng));
        coords.push_back(coords[2 * a + 1]);
        pw.push_back(0.0);
        qw.push_back(qw[a]);
        qw[a] = 0.0;
        break;
      default:  // source gains an extra atom
        labels.push_back(cls(rng));
        coords.push_back(coord(rng) + 0.5);
        coords.push_back(coord(rng));
        pw.push_back(0.2);
        qw.push_back(0.0);
        break;
    }
    for (auto* w : {&pw, &qw}) {
      const double t = std::accumulate(w->begin(), w->end(), 0.0);
      for (double& v : *w) v /= t;
    }
  }
  JointInstance inst;
  inst.points = Tensor(labels.size(), 2, std::move(coords));
  inst.class_of = std::move(labels);
  inst.p = std::move(pw);
  inst.q = std::move(qw);
  inst.num_classes = k;
  return inst;
}

namespace {

using nlohmann::json;

json tensor_or_null(const Tensor& t) {
  if (t.size() == 0) return nullptr;
  json rows = json::array();
  for (std::size_t i = 0; i < t.rows(); ++i) {
    json r = json::array();
    for (double v : t.row(i)) {
      if (std::isfinite(v)) r.push_back(v);
      else r.push_back(nullptr);  // +inf: unconstrained pair
    }
    rows.push_back(std::move(r));
  }
  return rows;
}

Tensor tensor_from_rows(const json& j) {
  if (j.is_null()) return {};
  const std::size_t n = j.size();
  const std::size_t m = n == 0 ? 0 : j[0].size();
  std::vector<double> data;
  for (const auto& r : j) {
    if (r.size() != m) throw std::invalid_argument("ragged matrix in instance file");
    for (const auto& v : r) data.push_back(v.is_null() ? kInf : v.get<double>());
  }
  return Tensor(n, m, std::move(data));
}

}  // namespace

std::string instance_to_json(const ImdInstance& inst) {
  json j{{"points", tensor_or_null(inst.points)},
         {"metric", tensor_or_null(inst.metric)},
         {"p", inst.p},
         {"q", inst.q},
         {"class_of", inst.class_of},
         {"epsilons", inst.epsilons}};
  return j.dump();
}

ImdInstance instance_from_json(const std::string& text) {
  const json j = json::parse(text);
  ImdInstance inst;
  inst.points = tensor_from_rows(j.at("points"));
  inst.metric = tensor_from_rows(j.at("metric"));
  inst.p = j.at("p").get<std::vector<double>>();
  inst.q = j.at("q").get<std::vector<double>>();
  inst.class_of = j.at("class_of").get<std::vector<std::size_t>>();
  inst.epsilons = j.at("epsilons").get<std::vector<double>>();
  inst.validate();
  return inst;
}

std::string result_to_json(const ImdResult& r) {
  json j{{"imd_value", r.imd_value},         {"f_star", r.f_star},
         {"delta_k", r.delta_k},             {"gamma_k", r.gamma_k},
         {"rhs_conditional", r.rhs_conditional}, {"rhs_cssd", r.rhs_cssd},
         {"rhs_marginal", r.rhs_marginal}};
  return j.dump();
}

ImdResult result_from_json(const std::string& text) {
  const json j = json::parse(text);
  ImdResult r;
  r.imd_value = j.at("imd_value").get<double>();
  r.f_star = j.at("f_star").get<std::vector<double>>();
  r.delta_k = j.at("delta_k").get<std::vector<double>>();
  r.gamma_k = j.at("gamma_k").get<std::vector<double>>();
  r.rhs_conditional = j.at("rhs_conditional").get<double>();
  r.rhs_cssd = j.at("rhs_cssd").get<double>();
  r.rhs_marginal = j.at("rhs_marginal").get<double>();
  return r;
}

}  // namespace casa
