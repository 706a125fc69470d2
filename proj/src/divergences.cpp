#include "casa/divergences.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <random>

#include "json.hpp"

namespace casa {

void SampleCloud::validate(std::size_t num_classes) const {
  if (!labels.empty() && labels.size() != points.rows()) {
    throw std::invalid_argument("cloud has " + std::to_string(labels.size()) + " labels for " +
                                std::to_string(points.rows()) + " points");
  }
  for (std::size_t y : labels) {
    if (y >= num_classes) {
      throw std::invalid_argument("label " + std::to_string(y) + " outside [0, K)");
    }
  }
  if (!class_marginal.empty()) {
    if (class_marginal.size() != num_classes) {
      throw std::invalid_argument("class marginal has wrong length");
    }
    double total = 0.0;
    for (double v : class_marginal) {
      if (v < 0.0) throw std::invalid_argument("negative class marginal entry");
      total += v;
    }
    if (std::fabs(total - 1.0) > 1e-9) {
      throw std::invalid_argument("class marginal does not sum to one");
    }
  }
}

std::vector<double> SampleCloud::marginal(std::size_t num_classes) const {
  if (!class_marginal.empty()) {
    return class_marginal;
  }
  if (labels.empty()) {
    throw std::invalid_argument("cloud has neither labels nor a class marginal");
  }
  std::vector<double> out(num_classes, 0.0);
  for (std::size_t y : labels) out.at(y) += 1.0;
  for (double& v : out) v /= static_cast<double>(labels.size());
  return out;
}

SampleCloud SampleCloud::class_slice(std::size_t k) const {
  std::vector<double> data;
  std::size_t n = 0;
  for (std::size_t i = 0; i < labels.size(); ++i) {
    if (labels[i] == k) {
      auto r = points.row(i);
      data.insert(data.end(), r.begin(), r.end());
      ++n;
    }
  }
  SampleCloud out;
  if (n > 0) {
    out.points = Tensor(n, points.cols(), std::move(data));
  }
  return out;
}

double squared_distance(std::span<const double> a, std::span<const double> b) {
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const double d = a[i] - b[i];
    s += d * d;
  }
  return s;
}

struct SupportIndex::Impl {
  struct Node {
    std::size_t point;
    std::size_t dim;
    std::int64_t left = -1;
    std::int64_t right = -1;
  };

  const Tensor* points;
  std::vector<Node> nodes;
  std::int64_t root = -1;

  std::int64_t build(std::vector<std::size_t>& idx, std::size_t lo, std::size_t hi) {
    if (lo >= hi) return -1;
    const std::size_t dims = points->cols();
    std::size_t best_dim = 0;
    double best_spread = -1.0;
    for (std::size_t d = 0; d < dims; ++d) {
      double mn = std::numeric_limits<double>::infinity(), mx = -mn;
      for (std::size_t i = lo; i < hi; ++i) {
        const double v = (*points)(idx[i], d);
        mn = std::min(mn, v);
        mx = std::max(mx, v);
      }
      if (mx - mn > best_spread) {
        best_spread = mx - mn;
        best_dim = d;
      }
    }
    const std::size_t mid = lo + (hi - lo) / 2;
    std::nth_element(idx.begin() + lo, idx.begin() + mid, idx.begin() + hi,
                     [&](std::size_t a, std::size_t b) {
                       return (*points)(a, best_dim) < (*points)(b, best_dim);
                     });
    const auto id = static_cast<std::int64_t>(nodes.size());
    nodes.push_back({idx[mid], best_dim});
    const auto l = build(idx, lo, mid);
    const auto r = build(idx, mid + 1, hi);
    nodes[id].left = l;
    nodes[id].right = r;
    return id;
  }

  void search(std::int64_t id, std::span<const double> z, double& best) const {
    if (id < 0) return;
    const Node& n = nodes[id];
    best = std::min(best, squared_distance(z, points->row(n.point)));
    const double diff = z[n.dim] - (*points)(n.point, n.dim);
    const auto near = diff < 0.0 ? n.left : n.right;
    const auto far = diff < 0.0 ? n.right : n.left;
    search(near, z, best);
    if (diff * diff <= best) search(far, z, best);
  }
};

SupportIndex::SupportIndex(const Tensor& points) : impl_(std::make_unique<Impl>()) {
  if (points.rows() == 0) {
    throw std::invalid_argument("cannot index an empty cloud");
  }
  impl_->points = &points;
  std::vector<std::size_t> idx(points.rows());
  std::iota(idx.begin(), idx.end(), 0);
  impl_->nodes.reserve(points.rows());
  impl_->root = impl_->build(idx, 0, idx.size());
}

SupportIndex::~SupportIndex() = default;
SupportIndex::SupportIndex(SupportIndex&&) noexcept = default;
SupportIndex& SupportIndex::operator=(SupportIndex&&) noexcept = default;

double SupportIndex::distance(std::span<const double> z) const {
  double best = std::numeric_limits<double>::infinity();
  impl_->search(impl_->root, z, best);
  return std::sqrt(best);
}

double dist_to_support_brute(std::span<const double> z, const Tensor& points) {
  if (points.rows() == 0) {
    throw std::invalid_argument("distance to an empty support");
  }
  if (z.size() != points.cols()) {
    throw DimensionError("point dimension differs from cloud dimension");
  }
  double best = std::numeric_limits<double>::infinity();
  for (std::size_t i = 0; i < points.rows(); ++i) {
    best = std::min(best, squared_distance(z, points.row(i)));
  }
  return std::sqrt(best);
}

double dist_to_support(std::span<const double> z, const SampleCloud& cloud) {
  if (cloud.size() == 0) {
    throw std::invalid_argument("distance to an empty support");
  }
  if (cloud.size() <= kBruteForceLimit) {
    return dist_to_support_brute(z, cloud.points);
  }
  if (z.size() != cloud.dim()) {
    throw DimensionError("point dimension differs from cloud dimension");
  }
  return SupportIndex(cloud.points).distance(z);
}

double mean_distance_to_support(const Tensor& from, const Tensor& to,
                                std::size_t index_threshold) {
  if (from.rows() == 0 || to.rows() == 0) {
    throw std::invalid_argument("support distance between empty clouds");
  }
  if (from.cols() != to.cols()) {
    throw DimensionError("clouds live in different dimensions");
  }
  double total = 0.0;
  if (to.rows() > index_threshold) {
    SupportIndex index(to);
    for (std::size_t i = 0; i < from.rows(); ++i) total += index.distance(from.row(i));
  } else {
    for (std::size_t i = 0; i < from.rows(); ++i) total += dist_to_support_brute(from.row(i), to);
  }
  return total / static_cast<double>(from.rows());
}

double ssd(const SampleCloud& p, const SampleCloud& q) {
  if (p.size() == 0 || q.size() == 0) {
    throw std::invalid_argument("ssd needs two non-empty clouds");
  }
  return mean_distance_to_support(p.points, q.points) + mean_distance_to_support(q.points, p.points);
}

CssdResult cssd(const SampleCloud& p, const SampleCloud& q, std::size_t num_classes) {
  if (!p.labelled() || !q.labelled()) {
    throw std::invalid_argument("cssd needs labelled clouds");
  }
  p.validate(num_classes);
  q.validate(num_classes);
  const auto pw = p.marginal(num_classes);
  const auto qw = q.marginal(num_classes);
  CssdResult out;
  out.per_class_terms.assign(num_classes, 0.0);
  for (std::size_t k = 0; k < num_classes; ++k) {
    if (pw[k] <= 0.0 && qw[k] <= 0.0) continue;
    const SampleCloud pk = p.class_slice(k);
    const SampleCloud qk = q.class_slice(k);
    if (pk.size() == 0 || qk.size() == 0) {
      throw std::invalid_argument("class " + std::to_string(k) +
                                  " has positive marginal but no samples in " +
                                  (pk.size() == 0 ? "the first" : "the second") + " cloud");
    }
    double term = 0.0;
    if (pw[k] > 0.0) term += pw[k] * mean_distance_to_support(pk.points, qk.points);
    if (qw[k] > 0.0) term += qw[k] * mean_distance_to_support(qk.points, pk.points);
    out.per_class_terms[k] = term;
    out.value += term;
  }
  return out;
}

namespace {

double mean_joint_distance(const SampleCloud& from, const SampleCloud& to, double label_scale) {
  double total = 0.0;
  for (std::size_t i = 0; i < from.size(); ++i) {
    double best = std::numeric_limits<double>::infinity();
    for (std::size_t j = 0; j < to.size(); ++j) {
      double d = std::sqrt(squared_distance(from.points.row(i), to.points.row(j)));
      if (from.labels[i] != to.labels[j]) d += label_scale;
      best = std::min(best, d);
    }
    total += best;
  }
  return total / static_cast<double>(from.size());
}

}  // namespace

double joint_ssd(const SampleCloud& p, const SampleCloud& q, double label_scale) {
  if (p.size() == 0 || q.size() == 0) {
    throw std::invalid_argument("joint_ssd needs two non-empty clouds");
  }
  if (!p.labelled() || !q.labelled() || p.labels.size() != p.size() ||
      q.labels.size() != q.size()) {
    throw std::invalid_argument("joint_ssd needs one label per point");
  }
  if (p.dim() != q.dim()) {
    throw DimensionError("clouds live in different dimensions");
  }
  if (!(label_scale > 0.0)) {
    throw std::invalid_argument("label scale must be positive");
  }
  return mean_joint_distance(p, q, label_scale) + mean_joint_distance(q, p, label_scale);
}

double default_label_scale(const SampleCloud& p, const SampleCloud& q) {
  const std::size_t dims = p.dim();
  double diag2 = 0.0;
  for (std::size_t d = 0; d < dims; ++d) {
    double mn = std::numeric_limits<double>::infinity(), mx = -mn;
    for (const SampleCloud* c : {&p, &q}) {
      for (std::size_t i = 0; i < c->size(); ++i) {
        mn = std::min(mn, c->points(i, d));
        mx = std::max(mx, c->points(i, d));
      }
    }
    diag2 += (mx - mn) * (mx - mn);
  }
  const double diag = std::sqrt(diag2);
  return 10.0 * (diag > 0.0 ? diag : 1.0);
}

double min_cost_assignment(const Tensor& cost, std::vector<std::size_t>* assignment) {
  const std::size_t n = cost.rows();
  if (n != cost.cols()) {
    throw DimensionError("assignment needs a square cost matrix");
  }
  const double inf = std::numeric_limits<double>::infinity();
  // Potentials over rows (u) and columns (v); 1-based with a virtual column 0.
  std::vector<double> u(n + 1, 0.0), v(n + 1, 0.0);
  std::vector<std::size_t> match(n + 1, 0), way(n + 1, 0);
  for (std::size_t i = 1; i <= n; ++i) {
    match[0] = i;
    std::size_t j0 = 0;
    std::vector<double> minv(n + 1, inf);
    std::vector<char> used(n + 1, 0);
    do {
      used[j0] = 1;
      const std::size_t i0 = match[j0];
      double delta = inf;
      std::size_t j1 = 0;
      for (std::size_t j = 1; j <= n; ++j) {
        if (used[j]) continue;
        const double cur = cost(i0 - 1, j - 1) - u[i0] - v[j];
        if (cur < minv[j]) {
          minv[j] = cur;
          way[j] = j0;
        }
        if (minv[j] < delta) {
          delta = minv[j];
          j1 = j;
        }
      }
      for (std::size_t j = 0; j <= n; ++j) {
        if (used[j]) {
          u[match[j]] += delta;
          v[j] -= delta;
        } else {
          minv[j] -= delta;
        }
      }
      j0 = j1;
    } while (match[j0] != 0);
    do {
      const std::size_t j1 = way[j0];
      match[j0] = match[j1];
      j0 = j1;
    } while (j0 != 0);
  }
  std::vector<std::size_t> row_to_col(n);
  for (std::size_t j = 1; j <= n; ++j) row_to_col[match[j] - 1] = j - 1;
  double total = 0.0;
  for (std::size_t i = 0; i < n; ++i) total += cost(i, row_to_col[i]);
  if (assignment != nullptr) *assignment = std::move(row_to_col);
  return total;
}

double wasserstein_1(const SampleCloud& p, const SampleCloud& q) {
  if (p.size() != q.size()) {
    throw std::invalid_argument("wasserstein_1 needs equal cloud sizes; subsample first");
  }
  if (p.size() == 0 || p.size() > kWassersteinMaxPoints) {
    throw std::invalid_argument("wasserstein_1 supports 1.." +
                                std::to_string(kWassersteinMaxPoints) + " points");
  }
  if (p.dim() != q.dim()) {
    throw DimensionError("clouds live in different dimensions");
  }
  const std::size_t n = p.size();
  Tensor cost(n, n);
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < n; ++j) {
      cost(i, j) = std::sqrt(squared_distance(p.points.row(i), q.points.row(j)));
    }
  }
  return min_cost_assignment(cost) / static_cast<double>(n);
}

SampleCloud subsample(const SampleCloud& cloud, std::size_t n, std::uint64_t seed) {
  if (n >= cloud.size()) {
    return cloud;
  }
  std::vector<std::size_t> idx(cloud.size());
  std::iota(idx.begin(), idx.end(), 0);
  std::mt19937_64 rng(seed);
  // Partial Fisher-Yates, then restore original order.
  for (std::size_t i = 0; i < n; ++i) {
    std::uniform_int_distribution<std::size_t> pick(i, idx.size() - 1);
    std::swap(idx[i], idx[pick(rng)]);
  }
  idx.resize(n);
  std::sort(idx.begin(), idx.end());
  SampleCloud out;
  std::vector<double> data;
  data.reserve(n * cloud.dim());
  for (std::size_t i : idx) {
    auto r = cloud.points.row(i);
    data.insert(data.end(), r.begin(), r.end());
    if (cloud.labelled()) out.labels.push_back(cloud.labels[i]);
  }
  out.points = Tensor(n, cloud.dim(), std::move(data));
  out.class_marginal = cloud.class_marginal;
  return out;
}

std::string report_to_json(const DivergenceReport& r) {
  nlohmann::json j{{"step", r.step},
                   {"ssd", r.ssd},
                   {"cssd", r.cssd},
                   {"joint_ssd", r.joint_ssd},
                   {"wasserstein", r.wasserstein},
                   {"per_class_terms", r.per_class_terms},
                   {"metric", r.metric}};
  return j.dump();
}

DivergenceReport report_from_json(const std::string& text) {
  const auto j = nlohmann::json::parse(text);
  DivergenceReport r;
  r.step = j.at("step").get<std::int64_t>();
  r.ssd = j.at("ssd").get<double>();
  r.cssd = j.at("cssd").get<double>();
  r.joint_ssd = j.at("joint_ssd").get<double>();
  r.wasserstein = j.at("wasserstein").get<double>();
  r.per_class_terms = j.at("per_class_terms").get<std::vector<double>>();
  r.metric = j.value("metric", std::string("euclidean"));
  return r;
}

}  // namespace casa
