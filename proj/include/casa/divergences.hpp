#pragma once

#include <cstdint>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "casa/tensor.hpp"

namespace casa {

/// A finite sample standing in for a distribution's support.
///
/// `labels` (0-based) and `class_marginal` are optional; conditional
/// divergences require labels and fall back to empirical label frequencies
/// when no marginal is supplied.
struct SampleCloud {
  Tensor points;
  std::vector<std::size_t> labels;
  std::vector<double> class_marginal;

  std::size_t size() const { return points.rows(); }
  std::size_t dim() const { return points.cols(); }
  bool labelled() const { return !labels.empty(); }

  /// Throws std::invalid_argument if labels or marginal are malformed.
  void validate(std::size_t num_classes) const;
  /// Marginal weights, either supplied or estimated from labels.
  std::vector<double> marginal(std::size_t num_classes) const;
  /// Sub-cloud with only the points of class k (labels dropped).
  SampleCloud class_slice(std::size_t k) const;
};

struct DivergenceReport {
  std::int64_t step = 0;
  double ssd = 0.0;
  double cssd = 0.0;
  double joint_ssd = 0.0;
  double wasserstein = 0.0;
  std::vector<double> per_class_terms;
  std::string metric = "euclidean";
};

/// Clouds at or below this size are searched by brute force.
inline constexpr std::size_t kBruteForceLimit = 10000;

/// Exact nearest-neighbour index (k-d tree) over the rows of a point matrix.
class SupportIndex {
 public:
  explicit SupportIndex(const Tensor& points);
  ~SupportIndex();
  SupportIndex(SupportIndex&&) noexcept;
  SupportIndex& operator=(SupportIndex&&) noexcept;

  double distance(std::span<const double> z) const;

 private:
  struct Impl;
  std::unique_ptr<Impl> impl_;
};

double squared_distance(std::span<const double> a, std::span<const double> b);

/// Euclidean distance from z to the nearest point of the cloud.
double dist_to_support(std::span<const double> z, const SampleCloud& cloud);
double dist_to_support_brute(std::span<const double> z, const Tensor& points);

/// Mean over `from` of the distance to the support of `to`. Uses the k-d tree
/// above `index_threshold` points.
double mean_distance_to_support(const Tensor& from, const Tensor& to,
                                std::size_t index_threshold = kBruteForceLimit);

double ssd(const SampleCloud& p, const SampleCloud& q);

struct CssdResult {
  double value = 0.0;
  std::vector<double> per_class_terms;
};

/// Class-marginal weighted per-class SSD. The P-side term is weighted by P's
/// marginal and the Q-side term by Q's marginal.
CssdResult cssd(const SampleCloud& p, const SampleCloud& q, std::size_t num_classes);

/// SSD under d((z,y),(z',y')) = |z - z'| + label_scale [y != y'].
double joint_ssd(const SampleCloud& p, const SampleCloud& q, double label_scale);

/// Ten times the bounding-box diagonal of the pooled points.
double default_label_scale(const SampleCloud& p, const SampleCloud& q);

inline constexpr std::size_t kWassersteinMaxPoints = 256;

/// Exact W1 between equal-size uniform clouds via optimal assignment.
double wasserstein_1(const SampleCloud& p, const SampleCloud& q);

/// Minimum-cost perfect matching on a square cost matrix (Hungarian method).
/// Returns the total cost; `assignment[i]` receives the column matched to row i.
double min_cost_assignment(const Tensor& cost, std::vector<std::size_t>* assignment = nullptr);

/// Uniform subsample without replacement, order preserved.
SampleCloud subsample(const SampleCloud& cloud, std::size_t n, std::uint64_t seed);

std::string report_to_json(const DivergenceReport& r);
DivergenceReport report_from_json(const std::string& text);

}  // namespace casa
