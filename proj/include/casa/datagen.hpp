#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include "casa/tensor.hpp"

namespace casa {

/// Symmetric Dirichlet draw via normalised Gamma(alpha, 1) variates.
std::vector<double> sample_dirichlet(std::mt19937_64& rng, double alpha, std::size_t k);

struct LabelShiftSpec {
  std::optional<double> alpha;  // nullopt: uniform target marginal
  std::size_t num_classes = 3;
  std::uint64_t seed = 0;
};

/// Target label marginal for one run. Throws std::invalid_argument for alpha <= 0.
std::vector<double> sample_target_marginal(const LabelShiftSpec& spec);

/// Integer counts summing exactly to n, by largest-remainder rounding of
/// n * marginal. Remainder ties go to the lower class index.
std::vector<std::size_t> largest_remainder_counts(const std::vector<double>& marginal,
                                                  std::size_t n);

struct LabeledArrays {
  Tensor x;
  std::vector<std::size_t> y;
};

/// What training code may see: labelled source data and unlabelled target data.
struct TrainingView {
  Tensor source_x;
  std::vector<std::size_t> source_y;
  Tensor target_x;
};

/// Held-out labelled target data, read only by evaluation.
struct EvaluationView {
  Tensor target_x;
  std::vector<std::size_t> target_y;
};

struct DomainPair {
  TrainingView training;
  EvaluationView evaluation;
  std::vector<double> source_marginal;
  std::vector<double> target_marginal;
  std::size_t num_classes = 0;
};

struct GaussianTaskSpec {
  std::size_t n_source = 600;
  std::size_t n_target = 750;   // split into train/test by test_fraction
  double test_fraction = 0.2;
  double class_radius = 1.0;    // class means sit on a circle of this radius
  double class_sigma = 0.35;
  double rotation_deg = 15.0;   // target = R * source + translation
  double translation = 0.3;     // applied along the x axis
  std::uint64_t geometry_seed = 0;
};

/// Class-conditional 2-D Gaussians; target conditionals are the source ones
/// under a fixed rotation and translation. Per-split class counts come from
/// largest-remainder rounding, so any class with a positive count is present.
DomainPair make_gaussian_domains(const GaussianTaskSpec& task, const LabelShiftSpec& shift);
DomainPair make_gaussian_domains(const GaussianTaskSpec& task, std::size_t num_classes,
                                 const std::vector<double>& target_marginal,
                                 std::uint64_t sample_seed);

/// Reads IDX (magic 0x803 images / 0x801 labels) or a CSV file whose rows are
/// "label,pix0,pix1,...". For CSV input the labels path is ignored.
/// Pixels are scaled to [0,1] and average-pooled by `downsample`.
LabeledArrays load_digit_files(const std::filesystem::path& images,
                               const std::filesystem::path& labels, std::size_t downsample,
                               std::size_t num_classes = 10);

/// Draws class counts from largest-remainder rounding of n * marginal,
/// uniformly without replacement within each class; output is grouped by class.
LabeledArrays subsample_to_marginal(const Tensor& x, const std::vector<std::size_t>& y,
                                    const std::vector<double>& marginal, std::size_t n,
                                    std::uint64_t seed);

struct DatasetManifest {
  std::string name;
  std::size_t n_source = 0;
  std::size_t n_target = 0;
  std::size_t num_classes = 0;
  std::optional<double> alpha;
  std::uint64_t seed = 0;
  std::vector<double> source_marginal;
  std::vector<double> target_marginal;
};

std::string manifest_to_json(const DatasetManifest& m);
DatasetManifest manifest_from_json(const std::string& text);

}  // namespace casa
