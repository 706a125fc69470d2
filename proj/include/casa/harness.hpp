#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <random>
#include <string>
#include <string_view>
#include <vector>

#include "casa/datagen.hpp"
#include "casa/divergences.hpp"
#include "casa/losses.hpp"
#include "casa/models.hpp"

namespace casa {

enum class Method { Casa, AsaBaseline, DannBaseline, SourceOnly };

std::string method_name(Method m);
/// Accepts casa, asa_baseline, dann_baseline, source_only.
Method parse_method(std::string_view name);

std::string alpha_name(const std::optional<double>& alpha);
/// "none" (case-insensitive) maps to nullopt; otherwise a positive number.
std::optional<double> parse_alpha(std::string_view text);

struct TrainConfig {
  Method method = Method::Casa;
  std::int64_t steps = 4000;
  std::int64_t batch = 64;
  double lr = 0.02;
  double momentum = 0.9;
  double weight_decay = 5e-4;
  std::int64_t lr_anneal_start = 0;
  std::int64_t lr_anneal_end = 4000;
  double lr_final_factor = 0.1;
  double lambda_y = 1.0;
  double lambda_align = 1.0;
  double lambda_ce = 0.1;
  double lambda_v_src = 0.0;
  double lambda_v_tgt = 0.1;
  std::int64_t align_warmup = 1000;
  double vat_epsilon = 0.5;
  bool entropy_conditioning = true;  // casa only
  bool detach_conditioning = true;   // casa: no gradient through p in z (x) p
  std::uint64_t seed = 0;
  std::int64_t eval_every = 500;
  bool check_invariants = false;

  // model
  std::size_t feature_dim = 8;
  std::vector<std::size_t> hidden{64, 64};
  std::vector<std::size_t> disc_hidden{64, 64};
  double slope = 0.1;

  // synthetic data
  std::size_t num_classes = 3;
  std::optional<double> alpha;
  GaussianTaskSpec task{};

  /// Throws std::invalid_argument naming the offending field.
  void validate() const;

  /// Canonical flat key=value rendering, one key per line in a fixed order.
  std::string to_kv() const;
  /// Hex FNV-1a digest of to_kv().
  std::string hash() const;
  /// Applies `key=value` lines on top of `base`; '#' starts a comment.
  /// Unknown keys and malformed values raise std::invalid_argument.
  static TrainConfig from_kv(std::string_view text, TrainConfig base);
  static TrainConfig from_kv(std::string_view text);
  static TrainConfig from_file(const std::filesystem::path& path, TrainConfig base);
  static TrainConfig from_file(const std::filesystem::path& path);
  void set(std::string_view key, std::string_view value);
};

/// Learning-rate multiplier: 1 before start, linear to final_factor at end.
double lr_factor(const TrainConfig& cfg, std::int64_t step);
/// min(1, step / warmup) * lambda_align; warmup 0 means no ramp.
double effective_lambda_align(const TrainConfig& cfg, std::int64_t step);

/// SGD with momentum and L2 weight decay: v = mu v + g + wd w; w -= lr v.
class Sgd {
 public:
  Sgd(std::vector<Tensor*> params, double momentum, double weight_decay);
  void step(double lr);

 private:
  std::vector<Tensor*> params_;
  std::vector<std::vector<double>> velocity_;
  double momentum_;
  double weight_decay_;
};

/// One r-update: minimises L_d with f, c frozen. Returns L_d.
double discriminator_step(ModelBundle& m, const TrainConfig& cfg, const Tensor& xs,
                          const Tensor& xt, Sgd& opt, double lr);

/// One f,c-update with r frozen. `lambda_align` is the warmed-up weight.
LossBreakdown generator_step(ModelBundle& m, const TrainConfig& cfg, const Tensor& xs,
                             std::span<const std::size_t> ys, const Tensor& xt,
                             double lambda_align, std::mt19937_64& rng, Sgd& opt, double lr);

/// Mean over classes of within-class recall. Every class must occur in truth.
double per_class_accuracy(std::span<const std::size_t> pred, std::span<const std::size_t> truth,
                          std::size_t num_classes);

struct EvalPoint {
  std::int64_t step = 0;
  LossBreakdown losses;
  double per_class_acc = 0.0;
  DivergenceReport divergence;
};

struct RunRecord {
  std::string config_hash;
  std::string method;
  std::optional<double> alpha;
  std::uint64_t seed = 0;
  std::vector<double> source_marginal;
  std::vector<double> target_marginal;
  double rotation_deg = 0.0;
  double translation = 0.0;
  double test_fraction = 0.0;
  std::uint64_t split_seed = 0;
  std::vector<EvalPoint> evals;
  double final_per_class_acc = 0.0;
  DivergenceReport final_divergence;
  bool aborted = false;
  std::int64_t abort_step = -1;
  std::string abort_reason;
  double wall_time_s = 0.0;

  std::string run_id() const;
};

/// Latent features of one run, for scatter plots.
struct FeatureDump {
  std::string run_id;
  Tensor source_z;
  std::vector<std::size_t> source_y;
  Tensor target_z;
  std::vector<std::size_t> target_y;
};

struct TrainResult {
  ModelBundle model;
  RunRecord record;
  FeatureDump features;
};

/// Evaluation-time metrics. Divergences are computed on feature clouds of at
/// most 512 points per domain, rescaled by the source cloud's RMS radius.
EvalPoint evaluate(const ModelBundle& m, const TrainingView& train, const EvaluationView& eval,
                   std::size_t num_classes, std::uint64_t seed);

/// Alternating r / f,c training. A non-finite loss ends the run early with
/// `aborted` set and the step recorded; it does not throw.
TrainResult train(const TrainConfig& cfg, const DomainPair& data);

std::string run_to_json(const RunRecord& r, bool include_wall_time = true);
RunRecord run_from_json(const std::string& text);

/// Target marginal for one grid cell: Dirichlet(alpha) redrawn until every
/// coordinate reaches `min_coordinate`, so each class occurs in every split.
std::vector<double> grid_target_marginal(const std::optional<double>& alpha,
                                         std::size_t num_classes, std::uint64_t seed,
                                         double min_coordinate = 0.01);

/// Data for one (alpha, seed) cell, shared by every method.
DomainPair grid_domains(const TrainConfig& base, const std::optional<double>& alpha,
                        std::uint64_t seed);

struct GridSpec {
  std::vector<Method> methods{Method::Casa, Method::AsaBaseline, Method::DannBaseline,
                              Method::SourceOnly};
  std::vector<std::optional<double>> alphas{std::nullopt, 10.0, 3.0, 1.0, 0.5};
  std::vector<std::uint64_t> seeds{0, 1, 2, 3, 4};
  TrainConfig base{};
  std::size_t workers = 1;
};

struct GridCell {
  Method method = Method::Casa;
  std::optional<double> alpha;
  std::vector<double> accuracies;  // per seed; NaN for aborted runs
  std::vector<double> cssd;        // per seed; NaN for aborted runs
  std::size_t completed = 0;
  double mean_acc = 0.0;
  double std_acc = 0.0;
  double mean_cssd = 0.0;
  bool complete = false;
};

struct GridReport {
  std::vector<GridCell> cells;  // methods-major, then alphas
  std::vector<RunRecord> runs;  // job order: cell, then seed
  std::vector<FeatureDump> features;

  const GridCell& cell(Method m, const std::optional<double>& alpha) const;
};

using GridProgress = std::function<void(const RunRecord&)>;

GridReport run_grid(const GridSpec& spec, const GridProgress& progress = {});

/// Summary table, one row per (method, alpha). Byte-stable for equal inputs.
std::string grid_csv(const GridReport& report);
/// Methods by alphas with "mean ± std" entries (markdown).
std::string grid_table(const GridReport& report);

struct SeriesRow {
  std::string run_id;
  std::int64_t step = 0;
  double l_y = 0.0, l_ce = 0.0, l_v_src = 0.0, l_v_tgt = 0.0, l_d = 0.0, l_align = 0.0;
  double total_fc = 0.0;
  double per_class_acc = 0.0;
  double ssd = 0.0, cssd = 0.0, joint_ssd = 0.0, wasserstein = 0.0;

  friend bool operator==(const SeriesRow&, const SeriesRow&) = default;
};

std::vector<SeriesRow> series_rows(const std::vector<RunRecord>& records);
std::string series_csv(const std::vector<SeriesRow>& rows);
std::vector<SeriesRow> read_series_csv(const std::filesystem::path& path);

struct PcaResult {
  Tensor mean;        // 1 x dim
  Tensor projection;  // dim x k, orthonormal columns
  std::vector<double> eigenvalues;  // all, descending
  double variance_fraction = 0.0;   // kept / total
  Tensor projected;                 // n x k
};

/// Principal components of the rows of z (population covariance). Each
/// component's largest-magnitude entry is made positive.
PcaResult pca(const Tensor& z, std::size_t k);

/// Writes series.csv, features_2d.csv and pca_projection.csv into `dir`.
void emit_plot_data(const std::vector<RunRecord>& records,
                    const std::vector<FeatureDump>& features, const std::filesystem::path& dir);

}  // namespace casa
