#include "casa/datagen.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <fstream>
#include <numbers>
#include <numeric>
#include <sstream>
#include <stdexcept>

#include "json.hpp"

namespace casa {

std::vector<double> sample_dirichlet(std::mt19937_64& rng, double alpha, std::size_t k) {
  if (!(alpha > 0.0) || !std::isfinite(alpha)) {
    throw std::invalid_argument("Dirichlet concentration must be positive and finite");
  }
  if (k == 0) throw std::invalid_argument("Dirichlet needs at least one coordinate");
  std::gamma_distribution<double> gamma(alpha, 1.0);
  std::vector<double> out(k);
  double total = 0.0;
  // Very small alpha can underflow every draw; redraw in that case.
  while (!(total > 0.0)) {
    total = 0.0;
    for (double& v : out) {
      v = gamma(rng);
      total += v;
    }
  }
  for (double& v : out) v /= total;
  return out;
}

std::vector<double> sample_target_marginal(const LabelShiftSpec& spec) {
  if (spec.num_classes == 0) throw std::invalid_argument("need at least one class");
  if (!spec.alpha) {
    return std::vector<double>(spec.num_classes, 1.0 / static_cast<double>(spec.num_classes));
  }
  if (!(*spec.alpha > 0.0)) throw std::invalid_argument("alpha must be > 0");
  std::mt19937_64 rng(spec.seed);
  return sample_dirichlet(rng, *spec.alpha, spec.num_classes);
}

std::vector<std::size_t> largest_remainder_counts(const std::vector<double>& marginal,
                                                  std::size_t n) {
  double total = 0.0;
  for (double v : marginal) {
    if (!(v >= 0.0)) throw std::invalid_argument("marginal has a negative entry");
    total += v;
  }
  if (std::fabs(total - 1.0) > 1e-9) throw std::invalid_argument("marginal does not sum to one");

  std::vector<std::size_t> counts(marginal.size());
  std::vector<double> rem(marginal.size());
  std::size_t assigned = 0;
  for (std::size_t k = 0; k < marginal.size(); ++k) {
    const double exact = marginal[k] / total * static_cast<double>(n);
    counts[k] = static_cast<std::size_t>(std::floor(exact));
    rem[k] = exact - static_cast<double>(counts[k]);
    assigned += counts[k];
  }
  std::vector<std::size_t> order(marginal.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t a, std::size_t b) { return rem[a] > rem[b]; });
  for (std::size_t i = 0; assigned < n; ++i, ++assigned) ++counts[order[i % order.size()]];
  return counts;
}

namespace {

std::vector<std::array<double, 2>> class_means(std::size_t k, double radius) {
  std::vector<std::array<double, 2>> means(k);
  for (std::size_t c = 0; c < k; ++c) {
    const double angle = 2.0 * std::numbers::pi * static_cast<double>(c) / static_cast<double>(k);
    means[c] = {radius * std::cos(angle), radius * std::sin(angle)};
  }
  return means;
}

LabeledArrays draw_split(std::mt19937_64& rng, const std::vector<std::size_t>& counts,
                         const std::vector<std::array<double, 2>>& means, double sigma,
                         double rot_deg, double shift) {
  std::size_t n = std::accumulate(counts.begin(), counts.end(), std::size_t{0});
  LabeledArrays out{Tensor(n, 2), {}};
  out.y.reserve(n);
  std::normal_distribution<double> noise(0.0, sigma);
  const double th = rot_deg * std::numbers::pi / 180.0;
  const double c = std::cos(th), s = std::sin(th);
  std::size_t row = 0;
  for (std::size_t k = 0; k < counts.size(); ++k) {
    for (std::size_t i = 0; i < counts[k]; ++i, ++row) {
      const double u = means[k][0] + noise(rng);
      const double v = means[k][1] + noise(rng);
      out.x(row, 0) = c * u - s * v + shift;
      out.x(row, 1) = s * u + c * v;
      out.y.push_back(k);
    }
  }
  // Interleave classes so minibatch sampling and subsampling see no block order.
  std::vector<std::size_t> perm(n);
  std::iota(perm.begin(), perm.end(), 0);
  std::shuffle(perm.begin(), perm.end(), rng);
  LabeledArrays mixed{Tensor(n, 2), std::vector<std::size_t>(n)};
  for (std::size_t i = 0; i < n; ++i) {
    mixed.x(i, 0) = out.x(perm[i], 0);
    mixed.x(i, 1) = out.x(perm[i], 1);
    mixed.y[i] = out.y[perm[i]];
  }
  return mixed;
}

void require_counts(const std::vector<std::size_t>& counts, const std::vector<double>& marginal,
                    const char* split) {
  for (std::size_t k = 0; k < counts.size(); ++k) {
    if (marginal[k] > 0.0 && counts[k] == 0) {
      throw std::invalid_argument(std::string(split) + " split: class " + std::to_string(k) +
                                  " rounds to zero samples");
    }
  }
}

}  // namespace

DomainPair make_gaussian_domains(const GaussianTaskSpec& task, std::size_t num_classes,
                                 const std::vector<double>& target_marginal,
                                 std::uint64_t sample_seed) {
  if (num_classes < 2) throw std::invalid_argument("need at least two classes");
  if (target_marginal.size() != num_classes) {
    throw std::invalid_argument("target marginal length differs from class count");
  }
  if (!(task.test_fraction > 0.0 && task.test_fraction < 1.0)) {
    throw std::invalid_argument("test_fraction must lie in (0,1)");
  }
  const auto means = class_means(num_classes, task.class_radius);
  std::seed_seq seq{task.geometry_seed, sample_seed};
  std::mt19937_64 rng(seq);

  DomainPair out;
  out.num_classes = num_classes;
  out.source_marginal.assign(num_classes, 1.0 / static_cast<double>(num_classes));
  out.target_marginal = target_marginal;

  const auto src_counts = largest_remainder_counts(out.source_marginal, task.n_source);
  require_counts(src_counts, out.source_marginal, "source");
  const auto n_test = static_cast<std::size_t>(
      std::llround(task.test_fraction * static_cast<double>(task.n_target)));
  const auto train_counts = largest_remainder_counts(target_marginal, task.n_target - n_test);
  const auto test_counts = largest_remainder_counts(target_marginal, n_test);
  require_counts(train_counts, target_marginal, "target train");
  require_counts(test_counts, target_marginal, "target test");

  LabeledArrays src = draw_split(rng, src_counts, means, task.class_sigma, 0.0, 0.0);
  LabeledArrays tr = draw_split(rng, train_counts, means, task.class_sigma, task.rotation_deg,
                                task.translation);
  LabeledArrays te = draw_split(rng, test_counts, means, task.class_sigma, task.rotation_deg,
                                task.translation);
  out.training.source_x = std::move(src.x);
  out.training.source_y = std::move(src.y);
  out.training.target_x = std::move(tr.x);  // target training labels are discarded here
  out.evaluation.target_x = std::move(te.x);
  out.evaluation.target_y = std::move(te.y);
  return out;
}

DomainPair make_gaussian_domains(const GaussianTaskSpec& task, const LabelShiftSpec& shift) {
  return make_gaussian_domains(task, shift.num_classes, sample_target_marginal(shift),
                               shift.seed);
}

namespace {

std::vector<unsigned char> read_bytes(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open " + path.string());
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

std::uint32_t be32(const std::vector<unsigned char>& b, std::size_t off,
                   const std::filesystem::path& path) {
  if (off + 4 > b.size()) throw std::runtime_error(path.string() + ": truncated header");
  return (std::uint32_t{b[off]} << 24) | (std::uint32_t{b[off + 1]} << 16) |
         (std::uint32_t{b[off + 2]} << 8) | std::uint32_t{b[off + 3]};
}

Tensor pool(const std::vector<double>& pixels, std::size_t n, std::size_t rows, std::size_t cols,
            std::size_t factor) {
  if (factor == 0 || rows % factor != 0 || cols % factor != 0) {
    throw std::invalid_argument("downsample factor must divide the image side");
  }
  const std::size_t r2 = rows / factor, c2 = cols / factor;
  Tensor out(n, r2 * c2);
  const double norm = 1.0 / static_cast<double>(factor * factor);
  for (std::size_t i = 0; i < n; ++i) {
    const double* img = pixels.data() + i * rows * cols;
    for (std::size_t r = 0; r < r2; ++r) {
      for (std::size_t c = 0; c < c2; ++c) {
        double acc = 0.0;
        for (std::size_t dr = 0; dr < factor; ++dr) {
          for (std::size_t dc = 0; dc < factor; ++dc) {
            acc += img[(r * factor + dr) * cols + c * factor + dc];
          }
        }
        out(i, r * c2 + c) = acc * norm;
      }
    }
  }
  return out;
}

LabeledArrays load_csv(const std::filesystem::path& path, std::size_t downsample,
                       std::size_t num_classes) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open " + path.string());
  std::vector<double> pixels;
  std::vector<std::size_t> labels;
  std::size_t width = 0, line_no = 0;
  std::string line;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty() || line == "\r") continue;
    std::stringstream ss(line);
    std::string cell;
    std::vector<double> row;
    while (std::getline(ss, cell, ',')) {
      try {
        row.push_back(std::stod(cell));
      } catch (const std::exception&) {
        throw std::runtime_error(path.string() + ":" + std::to_string(line_no) +
                                 ": non-numeric field");
      }
    }
    if (row.size() < 2) throw std::runtime_error(path.string() + ": row without pixels");
    if (width == 0) width = row.size() - 1;
    if (row.size() - 1 != width) {
      throw std::runtime_error(path.string() + ":" + std::to_string(line_no) +
                               ": truncated row");
    }
    const double label = row[0];
    if (label < 0 || label != std::floor(label) || label >= static_cast<double>(num_classes)) {
      throw std::out_of_range(path.string() + ":" + std::to_string(line_no) +
                              ": label out of range");
    }
    labels.push_back(static_cast<std::size_t>(label));
    for (std::size_t j = 1; j < row.size(); ++j) pixels.push_back(row[j] / 255.0);
  }
  const auto side = static_cast<std::size_t>(std::llround(std::sqrt(static_cast<double>(width))));
  if (side * side != width) throw std::runtime_error(path.string() + ": images are not square");
  return {pool(pixels, labels.size(), side, side, downsample), std::move(labels)};
}

}  // namespace

LabeledArrays load_digit_files(const std::filesystem::path& images,
                               const std::filesystem::path& labels, std::size_t downsample,
                               std::size_t num_classes) {
  if (images.extension() == ".csv") return load_csv(images, downsample, num_classes);

  const auto ib = read_bytes(images);
  const auto lb = read_bytes(labels);
  if (be32(ib, 0, images) != 0x00000803u) throw std::runtime_error(images.string() + ": bad magic");
  if (be32(lb, 0, labels) != 0x00000801u) throw std::runtime_error(labels.string() + ": bad magic");
  const std::size_t n = be32(ib, 4, images);
  const std::size_t rows = be32(ib, 8, images);
  const std::size_t cols = be32(ib, 12, images);
  const std::size_t n_labels = be32(lb, 4, labels);
  if (n != n_labels) throw std::runtime_error("image and label counts differ");
  if (ib.size() < 16 + n * rows * cols) throw std::runtime_error(images.string() + ": truncated");
  if (lb.size() < 8 + n) throw std::runtime_error(labels.string() + ": truncated");

  std::vector<double> pixels(n * rows * cols);
  for (std::size_t i = 0; i < pixels.size(); ++i) pixels[i] = ib[16 + i] / 255.0;
  std::vector<std::size_t> y(n);
  for (std::size_t i = 0; i < n; ++i) {
    y[i] = lb[8 + i];
    if (y[i] >= num_classes) {
      throw std::out_of_range(labels.string() + ": label " + std::to_string(y[i]) +
                              " out of range at index " + std::to_string(i));
    }
  }
  return {pool(pixels, n, rows, cols, downsample), std::move(y)};
}

LabeledArrays subsample_to_marginal(const Tensor& x, const std::vector<std::size_t>& y,
                                    const std::vector<double>& marginal, std::size_t n,
                                    std::uint64_t seed) {
  if (x.rows() != y.size()) throw std::invalid_argument("x and y lengths differ");
  const auto counts = largest_remainder_counts(marginal, n);
  std::vector<std::vector<std::size_t>> pools(marginal.size());
  for (std::size_t i = 0; i < y.size(); ++i) {
    if (y[i] >= marginal.size()) throw std::out_of_range("label outside the marginal");
    pools[y[i]].push_back(i);
  }
  for (std::size_t k = 0; k < counts.size(); ++k) {
    if (pools[k].size() < counts[k]) {
      throw std::invalid_argument("class " + std::to_string(k) + " is short by " +
                                  std::to_string(counts[k] - pools[k].size()) + " samples");
    }
  }
  std::mt19937_64 rng(seed);
  LabeledArrays out{Tensor(n, x.cols()), {}};
  out.y.reserve(n);
  std::size_t row = 0;
  for (std::size_t k = 0; k < counts.size(); ++k) {
    auto& pool_k = pools[k];
    for (std::size_t i = 0; i < counts[k]; ++i) {
      std::uniform_int_distribution<std::size_t> pick(i, pool_k.size() - 1);
      std::swap(pool_k[i], pool_k[pick(rng)]);
      auto src = x.row(pool_k[i]);
      std::copy(src.begin(), src.end(), out.x.row(row++).begin());
      out.y.push_back(k);
    }
  }
  return out;
}

std::string manifest_to_json(const DatasetManifest& m) {
  nlohmann::json j{{"name", m.name},
                   {"n_S", m.n_source},
                   {"n_T", m.n_target},
                   {"K", m.num_classes},
                   {"alpha", m.alpha ? nlohmann::json(*m.alpha) : nlohmann::json(nullptr)},
                   {"seed", m.seed},
                   {"marginals", {{"source", m.source_marginal}, {"target", m.target_marginal}}}};
  return j.dump(2);
}

DatasetManifest manifest_from_json(const std::string& text) {
  const auto j = nlohmann::json::parse(text);
  DatasetManifest m;
  m.name = j.at("name").get<std::string>();
  m.n_source = j.at("n_S").get<std::size_t>();
  m.n_target = j.at("n_T").get<std::size_t>();
  m.num_classes = j.at("K").get<std::size_t>();
  if (!j.at("alpha").is_null()) m.alpha = j.at("alpha").get<double>();
  m.seed = j.at("seed").get<std::uint64_t>();
  m.source_marginal = j.at("marginals").at("source").get<std::vector<double>>();
  m.target_marginal = j.at("marginals").at("target").get<std::vector<double>>();
  return m;
}

}  // namespace casa
