#include "casa/harness.hpp"

#include <Eigen/Dense>
#include <algorithm>
#include <atomic>
#include <bit>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <limits>
#include <mutex>
#include <numeric>
#include <sstream>
#include <stdexcept>
#include <thread>

#include "json.hpp"

namespace casa {

using nlohmann::json;

// ---------------------------------------------------------------- names

std::string method_name(Method m) {
  switch (m) {
    case Method::Casa: return "casa";
    case Method::AsaBaseline: return "asa_baseline";
    case Method::DannBaseline: return "dann_baseline";
    case Method::SourceOnly: return "source_only";
  }
  return "unknown";
}

Method parse_method(std::string_view name) {
  for (Method m : {Method::Casa, Method::AsaBaseline, Method::DannBaseline, Method::SourceOnly}) {
    if (name == method_name(m)) return m;
  }
  throw std::invalid_argument("unknown method '" + std::string(name) + "'");
}

namespace {

std::string fmt(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

std::string trim(std::string_view s) {
  const auto b = s.find_first_not_of(" \t\r\n");
  if (b == std::string_view::npos) return {};
  const auto e = s.find_last_not_of(" \t\r\n");
  return std::string(s.substr(b, e - b + 1));
}

double parse_double(std::string_view key, std::string_view text) {
  const std::string s = trim(text);
  std::size_t used = 0;
  double v = 0.0;
  try {
    v = std::stod(s, &used);
  } catch (const std::exception&) {
    used = 0;
  }
  if (used == 0 || used != s.size() || !std::isfinite(v)) {
    throw std::invalid_argument("config key '" + std::string(key) + "': expected a number, got '" +
                                s + "'");
  }
  return v;
}

std::int64_t parse_int(std::string_view key, std::string_view text) {
  const std::string s = trim(text);
  std::size_t used = 0;
  long long v = 0;
  try {
    v = std::stoll(s, &used);
  } catch (const std::exception&) {
    used = 0;
  }
  if (used == 0 || used != s.size()) {
    throw std::invalid_argument("config key '" + std::string(key) +
                                "': expected an integer, got '" + s + "'");
  }
  return v;
}

std::uint64_t parse_uint(std::string_view key, std::string_view text) {
  const std::int64_t v = parse_int(key, text);
  if (v < 0) throw std::invalid_argument("config key '" + std::string(key) + "' must be >= 0");
  return static_cast<std::uint64_t>(v);
}

bool parse_bool(std::string_view key, std::string_view text) {
  const std::string s = trim(text);
  if (s == "true" || s == "1" || s == "yes" || s == "on") return true;
  if (s == "false" || s == "0" || s == "no" || s == "off") return false;
  throw std::invalid_argument("config key '" + std::string(key) + "': expected a boolean");
}

std::vector<std::size_t> parse_sizes(std::string_view key, std::string_view text) {
  const std::string s = trim(text);
  std::vector<std::size_t> out;
  if (s.empty() || s == "none") return out;
  std::stringstream ss(s);
  std::string item;
  while (std::getline(ss, item, ',')) {
    const auto v = parse_int(key, item);
    if (v <= 0) throw std::invalid_argument("config key '" + std::string(key) + "': widths must be > 0");
    out.push_back(static_cast<std::size_t>(v));
  }
  return out;
}

std::string join_sizes(const std::vector<std::size_t>& v) {
  if (v.empty()) return "none";
  std::string out;
  for (std::size_t i = 0; i < v.size(); ++i) {
    if (i) out += ",";
    out += std::to_string(v[i]);
  }
  return out;
}

std::string b(bool v) { return v ? "true" : "false"; }

struct Field {
  const char* key;
  std::string (*get)(const TrainConfig&);
  void (*set)(TrainConfig&, std::string_view key, std::string_view value);
};

#define CASA_INT(name, member)                                                          \
  Field {                                                                               \
    name, [](const TrainConfig& c) { return std::to_string(c.member); },                \
        [](TrainConfig& c, std::string_view k, std::string_view v) {                    \
          c.member = static_cast<decltype(c.member)>(parse_int(k, v));                  \
        }                                                                               \
  }
#define CASA_UINT(name, member)                                                         \
  Field {                                                                               \
    name, [](const TrainConfig& c) { return std::to_string(c.member); },                \
        [](TrainConfig& c, std::string_view k, std::string_view v) {                    \
          c.member = static_cast<decltype(c.member)>(parse_uint(k, v));                 \
        }                                                                               \
  }
#define CASA_REAL(name, member)                                                         \
  Field {                                                                               \
    name, [](const TrainConfig& c) { return fmt(c.member); },                           \
        [](TrainConfig& c, std::string_view k, std::string_view v) {                    \
          c.member = parse_double(k, v);                                                \
        }                                                                               \
  }
#define CASA_BOOL(name, member)                                                         \
  Field {                                                                               \
    name, [](const TrainConfig& c) { return b(c.member); },                             \
        [](TrainConfig& c, std::string_view k, std::string_view v) {                    \
          c.member = parse_bool(k, v);                                                  \
        }                                                                               \
  }
#define CASA_SIZES(name, member)                                                        \
  Field {                                                                               \
    name, [](const TrainConfig& c) { return join_sizes(c.member); },                    \
        [](TrainConfig& c, std::string_view k, std::string_view v) {                    \
          c.member = parse_sizes(k, v);                                                 \
        }                                                                               \
  }

const std::vector<Field>& fields() {
  static const std::vector<Field> table = {
      Field{"method", [](const TrainConfig& c) { return method_name(c.method); },
            [](TrainConfig& c, std::string_view, std::string_view v) {
              c.method = parse_method(trim(v));
            }},
      CASA_INT("steps", steps),
      CASA_INT("batch", batch),
      CASA_REAL("lr", lr),
      CASA_REAL("momentum", momentum),
      CASA_REAL("weight_decay", weight_decay),
      CASA_INT("lr_anneal_start", lr_anneal_start),
      CASA_INT("lr_anneal_end", lr_anneal_end),
      CASA_REAL("lr_final_factor", lr_final_factor),
      CASA_REAL("lambda_y", lambda_y),
      CASA_REAL("lambda_align", lambda_align),
      CASA_REAL("lambda_ce", lambda_ce),
      CASA_REAL("lambda_v_src", lambda_v_src),
      CASA_REAL("lambda_v_tgt", lambda_v_tgt),
      CASA_INT("align_warmup", align_warmup),
      CASA_REAL("vat_epsilon", vat_epsilon),
      CASA_BOOL("entropy_conditioning", entropy_conditioning),
      CASA_BOOL("detach_conditioning", detach_conditioning),
      CASA_UINT("seed", seed),
      CASA_INT("eval_every", eval_every),
      CASA_BOOL("check_invariants", check_invariants),
      CASA_UINT("feature_dim", feature_dim),
      CASA_SIZES("hidden", hidden),
      CASA_SIZES("disc_hidden", disc_hidden),
      CASA_REAL("slope", slope),
      CASA_UINT("num_classes", num_classes),
      Field{"alpha", [](const TrainConfig& c) { return alpha_name(c.alpha); },
            [](TrainConfig& c, std::string_view, std::string_view v) { c.alpha = parse_alpha(v); }},
      CASA_UINT("n_source", task.n_source),
      CASA_UINT("n_target", task.n_target),
      CASA_REAL("test_fraction", task.test_fraction),
      CASA_REAL("class_radius", task.class_radius),
      CASA_REAL("class_sigma", task.class_sigma),
      CASA_REAL("rotation_deg", task.rotation_deg),
      CASA_REAL("translation", task.translation),
      CASA_UINT("geometry_seed", task.geometry_seed),
  };
  return table;
}

#undef CASA_INT
#undef CASA_UINT
#undef CASA_REAL
#undef CASA_BOOL
#undef CASA_SIZES

std::uint64_t fnv1a(std::string_view s) {
  std::uint64_t h = 0xcbf29ce484222325ull;
  for (unsigned char c : s) {
    h ^= c;
    h *= 0x100000001b3ull;
  }
  return h;
}

}  // namespace

std::string alpha_name(const std::optional<double>& alpha) {
  return alpha ? fmt(*alpha) : std::string("none");
}

std::optional<double> parse_alpha(std::string_view text) {
  std::string s = trim(text);
  std::string lower = s;
  std::transform(lower.begin(), lower.end(), lower.begin(),
                 [](unsigned char c) { return static_cast<char>(std::tolower(c)); });
  if (lower == "none" || lower == "null") return std::nullopt;
  const double v = parse_double("alpha", s);
  if (!(v > 0.0)) throw std::invalid_argument("alpha must be > 0 or none");
  return v;
}

// ---------------------------------------------------------------- config

void TrainConfig::validate() const {
  auto fail = [](const std::string& what) { throw std::invalid_argument("config: " + what); };
  if (steps <= 0) fail("steps must be > 0");
  if (batch <= 0) fail("batch must be > 0");
  if (align_warmup < 0 || align_warmup > steps) fail("align_warmup must lie in [0, steps]");
  for (double l : {lambda_y, lambda_align, lambda_ce, lambda_v_src, lambda_v_tgt}) {
    if (!(l >= 0.0)) fail("loss weights must be >= 0");
  }
  if (!(lr > 0.0)) fail("lr must be > 0");
  if (!(momentum >= 0.0 && momentum < 1.0)) fail("momentum must lie in [0, 1)");
  if (!(weight_decay >= 0.0)) fail("weight_decay must be >= 0");
  if (lr_anneal_end < lr_anneal_start) fail("lr_anneal_end must be >= lr_anneal_start");
  if (!(lr_final_factor >= 0.0)) fail("lr_final_factor must be >= 0");
  if (!(vat_epsilon >= 0.0)) fail("vat_epsilon must be >= 0");
  if (eval_every < 0) fail("eval_every must be >= 0");
  if (feature_dim == 0) fail("feature_dim must be > 0");
  if (num_classes < 2) fail("num_classes must be >= 2");
  if (alpha && !(*alpha > 0.0)) fail("alpha must be > 0");
}

std::string TrainConfig::to_kv() const {
  std::string out;
  for (const Field& f : fields()) {
    out += f.key;
    out += "=";
    out += f.get(*this);
    out += "\n";
  }
  return out;
}

std::string TrainConfig::hash() const {
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(fnv1a(to_kv())));
  return buf;
}

void TrainConfig::set(std::string_view key, std::string_view value) {
  for (const Field& f : fields()) {
    if (key == f.key) {
      f.set(*this, key, value);
      return;
    }
  }
  throw std::invalid_argument("unknown config key '" + std::string(key) + "'");
}

TrainConfig TrainConfig::from_kv(std::string_view text, TrainConfig base) {
  std::stringstream ss{std::string(text)};
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(ss, line)) {
    ++line_no;
    if (const auto hash_pos = line.find('#'); hash_pos != std::string::npos) line.resize(hash_pos);
    const std::string t = trim(line);
    if (t.empty()) continue;
    const auto eq = t.find('=');
    if (eq == std::string::npos) {
      throw std::invalid_argument("config line " + std::to_string(line_no) + ": expected key=value");
    }
    base.set(trim(std::string_view(t).substr(0, eq)), std::string_view(t).substr(eq + 1));
  }
  base.validate();
  return base;
}

TrainConfig TrainConfig::from_file(const std::filesystem::path& path, TrainConfig base) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open config file " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  return from_kv(ss.str(), std::move(base));
}

TrainConfig TrainConfig::from_kv(std::string_view text) { return from_kv(text, TrainConfig{}); }

TrainConfig TrainConfig::from_file(const std::filesystem::path& path) {
  return from_file(path, TrainConfig{});
}

double lr_factor(const TrainConfig& cfg, std::int64_t step) {
  if (step <= cfg.lr_anneal_start) return 1.0;
  if (step >= cfg.lr_anneal_end) return cfg.lr_final_factor;
  const double t = static_cast<double>(step - cfg.lr_anneal_start) /
                   static_cast<double>(cfg.lr_anneal_end - cfg.lr_anneal_start);
  return 1.0 + t * (cfg.lr_final_factor - 1.0);
}

double effective_lambda_align(const TrainConfig& cfg, std::int64_t step) {
  if (cfg.align_warmup <= 0) return cfg.lambda_align;
  const double ramp = std::min(1.0, static_cast<double>(step) / static_cast<double>(cfg.align_warmup));
  return ramp * cfg.lambda_align;
}

// ---------------------------------------------------------------- optimiser

Sgd::Sgd(std::vector<Tensor*> params, double momentum, double weight_decay)
    : params_(std::move(params)), momentum_(momentum), weight_decay_(weight_decay) {
  velocity_.reserve(params_.size());
  for (Tensor* p : params_) velocity_.emplace_back(p->size(), 0.0);
}

void Sgd::step(double lr) {
  for (std::size_t k = 0; k < params_.size(); ++k) {
    Tensor& p = *params_[k];
    auto w = p.data();
    std::vector<double>& v = velocity_[k];
    const bool has = p.has_grad();
    for (std::size_t i = 0; i < w.size(); ++i) {
      const double g = has ? p.grad()[i] : 0.0;
      v[i] = momentum_ * v[i] + g + weight_decay_ * w[i];
      w[i] -= lr * v[i];
    }
  }
}

// ---------------------------------------------------------------- steps

double discriminator_step(ModelBundle& m, const TrainConfig& cfg, const Tensor& xs,
                          const Tensor& xt, Sgd& opt, double lr) {
  const bool conditioned = cfg.method == Method::Casa;
  Graph g;
  const Var zs = extract(g, m, g.constant(xs), false);
  const Var zt = extract(g, m, g.constant(xt), false);
  Var ss = zs, st = zt;
  std::optional<Tensor> ws, wt;
  if (conditioned) {
    const Var ps = classify(g, m, zs, false);
    const Var pt = classify(g, m, zt, false);
    if (cfg.entropy_conditioning) {
      ws = entropy_weights(g.value(ps));
      wt = entropy_weights(g.value(pt));
    }
    ss = outer_embed(g, zs, ps);
    st = outer_embed(g, zt, pt);
  }
  const Var rs = discriminate(g, m, ss, true);
  const Var rt = discriminate(g, m, st, true);
  const Var ld = discriminator_loss(g, rs, rt, ws ? &*ws : nullptr, wt ? &*wt : nullptr);
  const double value = g.value(ld).item();
  m.zero_grad();
  g.backward(ld);
  opt.step(lr);
  return value;
}

LossBreakdown generator_step(ModelBundle& m, const TrainConfig& cfg, const Tensor& xs,
                             std::span<const std::size_t> ys, const Tensor& xt,
                             double lambda_align, std::mt19937_64& rng, Sgd& opt, double lr) {
  LossBreakdown lb;
  const bool adapt = cfg.method != Method::SourceOnly;
  lb.lambda_y = cfg.lambda_y;
  lb.lambda_align = adapt ? lambda_align : 0.0;
  lb.lambda_ce = adapt ? cfg.lambda_ce : 0.0;
  lb.lambda_v_src = adapt ? cfg.lambda_v_src : 0.0;
  lb.lambda_v_tgt = adapt ? cfg.lambda_v_tgt : 0.0;

  Graph g;
  const Var zs = extract(g, m, g.constant(xs), true);
  const Var zt = extract(g, m, g.constant(xt), true);
  const Var ps = classify(g, m, zs, true);
  const Var pt = classify(g, m, zt, true);
  const Var zero = g.constant(Tensor::scalar(0.0));

  const Var l_y = source_classification_loss(g, ps, ys);
  Var l_align = zero, l_ce = zero, l_vs = zero, l_vt = zero;
  if (adapt) {
    if (lb.lambda_ce > 0.0) l_ce = target_conditional_entropy(g, pt);
    if (lb.lambda_align > 0.0) {
      switch (cfg.method) {
        case Method::Casa: {
          Var cs = ps, ct = pt;
          if (cfg.detach_conditioning) {
            Tensor ps_value = g.value(ps);
            Tensor pt_value = g.value(pt);
            cs = g.constant(std::move(ps_value));
            ct = g.constant(std::move(pt_value));
          }
          const Var rs = discriminate(g, m, outer_embed(g, zs, cs), false);
          const Var rt = discriminate(g, m, outer_embed(g, zt, ct), false);
          l_align = support_alignment_loss(g, rs, rt);
          break;
        }
        case Method::AsaBaseline: {
          l_align = support_alignment_loss(g, discriminate(g, m, zs, false),
                                           discriminate(g, m, zt, false));
          break;
        }
        case Method::DannBaseline: {
          // Gradient reversal: the generator ascends the discriminator loss.
          const Var ld = discriminator_loss(g, discriminate(g, m, zs, false),
                                            discriminate(g, m, zt, false));
          l_align = g.scale(ld, -1.0);
          break;
        }
        case Method::SourceOnly: break;
      }
    }
    const VatOptions vat{cfg.vat_epsilon, 1e-6, 1};
    if (lb.lambda_v_src > 0.0) l_vs = vat_loss(g, m, xs, vat, rng);
    if (lb.lambda_v_tgt > 0.0) l_vt = vat_loss(g, m, xt, vat, rng);
  }

  Var total = g.scale(l_y, lb.lambda_y);
  total = g.add(total, g.scale(l_align, lb.lambda_align));
  total = g.add(total, g.scale(l_ce, lb.lambda_ce));
  total = g.add(total, g.scale(l_vs, lb.lambda_v_src));
  total = g.add(total, g.scale(l_vt, lb.lambda_v_tgt));

  lb.l_y = g.value(l_y).item();
  lb.l_align = g.value(l_align).item();
  lb.l_ce = g.value(l_ce).item();
  lb.l_v_src = g.value(l_vs).item();
  lb.l_v_tgt = g.value(l_vt).item();
  lb.total_fc = g.value(total).item();
  const double expected = lb.weighted_total();
  if (std::fabs(lb.total_fc - expected) > 1e-12 * std::max(1.0, std::fabs(expected))) {
    throw ContractError("generator objective disagrees with its weighted components");
  }

  m.zero_grad();
  g.backward(total);
  opt.step(lr);
  return lb;
}

// ---------------------------------------------------------------- metrics

double per_class_accuracy(std::span<const std::size_t> pred, std::span<const std::size_t> truth,
                          std::size_t num_classes) {
  if (truth.empty()) throw std::invalid_argument("per-class accuracy needs a nonempty sample");
  if (pred.size() != truth.size()) throw std::invalid_argument("prediction/label lengths differ");
  std::vector<std::size_t> hits(num_classes, 0), total(num_classes, 0);
  for (std::size_t i = 0; i < truth.size(); ++i) {
    if (truth[i] >= num_classes) throw std::out_of_range("label outside the class range");
    ++total[truth[i]];
    if (pred[i] == truth[i]) ++hits[truth[i]];
  }
  double acc = 0.0;
  for (std::size_t k = 0; k < num_classes; ++k) {
    if (total[k] == 0) {
      throw std::invalid_argument("class " + std::to_string(k) + " is absent from the labels");
    }
    acc += static_cast<double>(hits[k]) / static_cast<double>(total[k]);
  }
  return acc / static_cast<double>(num_classes);
}

namespace {

constexpr std::size_t kEvalCloudLimit = 512;

Tensor take_rows(const Tensor& x, std::span<const std::size_t> idx) {
  Tensor out(idx.size(), x.cols());
  for (std::size_t i = 0; i < idx.size(); ++i) {
    auto src = x.row(idx[i]);
    std::copy(src.begin(), src.end(), out.row(i).begin());
  }
  return out;
}

void scale_rows(Tensor& t, double s) {
  for (double& v : t.data()) v *= s;
}

std::vector<const Tensor*> as_const_ptrs(const std::vector<Tensor*>& v) {
  return {v.begin(), v.end()};
}

double rms_radius(const Tensor& z) {
  if (z.rows() == 0) return 0.0;
  std::vector<double> mean(z.cols(), 0.0);
  for (std::size_t i = 0; i < z.rows(); ++i) {
    for (std::size_t j = 0; j < z.cols(); ++j) mean[j] += z(i, j);
  }
  for (double& v : mean) v /= static_cast<double>(z.rows());
  double acc = 0.0;
  for (std::size_t i = 0; i < z.rows(); ++i) {
    for (std::size_t j = 0; j < z.cols(); ++j) acc += (z(i, j) - mean[j]) * (z(i, j) - mean[j]);
  }
  return std::sqrt(acc / static_cast<double>(z.rows()));
}

}  // namespace

EvalPoint evaluate(const ModelBundle& m, const TrainingView& train, const EvaluationView& eval,
                   std::size_t num_classes, std::uint64_t seed) {
  EvalPoint ep;
  ep.per_class_acc =
      per_class_accuracy(argmax_rows(predict_proba(m, eval.target_x)), eval.target_y, num_classes);

  SampleCloud src{features(m, train.source_x), train.source_y, {}};
  SampleCloud tgt{features(m, eval.target_x), eval.target_y, {}};
  src = subsample(src, kEvalCloudLimit, seed);
  tgt = subsample(tgt, kEvalCloudLimit, seed + 1);
  const double radius = rms_radius(src.points);
  if (radius > 0.0) {
    scale_rows(src.points, 1.0 / radius);
    scale_rows(tgt.points, 1.0 / radius);
  }
  DivergenceReport& d = ep.divergence;
  d.ssd = ssd(src, tgt);
  const CssdResult c = cssd(src, tgt, num_classes);
  d.cssd = c.value;
  d.per_class_terms = c.per_class_terms;
  d.joint_ssd = joint_ssd(src, tgt, default_label_scale(src, tgt));
  const std::size_t n_w = std::min({kWassersteinMaxPoints, src.size(), tgt.size()});
  d.wasserstein = wasserstein_1(subsample(src, n_w, seed + 2), subsample(tgt, n_w, seed + 3));
  return ep;
}

std::string RunRecord::run_id() const {
  return method + "_alpha-" + alpha_name(alpha) + "_seed-" + std::to_string(seed);
}

TrainResult train(const TrainConfig& cfg, const DomainPair& data) {
  cfg.validate();
  const auto t0 = std::chrono::steady_clock::now();
  const std::size_t k = data.num_classes;
  if (k < 2) throw std::invalid_argument("training needs at least two classes");
  const TrainingView& view = data.training;
  if (view.source_x.rows() == 0 || view.target_x.rows() == 0) {
    throw std::invalid_argument("training needs nonempty source and target samples");
  }

  ModelDims dims{view.source_x.cols(), cfg.feature_dim, k};
  ArchConfig arch{cfg.hidden, {}, cfg.disc_hidden, cfg.slope, cfg.method == Method::Casa};
  TrainResult out{ModelBundle::create(dims, arch, cfg.seed), {}, {}};
  ModelBundle& m = out.model;
  RunRecord& rec = out.record;
  rec.config_hash = cfg.hash();
  rec.method = method_name(cfg.method);
  rec.alpha = cfg.alpha;
  rec.seed = cfg.seed;
  rec.source_marginal = data.source_marginal;
  rec.target_marginal = data.target_marginal;
  rec.rotation_deg = cfg.task.rotation_deg;
  rec.translation = cfg.task.translation;
  rec.test_fraction = cfg.task.test_fraction;
  rec.split_seed = cfg.seed;

  std::seed_seq seq{cfg.seed, std::uint64_t{0x5eed}};
  std::mt19937_64 rng(seq);
  std::uniform_int_distribution<std::size_t> pick_s(0, view.source_x.rows() - 1);
  std::uniform_int_distribution<std::size_t> pick_t(0, view.target_x.rows() - 1);
  Sgd opt_fc(m.fc_parameters(), cfg.momentum, cfg.weight_decay);
  Sgd opt_r(m.r_parameters(), cfg.momentum, cfg.weight_decay);
  const bool adversarial = cfg.method != Method::SourceOnly;

  std::vector<std::size_t> is(static_cast<std::size_t>(cfg.batch));
  std::vector<std::size_t> it(static_cast<std::size_t>(cfg.batch));
  std::vector<std::size_t> ys(is.size());
  for (std::int64_t step = 0; step < cfg.steps; ++step) {
    for (auto& i : is) i = pick_s(rng);
    for (auto& i : it) i = pick_t(rng);
    const Tensor xs = take_rows(view.source_x, is);
    const Tensor xt = take_rows(view.target_x, it);
    for (std::size_t i = 0; i < is.size(); ++i) ys[i] = view.source_y[is[i]];
    const double lr = cfg.lr * lr_factor(cfg, step);

    LossBreakdown lb;
    try {
      if (adversarial) {
        const auto fc_before =
            cfg.check_invariants ? parameter_checksum(as_const_ptrs(m.fc_parameters())) : 0;
        lb.l_d = discriminator_step(m, cfg, xs, xt, opt_r, lr);
        if (cfg.check_invariants &&
            parameter_checksum(as_const_ptrs(m.fc_parameters())) != fc_before) {
          throw ContractError("discriminator update modified f or c");
        }
      }
      const auto r_before =
          cfg.check_invariants ? parameter_checksum(as_const_ptrs(m.r_parameters())) : 0;
      const double l_d = lb.l_d;
      lb = generator_step(m, cfg, xs, ys, xt, effective_lambda_align(cfg, step), rng, opt_fc, lr);
      lb.l_d = l_d;
      lb.total_r = l_d;
      if (cfg.check_invariants &&
          parameter_checksum(as_const_ptrs(m.r_parameters())) != r_before) {
        throw ContractError("generator update modified r");
      }
      for (double v : {lb.l_y, lb.l_ce, lb.l_v_src, lb.l_v_tgt, lb.l_d, lb.l_align, lb.total_fc}) {
        if (!std::isfinite(v)) throw NonFiniteError("non-finite loss value");
      }
    } catch (const NonFiniteError& e) {
      rec.aborted = true;
      rec.abort_step = step;
      rec.abort_reason = e.what();
      break;
    }

    const bool last = step + 1 == cfg.steps;
    if (last || (cfg.eval_every > 0 && (step + 1) % cfg.eval_every == 0)) {
      EvalPoint ep = evaluate(m, view, data.evaluation, k, cfg.seed);
      ep.step = step + 1;
      ep.divergence.step = step + 1;
      ep.losses = lb;
      rec.evals.push_back(std::move(ep));
    }
  }

  if (!rec.evals.empty() && !rec.aborted) {
    rec.final_per_class_acc = rec.evals.back().per_class_acc;
    rec.final_divergence = rec.evals.back().divergence;
  } else if (rec.aborted) {
    rec.final_per_class_acc = std::numeric_limits<double>::quiet_NaN();
  }

  out.features.run_id = rec.run_id();
  out.features.source_z = features(m, view.source_x);
  out.features.source_y = view.source_y;
  out.features.target_z = features(m, data.evaluation.target_x);
  out.features.target_y = data.evaluation.target_y;

  rec.wall_time_s =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  return out;
}

// ---------------------------------------------------------------- run JSON

namespace {

json num(double v) { return std::isfinite(v) ? json(v) : json(nullptr); }
double num_from(const json& j) {
  return j.is_null() ? std::numeric_limits<double>::quiet_NaN() : j.get<double>();
}

json losses_json(const LossBreakdown& l) {
  return json{{"l_y", l.l_y},
              {"l_ce", l.l_ce},
              {"l_v_src", l.l_v_src},
              {"l_v_tgt", l.l_v_tgt},
              {"l_d", l.l_d},
              {"l_align", l.l_align},
              {"total_fc", l.total_fc},
              {"total_r", l.total_r},
              {"lambda_y", l.lambda_y},
              {"lambda_align", l.lambda_align},
              {"lambda_ce", l.lambda_ce},
              {"lambda_v_src", l.lambda_v_src},
              {"lambda_v_tgt", l.lambda_v_tgt}};
}

LossBreakdown losses_from(const json& j) {
  LossBreakdown l;
  l.l_y = j.at("l_y");
  l.l_ce = j.at("l_ce");
  l.l_v_src = j.at("l_v_src");
  l.l_v_tgt = j.at("l_v_tgt");
  l.l_d = j.at("l_d");
  l.l_align = j.at("l_align");
  l.total_fc = j.at("total_fc");
  l.total_r = j.at("total_r");
  l.lambda_y = j.at("lambda_y");
  l.lambda_align = j.at("lambda_align");
  l.lambda_ce = j.at("lambda_ce");
  l.lambda_v_src = j.at("lambda_v_src");
  l.lambda_v_tgt = j.at("lambda_v_tgt");
  return l;
}

}  // namespace

std::string run_to_json(const RunRecord& r, bool include_wall_time) {
  json evals = json::array();
  for (const EvalPoint& e : r.evals) {
    evals.push_back({{"step", e.step},
                     {"losses", losses_json(e.losses)},
                     {"per_class_acc", e.per_class_acc},
                     {"divergence", json::parse(report_to_json(e.divergence))}});
  }
  json j{{"config_hash", r.config_hash},
         {"method", r.method},
         {"alpha", r.alpha ? json(*r.alpha) : json(nullptr)},
         {"seed", r.seed},
         {"source_marginal", r.source_marginal},
         {"target_marginal", r.target_marginal},
         {"rotation_deg", r.rotation_deg},
         {"translation", r.translation},
         {"test_fraction", r.test_fraction},
         {"split_seed", r.split_seed},
         {"evals", std::move(evals)},
         {"final_per_class_acc", num(r.final_per_class_acc)},
         {"final_divergence", json::parse(report_to_json(r.final_divergence))},
         {"aborted", r.aborted},
         {"abort_step", r.abort_step},
         {"abort_reason", r.abort_reason}};
  if (include_wall_time) j["wall_time_s"] = r.wall_time_s;
  return j.dump(2);
}

RunRecord run_from_json(const std::string& text) {
  const json j = json::parse(text);
  RunRecord r;
  r.config_hash = j.at("config_hash");
  r.method = j.at("method");
  if (!j.at("alpha").is_null()) r.alpha = j.at("alpha").get<double>();
  r.seed = j.at("seed");
  r.source_marginal = j.at("source_marginal").get<std::vector<double>>();
  r.target_marginal = j.at("target_marginal").get<std::vector<double>>();
  r.rotation_deg = j.at("rotation_deg");
  r.translation = j.at("translation");
  r.test_fraction = j.at("test_fraction");
  r.split_seed = j.at("split_seed");
  for (const auto& e : j.at("evals")) {
    EvalPoint ep;
    ep.step = e.at("step");
    ep.losses = losses_from(e.at("losses"));
    ep.per_class_acc = e.at("per_class_acc");
    ep.divergence = report_from_json(e.at("divergence").dump());
    r.evals.push_back(std::move(ep));
  }
  r.final_per_class_acc = num_from(j.at("final_per_class_acc"));
  r.final_divergence = report_from_json(j.at("final_divergence").dump());
  r.aborted = j.at("aborted");
  r.abort_step = j.at("abort_step");
  r.abort_reason = j.at("abort_reason");
  r.wall_time_s = j.value("wall_time_s", 0.0);
  return r;
}

// ---------------------------------------------------------------- grid

std::vector<double> grid_target_marginal(const std::optional<double>& alpha,
                                         std::size_t num_classes, std::uint64_t seed,
                                         double min_coordinate) {
  if (!alpha) return sample_target_marginal({std::nullopt, num_classes, seed});
  if (!(*alpha > 0.0)) throw std::invalid_argument("alpha must be > 0");
  if (min_coordinate * static_cast<double>(num_classes) >= 1.0) {
    throw std::invalid_argument("min_coordinate leaves no room on the simplex");
  }
  std::seed_seq seq{seed, std::bit_cast<std::uint64_t>(*alpha)};
  std::mt19937_64 rng(seq);
  for (;;) {
    std::vector<double> w = sample_dirichlet(rng, *alpha, num_classes);
    if (*std::min_element(w.begin(), w.end()) >= min_coordinate) return w;
  }
}

DomainPair grid_domains(const TrainConfig& base, const std::optional<double>& alpha,
                        std::uint64_t seed) {
  const auto marginal = grid_target_marginal(alpha, base.num_classes, seed);
  return make_gaussian_domains(base.task, base.num_classes, marginal, seed);
}

const GridCell& GridReport::cell(Method m, const std::optional<double>& alpha) const {
  for (const GridCell& c : cells) {
    if (c.method == m && c.alpha == alpha) return c;
  }
  throw std::out_of_range("no grid cell for " + method_name(m) + " at alpha " + alpha_name(alpha));
}

GridReport run_grid(const GridSpec& spec, const GridProgress& progress) {
  spec.base.validate();
  if (spec.methods.empty() || spec.alphas.empty() || spec.seeds.empty()) {
    throw std::invalid_argument("grid needs at least one method, alpha and seed");
  }
  const std::size_t n_alpha = spec.alphas.size(), n_seed = spec.seeds.size();

  // Data per (alpha, seed) is generated once and shared read-only across methods.
  std::vector<DomainPair> data;
  data.reserve(n_alpha * n_seed);
  for (const auto& a : spec.alphas) {
    for (std::uint64_t s : spec.seeds) data.push_back(grid_domains(spec.base, a, s));
  }

  GridReport report;
  for (Method m : spec.methods) {
    for (const auto& a : spec.alphas) {
      GridCell c;
      c.method = m;
      c.alpha = a;
      c.accuracies.assign(n_seed, std::numeric_limits<double>::quiet_NaN());
      c.cssd.assign(n_seed, std::numeric_limits<double>::quiet_NaN());
      report.cells.push_back(std::move(c));
    }
  }
  const std::size_t n_jobs = report.cells.size() * n_seed;
  report.runs.resize(n_jobs);
  report.features.resize(n_jobs);
  std::vector<std::string> failures(n_jobs);

  std::atomic<std::size_t> next{0};
  std::mutex progress_mu;
  auto worker = [&] {
    for (;;) {
      const std::size_t job = next.fetch_add(1);
      if (job >= n_jobs) return;
      const std::size_t cell = job / n_seed, si = job % n_seed;
      const std::size_t ai = cell % n_alpha;
      TrainConfig cfg = spec.base;
      cfg.method = report.cells[cell].method;
      cfg.alpha = spec.alphas[ai];
      cfg.seed = spec.seeds[si];
      try {
        TrainResult r = train(cfg, data[ai * n_seed + si]);
        report.runs[job] = std::move(r.record);
        report.features[job] = std::move(r.features);
      } catch (const std::exception& e) {
        RunRecord& rec = report.runs[job];
        rec.method = method_name(cfg.method);
        rec.alpha = cfg.alpha;
        rec.seed = cfg.seed;
        rec.aborted = true;
        rec.abort_reason = e.what();
        rec.final_per_class_acc = std::numeric_limits<double>::quiet_NaN();
      }
      if (progress) {
        std::lock_guard lock(progress_mu);
        progress(report.runs[job]);
      }
    }
  };
  const std::size_t workers = std::max<std::size_t>(1, std::min(spec.workers, n_jobs));
  if (workers == 1) {
    worker();
  } else {
    std::vector<std::thread> pool;
    for (std::size_t w = 0; w < workers; ++w) pool.emplace_back(worker);
    for (auto& t : pool) t.join();
  }

  for (std::size_t ci = 0; ci < report.cells.size(); ++ci) {
    GridCell& c = report.cells[ci];
    std::vector<double> acc, cs;
    for (std::size_t si = 0; si < n_seed; ++si) {
      const RunRecord& r = report.runs[ci * n_seed + si];
      if (r.aborted) continue;
      c.accuracies[si] = r.final_per_class_acc;
      c.cssd[si] = r.final_divergence.cssd;
      acc.push_back(r.final_per_class_acc);
      cs.push_back(r.final_divergence.cssd);
    }
    c.completed = acc.size();
    c.complete = c.completed == n_seed;
    if (!acc.empty()) {
      const double n = static_cast<double>(acc.size());
      c.mean_acc = std::accumulate(acc.begin(), acc.end(), 0.0) / n;
      c.mean_cssd = std::accumulate(cs.begin(), cs.end(), 0.0) / n;
      double var = 0.0;
      for (double v : acc) var += (v - c.mean_acc) * (v - c.mean_acc);
      c.std_acc = acc.size() > 1 ? std::sqrt(var / (n - 1.0)) : 0.0;
    } else {
      c.mean_acc = c.std_acc = c.mean_cssd = std::numeric_limits<double>::quiet_NaN();
    }
  }
  return report;
}

namespace {

std::string fixed(double v, int digits = 6) {
  if (!std::isfinite(v)) return "nan";
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.*f", digits, v);
  return buf;
}

}  // namespace

std::string grid_csv(const GridReport& report) {
  std::string out = "method,alpha,mean_acc,std_acc,mean_cssd,completed,seeds,complete\n";
  for (const GridCell& c : report.cells) {
    out += method_name(c.method) + "," + alpha_name(c.alpha) + "," + fixed(c.mean_acc) + "," +
           fixed(c.std_acc) + "," + fixed(c.mean_cssd) + "," + std::to_string(c.completed) + "," +
           std::to_string(c.accuracies.size()) + "," + (c.complete ? "true" : "false") + "\n";
  }
  return out;
}

std::string grid_table(const GridReport& report) {
  std::vector<std::optional<double>> alphas;
  std::vector<Method> methods;
  for (const GridCell& c : report.cells) {
    if (std::find(alphas.begin(), alphas.end(), c.alpha) == alphas.end()) alphas.push_back(c.alpha);
    if (std::find(methods.begin(), methods.end(), c.method) == methods.end()) {
      methods.push_back(c.method);
    }
  }
  std::string out = "| method |";
  for (const auto& a : alphas) out += " alpha=" + alpha_name(a) + " |";
  out += "\n|---|";
  for (std::size_t i = 0; i < alphas.size(); ++i) out += "---|";
  out += "\n";
  for (Method m : methods) {
    out += "| " + method_name(m) + " |";
    for (const auto& a : alphas) {
      const GridCell& c = report.cell(m, a);
      out += " " + fixed(100.0 * c.mean_acc, 1) + " ± " + fixed(100.0 * c.std_acc, 1);
      if (!c.complete) out += " (incomplete)";
      out += " |";
    }
    out += "\n";
  }
  return out;
}

// ---------------------------------------------------------------- plot data

std::vector<SeriesRow> series_rows(const std::vector<RunRecord>& records) {
  std::vector<SeriesRow> rows;
  for (const RunRecord& r : records) {
    for (const EvalPoint& e : r.evals) {
      SeriesRow s;
      s.run_id = r.run_id();
      s.step = e.step;
      s.l_y = e.losses.l_y;
      s.l_ce = e.losses.l_ce;
      s.l_v_src = e.losses.l_v_src;
      s.l_v_tgt = e.losses.l_v_tgt;
      s.l_d = e.losses.l_d;
      s.l_align = e.losses.l_align;
      s.total_fc = e.losses.total_fc;
      s.per_class_acc = e.per_class_acc;
      s.ssd = e.divergence.ssd;
      s.cssd = e.divergence.cssd;
      s.joint_ssd = e.divergence.joint_ssd;
      s.wasserstein = e.divergence.wasserstein;
      rows.push_back(std::move(s));
    }
  }
  return rows;
}

namespace {

constexpr const char* kSeriesHeader =
    "run_id,step,l_y,l_ce,l_v_src,l_v_tgt,l_d,l_align,total_fc,per_class_acc,ssd,cssd,joint_ssd,"
    "wasserstein";

}  // namespace

std::string series_csv(const std::vector<SeriesRow>& rows) {
  std::string out = std::string(kSeriesHeader) + "\n";
  for (const SeriesRow& s : rows) {
    out += s.run_id + "," + std::to_string(s.step);
    for (double v : {s.l_y, s.l_ce, s.l_v_src, s.l_v_tgt, s.l_d, s.l_align, s.total_fc,
                     s.per_class_acc, s.ssd, s.cssd, s.joint_ssd, s.wasserstein}) {
      out += "," + fmt(v);
    }
    out += "\n";
  }
  return out;
}

std::vector<SeriesRow> read_series_csv(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open " + path.string());
  std::string line;
  if (!std::getline(in, line) || line != kSeriesHeader) {
    throw std::runtime_error(path.string() + ": unexpected header");
  }
  std::vector<SeriesRow> rows;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    std::stringstream ss(line);
    std::string cell;
    std::vector<std::string> cells;
    while (std::getline(ss, cell, ',')) cells.push_back(cell);
    if (cells.size() != 14) throw std::runtime_error(path.string() + ": malformed row");
    SeriesRow s;
    s.run_id = cells[0];
    s.step = std::stoll(cells[1]);
    double* dst[] = {&s.l_y, &s.l_ce,          &s.l_v_src, &s.l_v_tgt, &s.l_d,
                     &s.l_align, &s.total_fc, &s.per_class_acc, &s.ssd, &s.cssd,
                     &s.joint_ssd, &s.wasserstein};
    for (std::size_t i = 0; i < 12; ++i) *dst[i] = std::strtod(cells[i + 2].c_str(), nullptr);
    rows.push_back(std::move(s));
  }
  return rows;
}

PcaResult pca(const Tensor& z, std::size_t k) {
  const std::size_t n = z.rows(), d = z.cols();
  if (n == 0) throw std::invalid_argument("pca needs at least one row");
  if (k == 0 || k > d) throw std::invalid_argument("pca component count must lie in [1, dim]");
  Eigen::MatrixXd x(n, d);
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < d; ++j) x(i, j) = z(i, j);
  }
  const Eigen::RowVectorXd mu = x.colwise().mean();
  x.rowwise() -= mu;
  const Eigen::MatrixXd cov = (x.transpose() * x) / static_cast<double>(n);
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(cov);
  const Eigen::VectorXd evals = es.eigenvalues();   // ascending
  const Eigen::MatrixXd evecs = es.eigenvectors();

  PcaResult out;
  out.mean = Tensor(1, d);
  for (std::size_t j = 0; j < d; ++j) out.mean(0, j) = mu(static_cast<Eigen::Index>(j));
  out.projection = Tensor(d, k);
  double total = 0.0, kept = 0.0;
  for (std::size_t i = 0; i < d; ++i) {
    const double ev = std::max(0.0, evals(static_cast<Eigen::Index>(d - 1 - i)));
    out.eigenvalues.push_back(ev);
    total += ev;
    if (i < k) kept += ev;
  }
  for (std::size_t c = 0; c < k; ++c) {
    Eigen::VectorXd v = evecs.col(static_cast<Eigen::Index>(d - 1 - c));
    Eigen::Index arg = 0;
    v.cwiseAbs().maxCoeff(&arg);
    if (v(arg) < 0.0) v = -v;
    for (std::size_t j = 0; j < d; ++j) out.projection(j, c) = v(static_cast<Eigen::Index>(j));
  }
  out.variance_fraction = total > 0.0 ? kept / total : 0.0;
  out.projected = Tensor(n, k);
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t c = 0; c < k; ++c) {
      double acc = 0.0;
      for (std::size_t j = 0; j < d; ++j) acc += x(i, j) * out.projection(j, c);
      out.projected(i, c) = acc;
    }
  }
  return out;
}

void emit_plot_data(const std::vector<RunRecord>& records,
                    const std::vector<FeatureDump>& features, const std::filesystem::path& dir) {
  if (records.empty()) throw std::invalid_argument("no run records to emit");
  std::filesystem::create_directories(dir);
  {
    std::ofstream out(dir / "series.csv", std::ios::binary);
    out << series_csv(series_rows(records));
  }
  std::ofstream pts(dir / "features_2d.csv", std::ios::binary);
  std::ofstream proj(dir / "pca_projection.csv", std::ios::binary);
  pts << "run_id,domain,label,pc1,pc2\n";
  proj << "run_id,component,variance_fraction,mean,weights\n";
  for (const FeatureDump& f : features) {
    const std::size_t ns = f.source_z.rows(), nt = f.target_z.rows();
    if (ns + nt == 0) continue;
    const std::size_t d = ns ? f.source_z.cols() : f.target_z.cols();
    Tensor all(ns + nt, d);
    for (std::size_t i = 0; i < ns; ++i) {
      std::copy(f.source_z.row(i).begin(), f.source_z.row(i).end(), all.row(i).begin());
    }
    for (std::size_t i = 0; i < nt; ++i) {
      std::copy(f.target_z.row(i).begin(), f.target_z.row(i).end(), all.row(ns + i).begin());
    }
    const PcaResult p = pca(all, std::min<std::size_t>(2, d));
    for (std::size_t i = 0; i < ns + nt; ++i) {
      const bool src = i < ns;
      pts << f.run_id << "," << (src ? "source" : "target") << ","
          << (src ? f.source_y[i] : f.target_y[i - ns]) << "," << fmt(p.projected(i, 0)) << ","
          << (p.projected.cols() > 1 ? fmt(p.projected(i, 1)) : std::string("0")) << "\n";
    }
    for (std::size_t c = 0; c < p.projection.cols(); ++c) {
      std::string mean, weights;
      for (std::size_t j = 0; j < d; ++j) {
        mean += (j ? " " : "") + fmt(p.mean(0, j));
        weights += (j ? " " : "") + fmt(p.projection(j, c));
      }
      proj << f.run_id << "," << c + 1 << "," << fmt(p.variance_fraction) << "," << mean << ","
           << weights << "\n";
    }
  }
}

}  // namespace casa
