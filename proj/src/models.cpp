#include "casa/models.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <fstream>
#include <random>
#include <sstream>

#include "json.hpp"

namespace casa {

namespace {

Mlp make_mlp(std::size_t in, const std::vector<std::size_t>& hidden, std::size_t out,
             std::mt19937_64& rng) {
  Mlp net;
  std::vector<std::size_t> widths{in};
  widths.insert(widths.end(), hidden.begin(), hidden.end());
  widths.push_back(out);
  for (std::size_t l = 0; l + 1 < widths.size(); ++l) {
    const std::size_t fan_in = widths[l], fan_out = widths[l + 1];
    const double a = std::sqrt(6.0 / static_cast<double>(fan_in + fan_out));
    std::uniform_real_distribution<double> dist(-a, a);
    Dense d{Tensor(fan_in, fan_out), Tensor(1, fan_out)};
    for (double& w : d.weight.data()) w = dist(rng);
    net.layers.push_back(std::move(d));
  }
  return net;
}

void collect(Mlp& net, std::vector<Tensor*>& out) {
  for (auto& l : net.layers) {
    out.push_back(&l.weight);
    out.push_back(&l.bias);
  }
}

void collect(const Mlp& net, std::vector<const Tensor*>& out) {
  for (const auto& l : net.layers) {
    out.push_back(&l.weight);
    out.push_back(&l.bias);
  }
}

Var param(Graph& g, Tensor& t, bool track) { return track ? g.leaf(t) : g.constant(t); }

}  // namespace

ModelBundle ModelBundle::create(const ModelDims& dims, const ArchConfig& arch, std::uint64_t seed) {
  if (dims.classes < 2) {
    throw DimensionError("model needs at least two classes");
  }
  if (!(arch.slope > 0.0 && arch.slope <= 1.0)) {
    throw std::invalid_argument("leaky-ReLU slope must lie in (0, 1]");
  }
  std::mt19937_64 rng(seed);
  ModelBundle m;
  m.dims = dims;
  m.arch = arch;
  m.feature = make_mlp(dims.input, arch.feature_hidden, dims.feature, rng);
  m.classifier = make_mlp(dims.feature, arch.classifier_hidden, dims.classes, rng);
  m.discriminator = make_mlp(m.discriminator_input(), arch.discriminator_hidden, 1, rng);
  for (Tensor* t : m.fc_parameters()) t->set_requires_grad(true);
  for (Tensor* t : m.r_parameters()) t->set_requires_grad(true);
  return m;
}

std::vector<Tensor*> ModelBundle::fc_parameters() {
  std::vector<Tensor*> out;
  collect(feature, out);
  collect(classifier, out);
  return out;
}

std::vector<Tensor*> ModelBundle::r_parameters() {
  std::vector<Tensor*> out;
  collect(discriminator, out);
  return out;
}

std::vector<const Tensor*> ModelBundle::all_parameters() const {
  std::vector<const Tensor*> out;
  collect(feature, out);
  collect(classifier, out);
  collect(discriminator, out);
  return out;
}

void ModelBundle::zero_grad() {
  for (Tensor* t : fc_parameters()) t->zero_grad();
  for (Tensor* t : r_parameters()) t->zero_grad();
}

void ModelBundle::zero_weights() {
  for (Tensor* t : fc_parameters()) std::fill(t->data().begin(), t->data().end(), 0.0);
  for (Tensor* t : r_parameters()) std::fill(t->data().begin(), t->data().end(), 0.0);
}

Var apply_mlp(Graph& g, Mlp& net, Var x, double slope, bool track) {
  if (g.value(x).cols() != net.input_extent()) {
    throw DimensionError("network expects " + std::to_string(net.input_extent()) +
                         " input columns, got " + g.value(x).shape_string());
  }
  Var h = x;
  for (std::size_t l = 0; l < net.layers.size(); ++l) {
    h = g.add_row(g.matmul(h, param(g, net.layers[l].weight, track)),
                  param(g, net.layers[l].bias, track));
    if (l + 1 < net.layers.size()) {
      h = g.leaky_relu(h, slope);
    }
  }
  return h;
}

Var extract(Graph& g, ModelBundle& m, Var x, bool track) {
  return apply_mlp(g, m.feature, x, m.arch.slope, track);
}

Var classify(Graph& g, ModelBundle& m, Var z, bool track) {
  return g.softmax_rows(apply_mlp(g, m.classifier, z, m.arch.slope, track));
}

Var outer_embed(Graph& g, Var z, Var p) { return g.outer_rows(z, p); }

Var discriminate(Graph& g, ModelBundle& m, Var s, bool track) {
  Var logit = apply_mlp(g, m.discriminator, s, m.arch.slope, track);
  return g.clamp(g.sigmoid(logit), kProbClamp, 1.0 - kProbClamp);
}

namespace {

Tensor dense_forward(const Mlp& net, const Tensor& x, double slope) {
  Tensor h = x;
  for (std::size_t l = 0; l < net.layers.size(); ++l) {
    const Tensor& w = net.layers[l].weight;
    const Tensor& b = net.layers[l].bias;
    if (h.cols() != w.rows()) {
      throw DimensionError("network input extent mismatch");
    }
    Tensor out(h.rows(), w.cols());
    for (std::size_t i = 0; i < h.rows(); ++i) {
      for (std::size_t t = 0; t < w.rows(); ++t) {
        const double hv = h(i, t);
        for (std::size_t j = 0; j < w.cols(); ++j) out(i, j) += hv * w(t, j);
      }
      for (std::size_t j = 0; j < w.cols(); ++j) {
        out(i, j) += b(0, j);
        if (l + 1 < net.layers.size() && out(i, j) <= 0.0) out(i, j) *= slope;
      }
    }
    h = std::move(out);
  }
  return h;
}

}  // namespace

Tensor features(const ModelBundle& m, const Tensor& x) {
  return dense_forward(m.feature, x, m.arch.slope);
}

Tensor predict_proba(const ModelBundle& m, const Tensor& x) {
  Tensor p = dense_forward(m.classifier, features(m, x), m.arch.slope);
  for (std::size_t i = 0; i < p.rows(); ++i) {
    auto r = p.row(i);
    const double mx = *std::max_element(r.begin(), r.end());
    double total = 0.0;
    for (double& v : r) {
      v = std::exp(v - mx);
      total += v;
    }
    for (double& v : r) v /= total;
  }
  return p;
}

Tensor entropy_weights(const Tensor& p) {
  Tensor w(p.rows(), 1);
  for (std::size_t i = 0; i < p.rows(); ++i) {
    double h = 0.0;
    for (double v : p.row(i)) {
      if (v > 0.0) h -= v * std::log(v);
    }
    w(i, 0) = 1.0 + std::exp(-h);
  }
  return w;
}

std::vector<std::size_t> argmax_rows(const Tensor& p) {
  std::vector<std::size_t> out(p.rows());
  for (std::size_t i = 0; i < p.rows(); ++i) {
    auto r = p.row(i);
    out[i] = static_cast<std::size_t>(std::max_element(r.begin(), r.end()) - r.begin());
  }
  return out;
}

std::uint64_t parameter_checksum(const std::vector<const Tensor*>& params) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (const Tensor* t : params) {
    for (double v : t->data()) {
      auto bits = std::bit_cast<std::uint64_t>(v);
      for (int b = 0; b < 8; ++b) {
        h ^= (bits >> (8 * b)) & 0xffU;
        h *= 0x100000001b3ULL;
      }
    }
  }
  return h;
}

namespace {

using nlohmann::json;

json tensor_json(const Tensor& t) {
  return json{{"rows", t.rows()}, {"cols", t.cols()},
              {"data", std::vector<double>(t.data().begin(), t.data().end())}};
}

Tensor tensor_from(const json& j) {
  return Tensor(j.at("rows").get<std::size_t>(), j.at("cols").get<std::size_t>(),
                j.at("data").get<std::vector<double>>());
}

json mlp_json(const Mlp& net) {
  json layers = json::array();
  for (const auto& l : net.layers) {
    layers.push_back({{"weight", tensor_json(l.weight)}, {"bias", tensor_json(l.bias)}});
  }
  return layers;
}

Mlp mlp_from(const json& j) {
  Mlp net;
  for (const auto& l : j) {
    net.layers.push_back({tensor_from(l.at("weight")), tensor_from(l.at("bias"))});
  }
  if (net.layers.empty()) {
    throw std::runtime_error("checkpoint: empty network");
  }
  return net;
}

constexpr int kCheckpointVersion = 1;

}  // namespace

std::string checkpoint_to_string(const ModelBundle& m) {
  json j;
  j["format"] = "casa-checkpoint";
  j["version"] = kCheckpointVersion;
  j["dims"] = {{"input", m.dims.input}, {"feature", m.dims.feature}, {"classes", m.dims.classes}};
  j["arch"] = {{"feature_hidden", m.arch.feature_hidden},
               {"classifier_hidden", m.arch.classifier_hidden},
               {"discriminator_hidden", m.arch.discriminator_hidden},
               {"slope", m.arch.slope},
               {"conditioned", m.arch.conditioned}};
  j["feature"] = mlp_json(m.feature);
  j["classifier"] = mlp_json(m.classifier);
  j["discriminator"] = mlp_json(m.discriminator);
  return j.dump();
}

ModelBundle checkpoint_from_string(const std::string& text) {
  const json j = json::parse(text);
  if (j.at("format") != "casa-checkpoint" || j.at("version") != kCheckpointVersion) {
    throw std::runtime_error("checkpoint: unsupported format or version");
  }
  ModelBundle m;
  const auto& d = j.at("dims");
  m.dims = {d.at("input").get<std::size_t>(), d.at("feature").get<std::size_t>(),
            d.at("classes").get<std::size_t>()};
  const auto& a = j.at("arch");
  m.arch.feature_hidden = a.at("feature_hidden").get<std::vector<std::size_t>>();
  m.arch.classifier_hidden = a.at("classifier_hidden").get<std::vector<std::size_t>>();
  m.arch.discriminator_hidden = a.at("discriminator_hidden").get<std::vector<std::size_t>>();
  m.arch.slope = a.at("slope").get<double>();
  m.arch.conditioned = a.at("conditioned").get<bool>();
  m.feature = mlp_from(j.at("feature"));
  m.classifier = mlp_from(j.at("classifier"));
  m.discriminator = mlp_from(j.at("discriminator"));
  if (m.feature.input_extent() != m.dims.input || m.feature.output_extent() != m.dims.feature ||
      m.classifier.output_extent() != m.dims.classes ||
      m.discriminator.input_extent() != m.discriminator_input()) {
    throw DimensionError("checkpoint: layer extents disagree with recorded dims");
  }
  for (Tensor* t : m.fc_parameters()) t->set_requires_grad(true);
  for (Tensor* t : m.r_parameters()) t->set_requires_grad(true);
  return m;
}

void save_checkpoint(const ModelBundle& m, const std::filesystem::path& path) {
  std::ofstream out(path);
  if (!out) {
    throw std::runtime_error("cannot write checkpoint " + path.string());
  }
  out << checkpoint_to_string(m) << '\n';
}

ModelBundle load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) {
    throw std::runtime_error("cannot read checkpoint " + path.string());
  }
  std::stringstream ss;
  ss << in.rdbuf();
  return checkpoint_from_string(ss.str());
}

}  // namespace casa
