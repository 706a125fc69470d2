#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "casa/tensor.hpp"

namespace casa {

struct Dense {
  Tensor weight;  // fan_in x fan_out
  Tensor bias;    // 1 x fan_out
};

struct Mlp {
  std::vector<Dense> layers;

  std::size_t input_extent() const { return layers.front().weight.rows(); }
  std::size_t output_extent() const { return layers.back().weight.cols(); }
};

struct ModelDims {
  std::size_t input = 2;
  std::size_t feature = 8;
  std::size_t classes = 3;

  friend bool operator==(const ModelDims&, const ModelDims&) = default;
};

struct ArchConfig {
  std::vector<std::size_t> feature_hidden{64, 64};
  std::vector<std::size_t> classifier_hidden{};
  std::vector<std::size_t> discriminator_hidden{64, 64};
  double slope = 0.1;
  /// Discriminator sees flatten(z p^T) when true, plain z otherwise.
  bool conditioned = true;

  friend bool operator==(const ArchConfig&, const ArchConfig&) = default;
};

/// Feature extractor f, classifier c and domain discriminator r.
class ModelBundle {
 public:
  ModelDims dims;
  ArchConfig arch;
  Mlp feature;
  Mlp classifier;
  Mlp discriminator;

  /// Glorot-uniform weights and zero biases from a seeded generator.
  static ModelBundle create(const ModelDims& dims, const ArchConfig& arch, std::uint64_t seed);

  std::size_t discriminator_input() const {
    return arch.conditioned ? dims.feature * dims.classes : dims.feature;
  }

  std::vector<Tensor*> fc_parameters();
  std::vector<Tensor*> r_parameters();
  std::vector<const Tensor*> all_parameters() const;

  void zero_grad();
  /// Zero every weight and bias; used by tests for the symmetric cases.
  void zero_weights();
};

using Var = Graph::Var;

/// Forward pass through an MLP; leaky-ReLU between layers, linear output.
/// When `track` is false the parameters enter the graph as constants.
Var apply_mlp(Graph& g, Mlp& net, Var x, double slope, bool track);

Var extract(Graph& g, ModelBundle& m, Var x, bool track);
/// Softmax class probabilities; rows lie in the simplex.
Var classify(Graph& g, ModelBundle& m, Var z, bool track);
Var outer_embed(Graph& g, Var z, Var p);
/// Sigmoid discriminator output clamped to [kProbClamp, 1 - kProbClamp].
Var discriminate(Graph& g, ModelBundle& m, Var s, bool track);

inline constexpr double kProbClamp = 1e-6;

/// Plain (graph-free) evaluation of g = c o f.
Tensor predict_proba(const ModelBundle& m, const Tensor& x);
Tensor features(const ModelBundle& m, const Tensor& x);

/// w_i = 1 + exp(-H(p_i)) with H in nats; returned as an n x 1 constant.
Tensor entropy_weights(const Tensor& p);

std::vector<std::size_t> argmax_rows(const Tensor& p);

/// FNV-1a fingerprint over the raw bytes of a parameter list.
std::uint64_t parameter_checksum(const std::vector<const Tensor*>& params);

void save_checkpoint(const ModelBundle& m, const std::filesystem::path& path);
ModelBundle load_checkpoint(const std::filesystem::path& path);
std::string checkpoint_to_string(const ModelBundle& m);
ModelBundle checkpoint_from_string(const std::string& text);

}  // namespace casa
