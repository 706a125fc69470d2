#pragma once

#include <cstddef>
#include <initializer_list>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace casa {

class DimensionError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

class ContractError : public std::logic_error {
 public:
  using std::logic_error::logic_error;
};

class NonFiniteError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Dense row-major matrix of doubles with an optional gradient buffer.
///
/// Every tensor is two-dimensional; a scalar is 1x1 and a vector is n x 1.
class Tensor {
 public:
  Tensor() = default;
  Tensor(std::size_t rows, std::size_t cols, double fill = 0.0);
  Tensor(std::size_t rows, std::size_t cols, std::vector<double> data);

  static Tensor from_rows(std::initializer_list<std::initializer_list<double>> rows);
  static Tensor scalar(double v) { return Tensor(1, 1, v); }
  static Tensor column(std::span<const double> v);
  static Tensor identity(std::size_t n);

  std::size_t rows() const { return rows_; }
  std::size_t cols() const { return cols_; }
  std::size_t size() const { return data_.size(); }
  std::vector<std::size_t> shape() const { return {rows_, cols_}; }

  double& operator()(std::size_t r, std::size_t c) { return data_[r * cols_ + c]; }
  double operator()(std::size_t r, std::size_t c) const { return data_[r * cols_ + c]; }
  double& operator[](std::size_t i) { return data_[i]; }
  double operator[](std::size_t i) const { return data_[i]; }

  std::span<double> data() { return data_; }
  std::span<const double> data() const { return data_; }
  std::span<const double> row(std::size_t r) const { return {data_.data() + r * cols_, cols_}; }
  std::span<double> row(std::size_t r) { return {data_.data() + r * cols_, cols_}; }

  /// Scalar value of a 1x1 tensor.
  double item() const;

  bool requires_grad() const { return requires_grad_; }
  void set_requires_grad(bool on);

  bool has_grad() const { return grad_.has_value(); }
  std::span<const double> grad() const;
  std::span<double> grad_mut();
  void zero_grad();

  bool all_finite() const;
  bool same_shape(const Tensor& other) const { return rows_ == other.rows_ && cols_ == other.cols_; }
  std::string shape_string() const;

  friend bool operator==(const Tensor& a, const Tensor& b) {
    return a.rows_ == b.rows_ && a.cols_ == b.cols_ && a.data_ == b.data_;
  }

 private:
  std::size_t rows_ = 0;
  std::size_t cols_ = 0;
  std::vector<double> data_;
  bool requires_grad_ = false;
  std::optional<std::vector<double>> grad_;
};

/// Define-by-run computation record.
///
/// Nodes are appended in evaluation order, so insertion order is a valid
/// topological order and backward() walks it in reverse. A graph is meant to
/// live for exactly one forward/backward pass.
class Graph {
 public:
  struct Var {
    std::size_t id;
  };

  /// Copies `value` into the graph; no gradient is propagated out of it.
  Var constant(Tensor value);
  /// Binds an external tensor. If it requires grad, backward() accumulates
  /// into its grad buffer. The tensor must outlive the graph.
  Var leaf(Tensor& t);

  Var matmul(Var a, Var b);
  Var add_row(Var a, Var bias);
  Var add(Var a, Var b);
  Var sub(Var a, Var b);
  Var mul(Var a, Var b);
  Var scale(Var a, double s);
  Var leaky_relu(Var a, double slope);
  Var sigmoid(Var a);
  Var softmax_rows(Var a);
  Var log(Var a);
  Var clamp(Var a, double lo, double hi);
  Var abs(Var a);
  Var sum(Var a);
  Var mean(Var a);
  Var row_sum(Var a);
  /// out[i] = a[i, cols[i]]; result is n x 1.
  Var pick(Var a, std::span<const std::size_t> cols);
  /// out[k, :] = a[rows[k], :].
  Var gather_rows(Var a, std::span<const std::size_t> rows);
  /// Row-wise outer product: out[i, u*K + v] = z[i,u] * p[i,v].
  Var outer_rows(Var z, Var p);

  const Tensor& value(Var v) const { return nodes_.at(v.id).value; }
  /// Adjoint of a node after backward(); empty if the node received none.
  std::span<const double> adjoint(Var v) const { return nodes_.at(v.id).adjoint; }

  void backward(Var loss);

  std::size_t node_count() const { return nodes_.size(); }
  /// Number of nodes processed by the most recent backward() call.
  std::size_t last_backward_visits() const { return visits_; }

 private:
  enum class Op {
    Constant,
    Leaf,
    MatMul,
    AddRow,
    Add,
    Sub,
    Mul,
    Scale,
    LeakyRelu,
    Sigmoid,
    SoftmaxRows,
    Log,
    Clamp,
    Abs,
    Sum,
    Mean,
    RowSum,
    Pick,
    GatherRows,
    OuterRows,
  };

  struct Node {
    Op op;
    std::size_t lhs = 0;
    std::size_t rhs = 0;
    Tensor value{};
    std::vector<double> adjoint{};
    Tensor* external = nullptr;
    double p0 = 0.0;
    double p1 = 0.0;
    std::vector<std::size_t> index{};
    bool needs_grad = false;
  };

  Var push(Node node);
  const Node& node(Var v) const { return nodes_.at(v.id); }
  std::vector<double>& adjoint_buffer(std::size_t id);

  std::vector<Node> nodes_;
  std::size_t visits_ = 0;
};

}  // namespace casa
