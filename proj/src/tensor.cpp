#include "casa/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>

namespace casa {

Tensor::Tensor(std::size_t rows, std::size_t cols, double fill)
    : rows_(rows), cols_(cols), data_(rows * cols, fill) {
  if (rows == 0 || cols == 0) {
    throw DimensionError("tensor extents must be positive");
  }
}

Tensor::Tensor(std::size_t rows, std::size_t cols, std::vector<double> data)
    : rows_(rows), cols_(cols), data_(std::move(data)) {
  if (rows == 0 || cols == 0) {
    throw DimensionError("tensor extents must be positive");
  }
  if (data_.size() != rows * cols) {
    throw DimensionError("tensor data length does not match shape");
  }
}

Tensor Tensor::from_rows(std::initializer_list<std::initializer_list<double>> rows) {
  const std::size_t n = rows.size();
  const std::size_t m = n == 0 ? 0 : rows.begin()->size();
  std::vector<double> data;
  data.reserve(n * m);
  for (const auto& r : rows) {
    if (r.size() != m) {
      throw DimensionError("ragged row list");
    }
    data.insert(data.end(), r.begin(), r.end());
  }
  return Tensor(n, m, std::move(data));
}

Tensor Tensor::column(std::span<const double> v) {
  return Tensor(v.size(), 1, std::vector<double>(v.begin(), v.end()));
}

Tensor Tensor::identity(std::size_t n) {
  Tensor t(n, n);
  for (std::size_t i = 0; i < n; ++i) {
    t(i, i) = 1.0;
  }
  return t;
}

double Tensor::item() const {
  if (data_.size() != 1) {
    throw DimensionError("item() on non-scalar tensor " + shape_string());
  }
  return data_[0];
}

void Tensor::set_requires_grad(bool on) {
  requires_grad_ = on;
  if (!on) {
    grad_.reset();
  }
}

std::span<const double> Tensor::grad() const {
  if (!grad_) {
    return {};
  }
  return *grad_;
}

std::span<double> Tensor::grad_mut() {
  if (!grad_) {
    grad_.emplace(data_.size(), 0.0);
  }
  return *grad_;
}

void Tensor::zero_grad() {
  if (grad_) {
    std::fill(grad_->begin(), grad_->end(), 0.0);
  }
}

bool Tensor::all_finite() const {
  return std::all_of(data_.begin(), data_.end(), [](double v) { return std::isfinite(v); });
}

std::string Tensor::shape_string() const {
  std::ostringstream os;
  os << '[' << rows_ << 'x' << cols_ << ']';
  return os.str();
}

namespace {

void require_same(const Tensor& a, const Tensor& b, const char* op) {
  if (!a.same_shape(b)) {
    throw DimensionError(std::string(op) + ": shape mismatch " + a.shape_string() + " vs " +
                         b.shape_string());
  }
}

}  // namespace

Graph::Var Graph::push(Node node) {
  if (!node.value.all_finite()) {
    throw NonFiniteError("non-finite value produced by graph op #" + std::to_string(nodes_.size()));
  }
  switch (node.op) {
    case Op::Constant:
      node.needs_grad = false;
      break;
    case Op::Leaf:
      node.needs_grad = node.external != nullptr;
      break;
    case Op::MatMul:
    case Op::AddRow:
    case Op::Add:
    case Op::Sub:
    case Op::Mul:
    case Op::OuterRows:
      node.needs_grad = nodes_[node.lhs].needs_grad || nodes_[node.rhs].needs_grad;
      break;
    default:
      node.needs_grad = nodes_[node.lhs].needs_grad;
      break;
  }
  nodes_.push_back(std::move(node));
  return Var{nodes_.size() - 1};
}

Graph::Var Graph::constant(Tensor value) {
  value.set_requires_grad(false);
  Node n{.op = Op::Constant};
  n.value = std::move(value);
  return push(std::move(n));
}

Graph::Var Graph::leaf(Tensor& t) {
  Node n{.op = Op::Leaf};
  n.value = Tensor(t.rows(), t.cols(), std::vector<double>(t.data().begin(), t.data().end()));
  n.external = t.requires_grad() ? &t : nullptr;
  return push(std::move(n));
}

Graph::Var Graph::matmul(Var a, Var b) {
  const Tensor& x = value(a);
  const Tensor& y = value(b);
  if (x.cols() != y.rows()) {
    throw DimensionError("matmul: inner extents differ " + x.shape_string() + " * " +
                         y.shape_string());
  }
  Tensor out(x.rows(), y.cols());
  const std::size_t n = x.rows(), k = x.cols(), m = y.cols();
  for (std::size_t i = 0; i < n; ++i) {
    double* orow = &out(i, 0);
    for (std::size_t t = 0; t < k; ++t) {
      const double xv = x(i, t);
      if (xv == 0.0) continue;
      const double* yrow = y.data().data() + t * m;
      for (std::size_t j = 0; j < m; ++j) {
        orow[j] += xv * yrow[j];
      }
    }
  }
  Node nd{.op = Op::MatMul, .lhs = a.id, .rhs = b.id};
  nd.value = std::move(out);
  return push(std::move(nd));
}

Graph::Var Graph::add_row(Var a, Var bias) {
  const Tensor& x = value(a);
  const Tensor& b = value(bias);
  if (b.rows() != 1 || b.cols() != x.cols()) {
    throw DimensionError("add_row: bias " + b.shape_string() + " does not fit " +
                         x.shape_string());
  }
  Tensor out = x;
  for (std::size_t i = 0; i < x.rows(); ++i) {
    for (std::size_t j = 0; j < x.cols(); ++j) {
      out(i, j) += b(0, j);
    }
  }
  Node nd{.op = Op::AddRow, .lhs = a.id, .rhs = bias.id};
  nd.value = std::move(out);
  return push(std::move(nd));
}

Graph::Var Graph::add(Var a, Var b) {
  const Tensor& x = value(a);
  const Tensor& y = value(b);
  require_same(x, y, "add");
  Tensor out = x;
  for (std::size_t i = 0; i < out.size(); ++i) out[i] += y[i];
  Node nd{.op = Op::Add, .lhs = a.id, .rhs = b.id};
  nd.value = std::move(out);
  return push(std::move(nd));
}

Graph::Var Graph::sub(Var a, Var b) {
  const Tensor& x = value(a);
  const Tensor& y = value(b);
  require_same(x, y, "sub");
  Tensor out = x;
  for (std::size_t i = 0; i < out.size(); ++i) out[i] -= y[i];
  Node nd{.op = Op::Sub, .lhs = a.id, .rhs = b.id};
  nd.value = std::move(out);
  return push(std::move(nd));
}

Graph::Var Graph::mul(Var a, Var b) {
  const Tensor& x = value(a);
  const Tensor& y = value(b);
  require_same(x, y, "mul");
  Tensor out = x;
  for (std::size_t i = 0; i < out.size(); ++i) out[i] *= y[i];
  Node nd{.op = Op::Mul, .lhs = a.id, .rhs = b.id};
  nd.value = std::move(out);
  return push(std::move(nd));
}

Graph::Var Graph::scale(Var a, double s) {
  Tensor out = value(a);
  for (double& v : out.data()) v *= s;
  Node nd{.op = Op::Scale, .lhs = a.id, .p0 = s};
  nd.value = std::move(out);
  return push(std::move(nd));
}

Graph::Var Graph::leaky_relu(Var a, double slope) {
  Tensor out = value(a);
  for (double& v : out.data()) v = v > 0.0 ? v : slope * v;
  Node nd{.op = Op::LeakyRelu, .lhs = a.id, .p0 = slope};
  nd.value = std::move(out);
  return push(std::move(nd));
}

Graph::Var Graph::sigmoid(Var a) {
  Tensor out = value(a);
  for (double& v : out.data()) {
    v = v >= 0.0 ? 1.0 / (1.0 + std::exp(-v)) : std::exp(v) / (1.0 + std::exp(v));
  }
  Node nd{.op = Op::Sigmoid, .lhs = a.id};
  nd.value = std::move(out);
  return push(std::move(nd));
}

Graph::Var Graph::softmax_rows(Var a) {
  Tensor out = value(a);
  if (out.cols() < 2) {
    throw DimensionError("softmax_rows needs at least two columns");
  }
  for (std::size_t i = 0; i < out.rows(); ++i) {
    auto r = out.row(i);
    const double mx = *std::max_element(r.begin(), r.end());
    double total = 0.0;
    for (double& v : r) {
      v = std::exp(v - mx);
      total += v;
    }
    for (double& v : r) v /= total;
  }
  Node nd{.op = Op::SoftmaxRows, .lhs = a.id};
  nd.value = std::move(out);
  return push(std::move(nd));
}

Graph::Var Graph::log(Var a) {
  Tensor out = value(a);
  for (double& v : out.data()) {
    if (!(v > 0.0)) {
      throw NonFiniteError("log of non-positive value");
    }
    v = std::log(v);
  }
  Node nd{.op = Op::Log, .lhs = a.id};
  nd.value = std::move(out);
  return push(std::move(nd));
}

Graph::Var Graph::clamp(Var a, double lo, double hi) {
  Tensor out = value(a);
  for (double& v : out.data()) v = std::clamp(v, lo, hi);
  Node nd{.op = Op::Clamp, .lhs = a.id, .p0 = lo, .p1 = hi};
  nd.value = std::move(out);
  return push(std::move(nd));
}

Graph::Var Graph::abs(Var a) {
  Tensor out = value(a);
  for (double& v : out.data()) v = std::fabs(v);
  Node nd{.op = Op::Abs, .lhs = a.id};
  nd.value = std::move(out);
  return push(std::move(nd));
}

Graph::Var Graph::sum(Var a) {
  double total = 0.0;
  for (double v : value(a).data()) total += v;
  Node nd{.op = Op::Sum, .lhs = a.id};
  nd.value = Tensor::scalar(total);
  return push(std::move(nd));
}

Graph::Var Graph::mean(Var a) {
  const Tensor& x = value(a);
  double total = 0.0;
  for (double v : x.data()) total += v;
  Node nd{.op = Op::Mean, .lhs = a.id};
  nd.value = Tensor::scalar(total / static_cast<double>(x.size()));
  return push(std::move(nd));
}

Graph::Var Graph::row_sum(Var a) {
  const Tensor& x = value(a);
  Tensor out(x.rows(), 1);
  for (std::size_t i = 0; i < x.rows(); ++i) {
    for (double v : x.row(i)) out(i, 0) += v;
  }
  Node nd{.op = Op::RowSum, .lhs = a.id};
  nd.value = std::move(out);
  return push(std::move(nd));
}

Graph::Var Graph::pick(Var a, std::span<const std::size_t> cols) {
  const Tensor& x = value(a);
  if (cols.size() != x.rows()) {
    throw DimensionError("pick: index count differs from row count");
  }
  Tensor out(x.rows(), 1);
  for (std::size_t i = 0; i < x.rows(); ++i) {
    if (cols[i] >= x.cols()) {
      throw DimensionError("pick: column index out of range");
    }
    out(i, 0) = x(i, cols[i]);
  }
  Node nd{.op = Op::Pick, .lhs = a.id};
  nd.value = std::move(out);
  nd.index.assign(cols.begin(), cols.end());
  return push(std::move(nd));
}

Graph::Var Graph::gather_rows(Var a, std::span<const std::size_t> rows) {
  const Tensor& x = value(a);
  if (rows.empty()) {
    throw DimensionError("gather_rows: empty index list");
  }
  Tensor out(rows.size(), x.cols());
  for (std::size_t k = 0; k < rows.size(); ++k) {
    if (rows[k] >= x.rows()) {
      throw DimensionError("gather_rows: row index out of range");
    }
    std::copy_n(x.row(rows[k]).begin(), x.cols(), out.row(k).begin());
  }
  Node nd{.op = Op::GatherRows, .lhs = a.id};
  nd.value = std::move(out);
  nd.index.assign(rows.begin(), rows.end());
  return push(std::move(nd));
}

Graph::Var Graph::outer_rows(Var z, Var p) {
  const Tensor& a = value(z);
  const Tensor& b = value(p);
  if (a.rows() != b.rows()) {
    throw DimensionError("outer_rows: row counts differ " + a.shape_string() + " vs " +
                         b.shape_string());
  }
  const std::size_t m = a.cols(), k = b.cols();
  Tensor out(a.rows(), m * k);
  for (std::size_t i = 0; i < a.rows(); ++i) {
    for (std::size_t u = 0; u < m; ++u) {
      for (std::size_t v = 0; v < k; ++v) {
        out(i, u * k + v) = a(i, u) * b(i, v);
      }
    }
  }
  Node nd{.op = Op::OuterRows, .lhs = z.id, .rhs = p.id};
  nd.value = std::move(out);
  return push(std::move(nd));
}

std::vector<double>& Graph::adjoint_buffer(std::size_t id) {
  auto& adj = nodes_[id].adjoint;
  if (adj.empty()) {
    adj.assign(nodes_[id].value.size(), 0.0);
  }
  return adj;
}

void Graph::backward(Var loss) {
  if (value(loss).size() != 1) {
    throw ContractError("backward() requires a scalar loss, got " + value(loss).shape_string());
  }
  for (auto& n : nodes_) n.adjoint.clear();
  adjoint_buffer(loss.id)[0] = 1.0;
  visits_ = 0;

  for (std::size_t id = loss.id + 1; id-- > 0;) {
    ++visits_;
    Node& nd = nodes_[id];
    if (nd.adjoint.empty() || !nd.needs_grad) continue;
    const std::vector<double>& g = nd.adjoint;
    const Tensor& out = nd.value;

    switch (nd.op) {
      case Op::Constant:
        break;
      case Op::Leaf: {
        if (nd.external != nullptr) {
          auto dst = nd.external->grad_mut();
          for (std::size_t i = 0; i < g.size(); ++i) dst[i] += g[i];
        }
        break;
      }
      case Op::MatMul: {
        const Tensor& a = nodes_[nd.lhs].value;
        const Tensor& b = nodes_[nd.rhs].value;
        const std::size_t n = a.rows(), k = a.cols(), m = b.cols();
        if (nodes_[nd.lhs].needs_grad) {
          auto& da = adjoint_buffer(nd.lhs);
          for (std::size_t i = 0; i < n; ++i) {
            for (std::size_t t = 0; t < k; ++t) {
              double acc = 0.0;
              for (std::size_t j = 0; j < m; ++j) acc += g[i * m + j] * b(t, j);
              da[i * k + t] += acc;
            }
          }
        }
        if (nodes_[nd.rhs].needs_grad) {
          auto& db = adjoint_buffer(nd.rhs);
          for (std::size_t i = 0; i < n; ++i) {
            for (std::size_t t = 0; t < k; ++t) {
              const double av = a(i, t);
              if (av == 0.0) continue;
              double* dst = &db[t * m];
              const double* src = &g[i * m];
              for (std::size_t j = 0; j < m; ++j) dst[j] += av * src[j];
            }
          }
        }
        break;
      }
      case Op::AddRow: {
        auto& da = adjoint_buffer(nd.lhs);
        for (std::size_t i = 0; i < g.size(); ++i) da[i] += g[i];
        auto& db = adjoint_buffer(nd.rhs);
        const std::size_t m = out.cols();
        for (std::size_t i = 0; i < g.size(); ++i) db[i % m] += g[i];
        break;
      }
      case Op::Add: {
        auto& da = adjoint_buffer(nd.lhs);
        for (std::size_t i = 0; i < g.size(); ++i) da[i] += g[i];
        auto& db = adjoint_buffer(nd.rhs);
        for (std::size_t i = 0; i < g.size(); ++i) db[i] += g[i];
        break;
      }
      case Op::Sub: {
        auto& da = adjoint_buffer(nd.lhs);
        for (std::size_t i = 0; i < g.size(); ++i) da[i] += g[i];
        auto& db = adjoint_buffer(nd.rhs);
        for (std::size_t i = 0; i < g.size(); ++i) db[i] -= g[i];
        break;
      }
      case Op::Mul: {
        const Tensor& a = nodes_[nd.lhs].value;
        const Tensor& b = nodes_[nd.rhs].value;
        auto& da = adjoint_buffer(nd.lhs);
        for (std::size_t i = 0; i < g.size(); ++i) da[i] += g[i] * b[i];
        auto& db = adjoint_buffer(nd.rhs);
        for (std::size_t i = 0; i < g.size(); ++i) db[i] += g[i] * a[i];
        break;
      }
      case Op::Scale: {
        auto& da = adjoint_buffer(nd.lhs);
        for (std::size_t i = 0; i < g.size(); ++i) da[i] += nd.p0 * g[i];
        break;
      }
      case Op::LeakyRelu: {
        const Tensor& a = nodes_[nd.lhs].value;
        auto& da = adjoint_buffer(nd.lhs);
        for (std::size_t i = 0; i < g.size(); ++i) da[i] += a[i] > 0.0 ? g[i] : nd.p0 * g[i];
        break;
      }
      case Op::Sigmoid: {
        auto& da = adjoint_buffer(nd.lhs);
        for (std::size_t i = 0; i < g.size(); ++i) da[i] += g[i] * out[i] * (1.0 - out[i]);
        break;
      }
      case Op::SoftmaxRows: {
        auto& da = adjoint_buffer(nd.lhs);
        const std::size_t m = out.cols();
        for (std::size_t i = 0; i < out.rows(); ++i) {
          double dot = 0.0;
          for (std::size_t j = 0; j < m; ++j) dot += g[i * m + j] * out(i, j);
          for (std::size_t j = 0; j < m; ++j) da[i * m + j] += out(i, j) * (g[i * m + j] - dot);
        }
        break;
      }
      case Op::Log: {
        const Tensor& a = nodes_[nd.lhs].value;
        auto& da = adjoint_buffer(nd.lhs);
        for (std::size_t i = 0; i < g.size(); ++i) da[i] += g[i] / a[i];
        break;
      }
      case Op::Clamp: {
        const Tensor& a = nodes_[nd.lhs].value;
        auto& da = adjoint_buffer(nd.lhs);
        for (std::size_t i = 0; i < g.size(); ++i) {
          if (a[i] >= nd.p0 && a[i] <= nd.p1) da[i] += g[i];
        }
        break;
      }
      case Op::Abs: {
        const Tensor& a = nodes_[nd.lhs].value;
        auto& da = adjoint_buffer(nd.lhs);
        for (std::size_t i = 0; i < g.size(); ++i) {
          da[i] += a[i] > 0.0 ? g[i] : (a[i] < 0.0 ? -g[i] : 0.0);
        }
        break;
      }
      case Op::Sum: {
        auto& da = adjoint_buffer(nd.lhs);
        for (double& v : da) v += g[0];
        break;
      }
      case Op::Mean: {
        auto& da = adjoint_buffer(nd.lhs);
        const double s = g[0] / static_cast<double>(da.size());
        for (double& v : da) v += s;
        break;
      }
      case Op::RowSum: {
        auto& da = adjoint_buffer(nd.lhs);
        const std::size_t m = nodes_[nd.lhs].value.cols();
        for (std::size_t i = 0; i < da.size(); ++i) da[i] += g[i / m];
        break;
      }
      case Op::Pick: {
        auto& da = adjoint_buffer(nd.lhs);
        const std::size_t m = nodes_[nd.lhs].value.cols();
        for (std::size_t i = 0; i < nd.index.size(); ++i) da[i * m + nd.index[i]] += g[i];
        break;
      }
      case Op::GatherRows: {
        auto& da = adjoint_buffer(nd.lhs);
        const std::size_t m = out.cols();
        for (std::size_t k = 0; k < nd.index.size(); ++k) {
          for (std::size_t j = 0; j < m; ++j) da[nd.index[k] * m + j] += g[k * m + j];
        }
        break;
      }
      case Op::OuterRows: {
        const Tensor& z = nodes_[nd.lhs].value;
        const Tensor& p = nodes_[nd.rhs].value;
        const std::size_t m = z.cols(), k = p.cols();
        auto& dz = adjoint_buffer(nd.lhs);
        for (std::size_t i = 0; i < z.rows(); ++i) {
          for (std::size_t u = 0; u < m; ++u) {
            double acc = 0.0;
            for (std::size_t v = 0; v < k; ++v) acc += g[i * m * k + u * k + v] * p(i, v);
            dz[i * m + u] += acc;
          }
        }
        auto& dp = adjoint_buffer(nd.rhs);
        for (std::size_t i = 0; i < z.rows(); ++i) {
          for (std::size_t v = 0; v < k; ++v) {
            double acc = 0.0;
            for (std::size_t u = 0; u < m; ++u) acc += g[i * m * k + u * k + v] * z(i, u);
            dp[i * k + v] += acc;
          }
        }
        break;
      }
    }
  }
}

}  // namespace casa
