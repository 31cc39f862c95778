#pragma once

// Dense 64-bit tensors and a define-by-run reverse-mode autodiff tape.
//
// A Graph owns an append-only list of nodes. Every operation appends one node
// whose inputs already exist, so insertion order is a topological order and
// backward() is a single reverse sweep.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <initializer_list>
#include <numeric>
#include <span>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "covsda/errors.hpp"

namespace covsda {

using Shape = std::vector<std::size_t>;

inline std::string shape_string(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << ", ";
    os << shape[i];
  }
  os << ']';
  return os.str();
}

inline std::size_t shape_size(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

/// Row-major dense array of doubles. Rank 0 is a scalar with one element.
class Tensor {
 public:
  Tensor() : shape_{0} {}

  explicit Tensor(Shape shape, double fill = 0.0)
      : shape_(std::move(shape)), data_(shape_size(shape_), fill) {}

  Tensor(Shape shape, std::vector<double> data) : shape_(std::move(shape)), data_(std::move(data)) {
    if (shape_size(shape_) != data_.size()) {
      throw ShapeError("Tensor: shape " + shape_string(shape_) + " does not match data length " +
                       std::to_string(data_.size()));
    }
  }

  static Tensor scalar(double v) { return Tensor(Shape{}, std::vector<double>{v}); }
  static Tensor vector(std::vector<double> v) {
    const std::size_t n = v.size();
    return Tensor(Shape{n}, std::move(v));
  }
  static Tensor matrix(std::size_t rows, std::size_t cols, std::vector<double> v) {
    return Tensor(Shape{rows, cols}, std::move(v));
  }
  static Tensor matrix(std::initializer_list<std::initializer_list<double>> rows) {
    const std::size_t r = rows.size();
    const std::size_t c = r ? rows.begin()->size() : 0;
    std::vector<double> v;
    v.reserve(r * c);
    for (const auto& row : rows) {
      if (row.size() != c) throw ShapeError("Tensor::matrix: ragged initializer");
      v.insert(v.end(), row.begin(), row.end());
    }
    return Tensor(Shape{r, c}, std::move(v));
  }
  static Tensor identity(std::size_t n) {
    Tensor t(Shape{n, n});
    for (std::size_t i = 0; i < n; ++i) t(i, i) = 1.0;
    return t;
  }

  const Shape& shape() const { return shape_; }
  std::size_t rank() const { return shape_.size(); }
  std::size_t size() const { return data_.size(); }
  std::size_t rows() const { return shape_.empty() ? 1 : shape_[0]; }
  std::size_t cols() const { return shape_.size() < 2 ? 1 : shape_[1]; }

  std::span<double> data() { return data_; }
  std::span<const double> data() const { return data_; }
  const std::vector<double>& values() const { return data_; }

  double& operator[](std::size_t i) { return data_[i]; }
  double operator[](std::size_t i) const { return data_[i]; }
  double& operator()(std::size_t r, std::size_t c) { return data_[r * cols() + c]; }
  double operator()(std::size_t r, std::size_t c) const { return data_[r * cols() + c]; }

  double item() const {
    if (data_.size() != 1) throw ShapeError("Tensor::item: tensor of shape " + shape_string(shape_) + " is not a scalar");
    return data_[0];
  }

  bool all_finite() const {
    return std::all_of(data_.begin(), data_.end(), [](double v) { return std::isfinite(v); });
  }

  friend bool operator==(const Tensor& a, const Tensor& b) { return a.shape_ == b.shape_ && a.data_ == b.data_; }

 private:
  Shape shape_;
  std::vector<double> data_;
};

enum class OpKind {
  kLeaf,
  kMatmul,
  kAdd,
  kSub,
  kMul,
  kScale,
  kAddScalar,
  kRelu,
  kExp,
  kLog,
  kSquare,
  kClamp,
  kSum,
  kMean,
  kSumRows,
  kSoftmax,
  kSoftmaxCrossEntropy,
  kVariance,
  kIndexRows,
  kStack,
};

inline const char* op_name(OpKind k) {
  switch (k) {
    case OpKind::kLeaf: return "leaf";
    case OpKind::kMatmul: return "matmul";
    case OpKind::kAdd: return "add";
    case OpKind::kSub: return "sub";
    case OpKind::kMul: return "mul";
    case OpKind::kScale: return "scale";
    case OpKind::kAddScalar: return "add_scalar";
    case OpKind::kRelu: return "relu";
    case OpKind::kExp: return "exp";
    case OpKind::kLog: return "log";
    case OpKind::kSquare: return "square";
    case OpKind::kClamp: return "clamp";
    case OpKind::kSum: return "sum";
    case OpKind::kMean: return "mean";
    case OpKind::kSumRows: return "sum_rows";
    case OpKind::kSoftmax: return "softmax";
    case OpKind::kSoftmaxCrossEntropy: return "softmax_cross_entropy";
    case OpKind::kVariance: return "variance_over_axis";
    case OpKind::kIndexRows: return "index_rows";
    case OpKind::kStack: return "stack";
  }
  return "?";
}

class Graph;

/// Handle to a node of a Graph. Cheap to copy; valid while the graph lives.
struct Var {
  Graph* graph = nullptr;
  std::size_t id = 0;

  const Tensor& value() const;
  const Tensor& grad() const;
  const Shape& shape() const { return value().shape(); }
};

class Graph {
 public:
  Graph() = default;
  Graph(const Graph&) = delete;
  Graph& operator=(const Graph&) = delete;

  /// Leaf that receives a gradient.
  Var variable(Tensor t) { return push_leaf(std::move(t), true); }
  /// Leaf excluded from differentiation.
  Var constant(Tensor t) { return push_leaf(std::move(t), false); }

  const Tensor& value(Var v) const { return nodes_.at(v.id).value; }
  const Tensor& grad(Var v) const { return nodes_.at(v.id).grad; }
  OpKind kind(Var v) const { return nodes_.at(v.id).op; }
  std::size_t size() const { return nodes_.size(); }

  /// Reverse sweep from a scalar root. Gradients are reset first, so repeated
  /// calls return identical results.
  void backward(Var root);

  // Op implementations; prefer the free functions below.
  Var matmul(Var a, Var b);
  Var binary(OpKind kind, Var a, Var b);
  Var scale(Var a, double c);
  Var add_scalar(Var a, double c);
  Var unary(OpKind kind, Var a);
  Var clamp(Var a, double lo, double hi);
  Var sum(Var a);
  Var mean(Var a);
  Var sum_rows(Var a);
  Var softmax(Var a);
  Var softmax_cross_entropy(Var logits, std::span<const int> labels);
  Var variance(Var a);
  Var index_rows(Var a, std::span<const std::size_t> rows);
  Var stack(std::span<const Var> scalars);

 private:
  enum class Broadcast { kSame, kRow, kScalar };

  struct Node {
    OpKind op = OpKind::kLeaf;
    std::vector<std::size_t> inputs;
    Tensor value;
    Tensor grad;
    Tensor saved;
    bool requires_grad = false;
    Broadcast bcast = Broadcast::kSame;
    double p0 = 0.0;
    double p1 = 0.0;
    std::vector<std::size_t> indices;
    std::vector<int> labels;
  };

  Var push_leaf(Tensor t, bool requires_grad) {
    Node n;
    n.value = std::move(t);
    n.requires_grad = requires_grad;
    nodes_.push_back(std::move(n));
    return Var{this, nodes_.size() - 1};
  }

  Var push(Node n) {
    n.requires_grad = false;
    for (std::size_t in : n.inputs) n.requires_grad = n.requires_grad || nodes_[in].requires_grad;
    nodes_.push_back(std::move(n));
    return Var{this, nodes_.size() - 1};
  }

  const Node& node(Var v) const {
    if (v.graph != this) throw std::logic_error("Var belongs to a different Graph");
    return nodes_.at(v.id);
  }

  static Broadcast classify_broadcast(OpKind kind, const Tensor& a, const Tensor& b);
  void backprop_node(std::size_t id);

  std::vector<Node> nodes_;
};

inline const Tensor& Var::value() const { return graph->value(*this); }
inline const Tensor& Var::grad() const { return graph->grad(*this); }

// ---------------------------------------------------------------------------
// forward

inline Graph::Broadcast Graph::classify_broadcast(OpKind kind, const Tensor& a, const Tensor& b) {
  if (a.shape() == b.shape()) return Broadcast::kSame;
  if (b.rank() == 0 || (b.size() == 1 && a.size() != 1)) return Broadcast::kScalar;
  if (a.rank() == 2) {
    const bool row_vec = (b.rank() == 1 && b.shape()[0] == a.cols()) ||
                         (b.rank() == 2 && b.shape()[0] == 1 && b.shape()[1] == a.cols());
    if (row_vec) return Broadcast::kRow;
  }
  throw ShapeError(std::string(op_name(kind)) + ": shape mismatch " + shape_string(a.shape()) + " vs " +
                   shape_string(b.shape()));
}

inline Var Graph::matmul(Var a, Var b) {
  const Tensor& A = node(a).value;
  const Tensor& B = node(b).value;
  if (A.rank() != 2 || B.rank() != 2 || A.cols() != B.rows()) {
    throw ShapeError("matmul: shape mismatch " + shape_string(A.shape()) + " vs " + shape_string(B.shape()));
  }
  const std::size_t n = A.rows(), m = A.cols(), p = B.cols();
  Tensor C(Shape{n, p});
  const double* ad = A.data().data();
  const double* bd = B.data().data();
  double* cd = C.data().data();
  for (std::size_t i = 0; i < n; ++i) {
    double* crow = cd + i * p;
    for (std::size_t k = 0; k < m; ++k) {
      const double aik = ad[i * m + k];
      if (aik == 0.0) continue;
      const double* brow = bd + k * p;
      for (std::size_t j = 0; j < p; ++j) crow[j] += aik * brow[j];
    }
  }
  Node nd;
  nd.op = OpKind::kMatmul;
  nd.inputs = {a.id, b.id};
  nd.value = std::move(C);
  return push(std::move(nd));
}

inline Var Graph::binary(OpKind kind, Var a, Var b) {
  const Tensor& A = node(a).value;
  const Tensor& B = node(b).value;
  const Broadcast bc = classify_broadcast(kind, A, B);
  Tensor out(A.shape());
  const std::size_t cols = bc == Broadcast::kRow ? A.cols() : 1;
  for (std::size_t i = 0; i < A.size(); ++i) {
    const double bv = bc == Broadcast::kSame ? B[i] : (bc == Broadcast::kScalar ? B[0] : B[i % cols]);
    switch (kind) {
      case OpKind::kAdd: out[i] = A[i] + bv; break;
      case OpKind::kSub: out[i] = A[i] - bv; break;
      case OpKind::kMul: out[i] = A[i] * bv; break;
      default: throw std::logic_error("binary: unsupported op");
    }
  }
  Node nd;
  nd.op = kind;
  nd.inputs = {a.id, b.id};
  nd.bcast = bc;
  nd.value = std::move(out);
  return push(std::move(nd));
}

inline Var Graph::scale(Var a, double c) {
  Tensor out = node(a).value;
  for (double& v : out.data()) v *= c;
  Node nd;
  nd.op = OpKind::kScale;
  nd.inputs = {a.id};
  nd.p0 = c;
  nd.value = std::move(out);
  return push(std::move(nd));
}

inline Var Graph::add_scalar(Var a, double c) {
  Tensor out = node(a).value;
  for (double& v : out.data()) v += c;
  Node nd;
  nd.op = OpKind::kAddScalar;
  nd.inputs = {a.id};
  nd.value = std::move(out);
  return push(std::move(nd));
}

inline Var Graph::unary(OpKind kind, Var a) {
  const Tensor& A = node(a).value;
  Tensor out(A.shape());
  for (std::size_t i = 0; i < A.size(); ++i) {
    const double x = A[i];
    switch (kind) {
      case OpKind::kRelu: out[i] = x > 0.0 ? x : 0.0; break;
      case OpKind::kExp: out[i] = std::exp(x); break;
      case OpKind::kLog:
        if (!(x > 0.0)) {
          throw DomainError("log: non-positive input " + std::to_string(x) + " at index " + std::to_string(i));
        }
        out[i] = std::log(x);
        break;
      case OpKind::kSquare: out[i] = x * x; break;
      default: throw std::logic_error("unary: unsupported op");
    }
  }
  Node nd;
  nd.op = kind;
  nd.inputs = {a.id};
  nd.value = std::move(out);
  return push(std::move(nd));
}

inline Var Graph::clamp(Var a, double lo, double hi) {
  Tensor out = node(a).value;
  for (double& v : out.data()) v = std::clamp(v, lo, hi);
  Node nd;
  nd.op = OpKind::kClamp;
  nd.inputs = {a.id};
  nd.p0 = lo;
  nd.p1 = hi;
  nd.value = std::move(out);
  return push(std::move(nd));
}

inline Var Graph::sum(Var a) {
  const Tensor& A = node(a).value;
  double s = 0.0;
  for (double v : A.data()) s += v;
  Node nd;
  nd.op = OpKind::kSum;
  nd.inputs = {a.id};
  nd.value = Tensor::scalar(s);
  return push(std::move(nd));
}

inline Var Graph::mean(Var a) {
  const Tensor& A = node(a).value;
  if (A.size() == 0) throw ShapeError("mean: empty tensor " + shape_string(A.shape()));
  double s = 0.0;
  for (double v : A.data()) s += v;
  Node nd;
  nd.op = OpKind::kMean;
  nd.inputs = {a.id};
  nd.value = Tensor::scalar(s / static_cast<double>(A.size()));
  return push(std::move(nd));
}

inline Var Graph::sum_rows(Var a) {
  const Tensor& A = node(a).value;
  if (A.rank() != 2) throw ShapeError("sum_rows: expected a matrix, got " + shape_string(A.shape()));
  Tensor out(Shape{A.rows()});
  for (std::size_t i = 0; i < A.rows(); ++i) {
    double s = 0.0;
    for (std::size_t j = 0; j < A.cols(); ++j) s += A(i, j);
    out[i] = s;
  }
  Node nd;
  nd.op = OpKind::kSumRows;
  nd.inputs = {a.id};
  nd.value = std::move(out);
  return push(std::move(nd));
}

namespace detail {

inline Tensor row_softmax(const Tensor& logits) {
  Tensor p(logits.shape());
  const std::size_t n = logits.rows(), c = logits.cols();
  for (std::size_t i = 0; i < n; ++i) {
    double mx = logits(i, 0);
    for (std::size_t j = 1; j < c; ++j) mx = std::max(mx, logits(i, j));
    double z = 0.0;
    for (std::size_t j = 0; j < c; ++j) {
      p(i, j) = std::exp(logits(i, j) - mx);
      z += p(i, j);
    }
    for (std::size_t j = 0; j < c; ++j) p(i, j) /= z;
  }
  return p;
}

}  // namespace detail

inline Var Graph::softmax(Var a) {
  const Tensor& A = node(a).value;
  if (A.rank() != 2 || A.cols() == 0) throw ShapeError("softmax: expected a (n, C) matrix, got " + shape_string(A.shape()));
  Node nd;
  nd.op = OpKind::kSoftmax;
  nd.inputs = {a.id};
  nd.value = detail::row_softmax(A);
  return push(std::move(nd));
}

inline Var Graph::softmax_cross_entropy(Var logits, std::span<const int> labels) {
  const Tensor& L = node(logits).value;
  if (L.rank() != 2 || L.cols() == 0) {
    throw ShapeError("softmax_cross_entropy: expected (n, C) logits, got " + shape_string(L.shape()));
  }
  if (labels.size() != L.rows()) {
    throw ShapeError("softmax_cross_entropy: logits " + shape_string(L.shape()) + " vs labels [" +
                     std::to_string(labels.size()) + "]");
  }
  const std::size_t n = L.rows(), c = L.cols();
  Tensor loss(Shape{n});
  for (std::size_t i = 0; i < n; ++i) {
    const int y = labels[i];
    if (y < 0 || static_cast<std::size_t>(y) >= c) {
      throw DomainError("softmax_cross_entropy: label " + std::to_string(y) + " outside [0, " + std::to_string(c) + ")");
    }
    std::size_t jmax = 0;
    for (std::size_t j = 1; j < c; ++j)
      if (L(i, j) > L(i, jmax)) jmax = j;
    const double mx = L(i, jmax);
    double rest = 0.0;  // log1p keeps precision when one logit dominates
    for (std::size_t j = 0; j < c; ++j)
      if (j != jmax) rest += std::exp(L(i, j) - mx);
    loss[i] = std::log1p(rest) + (mx - L(i, static_cast<std::size_t>(y)));
  }
  Node nd;
  nd.op = OpKind::kSoftmaxCrossEntropy;
  nd.inputs = {logits.id};
  nd.saved = detail::row_softmax(L);
  nd.labels.assign(labels.begin(), labels.end());
  nd.value = std::move(loss);
  return push(std::move(nd));
}

// Centred on the first element, so an exact common shift leaves every
// intermediate, and the result, bitwise unchanged.
inline Var Graph::variance(Var a) {
  const Tensor& A = node(a).value;
  Node nd;
  nd.op = OpKind::kVariance;
  nd.inputs = {a.id};
  if (A.rank() <= 1) {
    if (A.size() == 0) throw ShapeError("variance_over_axis: empty input");
    const double n = static_cast<double>(A.size());
    const double ref = A[0];
    double mu = 0.0;
    for (double v : A.data()) mu += v - ref;
    mu /= n;
    double s = 0.0;
    for (double v : A.data()) s += (v - ref - mu) * (v - ref - mu);
    nd.value = Tensor::scalar(s / n);
  } else if (A.rank() == 2) {
    if (A.rows() == 0) throw ShapeError("variance_over_axis: empty input " + shape_string(A.shape()));
    const std::size_t r = A.rows(), c = A.cols();
    Tensor out(Shape{c});
    for (std::size_t j = 0; j < c; ++j) {
      const double ref = A(0, j);
      double mu = 0.0;
      for (std::size_t i = 0; i < r; ++i) mu += A(i, j) - ref;
      mu /= static_cast<double>(r);
      double s = 0.0;
      for (std::size_t i = 0; i < r; ++i) s += (A(i, j) - ref - mu) * (A(i, j) - ref - mu);
      out[j] = s / static_cast<double>(r);
    }
    nd.value = std::move(out);
  } else {
    throw ShapeError("variance_over_axis: unsupported rank " + shape_string(A.shape()));
  }
  return push(std::move(nd));
}

inline Var Graph::index_rows(Var a, std::span<const std::size_t> rows) {
  const Tensor& A = node(a).value;
  if (A.rank() != 1 && A.rank() != 2) throw ShapeError("index_rows: expected rank 1 or 2, got " + shape_string(A.shape()));
  const std::size_t c = A.rank() == 2 ? A.cols() : 1;
  Shape s = A.shape();
  s[0] = rows.size();
  Tensor out(s);
  for (std::size_t k = 0; k < rows.size(); ++k) {
    if (rows[k] >= A.rows()) {
      throw ShapeError("index_rows: row " + std::to_string(rows[k]) + " out of range for " + shape_string(A.shape()));
    }
    std::copy_n(A.data().begin() + static_cast<std::ptrdiff_t>(rows[k] * c), c,
                out.data().begin() + static_cast<std::ptrdiff_t>(k * c));
  }
  Node nd;
  nd.op = OpKind::kIndexRows;
  nd.inputs = {a.id};
  nd.indices.assign(rows.begin(), rows.end());
  nd.value = std::move(out);
  return push(std::move(nd));
}

inline Var Graph::stack(std::span<const Var> scalars) {
  Tensor out(Shape{scalars.size()});
  Node nd;
  nd.op = OpKind::kStack;
  for (std::size_t k = 0; k < scalars.size(); ++k) {
    const Tensor& v = node(scalars[k]).value;
    if (v.size() != 1) throw ShapeError("stack: element " + std::to_string(k) + " has shape " + shape_string(v.shape()));
    out[k] = v[0];
    nd.inputs.push_back(scalars[k].id);
  }
  nd.value = std::move(out);
  return push(std::move(nd));
}

// ---------------------------------------------------------------------------
// backward

inline void Graph::backward(Var root) {
  const Node& r = node(root);
  if (r.value.size() != 1) throw ShapeError("backward: root must be scalar, got " + shape_string(r.value.shape()));
  for (std::size_t i = 0; i <= root.id; ++i) {
    Node& nd = nodes_[i];
    nd.grad = nd.requires_grad ? Tensor(nd.value.shape()) : Tensor();
  }
  if (!r.requires_grad) return;
  nodes_[root.id].grad[0] = 1.0;
  for (std::size_t i = root.id + 1; i-- > 0;) {
    if (nodes_[i].requires_grad && nodes_[i].op != OpKind::kLeaf) backprop_node(i);
  }
}

inline void Graph::backprop_node(std::size_t id) {
  Node& nd = nodes_[id];
  const Tensor& g = nd.grad;
  auto wants = [&](std::size_t k) { return nodes_[nd.inputs[k]].requires_grad; };
  auto in_val = [&](std::size_t k) -> const Tensor& { return nodes_[nd.inputs[k]].value; };
  auto in_grad = [&](std::size_t k) -> Tensor& { return nodes_[nd.inputs[k]].grad; };

  switch (nd.op) {
    case OpKind::kLeaf:
      break;
    case OpKind::kMatmul: {
      const Tensor& A = in_val(0);
      const Tensor& B = in_val(1);
      const std::size_t n = A.rows(), m = A.cols(), p = B.cols();
      if (wants(0)) {
        Tensor& dA = in_grad(0);
        for (std::size_t i = 0; i < n; ++i)
          for (std::size_t k = 0; k < m; ++k) {
            double s = 0.0;
            for (std::size_t j = 0; j < p; ++j) s += g[i * p + j] * B[k * p + j];
            dA[i * m + k] += s;
          }
      }
      if (wants(1)) {
        Tensor& dB = in_grad(1);
        for (std::size_t i = 0; i < n; ++i)
          for (std::size_t k = 0; k < m; ++k) {
            const double aik = A[i * m + k];
            if (aik == 0.0) continue;
            for (std::size_t j = 0; j < p; ++j) dB[k * p + j] += aik * g[i * p + j];
          }
      }
      break;
    }
    case OpKind::kAdd:
    case OpKind::kSub:
    case OpKind::kMul: {
      const Tensor& A = in_val(0);
      const Tensor& B = in_val(1);
      const std::size_t cols = nd.bcast == Broadcast::kRow ? A.cols() : 1;
      auto bidx = [&](std::size_t i) {
        return nd.bcast == Broadcast::kSame ? i : (nd.bcast == Broadcast::kScalar ? 0 : i % cols);
      };
      const bool ga = wants(0), gb = wants(1);
      for (std::size_t i = 0; i < A.size(); ++i) {
        const std::size_t j = bidx(i);
        if (nd.op == OpKind::kMul) {
          if (ga) in_grad(0)[i] += g[i] * B[j];
          if (gb) in_grad(1)[j] += g[i] * A[i];
        } else {
          if (ga) in_grad(0)[i] += g[i];
          if (gb) in_grad(1)[j] += nd.op == OpKind::kAdd ? g[i] : -g[i];
        }
      }
      break;
    }
    case OpKind::kScale: {
      Tensor& dA = in_grad(0);
      for (std::size_t i = 0; i < g.size(); ++i) dA[i] += nd.p0 * g[i];
      break;
    }
    case OpKind::kAddScalar: {
      Tensor& dA = in_grad(0);
      for (std::size_t i = 0; i < g.size(); ++i) dA[i] += g[i];
      break;
    }
    case OpKind::kRelu: {
      const Tensor& A = in_val(0);
      Tensor& dA = in_grad(0);
      for (std::size_t i = 0; i < g.size(); ++i)
        if (A[i] > 0.0) dA[i] += g[i];
      break;
    }
    case OpKind::kExp: {
      Tensor& dA = in_grad(0);
      for (std::size_t i = 0; i < g.size(); ++i) dA[i] += g[i] * nd.value[i];
      break;
    }
    case OpKind::kLog: {
      const Tensor& A = in_val(0);
      Tensor& dA = in_grad(0);
      for (std::size_t i = 0; i < g.size(); ++i) dA[i] += g[i] / A[i];
      break;
    }
    case OpKind::kSquare: {
      const Tensor& A = in_val(0);
      Tensor& dA = in_grad(0);
      for (std::size_t i = 0; i < g.size(); ++i) dA[i] += 2.0 * A[i] * g[i];
      break;
    }
    case OpKind::kClamp: {
      const Tensor& A = in_val(0);
      Tensor& dA = in_grad(0);
      for (std::size_t i = 0; i < g.size(); ++i)
        if (A[i] >= nd.p0 && A[i] <= nd.p1) dA[i] += g[i];
      break;
    }
    case OpKind::kSum:
    case OpKind::kMean: {
      Tensor& dA = in_grad(0);
      const double s = nd.op == OpKind::kSum ? g[0] : g[0] / static_cast<double>(dA.size());
      for (double& v : dA.data()) v += s;
      break;
    }
    case OpKind::kSumRows: {
      Tensor& dA = in_grad(0);
      const std::size_t c = dA.cols();
      for (std::size_t i = 0; i < dA.rows(); ++i)
        for (std::size_t j = 0; j < c; ++j) dA[i * c + j] += g[i];
      break;
    }
    case OpKind::kSoftmax: {
      const Tensor& Y = nd.value;
      Tensor& dA = in_grad(0);
      const std::size_t c = Y.cols();
      for (std::size_t i = 0; i < Y.rows(); ++i) {
        double dot = 0.0;
        for (std::size_t j = 0; j < c; ++j) dot += g[i * c + j] * Y[i * c + j];
        for (std::size_t j = 0; j < c; ++j) dA[i * c + j] += Y[i * c + j] * (g[i * c + j] - dot);
      }
      break;
    }
    case OpKind::kSoftmaxCrossEntropy: {
      const Tensor& P = nd.saved;
      Tensor& dA = in_grad(0);
      const std::size_t c = P.cols();
      for (std::size_t i = 0; i < P.rows(); ++i) {
        for (std::size_t j = 0; j < c; ++j) dA[i * c + j] += g[i] * P[i * c + j];
        dA[i * c + static_cast<std::size_t>(nd.labels[i])] -= g[i];
      }
      break;
    }
    case OpKind::kVariance: {
      const Tensor& A = in_val(0);
      Tensor& dA = in_grad(0);
      if (A.rank() <= 1) {
        const double n = static_cast<double>(A.size());
        const double ref = A[0];
        double mu = 0.0;
        for (double v : A.data()) mu += v - ref;
        mu /= n;
        for (std::size_t i = 0; i < A.size(); ++i) dA[i] += g[0] * 2.0 * (A[i] - ref - mu) / n;
      } else {
        const std::size_t r = A.rows(), c = A.cols();
        for (std::size_t j = 0; j < c; ++j) {
          const double ref = A(0, j);
          double mu = 0.0;
          for (std::size_t i = 0; i < r; ++i) mu += A(i, j) - ref;
          mu /= static_cast<double>(r);
          for (std::size_t i = 0; i < r; ++i) dA(i, j) += g[j] * 2.0 * (A(i, j) - ref - mu) / static_cast<double>(r);
        }
      }
      break;
    }
    case OpKind::kIndexRows: {
      Tensor& dA = in_grad(0);
      const std::size_t c = dA.rank() == 2 ? dA.cols() : 1;
      for (std::size_t k = 0; k < nd.indices.size(); ++k)
        for (std::size_t j = 0; j < c; ++j) dA[nd.indices[k] * c + j] += g[k * c + j];
      break;
    }
    case OpKind::kStack: {
      for (std::size_t k = 0; k < nd.inputs.size(); ++k)
        if (wants(k)) in_grad(k)[0] += g[k];
      break;
    }
  }
}

// ---------------------------------------------------------------------------
// free-function op surface

inline Var matmul(Var a, Var b) { return a.graph->matmul(a, b); }
inline Var add(Var a, Var b) { return a.graph->binary(OpKind::kAdd, a, b); }
inline Var sub(Var a, Var b) { return a.graph->binary(OpKind::kSub, a, b); }
inline Var mul(Var a, Var b) { return a.graph->binary(OpKind::kMul, a, b); }
inline Var scale(Var a, double c) { return a.graph->scale(a, c); }
inline Var add_scalar(Var a, double c) { return a.graph->add_scalar(a, c); }
inline Var relu(Var a) { return a.graph->unary(OpKind::kRelu, a); }
inline Var exp(Var a) { return a.graph->unary(OpKind::kExp, a); }
inline Var log(Var a) { return a.graph->unary(OpKind::kLog, a); }
inline Var square(Var a) { return a.graph->unary(OpKind::kSquare, a); }
inline Var clamp(Var a, double lo, double hi) { return a.graph->clamp(a, lo, hi); }
inline Var sum(Var a) { return a.graph->sum(a); }
inline Var mean(Var a) { return a.graph->mean(a); }
inline Var sum_rows(Var a) { return a.graph->sum_rows(a); }
inline Var softmax(Var a) { return a.graph->softmax(a); }
/// Per-row cross-entropy of softmax(logits) against integer labels; shape (n).
inline Var softmax_cross_entropy(Var logits, std::span<const int> labels) {
  return logits.graph->softmax_cross_entropy(logits, labels);
}
/// Population variance: rank-1 input gives a scalar, a matrix gives per-column variances.
inline Var variance_over_axis(Var a) { return a.graph->variance(a); }
inline Var index_rows(Var a, std::span<const std::size_t> rows) { return a.graph->index_rows(a, rows); }
inline Var stack(std::span<const Var> scalars) {
  if (scalars.empty()) throw ShapeError("stack: no inputs");
  return scalars.front().graph->stack(scalars);
}

inline Var operator+(Var a, Var b) { return add(a, b); }
inline Var operator-(Var a, Var b) { return sub(a, b); }
inline Var operator*(Var a, Var b) { return mul(a, b); }
inline Var operator*(double c, Var a) { return scale(a, c); }

// ---------------------------------------------------------------------------
// finite-difference checking

using MultiScalarFn = std::function<Var(Graph&, std::span<const Var>)>;
using ScalarFn = std::function<Var(Graph&, Var)>;

/// Max over all coordinates of |analytic - central difference| / max(1, |analytic|).
inline double grad_check(const MultiScalarFn& f, std::vector<Tensor> inputs, double h) {
  if (!(h > 0.0)) throw DomainError("grad_check: step must be positive");
  auto evaluate = [&](bool keep, Graph& g, std::vector<Var>& vars) {
    vars.clear();
    for (const Tensor& t : inputs) vars.push_back(keep ? g.variable(t) : g.constant(t));
    Var out = f(g, vars);
    if (out.value().size() != 1) {
      throw ShapeError("grad_check: function output has shape " + shape_string(out.value().shape()) + ", expected scalar");
    }
    return out;
  };

  Graph g;
  std::vector<Var> vars;
  Var root = evaluate(true, g, vars);
  g.backward(root);
  std::vector<Tensor> analytic;
  for (Var v : vars) analytic.push_back(g.grad(v));

  double worst = 0.0;
  for (std::size_t t = 0; t < inputs.size(); ++t) {
    for (std::size_t i = 0; i < inputs[t].size(); ++i) {
      const double x0 = inputs[t][i];
      inputs[t][i] = x0 + h;
      double fp, fm;
      {
        Graph gp;
        std::vector<Var> vp;
        fp = evaluate(false, gp, vp).value()[0];
      }
      inputs[t][i] = x0 - h;
      {
        Graph gm;
        std::vector<Var> vm;
        fm = evaluate(false, gm, vm).value()[0];
      }
      inputs[t][i] = x0;
      const double numeric = (fp - fm) / (2.0 * h);
      const double a = analytic[t][i];
      worst = std::max(worst, std::abs(a - numeric) / std::max(1.0, std::abs(a)));
    }
  }
  return worst;
}

inline double grad_check(const ScalarFn& f, const Tensor& x, double h) {
  return grad_check([&](Graph& g, std::span<const Var> v) { return f(g, v[0]); }, std::vector<Tensor>{x}, h);
}

}  // namespace covsda
