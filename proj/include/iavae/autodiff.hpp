#pragma once

// Minimal reverse-mode automatic differentiation over dense double tensors.
//
// Every differentiable operation exists twice: an eager overload on Tensor
// and a recording overload on Var. The recording overload computes its
// forward value by calling the eager one, so a model written as a template
// over the value type produces bit-identical numbers on both paths.

#include <array>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <initializer_list>
#include <span>
#include <string>
#include <vector>

namespace iavae::ad {

class Shape {
 public:
  static constexpr std::size_t kMaxRank = 4;

  Shape() = default;  // rank 0: a scalar
  Shape(std::initializer_list<std::size_t> dims);
  explicit Shape(std::span<const std::size_t> dims);

  std::size_t rank() const { return rank_; }
  std::size_t operator[](std::size_t axis) const { return dims_[axis]; }
  std::size_t numel() const;
  std::vector<std::size_t> dims() const { return {dims_.begin(), dims_.begin() + rank_}; }
  std::string to_string() const;

  friend bool operator==(const Shape& a, const Shape& b);

 private:
  std::array<std::size_t, kMaxRank> dims_{};
  std::size_t rank_ = 0;
};

class Tensor {
 public:
  Tensor() : data_(1, 0.0) {}
  explicit Tensor(Shape shape, double fill = 0.0);
  Tensor(Shape shape, std::vector<double> data);

  static Tensor scalar(double v) { return Tensor(Shape{}, std::vector<double>{v}); }
  static Tensor vector(std::vector<double> v);
  static Tensor matrix(std::size_t rows, std::size_t cols, std::vector<double> v);

  const Shape& shape() const { return shape_; }
  std::size_t size() const { return data_.size(); }
  std::span<double> data() { return data_; }
  std::span<const double> data() const { return data_; }
  const std::vector<double>& values() const { return data_; }

  double& operator[](std::size_t i) { return data_[i]; }
  double operator[](std::size_t i) const { return data_[i]; }
  double at(std::size_t row, std::size_t col) const { return data_[row * shape_[1] + col]; }
  double& at(std::size_t row, std::size_t col) { return data_[row * shape_[1] + col]; }
  // Value of a single-element tensor.
  double item() const;

  bool all_finite() const;
  bool is_scalar() const { return data_.size() == 1; }

 private:
  Shape shape_;
  std::vector<double> data_;
};

// Eager operations.
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor matvec(const Tensor& m, const Tensor& v);
Tensor concat(std::span<const Tensor> parts);
Tensor concat(std::initializer_list<Tensor> parts);
Tensor relu(const Tensor& a);
Tensor exp(const Tensor& a);
Tensor log(const Tensor& a);
Tensor square(const Tensor& a);
Tensor sum(const Tensor& a);
Tensor mean(const Tensor& a);
Tensor scale(const Tensor& a, double factor);
Tensor add_scalar(const Tensor& a, double offset);
// First `length` elements of the row-major flattening starting at `offset`.
Tensor slice(const Tensor& a, std::size_t offset, std::size_t length);
Tensor reshape(const Tensor& a, Shape shape);
Tensor transpose(const Tensor& m);

enum class Op : std::uint8_t {
  kLeaf,
  kAdd,
  kSub,
  kMul,
  kMatVec,
  kConcat,
  kRelu,
  kExp,
  kLog,
  kSquare,
  kSum,
  kMean,
  kScale,
  kAddScalar,
  kSlice,
  kReshape,
  kTranspose,
};

const char* op_name(Op op);

class Graph;

// Handle to a node of a Graph. Cheap to copy; valid while the graph lives.
class Var {
 public:
  Var() = default;

  Graph& graph() const { return *graph_; }
  std::uint32_t id() const { return id_; }
  const Tensor& value() const;
  Tensor grad() const;
  const Shape& shape() const { return value().shape(); }

 private:
  friend class Graph;
  Var(Graph* graph, std::uint32_t id) : graph_(graph), id_(id) {}

  Graph* graph_ = nullptr;
  std::uint32_t id_ = 0;
};

// Define-by-run tape. Nodes are appended in evaluation order, which is a
// topological order, so the reverse pass is a single backwards sweep.
class Graph {
 public:
  Graph() = default;
  Graph(const Graph&) = delete;
  Graph& operator=(const Graph&) = delete;

  // A differentiable input.
  Var leaf(Tensor value);
  // An input that receives no gradient.
  Var constant(Tensor value);

  // Zeroes every accumulator, then propagates d(loss)/d(node) to every node
  // that depends on a leaf.
  void backward(Var loss);

  const Tensor& value(Var v) const { return nodes_[v.id()].value; }
  // Zero tensor for nodes the last backward pass did not reach.
  Tensor grad(Var v) const;
  Op op(Var v) const { return nodes_[v.id()].op; }
  bool requires_grad(Var v) const { return nodes_[v.id()].needs_grad; }
  std::size_t size() const { return nodes_.size(); }

  // Used by the recording operations; not meant for direct use.
  Var record(Op op, Tensor value, std::initializer_list<Var> parents, double scalar = 0.0,
             std::size_t offset = 0);
  Var record(Op op, Tensor value, std::span<const Var> parents, double scalar = 0.0,
             std::size_t offset = 0);

 private:
  struct Node {
    Tensor value;
    std::vector<double> grad;
    Op op = Op::kLeaf;
    bool needs_grad = false;
    bool has_grad = false;
    std::uint32_t parent_begin = 0;
    std::uint32_t parent_count = 0;
    double scalar = 0.0;
    std::size_t offset = 0;
  };

  Var push(Node node);
  void accumulate(std::uint32_t id, std::span<const double> delta);
  void propagate(const Node& node);
  std::span<const std::uint32_t> parents_of(const Node& node) const {
    return {parents_.data() + node.parent_begin, node.parent_count};
  }

  std::vector<Node> nodes_;
  std::vector<std::uint32_t> parents_;
};

// Recording operations.
Var add(Var a, Var b);
Var sub(Var a, Var b);
Var mul(Var a, Var b);
Var matvec(Var m, Var v);
Var concat(std::span<const Var> parts);
Var concat(std::initializer_list<Var> parts);
Var relu(Var a);
Var exp(Var a);
Var log(Var a);
Var square(Var a);
Var sum(Var a);
Var mean(Var a);
Var scale(Var a, double factor);
Var add_scalar(Var a, double offset);
Var slice(Var a, std::size_t offset, std::size_t length);
Var reshape(Var a, Shape shape);
Var transpose(Var m);

// Central-difference gradient of `f` at `params`, one coordinate at a time.
using ScalarFunction = std::function<double(std::span<const Tensor>)>;
std::vector<Tensor> finite_diff_grad(const ScalarFunction& f, std::vector<Tensor> params,
                                     double step);

}  // namespace iavae::ad
