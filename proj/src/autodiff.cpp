#include "iavae/autodiff.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>
#include <stdexcept>

namespace iavae::ad {

namespace {

[[noreturn]] void shape_error(const char* op, const Shape& a, const Shape& b) {
  throw std::invalid_argument(std::string(op) + ": shape mismatch " + a.to_string() + " vs " +
                              b.to_string());
}

void require_same(const char* op, const Tensor& a, const Tensor& b) {
  if (!(a.shape() == b.shape())) shape_error(op, a.shape(), b.shape());
}

template <typename F>
Tensor map(const Tensor& a, F f) {
  Tensor out(a.shape());
  for (std::size_t i = 0; i < a.size(); ++i) out[i] = f(a[i]);
  return out;
}

template <typename F>
Tensor zip(const char* op, const Tensor& a, const Tensor& b, F f) {
  require_same(op, a, b);
  Tensor out(a.shape());
  for (std::size_t i = 0; i < a.size(); ++i) out[i] = f(a[i], b[i]);
  return out;
}

}  // namespace

Shape::Shape(std::initializer_list<std::size_t> dims)
    : Shape(std::span<const std::size_t>(dims.begin(), dims.size())) {}

Shape::Shape(std::span<const std::size_t> dims) {
  if (dims.size() > kMaxRank) throw std::invalid_argument("Shape: rank above 4");
  std::copy(dims.begin(), dims.end(), dims_.begin());
  rank_ = dims.size();
}

std::size_t Shape::numel() const {
  std::size_t n = 1;
  for (std::size_t i = 0; i < rank_; ++i) n *= dims_[i];
  return n;
}

std::string Shape::to_string() const {
  std::ostringstream out;
  out << '[';
  for (std::size_t i = 0; i < rank_; ++i) out << (i ? "," : "") << dims_[i];
  out << ']';
  return out.str();
}

bool operator==(const Shape& a, const Shape& b) {
  if (a.rank_ != b.rank_) return false;
  for (std::size_t i = 0; i < a.rank_; ++i)
    if (a.dims_[i] != b.dims_[i]) return false;
  return true;
}

Tensor::Tensor(Shape shape, double fill) : shape_(shape), data_(shape.numel(), fill) {}

Tensor::Tensor(Shape shape, std::vector<double> data) : shape_(shape), data_(std::move(data)) {
  if (shape_.numel() != data_.size()) {
    throw std::invalid_argument("Tensor: shape " + shape_.to_string() + " holds " +
                                std::to_string(shape_.numel()) + " values, got " +
                                std::to_string(data_.size()));
  }
}

Tensor Tensor::vector(std::vector<double> v) {
  const std::size_t n = v.size();
  return Tensor(Shape{n}, std::move(v));
}

Tensor Tensor::matrix(std::size_t rows, std::size_t cols, std::vector<double> v) {
  return Tensor(Shape{rows, cols}, std::move(v));
}

double Tensor::item() const {
  if (data_.size() != 1) throw std::invalid_argument("item: tensor " + shape_.to_string());
  return data_[0];
}

bool Tensor::all_finite() const {
  return std::all_of(data_.begin(), data_.end(), [](double v) { return std::isfinite(v); });
}

Tensor add(const Tensor& a, const Tensor& b) {
  return zip("add", a, b, [](double x, double y) { return x + y; });
}

Tensor sub(const Tensor& a, const Tensor& b) {
  return zip("sub", a, b, [](double x, double y) { return x - y; });
}

Tensor mul(const Tensor& a, const Tensor& b) {
  return zip("mul", a, b, [](double x, double y) { return x * y; });
}

Tensor matvec(const Tensor& m, const Tensor& v) {
  if (m.shape().rank() != 2 || v.shape().rank() != 1 || m.shape()[1] != v.size())
    shape_error("matvec", m.shape(), v.shape());
  const std::size_t rows = m.shape()[0];
  const std::size_t cols = m.shape()[1];
  Tensor out(Shape{rows});
  for (std::size_t i = 0; i < rows; ++i) {
    double acc = 0.0;
    for (std::size_t j = 0; j < cols; ++j) acc += m[i * cols + j] * v[j];
    out[i] = acc;
  }
  return out;
}

Tensor concat(std::span<const Tensor> parts) {
  std::vector<double> data;
  for (const Tensor& p : parts) {
    if (p.shape().rank() > 1) shape_error("concat", p.shape(), Shape{p.size()});
    data.insert(data.end(), p.data().begin(), p.data().end());
  }
  return Tensor::vector(std::move(data));
}

Tensor concat(std::initializer_list<Tensor> parts) {
  return concat(std::span<const Tensor>(parts.begin(), parts.size()));
}

Tensor relu(const Tensor& a) {
  return map(a, [](double x) { return x > 0.0 ? x : 0.0; });
}

Tensor exp(const Tensor& a) {
  return map(a, [](double x) { return std::exp(x); });
}

Tensor log(const Tensor& a) {
  return map(a, [](double x) {
    if (!(x > 0.0)) throw std::domain_error("log: non-positive argument " + std::to_string(x));
    return std::log(x);
  });
}

Tensor square(const Tensor& a) {
  return map(a, [](double x) { return x * x; });
}

Tensor sum(const Tensor& a) {
  double acc = 0.0;
  for (double x : a.data()) acc += x;
  return Tensor::scalar(acc);
}

Tensor mean(const Tensor& a) {
  return Tensor::scalar(sum(a).item() / static_cast<double>(a.size()));
}

Tensor scale(const Tensor& a, double factor) {
  return map(a, [factor](double x) { return x * factor; });
}

Tensor add_scalar(const Tensor& a, double offset) {
  return map(a, [offset](double x) { return x + offset; });
}

Tensor slice(const Tensor& a, std::size_t offset, std::size_t length) {
  if (offset + length > a.size()) {
    throw std::invalid_argument("slice: range [" + std::to_string(offset) + ", " +
                                std::to_string(offset + length) + ") outside " +
                                a.shape().to_string());
  }
  const auto first = a.values().begin() + static_cast<std::ptrdiff_t>(offset);
  return Tensor::vector(std::vector<double>(first, first + static_cast<std::ptrdiff_t>(length)));
}

Tensor reshape(const Tensor& a, Shape shape) {
  if (shape.numel() != a.size()) shape_error("reshape", a.shape(), shape);
  return Tensor(shape, a.values());
}

Tensor transpose(const Tensor& m) {
  if (m.shape().rank() != 2) shape_error("transpose", m.shape(), Shape{0, 0});
  const std::size_t rows = m.shape()[0];
  const std::size_t cols = m.shape()[1];
  Tensor out(Shape{cols, rows});
  for (std::size_t i = 0; i < rows; ++i)
    for (std::size_t j = 0; j < cols; ++j) out[j * rows + i] = m[i * cols + j];
  return out;
}

const char* op_name(Op op) {
  switch (op) {
    case Op::kLeaf: return "leaf";
    case Op::kAdd: return "add";
    case Op::kSub: return "sub";
    case Op::kMul: return "mul";
    case Op::kMatVec: return "matvec";
    case Op::kConcat: return "concat";
    case Op::kRelu: return "relu";
    case Op::kExp: return "exp";
    case Op::kLog: return "log";
    case Op::kSquare: return "square";
    case Op::kSum: return "sum";
    case Op::kMean: return "mean";
    case Op::kScale: return "scale";
    case Op::kAddScalar: return "add_scalar";
    case Op::kSlice: return "slice";
    case Op::kReshape: return "reshape";
    case Op::kTranspose: return "transpose";
  }
  return "?";
}

const Tensor& Var::value() const { return graph_->value(*this); }
Tensor Var::grad() const { return graph_->grad(*this); }

Var Graph::push(Node node) {
  nodes_.push_back(std::move(node));
  return Var(this, static_cast<std::uint32_t>(nodes_.size() - 1));
}

Var Graph::leaf(Tensor value) {
  Node node;
  node.value = std::move(value);
  node.needs_grad = true;
  return push(std::move(node));
}

Var Graph::constant(Tensor value) {
  Node node;
  node.value = std::move(value);
  return push(std::move(node));
}

Var Graph::record(Op op, Tensor value, std::initializer_list<Var> parents, double scalar,
                  std::size_t offset) {
  return record(op, std::move(value), std::span<const Var>(parents.begin(), parents.size()),
                scalar, offset);
}

Var Graph::record(Op op, Tensor value, std::span<const Var> parents, double scalar,
                  std::size_t offset) {
  Node node;
  node.value = std::move(value);
  node.op = op;
  node.scalar = scalar;
  node.offset = offset;
  node.parent_begin = static_cast<std::uint32_t>(parents_.size());
  node.parent_count = static_cast<std::uint32_t>(parents.size());
  for (Var p : parents) {
    if (&p.graph() != this) throw std::invalid_argument(std::string(op_name(op)) + ": operands from different graphs");
    parents_.push_back(p.id());
    node.needs_grad = node.needs_grad || nodes_[p.id()].needs_grad;
  }
  return push(std::move(node));
}

Tensor Graph::grad(Var v) const {
  const Node& node = nodes_[v.id()];
  if (node.has_grad) return Tensor(node.value.shape(), node.grad);
  return Tensor(node.value.shape());
}

void Graph::accumulate(std::uint32_t id, std::span<const double> delta) {
  Node& node = nodes_[id];
  if (!node.needs_grad) return;
  if (!node.has_grad) {
    node.grad.assign(node.value.size(), 0.0);
    node.has_grad = true;
  }
  for (std::size_t i = 0; i < delta.size(); ++i) node.grad[i] += delta[i];
}

void Graph::backward(Var loss) {
  if (&loss.graph() != this) throw std::invalid_argument("backward: loss from another graph");
  const Node& root = nodes_[loss.id()];
  if (root.value.size() != 1)
    throw std::invalid_argument("backward: loss must be a scalar, got " + root.value.shape().to_string());
  for (Node& node : nodes_) node.has_grad = false;
  const double one = 1.0;
  accumulate(loss.id(), std::span<const double>(&one, 1));
  for (std::size_t i = loss.id() + 1; i-- > 0;) {
    const Node& node = nodes_[i];
    if (node.has_grad && node.op != Op::kLeaf) propagate(node);
  }
}

void Graph::propagate(const Node& node) {
  const auto parents = parents_of(node);
  const std::vector<double>& g = node.grad;
  const std::size_t n = g.size();
  std::vector<double> delta;

  auto unary = [&](auto rule) {
    const Node& a = nodes_[parents[0]];
    if (!a.needs_grad) return;
    delta.assign(a.value.size(), 0.0);
    for (std::size_t i = 0; i < a.value.size(); ++i) delta[i] = rule(i, a.value[i]);
    accumulate(parents[0], delta);
  };

  switch (node.op) {
    case Op::kLeaf:
      break;
    case Op::kAdd:
    case Op::kSub: {
      accumulate(parents[0], g);
      if (node.op == Op::kAdd) {
        accumulate(parents[1], g);
      } else {
        delta.resize(n);
        for (std::size_t i = 0; i < n; ++i) delta[i] = -g[i];
        accumulate(parents[1], delta);
      }
      break;
    }
    case Op::kMul: {
      const Tensor& a = nodes_[parents[0]].value;
      const Tensor& b = nodes_[parents[1]].value;
      delta.resize(n);
      for (std::size_t i = 0; i < n; ++i) delta[i] = g[i] * b[i];
      accumulate(parents[0], delta);
      for (std::size_t i = 0; i < n; ++i) delta[i] = g[i] * a[i];
      accumulate(parents[1], delta);
      break;
    }
    case Op::kMatVec: {
      const Tensor& m = nodes_[parents[0]].value;
      const Tensor& v = nodes_[parents[1]].value;
      const std::size_t rows = m.shape()[0];
      const std::size_t cols = m.shape()[1];
      if (nodes_[parents[0]].needs_grad) {
        delta.assign(rows * cols, 0.0);
        for (std::size_t i = 0; i < rows; ++i)
          for (std::size_t j = 0; j < cols; ++j) delta[i * cols + j] = g[i] * v[j];
        accumulate(parents[0], delta);
      }
      if (nodes_[parents[1]].needs_grad) {
        delta.assign(cols, 0.0);
        for (std::size_t i = 0; i < rows; ++i)
          for (std::size_t j = 0; j < cols; ++j) delta[j] += m[i * cols + j] * g[i];
        accumulate(parents[1], delta);
      }
      break;
    }
    case Op::kConcat: {
      std::size_t at = 0;
      for (std::uint32_t p : parents) {
        const std::size_t len = nodes_[p].value.size();
        accumulate(p, std::span<const double>(g).subspan(at, len));
        at += len;
      }
      break;
    }
    case Op::kRelu:
      unary([&](std::size_t i, double x) { return x > 0.0 ? g[i] : 0.0; });
      break;
    case Op::kExp:
      unary([&](std::size_t i, double) { return g[i] * node.value[i]; });
      break;
    case Op::kLog:
      unary([&](std::size_t i, double x) { return g[i] / x; });
      break;
    case Op::kSquare:
      unary([&](std::size_t i, double x) { return 2.0 * x * g[i]; });
      break;
    case Op::kSum:
      unary([&](std::size_t, double) { return g[0]; });
      break;
    case Op::kMean: {
      const double count = static_cast<double>(nodes_[parents[0]].value.size());
      unary([&](std::size_t, double) { return g[0] / count; });
      break;
    }
    case Op::kScale:
      unary([&](std::size_t i, double) { return g[i] * node.scalar; });
      break;
    case Op::kAddScalar:
    case Op::kReshape:
      accumulate(parents[0], g);
      break;
    case Op::kSlice: {
      const Node& a = nodes_[parents[0]];
      if (!a.needs_grad) break;
      delta.assign(a.value.size(), 0.0);
      for (std::size_t i = 0; i < n; ++i) delta[node.offset + i] = g[i];
      accumulate(parents[0], delta);
      break;
    }
    case Op::kTranspose: {
      // node is cols x rows of a rows x cols parent.
      const std::size_t rows = node.value.shape()[1];
      const std::size_t cols = node.value.shape()[0];
      delta.assign(n, 0.0);
      for (std::size_t i = 0; i < rows; ++i)
        for (std::size_t j = 0; j < cols; ++j) delta[i * cols + j] = g[j * rows + i];
      accumulate(parents[0], delta);
      break;
    }
  }
}

namespace {

void require_same_graph(const char* op, Var a, Var b) {
  if (&a.graph() != &b.graph())
    throw std::invalid_argument(std::string(op) + ": operands from different graphs");
}

}  // namespace

Var add(Var a, Var b) {
  require_same_graph("add", a, b);
  return a.graph().record(Op::kAdd, add(a.value(), b.value()), {a, b});
}

Var sub(Var a, Var b) {
  require_same_graph("sub", a, b);
  return a.graph().record(Op::kSub, sub(a.value(), b.value()), {a, b});
}

Var mul(Var a, Var b) {
  require_same_graph("mul", a, b);
  return a.graph().record(Op::kMul, mul(a.value(), b.value()), {a, b});
}

Var matvec(Var m, Var v) {
  require_same_graph("matvec", m, v);
  return m.graph().record(Op::kMatVec, matvec(m.value(), v.value()), {m, v});
}

Var concat(std::span<const Var> parts) {
  if (parts.empty()) throw std::invalid_argument("concat: no operands");
  std::vector<Tensor> values;
  values.reserve(parts.size());
  for (Var p : parts) values.push_back(p.value());
  return parts.front().graph().record(Op::kConcat, concat(values), parts);
}

Var concat(std::initializer_list<Var> parts) {
  return concat(std::span<const Var>(parts.begin(), parts.size()));
}

Var relu(Var a) { return a.graph().record(Op::kRelu, relu(a.value()), {a}); }
Var exp(Var a) { return a.graph().record(Op::kExp, exp(a.value()), {a}); }
Var log(Var a) { return a.graph().record(Op::kLog, log(a.value()), {a}); }
Var square(Var a) { return a.graph().record(Op::kSquare, square(a.value()), {a}); }
Var sum(Var a) { return a.graph().record(Op::kSum, sum(a.value()), {a}); }
Var mean(Var a) { return a.graph().record(Op::kMean, mean(a.value()), {a}); }

Var scale(Var a, double factor) {
  return a.graph().record(Op::kScale, scale(a.value(), factor), {a}, factor);
}

Var add_scalar(Var a, double offset) {
  return a.graph().record(Op::kAddScalar, add_scalar(a.value(), offset), {a}, offset);
}

Var slice(Var a, std::size_t offset, std::size_t length) {
  return a.graph().record(Op::kSlice, slice(a.value(), offset, length), {a}, 0.0, offset);
}

Var reshape(Var a, Shape shape) {
  return a.graph().record(Op::kReshape, reshape(a.value(), shape), {a});
}

Var transpose(Var m) { return m.graph().record(Op::kTranspose, transpose(m.value()), {m}); }

std::vector<Tensor> finite_diff_grad(const ScalarFunction& f, std::vector<Tensor> params,
                                     double step) {
  if (!(step > 0.0)) throw std::invalid_argument("finite_diff_grad: step must be positive");
  std::vector<Tensor> grads;
  grads.reserve(params.size());
  for (std::size_t p = 0; p < params.size(); ++p) {
    Tensor g(params[p].shape());
    for (std::size_t i = 0; i < params[p].size(); ++i) {
      const double saved = params[p][i];
      params[p][i] = saved + step;
      const double up = f(params);
      params[p][i] = saved - step;
      const double down = f(params);
      params[p][i] = saved;
      g[i] = (up - down) / (2.0 * step);
    }
    grads.push_back(std::move(g));
  }
  return grads;
}

}  // namespace iavae::ad
