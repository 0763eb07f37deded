#pragma once

// Dense 64-bit tensors with a define-by-run reverse-mode tape.
//
// Every op result keeps shared handles to its inputs together with a closure
// that maps the output gradient onto input gradients. Nodes carry a global
// creation sequence number; since inputs always exist before the op that
// consumes them, sorting reachable nodes by descending sequence number gives
// a valid reverse topological order.

#include <algorithm>
#include <atomic>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <memory>
#include <numeric>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

namespace glstm {

using Shape = std::vector<std::size_t>;

inline std::size_t shape_size(const Shape& s) {
  return std::accumulate(s.begin(), s.end(), std::size_t{1}, std::multiplies<>());
}

inline std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < s.size(); ++i) os << (i ? "," : "") << s[i];
  os << ']';
  return os.str();
}

class ShapeError : public std::invalid_argument {
 public:
  ShapeError(const std::string& op, const Shape& a, const Shape& b)
      : std::invalid_argument("op '" + op + "': shape mismatch " + shape_str(a) + " vs " +
                              shape_str(b)),
        op_(op),
        lhs_(a),
        rhs_(b) {}
  ShapeError(const std::string& op, const std::string& what)
      : std::invalid_argument("op '" + op + "': " + what), op_(op) {}

  const std::string& op() const { return op_; }
  const Shape& lhs() const { return lhs_; }
  const Shape& rhs() const { return rhs_; }

 private:
  std::string op_;
  Shape lhs_, rhs_;
};

/// Raised when a value that must be finite is not.
class NumericError : public std::runtime_error {
 public:
  NumericError(const std::string& what, std::size_t coordinate = 0)
      : std::runtime_error(what), coordinate_(coordinate) {}
  std::size_t coordinate() const { return coordinate_; }

 private:
  std::size_t coordinate_;
};

class Tensor;

namespace detail {

struct Node;
using NodePtr = std::shared_ptr<Node>;

/// `self` is the op's output node (its inputs and value are reachable from
/// it). gin[i] is null when input i does not need a gradient.
using BackwardFn =
    std::function<void(const Node& self, const double* gout, std::span<double* const> gin)>;

inline std::uint64_t next_sequence() {
  static std::atomic<std::uint64_t> counter{0};
  return counter.fetch_add(1, std::memory_order_relaxed);
}

struct Node {
  Shape shape;
  std::vector<double> value;
  bool requires_grad = false;
  std::uint64_t seq = next_sequence();
  const char* op = "leaf";
  std::vector<NodePtr> inputs;
  BackwardFn backward;
};

}  // namespace detail

class Tensor {
 public:
  Tensor() = default;

  Tensor(Shape shape, std::vector<double> data, bool requires_grad = false) {
    if (shape_size(shape) != data.size()) {
      throw ShapeError("tensor", "shape " + shape_str(shape) + " does not match " +
                                     std::to_string(data.size()) + " values");
    }
    node_ = std::make_shared<detail::Node>();
    node_->shape = std::move(shape);
    node_->value = std::move(data);
    node_->requires_grad = requires_grad;
  }

  static Tensor zeros(Shape shape, bool requires_grad = false) {
    const std::size_t n = shape_size(shape);
    return Tensor(std::move(shape), std::vector<double>(n, 0.0), requires_grad);
  }
  static Tensor filled(Shape shape, double v) {
    const std::size_t n = shape_size(shape);
    return Tensor(std::move(shape), std::vector<double>(n, v));
  }
  static Tensor scalar(double v, bool requires_grad = false) {
    return Tensor({}, {v}, requires_grad);
  }
  static Tensor vector(std::vector<double> v, bool requires_grad = false) {
    const std::size_t n = v.size();
    return Tensor({n}, std::move(v), requires_grad);
  }
  static Tensor matrix(std::size_t rows, std::size_t cols, std::vector<double> v,
                       bool requires_grad = false) {
    return Tensor({rows, cols}, std::move(v), requires_grad);
  }

  bool defined() const { return static_cast<bool>(node_); }
  const Shape& shape() const { return node_->shape; }
  std::size_t rank() const { return node_->shape.size(); }
  std::size_t dim(std::size_t i) const { return node_->shape.at(i); }
  std::size_t size() const { return node_->value.size(); }

  std::span<const double> data() const { return node_->value; }
  /// Direct write access; only meaningful for leaves (parameters, inputs).
  std::span<double> mutable_data() { return node_->value; }
  const std::vector<double>& values() const { return node_->value; }

  double item() const {
    if (size() != 1) throw ShapeError("item", "tensor is not a scalar: " + shape_str(shape()));
    return node_->value[0];
  }
  double operator[](std::size_t i) const { return node_->value[i]; }
  double at(std::size_t i, std::size_t j) const { return node_->value[i * dim(1) + j]; }
  double at(std::size_t i, std::size_t j, std::size_t k) const {
    return node_->value[(i * dim(1) + j) * dim(2) + k];
  }

  bool requires_grad() const { return node_->requires_grad; }
  bool is_leaf() const { return node_->inputs.empty(); }
  const char* op_name() const { return node_->op; }

  Tensor& set_requires_grad(bool on) {
    if (!is_leaf()) throw std::logic_error("set_requires_grad on a non-leaf tensor");
    node_->requires_grad = on;
    return *this;
  }

  /// Fresh leaf holding a copy of the values.
  Tensor detach(bool requires_grad = false) const {
    return Tensor(shape(), node_->value, requires_grad);
  }

  const detail::NodePtr& node() const { return node_; }

 private:
  friend Tensor make_op_result(const char*, Shape, std::vector<double>, std::span<const Tensor>,
                               detail::BackwardFn);
  detail::NodePtr node_;
};

/// Creates an op output. A tape node (inputs + backward closure) is attached
/// only when some input requires gradients.
inline Tensor make_op_result(const char* op, Shape shape, std::vector<double> value,
                             std::span<const Tensor> inputs, detail::BackwardFn backward) {
  Tensor out;
  out.node_ = std::make_shared<detail::Node>();
  out.node_->shape = std::move(shape);
  out.node_->value = std::move(value);
  out.node_->op = op;
  bool any = false;
  for (const auto& t : inputs) any = any || t.requires_grad();
  if (any) {
    out.node_->requires_grad = true;
    out.node_->inputs.reserve(inputs.size());
    for (const auto& t : inputs) out.node_->inputs.push_back(t.node());
    out.node_->backward = std::move(backward);
  }
  return out;
}

inline Tensor make_op_result(const char* op, Shape shape, std::vector<double> value,
                             std::initializer_list<Tensor> inputs, detail::BackwardFn backward) {
  return make_op_result(op, std::move(shape), std::move(value),
                        std::span<const Tensor>(inputs.begin(), inputs.size()),
                        std::move(backward));
}

/// Gradients of leaves that require them, keyed by leaf identity.
class GradientMap {
 public:
  bool contains(const Tensor& leaf) const { return grads_.count(leaf.node().get()) > 0; }

  /// Gradient with the leaf's shape; zeros when the leaf did not influence the root.
  Tensor grad(const Tensor& leaf) const {
    auto it = grads_.find(leaf.node().get());
    if (it == grads_.end()) return Tensor::zeros(leaf.shape());
    return Tensor(leaf.shape(), it->second);
  }

  const std::vector<double>* find(const Tensor& leaf) const {
    auto it = grads_.find(leaf.node().get());
    return it == grads_.end() ? nullptr : &it->second;
  }

  std::size_t size() const { return grads_.size(); }

 private:
  friend GradientMap backpropagate_seeded(const Tensor&, std::span<const double>);
  std::unordered_map<const detail::Node*, std::vector<double>> grads_;
};

/// Vector-Jacobian product of `out` with `seed`, delivered to every leaf
/// requiring gradients. The recorded graph is left intact so several seeds can
/// share one forward pass.
inline GradientMap backpropagate_seeded(const Tensor& out, std::span<const double> seed) {
  if (!out.defined()) throw std::invalid_argument("backpropagate: undefined tensor");
  if (!out.requires_grad()) {
    throw std::invalid_argument("backpropagate: root is detached from any gradient leaf");
  }
  if (seed.size() != out.size()) {
    throw ShapeError("backpropagate", out.shape(), Shape{seed.size()});
  }

  std::vector<detail::Node*> order;
  std::unordered_map<const detail::Node*, std::size_t> index;
  std::vector<detail::Node*> stack{out.node().get()};
  index.emplace(out.node().get(), 0);
  while (!stack.empty()) {
    detail::Node* n = stack.back();
    stack.pop_back();
    order.push_back(n);
    for (const auto& in : n->inputs) {
      if (in->requires_grad && index.emplace(in.get(), 0).second) stack.push_back(in.get());
    }
  }
  std::sort(order.begin(), order.end(),
            [](const detail::Node* a, const detail::Node* b) { return a->seq > b->seq; });
  for (std::size_t i = 0; i < order.size(); ++i) index[order[i]] = i;

  std::vector<std::vector<double>> grads(order.size());
  grads[index[out.node().get()]].assign(seed.begin(), seed.end());

  std::vector<double*> gin;
  GradientMap result;
  for (std::size_t i = 0; i < order.size(); ++i) {
    detail::Node* n = order[i];
    if (grads[i].empty()) continue;  // unreachable from root through this path
    if (n->inputs.empty()) {
      if (n->requires_grad) result.grads_.emplace(n, std::move(grads[i]));
      continue;
    }
    gin.assign(n->inputs.size(), nullptr);
    for (std::size_t k = 0; k < n->inputs.size(); ++k) {
      const auto& in = n->inputs[k];
      if (!in->requires_grad) continue;
      auto& g = grads[index[in.get()]];
      if (g.empty()) g.assign(in->value.size(), 0.0);
      gin[k] = g.data();
    }
    n->backward(*n, grads[i].data(), gin);
    std::vector<double>().swap(grads[i]);
  }
  return result;
}

/// d(root)/d(leaf) for every leaf requiring gradients; root must be scalar.
inline GradientMap backpropagate(const Tensor& root) {
  if (root.defined() && root.size() != 1) {
    throw ShapeError("backpropagate", "root must be scalar, got " + shape_str(root.shape()));
  }
  const double one = 1.0;
  return backpropagate_seeded(root, std::span<const double>(&one, 1));
}

}  // namespace glstm
