#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <memory>
#include <sstream>
#include <string>
#include <unordered_set>
#include <utility>
#include <vector>

#include "mvr/errors.hpp"

namespace mvr {

class Tensor;

namespace detail {

inline thread_local bool g_grad_enabled = true;

/// One tape node. An op's output owns references to its inputs plus a
/// closure that routes the output gradient back into them. Reverse
/// topological replay over these nodes is the backward pass.
struct Node {
  std::vector<std::size_t> shape;
  std::shared_ptr<std::vector<double>> data;
  std::vector<double> grad;  // empty until backward touches this node
  bool requires_grad = false;
  const char* op = "leaf";
  std::vector<Tensor> parents;
  std::function<void(Node&)> backward_fn;

  std::size_t numel() const { return data->size(); }
  void ensure_grad() {
    if (grad.size() != data->size()) grad.assign(data->size(), 0.0);
  }
};

}  // namespace detail

/// Disables tape recording for the enclosing scope (thread-local).
struct NoGradGuard {
  bool prev;
  NoGradGuard() : prev(detail::g_grad_enabled) { detail::g_grad_enabled = false; }
  ~NoGradGuard() { detail::g_grad_enabled = prev; }
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;
};

inline bool grad_enabled() { return detail::g_grad_enabled; }

inline std::string shape_str(const std::vector<std::size_t>& s) {
  std::ostringstream os;
  os << "(";
  for (std::size_t i = 0; i < s.size(); ++i) {
    if (i) os << ", ";
    os << s[i];
  }
  os << ")";
  return os.str();
}

/// Dense row-major f64 tensor. Value-semantic handle to a shared tape node:
/// copying a Tensor aliases the same storage and gradient slot, which is how
/// parameter tying (one embedding matrix used by several heads) works.
class Tensor {
 public:
  Tensor() = default;

  static Tensor zeros(std::vector<std::size_t> shape, bool requires_grad = false) {
    return filled(std::move(shape), 0.0, requires_grad);
  }

  static Tensor filled(std::vector<std::size_t> shape, double value, bool requires_grad = false) {
    const std::size_t n = count(shape);
    return from_values(std::move(shape), std::vector<double>(n, value), requires_grad);
  }

  static Tensor from_values(std::vector<std::size_t> shape, std::vector<double> values,
                            bool requires_grad = false) {
    if (count(shape) != values.size()) {
      throw ShapeError("tensor: " + shape_str(shape) + " does not hold " +
                       std::to_string(values.size()) + " values");
    }
    auto n = std::make_shared<detail::Node>();
    n->shape = std::move(shape);
    n->data = std::make_shared<std::vector<double>>(std::move(values));
    n->requires_grad = requires_grad;
    return Tensor(std::move(n));
  }

  static Tensor scalar(double v, bool requires_grad = false) {
    return from_values({1}, {v}, requires_grad);
  }

  static Tensor adopt(std::shared_ptr<detail::Node> n) { return Tensor(std::move(n)); }

  bool defined() const { return static_cast<bool>(n_); }
  const std::vector<std::size_t>& shape() const { return n_->shape; }
  std::size_t rank() const { return n_->shape.size(); }
  std::size_t numel() const { return n_->data->size(); }
  std::size_t rows() const { return n_->shape.size() == 2 ? n_->shape[0] : 1; }
  std::size_t cols() const { return n_->shape.back(); }

  double* data() { return n_->data->data(); }
  const double* data() const { return n_->data->data(); }
  std::vector<double>& values() { return *n_->data; }
  const std::vector<double>& values() const { return *n_->data; }

  bool requires_grad() const { return n_->requires_grad; }
  void set_requires_grad(bool b) { n_->requires_grad = b; }

  bool has_grad() const { return !n_->grad.empty(); }
  std::vector<double>& grad() {
    n_->ensure_grad();
    return n_->grad;
  }
  const std::vector<double>& grad() const {
    if (n_->grad.empty()) throw ShapeError("grad: no gradient populated for this tensor");
    return n_->grad;
  }
  void zero_grad() { n_->grad.assign(n_->data->size(), 0.0); }

  double item() const {
    if (numel() != 1) throw ShapeError("item: tensor has shape " + shape_str(n_->shape));
    return (*n_->data)[0];
  }

  detail::Node* node() const { return n_.get(); }

  /// New leaf sharing this tensor's storage but with its own gradient slot.
  /// Distinct tapes built over proxies of the same parameters can then run
  /// on distinct threads without sharing mutable state.
  Tensor shared_data_proxy() const {
    auto n = std::make_shared<detail::Node>();
    n->shape = n_->shape;
    n->data = n_->data;
    n->requires_grad = n_->requires_grad;
    n->op = "leaf";
    return Tensor(std::move(n));
  }

  Tensor deep_copy(bool requires_grad) const {
    return from_values(n_->shape, *n_->data, requires_grad);
  }

  /// Reverse-mode pass from a scalar root. Topological order is computed
  /// once; every reachable node is visited exactly once and every reachable
  /// requires_grad tensor ends up with a populated gradient.
  void backward(double seed = 1.0) const {
    if (!n_) throw ShapeError("backward: undefined tensor");
    if (n_->data->size() != 1) {
      throw ShapeError("backward: root must be scalar, got " + shape_str(n_->shape));
    }
    if (!n_->requires_grad) return;
    std::vector<detail::Node*> order = topo_order();
    for (detail::Node* n : order) {
      if (n->requires_grad) n->ensure_grad();
    }
    n_->grad[0] += seed;
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
      detail::Node* n = *it;
      if (n->requires_grad && n->backward_fn) n->backward_fn(*n);
    }
  }

  /// Post-order (children before parents... here: inputs before outputs)
  /// listing of the reachable graph; the root is last. Exposed for tape
  /// inspection in tests.
  std::vector<detail::Node*> topo_order() const {
    std::vector<detail::Node*> order;
    std::unordered_set<detail::Node*> visited;
    struct Frame {
      detail::Node* n;
      std::size_t next;
    };
    std::vector<Frame> stack;
    if (visited.insert(n_.get()).second) stack.push_back({n_.get(), 0});
    while (!stack.empty()) {
      Frame& f = stack.back();
      if (f.next < f.n->parents.size()) {
        detail::Node* p = f.n->parents[f.next++].node();
        if (visited.insert(p).second) stack.push_back({p, 0});
      } else {
        order.push_back(f.n);
        stack.pop_back();
      }
    }
    return order;
  }

 private:
  explicit Tensor(std::shared_ptr<detail::Node> n) : n_(std::move(n)) {}

  static std::size_t count(const std::vector<std::size_t>& shape) {
    std::size_t n = 1;
    for (std::size_t e : shape) n *= e;
    return n;
  }

  std::shared_ptr<detail::Node> n_;
};

/// True when `target`'s node is reachable from `root` through the tape.
inline bool graph_reaches(const Tensor& root, const Tensor& target) {
  for (detail::Node* n : root.topo_order()) {
    if (n == target.node()) return true;
  }
  return false;
}

/// Max relative error between analytic gradients of f at x and central
/// finite differences: max_i |analytic_i - fd_i| / max(1, |analytic_i|).
/// Coordinates where both gradients are below 1e-12 are skipped.
inline double grad_check(const std::function<Tensor(Tensor&)>& f, Tensor& x, double h = 1e-5) {
  x.set_requires_grad(true);
  x.zero_grad();
  Tensor y = f(x);
  if (y.numel() != 1) throw ShapeError("grad_check: f must be scalar-valued");
  y.backward();
  std::vector<double> analytic = x.grad();

  NoGradGuard ng;
  double max_err = 0.0;
  double* xs = x.data();
  for (std::size_t i = 0; i < x.numel(); ++i) {
    const double orig = xs[i];
    xs[i] = orig + h;
    const double up = f(x).item();
    xs[i] = orig - h;
    const double down = f(x).item();
    xs[i] = orig;
    const double fd = (up - down) / (2.0 * h);
    if (std::fabs(analytic[i]) < 1e-12 && std::fabs(fd) < 1e-12) continue;
    const double err = std::fabs(analytic[i] - fd) / std::max(1.0, std::fabs(analytic[i]));
    if (err > max_err) max_err = err;
  }
  return max_err;
}

}  // namespace mvr
