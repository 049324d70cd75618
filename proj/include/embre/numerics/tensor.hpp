#ifndef EMBRE_NUMERICS_TENSOR_HPP
#define EMBRE_NUMERICS_TENSOR_HPP

#include <algorithm>
#include <functional>
#include <memory>
#include <numeric>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <unordered_set>
#include <vector>

namespace embre::num {

using Shape = std::vector<std::size_t>;

inline std::size_t numel(const Shape& s) {
  return std::accumulate(s.begin(), s.end(), std::size_t{1},
                         std::multiplies<>());
}

inline std::string to_string(const Shape& s) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < s.size(); ++i) os << (i ? "," : "") << s[i];
  os << ']';
  return os.str();
}

class ShapeError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

namespace detail {

inline bool& grad_enabled() {
  thread_local bool enabled = true;
  return enabled;
}

}  // namespace detail

/// Disables tape recording on the current thread while alive.
class NoGradGuard {
 public:
  NoGradGuard() : previous_(detail::grad_enabled()) {
    detail::grad_enabled() = false;
  }
  ~NoGradGuard() { detail::grad_enabled() = previous_; }
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

template <class T>
struct Node {
  Shape shape;
  std::vector<T> data;
  std::vector<T> grad;  // empty until the first accumulation
  bool requires_grad = false;
  std::vector<std::shared_ptr<Node>> parents;
  std::function<void(Node&)> backward;

  std::vector<T>& grad_buffer() {
    if (grad.empty()) grad.assign(data.size(), T(0));
    return grad;
  }
};

/// Dense row-major array with a reverse-mode tape edge. Copies share storage.
template <class T>
class Tensor {
 public:
  using value_type = T;

  Tensor() : node_(std::make_shared<Node<T>>()) {}

  Tensor(Shape shape, std::vector<T> data, bool requires_grad = false)
      : node_(std::make_shared<Node<T>>()) {
    if (numel(shape) != data.size())
      throw ShapeError("tensor data length " + std::to_string(data.size()) +
                       " does not match shape " + num::to_string(shape));
    node_->shape = std::move(shape);
    node_->data = std::move(data);
    node_->requires_grad = requires_grad;
  }

  static Tensor zeros(Shape shape, bool requires_grad = false) {
    const auto n = numel(shape);
    return Tensor(std::move(shape), std::vector<T>(n, T(0)), requires_grad);
  }

  static Tensor full(Shape shape, T value, bool requires_grad = false) {
    const auto n = numel(shape);
    return Tensor(std::move(shape), std::vector<T>(n, value), requires_grad);
  }

  static Tensor scalar(T value) { return Tensor({1}, {value}); }

  const Shape& shape() const { return node_->shape; }
  std::size_t rank() const { return node_->shape.size(); }
  std::size_t size() const { return node_->data.size(); }
  std::size_t rows() const { return rank() == 2 ? shape()[0] : 1; }
  std::size_t cols() const { return shape().empty() ? 1 : shape().back(); }

  std::span<T> data() { return node_->data; }
  std::span<const T> data() const { return node_->data; }
  std::vector<T>& values() { return node_->data; }
  const std::vector<T>& values() const { return node_->data; }
  T item() const {
    if (size() != 1) throw ShapeError("item() on tensor of shape " + num::to_string(shape()));
    return node_->data[0];
  }
  T operator[](std::size_t i) const { return node_->data[i]; }
  T at(std::size_t r, std::size_t c) const { return node_->data[r * cols() + c]; }

  bool requires_grad() const { return node_->requires_grad; }
  bool has_grad() const { return !node_->grad.empty(); }
  std::span<const T> grad() const { return node_->grad; }
  std::span<T> grad_mut() { return node_->grad_buffer(); }

  void zero_grad() { std::fill(node_->grad.begin(), node_->grad.end(), T(0)); }

  /// Drops the tape edge, keeping values; the result is a leaf.
  Tensor detach() const {
    return Tensor(node_->shape, node_->data, false);
  }

  /// Reverse-mode sweep from this scalar, accumulating into leaf grads.
  void backward() {
    if (size() != 1)
      throw ShapeError("backward() needs a scalar, got shape " + num::to_string(shape()));
    auto order = topological_order();
    node_->grad_buffer()[0] += T(1);
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
      Node<T>& n = **it;
      if (n.backward && !n.grad.empty()) n.backward(n);
    }
    // free interior gradients; leaves keep theirs
    for (auto* n : order)
      if (n->backward) std::vector<T>().swap(n->grad);
  }

  Node<T>& node() const { return *node_; }
  const std::shared_ptr<Node<T>>& node_ptr() const { return node_; }

  /// Builds an op result recording `parents` and a backward closure when any
  /// parent requires a gradient and recording is enabled.
  static Tensor make_result(Shape shape, std::vector<T> data,
                            std::vector<Tensor> parents,
                            std::function<void(Node<T>&)> backward) {
    Tensor out(std::move(shape), std::move(data));
    if (!detail::grad_enabled()) return out;
    bool needs = false;
    for (const auto& p : parents) needs = needs || p.requires_grad();
    if (!needs) return out;
    out.node_->requires_grad = true;
    for (auto& p : parents) out.node_->parents.push_back(p.node_);
    out.node_->backward = std::move(backward);
    return out;
  }

 private:
  std::vector<Node<T>*> topological_order() const {
    std::vector<Node<T>*> order;
    std::unordered_set<Node<T>*> visited;
    std::vector<std::pair<Node<T>*, std::size_t>> stack{{node_.get(), 0}};
    visited.insert(node_.get());
    while (!stack.empty()) {
      auto& [n, next] = stack.back();
      if (next < n->parents.size()) {
        Node<T>* p = n->parents[next++].get();
        if (p->requires_grad && visited.insert(p).second) stack.push_back({p, 0});
      } else {
        order.push_back(n);
        stack.pop_back();
      }
    }
    return order;
  }

  std::shared_ptr<Node<T>> node_;
};

}  // namespace embre::num

#endif  // EMBRE_NUMERICS_TENSOR_HPP
