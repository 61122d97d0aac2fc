#pragma once

#include <cstddef>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "pyramidseg/error.hpp"

namespace pyseg {

using Shape = std::vector<int>;

std::size_t shape_numel(const Shape& shape);
std::string shape_str(const Shape& shape);

template <typename T>
struct Node {
  Shape shape;
  std::vector<T> data;
  std::vector<T> grad;  // empty until something accumulates into it
  bool requires_grad = false;
  bool consumed = false;
  const char* op = "leaf";
  std::vector<std::shared_ptr<Node>> inputs;
  // Reads this node's grad and accumulates into inputs' grads.
  std::function<void(Node&)> backward_fn;

  T* grad_buffer() {
    if (grad.empty()) grad.assign(data.size(), T(0));
    return grad.data();
  }
};

// Handle to a dense row-major array with an optional reverse-mode record.
// Copies share storage, like a reference-counted pointer.
template <typename T>
class Tensor {
 public:
  using Scalar = T;

  Tensor() = default;
  explicit Tensor(Shape shape, bool requires_grad = false);
  Tensor(Shape shape, std::vector<T> values, bool requires_grad = false);
  explicit Tensor(std::shared_ptr<Node<T>> node) : node_(std::move(node)) {}

  static Tensor full(Shape shape, T value, bool requires_grad = false);

  bool defined() const { return node_ != nullptr; }
  const Shape& shape() const { return node_->shape; }
  int rank() const { return static_cast<int>(node_->shape.size()); }
  // Negative indices count from the end.
  int dim(int i) const;
  std::size_t numel() const { return node_->data.size(); }

  std::span<const T> data() const { return node_->data; }
  std::span<T> mutable_data() { return node_->data; }
  bool has_grad() const { return !node_->grad.empty(); }
  // Allocates a zero gradient on first access.
  std::span<T> grad() { node_->grad_buffer(); return node_->grad; }
  std::span<const T> grad() const { node_->grad_buffer(); return node_->grad; }

  T item() const;
  T at(int n, int c, int h, int w) const;

  bool requires_grad() const { return node_->requires_grad; }
  void set_requires_grad(bool flag) { node_->requires_grad = flag; }
  const char* op() const { return node_->op; }

  void zero_grad() { node_->grad.clear(); }
  // Populates gradients of every requires_grad leaf reachable from this
  // scalar, then releases the recorded graph.
  void backward() const;
  Tensor detach() const;

  const std::shared_ptr<Node<T>>& node() const { return node_; }

 private:
  std::shared_ptr<Node<T>> node_;
};

using TensorF = Tensor<float>;
using TensorD = Tensor<double>;

// Disables graph recording on this thread for its lifetime.
class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

bool grad_enabled();

// Records the name of every op executed on this thread while alive.
class OpTrace {
 public:
  OpTrace();
  ~OpTrace();
  OpTrace(const OpTrace&) = delete;
  OpTrace& operator=(const OpTrace&) = delete;

  const std::vector<std::string>& ops() const { return ops_; }
  void record(const char* op) { ops_.emplace_back(op); }

 private:
  std::vector<std::string> ops_;
  OpTrace* previous_;
};

namespace detail {

// Wraps a freshly computed value into a graph node. The backward closure is
// kept only if recording is on and at least one input needs a gradient.
template <typename T>
Tensor<T> make_result(Shape shape, std::vector<T> data, const char* op,
                      std::vector<Tensor<T>> inputs,
                      std::function<void(Node<T>&)> backward_fn);

template <typename T>
inline bool wants_grad(const std::shared_ptr<Node<T>>& n) {
  return n && n->requires_grad;
}

}  // namespace detail

// Converts between precisions; the result is a leaf.
template <typename To, typename From>
Tensor<To> cast(const Tensor<From>& x, bool requires_grad = false) {
  std::vector<To> values(x.data().begin(), x.data().end());
  return Tensor<To>(x.shape(), std::move(values), requires_grad);
}

}  // namespace pyseg
