#include "pyramidseg/tensor.hpp"

#include <cmath>
#include <sstream>
#include <unordered_set>

namespace pyseg {

const char* error_code_name(ErrorCode code) noexcept {
  switch (code) {
    case ErrorCode::kOk: return "ok";
    case ErrorCode::kShape: return "shape";
    case ErrorCode::kConfig: return "config";
    case ErrorCode::kInvalidArgument: return "invalid_argument";
    case ErrorCode::kLabelRange: return "label_range";
    case ErrorCode::kIo: return "io";
    case ErrorCode::kNotFound: return "not_found";
    case ErrorCode::kMalformed: return "malformed";
    case ErrorCode::kBadMagic: return "bad_magic";
    case ErrorCode::kBadVersion: return "bad_version";
    case ErrorCode::kTruncated: return "truncated";
    case ErrorCode::kDuplicateName: return "duplicate_name";
    case ErrorCode::kNumeric: return "numeric";
    case ErrorCode::kState: return "state";
    case ErrorCode::kInternal: return "internal";
  }
  return "unknown";
}

std::size_t shape_numel(const Shape& shape) {
  std::size_t n = 1;
  for (int d : shape) {
    if (d < 0) raise(ErrorCode::kShape, "negative extent in shape " + shape_str(shape));
    n *= static_cast<std::size_t>(d);
  }
  return n;
}

std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '(';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << ',';
    os << shape[i];
  }
  os << ')';
  return os.str();
}

namespace {
thread_local bool g_grad_enabled = true;
}

bool grad_enabled() { return g_grad_enabled; }

namespace {
thread_local OpTrace* g_trace = nullptr;
}

OpTrace::OpTrace() : previous_(g_trace) { g_trace = this; }
OpTrace::~OpTrace() { g_trace = previous_; }

NoGradGuard::NoGradGuard() : previous_(g_grad_enabled) { g_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { g_grad_enabled = previous_; }

template <typename T>
Tensor<T>::Tensor(Shape shape, bool requires_grad) : node_(std::make_shared<Node<T>>()) {
  node_->data.assign(shape_numel(shape), T(0));
  node_->shape = std::move(shape);
  node_->requires_grad = requires_grad;
}

template <typename T>
Tensor<T>::Tensor(Shape shape, std::vector<T> values, bool requires_grad)
    : node_(std::make_shared<Node<T>>()) {
  if (shape_numel(shape) != values.size()) {
    raise(ErrorCode::kShape, "shape " + shape_str(shape) + " holds " +
                                 std::to_string(shape_numel(shape)) + " values, got " +
                                 std::to_string(values.size()));
  }
  node_->shape = std::move(shape);
  node_->data = std::move(values);
  node_->requires_grad = requires_grad;
}

template <typename T>
Tensor<T> Tensor<T>::full(Shape shape, T value, bool requires_grad) {
  Tensor t(std::move(shape), requires_grad);
  std::fill(t.node_->data.begin(), t.node_->data.end(), value);
  return t;
}

template <typename T>
int Tensor<T>::dim(int i) const {
  const int r = rank();
  const int j = i < 0 ? i + r : i;
  if (j < 0 || j >= r) {
    raise(ErrorCode::kShape, "dimension " + std::to_string(i) + " out of range for " +
                                 shape_str(shape()));
  }
  return node_->shape[j];
}

template <typename T>
T Tensor<T>::item() const {
  if (numel() != 1) raise(ErrorCode::kShape, "item() on tensor of shape " + shape_str(shape()));
  return node_->data[0];
}

template <typename T>
T Tensor<T>::at(int n, int c, int h, int w) const {
  const Shape& s = shape();
  return node_->data[((static_cast<std::size_t>(n) * s[1] + c) * s[2] + h) * s[3] + w];
}

template <typename T>
Tensor<T> Tensor<T>::detach() const {
  return Tensor(shape(), node_->data, false);
}

template <typename T>
void Tensor<T>::backward() const {
  if (!defined() || numel() != 1) {
    raise(ErrorCode::kShape, "backward() needs a scalar, got shape " +
                                 (defined() ? shape_str(shape()) : std::string("<undefined>")));
  }
  if (node_->consumed) {
    raise(ErrorCode::kState, "graph already consumed by a previous backward()");
  }
  if (!node_->requires_grad) {
    raise(ErrorCode::kState, "backward() on a value that does not require grad");
  }

  // Iterative post-order DFS gives a topological order (inputs before users).
  std::vector<Node<T>*> order;
  std::unordered_set<Node<T>*> visited;
  std::vector<std::pair<Node<T>*, std::size_t>> stack{{node_.get(), 0}};
  visited.insert(node_.get());
  while (!stack.empty()) {
    auto& [n, next] = stack.back();
    if (next < n->inputs.size()) {
      Node<T>* child = n->inputs[next++].get();
      if (child && child->requires_grad && visited.insert(child).second) {
        stack.push_back({child, 0});
      }
    } else {
      order.push_back(n);
      stack.pop_back();
    }
  }

  std::fill(node_->grad_buffer(), node_->grad_buffer() + 1, T(1));
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node<T>* n = *it;
    if (n->backward_fn && !n->grad.empty()) n->backward_fn(*n);
  }
  for (Node<T>* n : order) {
    if (!n->backward_fn) continue;
    n->backward_fn = nullptr;
    n->inputs.clear();
    n->consumed = true;
    if (n != node_.get()) {
      n->grad.clear();
      n->grad.shrink_to_fit();
    }
  }
}

template class Tensor<float>;
template class Tensor<double>;

namespace detail {

template <typename T>
Tensor<T> make_result(Shape shape, std::vector<T> data, const char* op,
                      std::vector<Tensor<T>> inputs,
                      std::function<void(Node<T>&)> backward_fn) {
  auto node = std::make_shared<Node<T>>();
  node->shape = std::move(shape);
  node->data = std::move(data);
  node->op = op;
  if (g_trace) g_trace->record(op);
#ifndef NDEBUG
  bool inputs_finite = true;
  for (const auto& in : inputs) {
    if (!in.defined()) continue;
    for (T v : in.data()) inputs_finite = inputs_finite && std::isfinite(v);
  }
  if (inputs_finite) {
    for (T v : node->data) {
      if (!std::isfinite(v)) raise(ErrorCode::kNumeric, std::string("non-finite output from ") + op);
    }
  }
#endif
  bool needs = false;
  if (grad_enabled()) {
    for (const auto& in : inputs) needs = needs || (in.defined() && in.requires_grad());
  }
  if (needs) {
    node->requires_grad = true;
    node->inputs.reserve(inputs.size());
    for (auto& in : inputs) node->inputs.push_back(in.defined() ? in.node() : nullptr);
    node->backward_fn = std::move(backward_fn);
  }
  return Tensor<T>(std::move(node));
}

template Tensor<float> make_result(Shape, std::vector<float>, const char*,
                                   std::vector<Tensor<float>>,
                                   std::function<void(Node<float>&)>);
template Tensor<double> make_result(Shape, std::vector<double>, const char*,
                                    std::vector<Tensor<double>>,
                                    std::function<void(Node<double>&)>);

}  // namespace detail

}  // namespace pyseg
