#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <unordered_map>
#include <vector>

namespace avw2::ad {

using Shape = std::vector<std::int64_t>;

std::int64_t numel(const Shape& shape);
std::string shapeString(const Shape& shape);

// One recorded value in the graph. Op results keep their inputs alive and a
// closure that maps the result's gradient onto the inputs' gradients.
template <typename T>
struct Node {
  using BackwardFn = std::function<void(const std::vector<T>& grad,
                                        std::span<std::vector<T>*> inputGrads)>;

  Shape shape;
  std::vector<T> value;
  bool requiresGrad = false;
  const char* op = "leaf";
  // Creation order; reverse creation order is a topological order.
  std::uint64_t seq = 0;
  std::vector<std::shared_ptr<Node>> inputs;
  BackwardFn backward;

  bool isLeaf() const {
    return inputs.empty();
  }
};

// Handle to a dense row-major tensor that may participate in reverse-mode
// differentiation. Copies share the underlying node.
template <typename T>
class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(std::shared_ptr<Node<T>> node) : node_(std::move(node)) {}

  static Tensor constant(Shape shape, std::vector<T> data);
  static Tensor parameter(Shape shape, std::vector<T> data);
  static Tensor zeros(Shape shape, bool requiresGrad = false);
  static Tensor full(Shape shape, T value);
  static Tensor scalar(T value);

  bool defined() const {
    return static_cast<bool>(node_);
  }
  const Shape& shape() const {
    return node_->shape;
  }
  int rank() const {
    return static_cast<int>(node_->shape.size());
  }
  // Negative axes count from the end.
  std::int64_t dim(int axis) const;
  std::int64_t numel() const {
    return static_cast<std::int64_t>(node_->value.size());
  }
  const std::vector<T>& data() const {
    return node_->value;
  }
  // Direct write access, intended for optimizers updating leaf parameters.
  std::vector<T>& mutableData();
  T item() const;
  T at(std::int64_t row, std::int64_t col) const;
  bool requiresGrad() const {
    return node_->requiresGrad;
  }
  const Node<T>* id() const {
    return node_.get();
  }
  const std::shared_ptr<Node<T>>& node() const {
    return node_;
  }

  // Same values, cut from the graph.
  Tensor detach() const;

  // Leaf copy at another precision; requires_grad is preserved.
  template <typename U>
  Tensor<U> cast() const {
    std::vector<U> out(node_->value.begin(), node_->value.end());
    return node_->requiresGrad ? Tensor<U>::parameter(node_->shape, std::move(out))
                               : Tensor<U>::constant(node_->shape, std::move(out));
  }

 private:
  std::shared_ptr<Node<T>> node_;
};

// Creates an op result. Records the inputs and backward rule only when some
// input requires a gradient. Throws a numeric error naming `op` when the
// forward value contains NaN or Inf.
template <typename T>
Tensor<T> makeResult(const char* op, Shape shape, std::vector<T> value,
                     const std::vector<Tensor<T>>& inputs,
                     typename Node<T>::BackwardFn backward);

// Gradients of one scalar with respect to every reachable leaf that requires
// a gradient.
template <typename T>
class Gradients {
 public:
  // Zeros of the tensor's shape when it was unreachable from the loss.
  std::vector<T> of(const Tensor<T>& t) const;
  bool reached(const Tensor<T>& t) const {
    return grads_.count(t.id()) != 0;
  }
  std::size_t size() const {
    return grads_.size();
  }

 private:
  template <typename U>
  friend Gradients<U> backward(const Tensor<U>& loss);
  std::unordered_map<const Node<T>*, std::vector<T>> grads_;
};

template <typename T>
Gradients<T> backward(const Tensor<T>& loss);

} // namespace avw2::ad
