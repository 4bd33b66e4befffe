#include "avw2/autodiff/tensor.h"

#include <algorithm>
#include <cmath>
#include <sstream>

#include "avw2/error.h"

namespace avw2::ad {

namespace {
thread_local std::uint64_t gSeq = 0;

template <typename T>
std::shared_ptr<Node<T>> newNode(Shape shape, std::vector<T> data, bool requiresGrad) {
  if (numel(shape) != static_cast<std::int64_t>(data.size())) {
    fail(ErrorKind::Shape, "tensor: shape " + shapeString(shape) + " holds " +
                               std::to_string(numel(shape)) + " values, got " +
                               std::to_string(data.size()));
  }
  auto node = std::make_shared<Node<T>>();
  node->shape = std::move(shape);
  node->value = std::move(data);
  node->requiresGrad = requiresGrad;
  node->seq = ++gSeq;
  return node;
}
} // namespace

std::int64_t numel(const Shape& shape) {
  std::int64_t n = 1;
  for (auto d : shape) {
    if (d <= 0) {
      fail(ErrorKind::Shape, "tensor: non-positive dimension in " + shapeString(shape));
    }
    n *= d;
  }
  return n;
}

std::string shapeString(const Shape& shape) {
  std::ostringstream ss;
  ss << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    ss << (i ? "," : "") << shape[i];
  }
  ss << ']';
  return ss.str();
}

template <typename T>
Tensor<T> Tensor<T>::constant(Shape shape, std::vector<T> data) {
  return Tensor(newNode<T>(std::move(shape), std::move(data), false));
}

template <typename T>
Tensor<T> Tensor<T>::parameter(Shape shape, std::vector<T> data) {
  return Tensor(newNode<T>(std::move(shape), std::move(data), true));
}

template <typename T>
Tensor<T> Tensor<T>::zeros(Shape shape, bool requiresGrad) {
  const auto n = ad::numel(shape);
  return Tensor(newNode<T>(std::move(shape), std::vector<T>(n, T(0)), requiresGrad));
}

template <typename T>
Tensor<T> Tensor<T>::full(Shape shape, T value) {
  const auto n = ad::numel(shape);
  return Tensor(newNode<T>(std::move(shape), std::vector<T>(n, value), false));
}

template <typename T>
Tensor<T> Tensor<T>::scalar(T value) {
  return Tensor(newNode<T>({}, {value}, false));
}

template <typename T>
std::int64_t Tensor<T>::dim(int axis) const {
  const int r = rank();
  const int a = axis < 0 ? axis + r : axis;
  if (a < 0 || a >= r) {
    fail(ErrorKind::Shape, "tensor: axis " + std::to_string(axis) + " out of range for " +
                               shapeString(shape()));
  }
  return node_->shape[a];
}

template <typename T>
std::vector<T>& Tensor<T>::mutableData() {
  if (!node_->isLeaf()) {
    fail(ErrorKind::Domain, "tensor: in-place write to a non-leaf '" +
                                std::string(node_->op) + "' result");
  }
  return node_->value;
}

template <typename T>
T Tensor<T>::item() const {
  if (node_->value.size() != 1) {
    fail(ErrorKind::Shape, "tensor: item() on shape " + shapeString(shape()));
  }
  return node_->value[0];
}

template <typename T>
T Tensor<T>::at(std::int64_t row, std::int64_t col) const {
  if (rank() != 2) {
    fail(ErrorKind::Shape, "tensor: at(row, col) on shape " + shapeString(shape()));
  }
  return node_->value[row * node_->shape[1] + col];
}

template <typename T>
Tensor<T> Tensor<T>::detach() const {
  return Tensor(newNode<T>(node_->shape, node_->value, false));
}

template <typename T>
Tensor<T> makeResult(const char* op, Shape shape, std::vector<T> value,
                     const std::vector<Tensor<T>>& inputs,
                     typename Node<T>::BackwardFn backward) {
  for (const auto& v : value) {
    if (!std::isfinite(v)) {
      fail(ErrorKind::Numeric, std::string("op '") + op + "' produced a non-finite value");
    }
  }
  const bool needsGrad =
      std::any_of(inputs.begin(), inputs.end(), [](const Tensor<T>& t) { return t.requiresGrad(); });
  auto node = newNode<T>(std::move(shape), std::move(value), needsGrad);
  node->op = op;
  if (needsGrad) {
    node->inputs.reserve(inputs.size());
    for (const auto& t : inputs) {
      node->inputs.push_back(t.node());
    }
    node->backward = std::move(backward);
  }
  return Tensor<T>(std::move(node));
}

template <typename T>
std::vector<T> Gradients<T>::of(const Tensor<T>& t) const {
  auto it = grads_.find(t.id());
  if (it == grads_.end()) {
    return std::vector<T>(t.data().size(), T(0));
  }
  return it->second;
}

template <typename T>
Gradients<T> backward(const Tensor<T>& loss) {
  if (!loss.defined() || loss.numel() != 1) {
    fail(ErrorKind::Shape, "backward: loss must be a scalar, got " +
                               (loss.defined() ? shapeString(loss.shape()) : "undefined"));
  }
  Gradients<T> result;
  if (!loss.requiresGrad()) {
    return result;
  }

  std::vector<Node<T>*> order;
  {
    std::unordered_map<const Node<T>*, bool> seen;
    std::vector<Node<T>*> stack{loss.node().get()};
    seen[loss.node().get()] = true;
    while (!stack.empty()) {
      Node<T>* n = stack.back();
      stack.pop_back();
      order.push_back(n);
      for (const auto& in : n->inputs) {
        if (in->requiresGrad && !seen[in.get()]) {
          seen[in.get()] = true;
          stack.push_back(in.get());
        }
      }
    }
  }
  std::sort(order.begin(), order.end(),
            [](const Node<T>* a, const Node<T>* b) { return a->seq > b->seq; });

  std::unordered_map<const Node<T>*, std::vector<T>> grads;
  grads[loss.node().get()] = std::vector<T>{T(1)};
  std::vector<std::vector<T>*> inputGrads;
  for (Node<T>* n : order) {
    auto it = grads.find(n);
    if (it == grads.end()) {
      continue;
    }
    if (n->isLeaf()) {
      result.grads_.emplace(n, std::move(it->second));
      grads.erase(it);
      continue;
    }
    inputGrads.assign(n->inputs.size(), nullptr);
    for (std::size_t i = 0; i < n->inputs.size(); ++i) {
      const auto& in = n->inputs[i];
      if (in->requiresGrad) {
        auto& g = grads[in.get()];
        if (g.empty()) {
          g.assign(in->value.size(), T(0));
        }
        inputGrads[i] = &g;
      }
    }
    n->backward(grads.at(n), std::span<std::vector<T>*>(inputGrads));
    grads.erase(n);
  }
  return result;
}

template class Tensor<float>;
template class Tensor<double>;
template class Gradients<float>;
template class Gradients<double>;
template Gradients<float> backward(const Tensor<float>&);
template Gradients<double> backward(const Tensor<double>&);
template Tensor<float> makeResult(const char*, Shape, std::vector<float>,
                                  const std::vector<Tensor<float>>&, Node<float>::BackwardFn);
template Tensor<double> makeResult(const char*, Shape, std::vector<double>,
                                   const std::vector<Tensor<double>>&, Node<double>::BackwardFn);

} // namespace avw2::ad
