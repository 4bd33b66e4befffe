#pragma once

#include <cmath>
#include <map>
#include <string>
#include <vector>

#include "avw2/autodiff/adam.h"
#include "avw2/autodiff/ops.h"
#include "avw2/error.h"
#include "avw2/rng.h"

namespace avw2 {

using ad::Shape;
using ad::Tensor;

// Uniform(-bound, bound) parameter.
template <typename T>
Tensor<T> uniformParameter(Shape shape, double bound, Rng& rng) {
  std::vector<T> data(ad::numel(shape));
  for (auto& v : data) {
    v = static_cast<T>(rng.uniform(-bound, bound));
  }
  return Tensor<T>::parameter(std::move(shape), std::move(data));
}

template <typename T>
Tensor<T> constantParameter(Shape shape, T value) {
  const auto n = ad::numel(shape);
  return Tensor<T>::parameter(std::move(shape), std::vector<T>(n, value));
}

template <typename T>
struct Linear {
  Tensor<T> weight; // [in, out]
  Tensor<T> bias;   // [out]

  Linear() = default;
  Linear(std::int64_t in, std::int64_t out, Rng& rng)
      : weight(uniformParameter<T>({in, out}, 1.0 / std::sqrt(static_cast<double>(in)), rng)),
        bias(uniformParameter<T>({out}, 1.0 / std::sqrt(static_cast<double>(in)), rng)) {}

  Tensor<T> operator()(const Tensor<T>& x) const {
    return ad::linear(x, weight, bias);
  }
  std::int64_t inputDim() const {
    return weight.dim(0);
  }
  std::int64_t outputDim() const {
    return weight.dim(1);
  }

  template <typename F>
  void visit(const std::string& prefix, F&& f) const {
    f(prefix + ".weight", weight);
    f(prefix + ".bias", bias);
  }
};

template <typename T>
struct LayerNorm {
  Tensor<T> gain;
  Tensor<T> bias;

  LayerNorm() = default;
  explicit LayerNorm(std::int64_t dim)
      : gain(constantParameter<T>({dim}, T(1))), bias(constantParameter<T>({dim}, T(0))) {}

  Tensor<T> operator()(const Tensor<T>& x) const {
    return ad::layerNorm(x, gain, bias);
  }

  template <typename F>
  void visit(const std::string& prefix, F&& f) const {
    f(prefix + ".gain", gain);
    f(prefix + ".bias", bias);
  }
};

// Per-channel normalization over time for x [frames, channels] with a learned
// per-channel gain and bias (a group norm with one group per channel).
template <typename T>
struct TemporalNorm {
  Tensor<T> gain;
  Tensor<T> bias;

  TemporalNorm() = default;
  explicit TemporalNorm(std::int64_t dim)
      : gain(constantParameter<T>({dim}, T(1))), bias(constantParameter<T>({dim}, T(0))) {}

  Tensor<T> operator()(const Tensor<T>& x) const {
    const std::int64_t frames = x.dim(0);
    const auto n = ad::layerNorm(ad::transpose(x), Tensor<T>::full({frames}, T(1)),
                                 Tensor<T>::full({frames}, T(0)));
    return ad::add(ad::mul(ad::transpose(n), gain), bias);
  }

  template <typename F>
  void visit(const std::string& prefix, F&& f) const {
    f(prefix + ".gain", gain);
    f(prefix + ".bias", bias);
  }
};

// Named handles to every parameter of a module (handles share storage).
template <typename T, typename Module>
ad::NamedParams<T> collectParameters(const Module& module) {
  ad::NamedParams<T> out;
  module.visit([&](const std::string& name, const Tensor<T>& t) { out.emplace(name, t); });
  return out;
}

// Copies parameter values by name between modules of any precision.
template <typename Dst, typename Src>
void copyParameters(const Dst& dst, const Src& src) {
  std::map<std::string, std::vector<double>> values;
  src.visit([&](const std::string& name, const auto& t) {
    values.emplace(name, std::vector<double>(t.data().begin(), t.data().end()));
  });
  dst.visit([&](const std::string& name, const auto& t) {
    auto it = values.find(name);
    if (it == values.end()) {
      fail(ErrorKind::Shape, "copyParameters: source has no parameter '" + name + "'");
    }
    auto handle = t;
    auto& out = handle.mutableData();
    if (out.size() != it->second.size()) {
      fail(ErrorKind::Shape, "copyParameters: size mismatch for '" + name + "'");
    }
    using V = typename std::decay_t<decltype(out)>::value_type;
    for (std::size_t i = 0; i < out.size(); ++i) {
      out[i] = static_cast<V>(it->second[i]);
    }
  });
}

} // namespace avw2
