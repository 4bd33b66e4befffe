#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "avw2/autodiff/tensor.h"

namespace avw2::ad {

template <typename T>
using NamedParams = std::map<std::string, Tensor<T>>;

struct AdamConfig {
  double learningRate = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

template <typename T>
struct AdamState {
  AdamConfig config;
  std::uint64_t step = 0;
  // First and second moments keyed by parameter name; created on first use.
  std::map<std::string, std::vector<T>> m;
  std::map<std::string, std::vector<T>> v;
};

// One bias-corrected Adam update of every parameter in `params`, in name
// order. `learningRate` overrides the configured rate when non-negative (used
// by schedules). Throws a numeric error naming the parameter on a non-finite
// gradient, before any parameter is modified.
template <typename T>
void adamStep(NamedParams<T>& params, const Gradients<T>& grads, AdamState<T>& state,
              double learningRate = -1.0);

} // namespace avw2::ad
