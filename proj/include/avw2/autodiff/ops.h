#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "avw2/autodiff/tensor.h"

// Differentiable primitives. Every op validates shapes and throws a shape
// error naming the op and the offending shapes. Binary elementwise ops follow
// numpy broadcasting.
namespace avw2::ad {

// Names of all primitives with forward and backward rules.
std::vector<std::string> opCatalogue();

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b);
template <typename T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b);
template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b);
template <typename T>
Tensor<T> div(const Tensor<T>& a, const Tensor<T>& b);

template <typename T>
Tensor<T> scale(const Tensor<T>& x, double s);
template <typename T>
Tensor<T> neg(const Tensor<T>& x) {
  return scale(x, -1.0);
}
template <typename T>
Tensor<T> exp(const Tensor<T>& x);
// Domain error for non-positive inputs.
template <typename T>
Tensor<T> log(const Tensor<T>& x);
template <typename T>
Tensor<T> relu(const Tensor<T>& x);
// Exact (erf) form.
template <typename T>
Tensor<T> gelu(const Tensor<T>& x);
// log(exp(a) + exp(b)), same shapes.
template <typename T>
Tensor<T> logAddExp(const Tensor<T>& a, const Tensor<T>& b);

// Reductions.
template <typename T>
Tensor<T> sum(const Tensor<T>& x);
template <typename T>
Tensor<T> mean(const Tensor<T>& x);
// Reduces the last axis away.
template <typename T>
Tensor<T> sumLast(const Tensor<T>& x);
// Reduces `axis` away.
template <typename T>
Tensor<T> meanAxis(const Tensor<T>& x, int axis);
// Euclidean norm over the last axis, keeping it with size 1.
template <typename T>
Tensor<T> l2NormLast(const Tensor<T>& x);

// [M,K] x [K,N] -> [M,N].
template <typename T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b);
template <typename T>
Tensor<T> transpose(const Tensor<T>& x);
template <typename T>
Tensor<T> reshape(const Tensor<T>& x, Shape shape);
// Axis defaults to the last one.
template <typename T>
Tensor<T> concat(const std::vector<Tensor<T>>& xs, int axis = -1);
template <typename T>
Tensor<T> slice(const Tensor<T>& x, int axis, std::int64_t start, std::int64_t length);
// Rows (axis 0) by index; repeats allowed.
template <typename T>
Tensor<T> gatherRows(const Tensor<T>& x, const std::vector<std::int64_t>& rows);
// Rows listed in `rows` are replaced by `row` ([D]); the rest pass through.
template <typename T>
Tensor<T> replaceRows(const Tensor<T>& x, const std::vector<std::int64_t>& rows,
                      const Tensor<T>& row);
// Flat gather into a 1-D tensor; index -1 yields the constant `fill`.
template <typename T>
Tensor<T> take(const Tensor<T>& x, const std::vector<std::int64_t>& flatIndices, T fill);
// Positions with mask != 0 are set to `value` (no gradient through them).
template <typename T>
Tensor<T> maskedFill(const Tensor<T>& x, const std::vector<std::uint8_t>& mask, T value);

template <typename T>
Tensor<T> softmax(const Tensor<T>& x);
template <typename T>
Tensor<T> logSoftmax(const Tensor<T>& x);
// Normalizes over the last axis, then applies gain and bias of that width.
template <typename T>
Tensor<T> layerNorm(const Tensor<T>& x, const Tensor<T>& gain, const Tensor<T>& bias,
                    double eps = 1e-5);

struct Conv1dParams {
  std::int64_t kernel = 1;
  std::int64_t stride = 1;
  std::int64_t padLeft = 0;
  std::int64_t padRight = 0;
};

// Time-major 1-D convolution. x: [L, Cin]; weight: [kernel*Cin, Cout] laid
// out as (tap, in-channel); bias: [Cout]. Output [L', Cout] with
// L' = floor((L + padLeft + padRight - kernel) / stride) + 1.
template <typename T>
Tensor<T> conv1d(const Tensor<T>& x, const Tensor<T>& weight, const Tensor<T>& bias,
                 const Conv1dParams& p);

struct Conv2dParams {
  std::int64_t kernelH = 3;
  std::int64_t kernelW = 3;
  std::int64_t stride = 1;
};

// Channel-last valid 2-D convolution. x: [N, H, W, Cin]; weight:
// [kernelH*kernelW*Cin, Cout]; bias: [Cout]. Output [N, H', W', Cout].
template <typename T>
Tensor<T> conv2d(const Tensor<T>& x, const Tensor<T>& weight, const Tensor<T>& bias,
                 const Conv2dParams& p);

// x @ weight + bias, weight [Din, Dout], bias [Dout].
template <typename T>
Tensor<T> linear(const Tensor<T>& x, const Tensor<T>& weight, const Tensor<T>& bias) {
  return add(matmul(x, weight), bias);
}

} // namespace avw2::ad
