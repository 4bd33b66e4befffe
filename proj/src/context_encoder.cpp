#include "avw2/context_encoder.h"

#include <cmath>

namespace avw2 {

void TransformerConfig::validate() const {
  if (layers < 1 || modelDim < 1 || heads < 1 || ffnDim < 1) {
    fail(ErrorKind::Domain, "transformer: sizes must be positive");
  }
  if (modelDim % heads != 0) {
    fail(ErrorKind::Domain, "transformer: model width " + std::to_string(modelDim) +
                                " is not divisible by " + std::to_string(heads) + " heads");
  }
  if (!(dropout >= 0.0 && dropout < 1.0)) {
    fail(ErrorKind::Domain, "transformer: dropout must lie in [0, 1)");
  }
}

template <typename T>
Tensor<T> positionEncoding(std::int64_t frames, std::int64_t dim) {
  std::vector<T> pe(frames * dim);
  for (std::int64_t t = 0; t < frames; ++t) {
    for (std::int64_t i = 0; i < dim; ++i) {
      const double rate = std::pow(10000.0, -static_cast<double>(2 * (i / 2)) / dim);
      const double a = t * rate;
      pe[t * dim + i] = static_cast<T>(i % 2 == 0 ? std::sin(a) : std::cos(a));
    }
  }
  return Tensor<T>::constant({frames, dim}, std::move(pe));
}

template <typename T>
ContextEncoder<T>::ContextEncoder(std::int64_t fusedWidth, const TransformerConfig& config, Rng& rng)
    : config_(config) {
  config_.validate();
  const std::int64_t d = config_.modelDim;
  input_ = Linear<T>(fusedWidth, d, rng);
  for (int i = 0; i < config_.layers; ++i) {
    Block b;
    b.attnNorm = LayerNorm<T>(d);
    b.query = Linear<T>(d, d, rng);
    b.key = Linear<T>(d, d, rng);
    b.value = Linear<T>(d, d, rng);
    b.out = Linear<T>(d, d, rng);
    b.ffnNorm = LayerNorm<T>(d);
    b.ffnIn = Linear<T>(d, config_.ffnDim, rng);
    b.ffnOut = Linear<T>(config_.ffnDim, d, rng);
    blocks_.push_back(std::move(b));
  }
  finalNorm_ = LayerNorm<T>(d);
}

template <typename T>
Tensor<T> ContextEncoder<T>::project(const Tensor<T>& features) const {
  if (features.rank() != 2) {
    fail(ErrorKind::Shape, "project: features must be [frames, width], got " +
                               ad::shapeString(features.shape()));
  }
  if (features.dim(1) != fusedWidth()) {
    fail(ErrorKind::Shape, "project: unknown input width " + std::to_string(features.dim(1)) +
                               " (expected fused width " + std::to_string(fusedWidth()) +
                               "; route single-audio features through fuse)");
  }
  return ad::add(input_(features), positionEncoding<T>(features.dim(0), config_.modelDim));
}

template <typename T>
Tensor<T> ContextEncoder<T>::dropout(const Tensor<T>& x, std::uint64_t seed) const {
  if (seed == 0 || config_.dropout <= 0.0) {
    return x;
  }
  Rng rng(seed);
  const T keep = static_cast<T>(1.0 / (1.0 - config_.dropout));
  std::vector<T> mask(x.numel());
  for (auto& m : mask) {
    m = rng.bernoulli(config_.dropout) ? T(0) : keep;
  }
  return ad::mul(x, Tensor<T>::constant(x.shape(), std::move(mask)));
}

template <typename T>
Tensor<T> ContextEncoder<T>::attention(const Block& b, const Tensor<T>& x,
                                       std::vector<std::vector<double>>* probs) const {
  const std::int64_t dh = config_.modelDim / config_.heads;
  const double scaleFactor = 1.0 / std::sqrt(static_cast<double>(dh));
  const Tensor<T> q = b.query(x);
  const Tensor<T> k = b.key(x);
  const Tensor<T> v = b.value(x);
  std::vector<Tensor<T>> heads;
  for (int h = 0; h < config_.heads; ++h) {
    const auto qh = ad::slice(q, -1, h * dh, dh);
    const auto kh = ad::slice(k, -1, h * dh, dh);
    const auto vh = ad::slice(v, -1, h * dh, dh);
    const auto p = ad::softmax(ad::scale(ad::matmul(qh, ad::transpose(kh)), scaleFactor));
    if (probs) {
      probs->emplace_back(p.data().begin(), p.data().end());
    }
    heads.push_back(ad::matmul(p, vh));
  }
  return b.out(ad::concat(heads, -1));
}

template <typename T>
Tensor<T> ContextEncoder<T>::forward(const Tensor<T>& input, AttentionTrace* trace,
                                     std::uint64_t dropoutSeed) const {
  if (input.rank() != 2 || input.dim(1) != config_.modelDim) {
    fail(ErrorKind::Shape, "transformer: expected [frames, " + std::to_string(config_.modelDim) +
                               "], got " + ad::shapeString(input.shape()));
  }
  for (auto v : input.data()) {
    if (!std::isfinite(v)) {
      fail(ErrorKind::Numeric, "transformer: non-finite value entering layer 0");
    }
  }
  if (trace) {
    trace->probs.assign(blocks_.size(), {});
  }
  Tensor<T> x = input;
  for (std::size_t i = 0; i < blocks_.size(); ++i) {
    const auto& b = blocks_[i];
    try {
      const std::uint64_t s = dropoutSeed ? deriveSeed(dropoutSeed, i) : 0;
      x = ad::add(x, dropout(attention(b, b.attnNorm(x), trace ? &trace->probs[i] : nullptr),
                             s ? deriveSeed(s, 1) : 0));
      const auto hidden = ad::gelu(b.ffnIn(b.ffnNorm(x)));
      x = ad::add(x, dropout(b.ffnOut(hidden), s ? deriveSeed(s, 2) : 0));
    } catch (const Error& e) {
      if (e.kind() != ErrorKind::Numeric) {
        throw;
      }
      fail(ErrorKind::Numeric, "transformer layer " + std::to_string(i) + ": " + e.what());
    }
  }
  return finalNorm_(x);
}

template Tensor<float> positionEncoding(std::int64_t, std::int64_t);
template Tensor<double> positionEncoding(std::int64_t, std::int64_t);
template class ContextEncoder<float>;
template class ContextEncoder<double>;

} // namespace avw2
