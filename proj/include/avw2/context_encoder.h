#pragma once

#include <cstdint>
#include <vector>

#include "avw2/nn.h"

namespace avw2 {

struct TransformerConfig {
  int layers = 4;
  int modelDim = 64;
  int heads = 4;
  int ffnDim = 256;
  double dropout = 0.0;

  void validate() const;
};

// Sinusoidal absolute position encoding, [frames, dim].
template <typename T>
Tensor<T> positionEncoding(std::int64_t frames, std::int64_t dim);

// Attention probabilities captured during a forward pass: [layer][head] is a
// frames x frames row-stochastic matrix stored row-major.
struct AttentionTrace {
  std::vector<std::vector<std::vector<double>>> probs;
};

// Linear projection of fused features to model width plus a pre-norm
// transformer stack.
template <typename T>
class ContextEncoder {
 public:
  ContextEncoder() = default;
  ContextEncoder(std::int64_t fusedWidth, const TransformerConfig& config, Rng& rng);

  // [frames, fusedWidth] -> [frames, modelDim], position encoding added.
  Tensor<T> project(const Tensor<T>& features) const;
  // Pre-norm blocks of multi-head self-attention and feed-forward, then a
  // final layer norm. Dropout is applied only when `dropoutSeed` is non-zero
  // and the configured rate is positive.
  Tensor<T> forward(const Tensor<T>& x, AttentionTrace* trace = nullptr,
                    std::uint64_t dropoutSeed = 0) const;
  Tensor<T> encode(const Tensor<T>& features, std::uint64_t dropoutSeed = 0) const {
    return forward(project(features), nullptr, dropoutSeed);
  }

  std::int64_t fusedWidth() const {
    return input_.inputDim();
  }
  const TransformerConfig& config() const {
    return config_;
  }

  template <typename F>
  void visit(const std::string& prefix, F&& f) const {
    input_.visit(prefix + ".input", f);
    for (std::size_t i = 0; i < blocks_.size(); ++i) {
      const auto& b = blocks_[i];
      const std::string p = prefix + ".layer" + std::to_string(i);
      b.attnNorm.visit(p + ".attn_norm", f);
      b.query.visit(p + ".query", f);
      b.key.visit(p + ".key", f);
      b.value.visit(p + ".value", f);
      b.out.visit(p + ".out", f);
      b.ffnNorm.visit(p + ".ffn_norm", f);
      b.ffnIn.visit(p + ".ffn_in", f);
      b.ffnOut.visit(p + ".ffn_out", f);
    }
    finalNorm_.visit(prefix + ".final_norm", f);
  }

 private:
  struct Block {
    LayerNorm<T> attnNorm;
    Linear<T> query, key, value, out;
    LayerNorm<T> ffnNorm;
    Linear<T> ffnIn, ffnOut;
  };

  Tensor<T> attention(const Block& b, const Tensor<T>& x, std::vector<std::vector<double>>* probs) const;
  Tensor<T> dropout(const Tensor<T>& x, std::uint64_t seed) const;

  TransformerConfig config_;
  Linear<T> input_;
  std::vector<Block> blocks_;
  LayerNorm<T> finalNorm_;
};

} // namespace avw2
