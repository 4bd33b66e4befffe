#pragma once

#include <cstdint>
#include <optional>
#include <span>
#include <vector>

#include "avw2/fusion_mask.h"
#include "avw2/nn.h"

namespace avw2 {

struct LossConfig {
  double temperature = 0.1; // kappa
  double lambda = 1.0;      // weight of the single-channel term
  int negatives = 10;       // K per masked position
  // Targets are detached from the graph when set.
  bool stopTargetGradient = false;
  // Draw the intra-channel negatives from the context output instead of z^f.
  bool contextNegatives = false;

  void validate() const;
};

// For each masked position, K source indices drawn uniformly with replacement
// from the other masked positions.
struct NegativeSet {
  std::vector<std::int64_t> positions;
  std::vector<std::vector<std::int64_t>> sources;

  int k() const {
    return sources.empty() ? 0 : static_cast<int>(sources.front().size());
  }
};

NegativeSet sampleNegatives(const std::vector<std::int64_t>& masked, int k, std::uint64_t seed);

// u.v / (|u||v|); domain error for a zero vector.
double cosineSim(std::span<const double> u, std::span<const double> v);

// Rows scaled to unit length; domain error on a zero row.
template <typename T>
Tensor<T> normalizeRows(const Tensor<T>& x);

// -log softmax over {pos} U negatives of cos(pred, .)/kappa, taken at pos.
// pred, pos: [D]; negatives: [K, D].
template <typename T>
Tensor<T> infoNce(const Tensor<T>& pred, const Tensor<T>& pos, const Tensor<T>& negatives,
                  double kappa);

// Mean over masked positions t of info_nce(pred[t], targets[t], negatives),
// negatives taken from `negativeSource` rows (defaults to `targets`).
template <typename T>
Tensor<T> maskedContrastive(const Tensor<T>& pred, const Tensor<T>& targets, const NegativeSet& negs,
                            double kappa, const Tensor<T>& negativeSource = {});

// Intra-channel term: context prediction against the fused features.
template <typename T>
Tensor<T> lossC1(const Tensor<T>& cF, const Tensor<T>& zF, const MaskSpec& mask,
                 const NegativeSet& negs, double kappa, const Tensor<T>& negativeSource = {});

template <typename T>
struct InterChannelLoss {
  Tensor<T> total;
  // Undefined for inactive channels.
  std::vector<Tensor<T>> perChannel;
};

// Inter-channel term: sum over active channels of the per-channel masked
// contrastive loss against that channel's encoder features.
template <typename T>
InterChannelLoss<T> lossC2(const Tensor<T>& cF, const std::vector<Tensor<T>>& zA,
                           const std::vector<bool>& active, const MaskSpec& mask,
                           const std::vector<NegativeSet>& negs, double kappa);

// Single-channel term on audio-only data.
template <typename T>
Tensor<T> lossSa(const Tensor<T>& cSa, const Tensor<T>& zSa, const MaskSpec& mask,
                 const NegativeSet& negs, double kappa);

enum class BatchKind { AudioVisual, AudioOnly };

const char* batchKindName(BatchKind kind);

template <typename T>
struct LossParts {
  Tensor<T> c1;
  Tensor<T> c2;
  Tensor<T> sa;
};

// Audio-visual batch: c1 + c2 + lambda * sa (sa optional). Audio-only batch:
// lambda * sa.
template <typename T>
Tensor<T> totalLoss(const LossParts<T>& parts, double lambda, BatchKind kind);

struct LossBreakdown {
  double c1 = 0.0;
  double c2 = 0.0;
  double sa = 0.0;
  double total = 0.0;
  std::vector<double> perChannel;
  std::int64_t maskedCount = 0;
};

// Fraction of masked positions whose prediction is strictly closer (cosine)
// to its own target than to every sampled negative.
template <typename T>
std::pair<std::int64_t, std::int64_t> rankHits(const Tensor<T>& pred, const Tensor<T>& targets,
                                               const NegativeSet& negs);

} // namespace avw2
