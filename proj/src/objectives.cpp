#include "avw2/objectives.h"

#include <cmath>

namespace avw2 {

void LossConfig::validate() const {
  if (!(temperature > 0.0) || !std::isfinite(temperature)) {
    fail(ErrorKind::Domain, "loss: temperature must be positive and finite");
  }
  if (!(lambda >= 0.0)) {
    fail(ErrorKind::Domain, "loss: lambda must be non-negative");
  }
  if (negatives < 1) {
    fail(ErrorKind::Domain, "loss: need at least one negative per position");
  }
}

const char* batchKindName(BatchKind kind) {
  return kind == BatchKind::AudioVisual ? "audio-visual" : "audio-only";
}

NegativeSet sampleNegatives(const std::vector<std::int64_t>& masked, int k, std::uint64_t seed) {
  if (masked.size() < 2) {
    fail(ErrorKind::Domain, "sample_negatives: need at least 2 masked positions, got " +
                                std::to_string(masked.size()));
  }
  if (k < 1) {
    fail(ErrorKind::Domain, "sample_negatives: K must be positive");
  }
  Rng rng(seed);
  NegativeSet negs;
  negs.positions = masked;
  const std::uint64_t others = masked.size() - 1;
  for (std::size_t i = 0; i < masked.size(); ++i) {
    std::vector<std::int64_t> src(k);
    for (auto& s : src) {
      std::uint64_t j = rng.below(others);
      if (j >= i) {
        ++j;
      }
      s = masked[j];
    }
    negs.sources.push_back(std::move(src));
  }
  return negs;
}

double cosineSim(std::span<const double> u, std::span<const double> v) {
  if (u.size() != v.size()) {
    fail(ErrorKind::Shape, "cosine_sim: lengths " + std::to_string(u.size()) + " and " +
                               std::to_string(v.size()));
  }
  double uv = 0, uu = 0, vv = 0;
  for (std::size_t i = 0; i < u.size(); ++i) {
    uv += u[i] * v[i];
    uu += u[i] * u[i];
    vv += v[i] * v[i];
  }
  if (uu == 0.0 || vv == 0.0) {
    fail(ErrorKind::Domain, "cosine_sim: zero vector");
  }
  return uv / (std::sqrt(uu) * std::sqrt(vv));
}

template <typename T>
Tensor<T> normalizeRows(const Tensor<T>& x) {
  const auto norms = ad::l2NormLast(x);
  for (auto n : norms.data()) {
    if (n == T(0)) {
      fail(ErrorKind::Domain, "contrastive loss: zero-norm vector");
    }
  }
  return ad::div(x, norms);
}

template <typename T>
Tensor<T> infoNce(const Tensor<T>& pred, const Tensor<T>& pos, const Tensor<T>& negatives,
                  double kappa) {
  if (!(kappa > 0.0)) {
    fail(ErrorKind::Domain, "info_nce: temperature must be positive");
  }
  if (pred.rank() != 1 || pos.shape() != pred.shape() || negatives.rank() != 2 ||
      negatives.dim(1) != pred.dim(0)) {
    fail(ErrorKind::Shape, "info_nce: pred " + ad::shapeString(pred.shape()) + ", pos " +
                               ad::shapeString(pos.shape()) + ", negatives " +
                               ad::shapeString(negatives.shape()));
  }
  const std::int64_t d = pred.dim(0);
  const auto cands = normalizeRows(ad::concat<T>({ad::reshape(pos, {1, d}), negatives}, 0));
  const auto p = normalizeRows(ad::reshape(pred, {1, d}));
  const auto logits = ad::scale(ad::reshape(ad::matmul(cands, ad::transpose(p)), {1, cands.dim(0)}),
                                1.0 / kappa);
  return ad::neg(ad::sum(ad::slice(ad::logSoftmax(logits), -1, 0, 1)));
}

template <typename T>
Tensor<T> maskedContrastive(const Tensor<T>& pred, const Tensor<T>& targets, const NegativeSet& negs,
                            double kappa, const Tensor<T>& negativeSource) {
  if (!(kappa > 0.0)) {
    fail(ErrorKind::Domain, "contrastive loss: temperature must be positive");
  }
  const Tensor<T>& negSrc = negativeSource.defined() ? negativeSource : targets;
  if (pred.rank() != 2 || targets.rank() != 2 || pred.shape() != targets.shape() ||
      negSrc.shape() != targets.shape()) {
    fail(ErrorKind::Shape, "contrastive loss: prediction " + ad::shapeString(pred.shape()) +
                               " and targets " + ad::shapeString(targets.shape()) +
                               " must be aligned [frames, dim]");
  }
  const std::size_t n = negs.positions.size();
  const int k = negs.k();
  if (n < 2 || k < 1 || negs.sources.size() != n) {
    fail(ErrorKind::Domain, "contrastive loss: need at least 2 masked positions with negatives");
  }
  std::vector<std::int64_t> predRep, negRows;
  for (std::size_t i = 0; i < n; ++i) {
    for (int j = 0; j < k; ++j) {
      predRep.push_back(static_cast<std::int64_t>(i));
      negRows.push_back(negs.sources[i][j]);
    }
  }
  const auto p = normalizeRows(ad::gatherRows(pred, negs.positions));
  const auto pos = normalizeRows(ad::gatherRows(targets, negs.positions));
  const auto neg = normalizeRows(ad::gatherRows(negSrc, negRows));
  const auto ni = static_cast<std::int64_t>(n);
  const auto posLogits = ad::reshape(ad::sumLast(ad::mul(p, pos)), {ni, 1});
  const auto negLogits = ad::reshape(ad::sumLast(ad::mul(ad::gatherRows(p, predRep), neg)), {ni, k});
  const auto logits = ad::scale(ad::concat<T>({posLogits, negLogits}, -1), 1.0 / kappa);
  return ad::neg(ad::mean(ad::slice(ad::logSoftmax(logits), -1, 0, 1)));
}

namespace {
void checkMask(const char* op, const MaskSpec& mask, const NegativeSet& negs) {
  if (mask.indices.size() < 2) {
    fail(ErrorKind::Domain, std::string(op) + ": need at least 2 masked positions, got " +
                                std::to_string(mask.indices.size()));
  }
  if (negs.positions != mask.indices) {
    fail(ErrorKind::Domain, std::string(op) + ": negative set was drawn for a different mask");
  }
}
} // namespace

template <typename T>
Tensor<T> lossC1(const Tensor<T>& cF, const Tensor<T>& zF, const MaskSpec& mask,
                 const NegativeSet& negs, double kappa, const Tensor<T>& negativeSource) {
  checkMask("loss_c1", mask, negs);
  return maskedContrastive(cF, zF, negs, kappa, negativeSource);
}

template <typename T>
InterChannelLoss<T> lossC2(const Tensor<T>& cF, const std::vector<Tensor<T>>& zA,
                           const std::vector<bool>& active, const MaskSpec& mask,
                           const std::vector<NegativeSet>& negs, double kappa) {
  if (zA.size() != active.size() || negs.size() != zA.size()) {
    fail(ErrorKind::Shape, "loss_c2: channel lists disagree in length");
  }
  InterChannelLoss<T> out;
  out.perChannel.resize(zA.size());
  for (std::size_t i = 0; i < zA.size(); ++i) {
    if (!active[i]) {
      continue;
    }
    checkMask("loss_c2", mask, negs[i]);
    out.perChannel[i] = maskedContrastive(cF, zA[i], negs[i], kappa);
    out.total = out.total.defined() ? ad::add(out.total, out.perChannel[i]) : out.perChannel[i];
  }
  if (!out.total.defined()) {
    fail(ErrorKind::Domain, "loss_c2: no active channels");
  }
  return out;
}

template <typename T>
Tensor<T> lossSa(const Tensor<T>& cSa, const Tensor<T>& zSa, const MaskSpec& mask,
                 const NegativeSet& negs, double kappa) {
  checkMask("loss_sa", mask, negs);
  return maskedContrastive(cSa, zSa, negs, kappa);
}

template <typename T>
Tensor<T> totalLoss(const LossParts<T>& parts, double lambda, BatchKind kind) {
  if (kind == BatchKind::AudioOnly) {
    if (!parts.sa.defined()) {
      fail(ErrorKind::Domain, "total_loss: audio-only batch needs l_sa");
    }
    return ad::scale(parts.sa, lambda);
  }
  if (!parts.c1.defined() || !parts.c2.defined()) {
    fail(ErrorKind::Domain, "total_loss: audio-visual batch needs l_c1 and l_c2");
  }
  auto total = ad::add(parts.c1, parts.c2);
  if (parts.sa.defined()) {
    total = ad::add(total, ad::scale(parts.sa, lambda));
  }
  return total;
}

template <typename T>
std::pair<std::int64_t, std::int64_t> rankHits(const Tensor<T>& pred, const Tensor<T>& targets,
                                               const NegativeSet& negs) {
  const std::int64_t d = pred.dim(1);
  auto row = [d](const Tensor<T>& x, std::int64_t r) {
    return std::vector<double>(x.data().begin() + r * d, x.data().begin() + (r + 1) * d);
  };
  std::int64_t hits = 0;
  for (std::size_t i = 0; i < negs.positions.size(); ++i) {
    const auto p = row(pred, negs.positions[i]);
    const double pos = cosineSim(p, row(targets, negs.positions[i]));
    bool best = true;
    for (auto s : negs.sources[i]) {
      if (cosineSim(p, row(targets, s)) >= pos) {
        best = false;
        break;
      }
    }
    hits += best ? 1 : 0;
  }
  return {hits, static_cast<std::int64_t>(negs.positions.size())};
}

#define AVW2_INSTANTIATE_OBJECTIVES(T)                                                         \
  template Tensor<T> normalizeRows(const Tensor<T>&);                                          \
  template Tensor<T> infoNce(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&, double);    \
  template Tensor<T> maskedContrastive(const Tensor<T>&, const Tensor<T>&, const NegativeSet&, \
                                       double, const Tensor<T>&);                              \
  template Tensor<T> lossC1(const Tensor<T>&, const Tensor<T>&, const MaskSpec&,               \
                            const NegativeSet&, double, const Tensor<T>&);                     \
  template InterChannelLoss<T> lossC2(const Tensor<T>&, const std::vector<Tensor<T>>&,         \
                                      const std::vector<bool>&, const MaskSpec&,               \
                                      const std::vector<NegativeSet>&, double);                \
  template Tensor<T> lossSa(const Tensor<T>&, const Tensor<T>&, const MaskSpec&,               \
                            const NegativeSet&, double);                                       \
  template Tensor<T> totalLoss(const LossParts<T>&, double, BatchKind);                        \
  template std::pair<std::int64_t, std::int64_t> rankHits(const Tensor<T>&, const Tensor<T>&,  \
                                                          const NegativeSet&);

AVW2_INSTANTIATE_OBJECTIVES(float)
AVW2_INSTANTIATE_OBJECTIVES(double)

} // namespace avw2
