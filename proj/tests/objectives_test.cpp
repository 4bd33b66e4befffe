#include <gtest/gtest.h>

#include <cmath>
#include <numeric>

#include "avw2/objectives.h"
#include "support/grad_suite.h"
#include "support/oracles.h"

using namespace avw2;
using check::TensorD;

namespace {

constexpr std::int64_t kT = 8;
constexpr std::int64_t kD = 5;

TensorD rowsOf(std::vector<std::vector<double>> rows) {
  std::vector<double> flat;
  for (const auto& r : rows) {
    flat.insert(flat.end(), r.begin(), r.end());
  }
  return TensorD::constant({static_cast<std::int64_t>(rows.size()), static_cast<std::int64_t>(rows[0].size())},
                           flat);
}

oracle::Matrix asMatrix(const TensorD& t) {
  return oracle::rows(t.data(), t.dim(-1));
}

} // namespace

TEST(Cosine, Examples) {
  const std::vector<double> e1{1, 0}, e2{0, 1}, two{2, 0}, diag{1, 1};
  EXPECT_DOUBLE_EQ(cosineSim(e1, e2), 0.0);
  EXPECT_DOUBLE_EQ(cosineSim(two, e1), 1.0);
  EXPECT_NEAR(cosineSim(diag, e1), 1.0 / std::sqrt(2.0), 1e-12);
  EXPECT_THROW(cosineSim(std::vector<double>{0, 0}, e1), Error);
}

TEST(InfoNce, UniformSimilarityIsLogKPlusOne) {
  for (int k : {1, 3, 10}) {
    const auto pred = TensorD::constant({3}, {1, 0, 0});
    const auto pos = TensorD::constant({3}, {0, 1, 0});
    std::vector<std::vector<double>> negs;
    for (int i = 0; i < k; ++i) {
      negs.push_back({0, (i % 2) ? 1.0 : -1.0, 1});
    }
    // Every candidate is orthogonal to pred.
    EXPECT_NEAR(infoNce(pred, pos, rowsOf(negs), 0.1).item(), std::log(k + 1.0), 1e-6);
  }
}

TEST(InfoNce, ClosedFormKOne) {
  // ln(1 + e^-2), evaluated independently to 17 digits.
  constexpr double kExpected = 0.12692801104297263;
  const auto pred = TensorD::constant({2}, {1, 0});
  const auto pos = TensorD::constant({2}, {3, 0});
  const auto neg = TensorD::constant({1, 2}, {-2, 0});
  EXPECT_NEAR(infoNce(pred, pos, neg, 1.0).item(), kExpected, 1e-6);
}

TEST(InfoNce, LowTemperatureLimit) {
  const auto pred = TensorD::constant({2}, {1, 0.1});
  const auto pos = TensorD::constant({2}, {1, 0});
  const auto negs = rowsOf({{0, 1}, {-1, 0.5}});
  EXPECT_LT(infoNce(pred, pos, negs, 0.01).item(), 1e-3);
}

TEST(InfoNce, NonNegativeAndScaleInvariant) {
  Rng rng(3);
  for (int i = 0; i < 20; ++i) {
    auto pred = check::randomConst({kD}, rng);
    auto pos = check::randomConst({kD}, rng);
    auto negs = check::randomConst({4, kD}, rng);
    const double base = infoNce(pred, pos, negs, 0.1).item();
    EXPECT_GE(base, 0.0);
    EXPECT_NEAR(infoNce(pred, ad::scale(pos, 7.0), negs, 0.1).item(), base, 1e-5);
    auto scaledNegs = negs.data();
    for (std::int64_t d = 0; d < kD; ++d) {
      scaledNegs[2 * kD + d] *= 7.0;
    }
    EXPECT_NEAR(infoNce(pred, pos, TensorD::constant({4, kD}, scaledNegs), 0.1).item(), base, 1e-5);
  }
}

TEST(InfoNce, ZeroCandidateRejected) {
  EXPECT_THROW(infoNce(TensorD::constant({2}, {1, 0}), TensorD::constant({2}, {0, 0}),
                       TensorD::constant({1, 2}, {1, 1}), 1.0),
               Error);
}

TEST(Negatives, TwoPositionsForcedChoice) {
  const auto n = sampleNegatives({3, 9}, 1, 5);
  EXPECT_EQ(n.sources[0], (std::vector<std::int64_t>{9}));
  EXPECT_EQ(n.sources[1], (std::vector<std::int64_t>{3}));
  EXPECT_THROW(sampleNegatives({4}, 1, 5), Error);
}

TEST(Negatives, SeededAndNeverSelf) {
  const std::vector<std::int64_t> masked{1, 2, 3, 7, 8, 9};
  const auto a = sampleNegatives(masked, 10, 11);
  const auto b = sampleNegatives(masked, 10, 11);
  EXPECT_EQ(a.sources, b.sources);
  for (std::size_t i = 0; i < masked.size(); ++i) {
    for (auto s : a.sources[i]) {
      EXPECT_NE(s, masked[i]);
      EXPECT_TRUE(std::find(masked.begin(), masked.end(), s) != masked.end());
    }
  }
}

TEST(Negatives, UniformChiSquare) {
  // Position 0 of five masked positions draws from the other four.
  const std::vector<std::int64_t> masked{0, 1, 2, 3, 4};
  std::vector<double> counts(5, 0.0);
  constexpr int kDraws = 10000;
  for (int i = 0; i < kDraws; ++i) {
    counts[sampleNegatives(masked, 1, deriveSeed(21, i)).sources[0][0]] += 1;
  }
  EXPECT_EQ(counts[0], 0.0);
  double chi2 = 0.0;
  for (int j = 1; j < 5; ++j) {
    const double e = kDraws / 4.0;
    chi2 += (counts[j] - e) * (counts[j] - e) / e;
  }
  // Critical value of chi-square with 3 degrees of freedom at 0.01.
  EXPECT_LT(chi2, 11.345);
}

TEST(LossC1, PerfectPredictionNearZero) {
  const auto z = rowsOf({{1, 0, 0}, {0, 1, 0}, {0, 0, 1}, {1, 1, 0}, {-1, 0, 1}});
  const auto mask = maskFromStarts(5, 5, {0});
  const auto negs = sampleNegatives(mask.indices, 4, 1);
  EXPECT_LT(lossC1(z, z, mask, negs, 0.01).item(), 1e-6);
}

TEST(LossC1, SingleMaskedPositionRejected) {
  Rng rng(1);
  const auto z = check::randomConst({kT, kD}, rng);
  const auto mask = maskFromStarts(kT, 1, {2});
  EXPECT_THROW(lossC1(z, z, mask, sampleNegatives(mask.indices, 1, 1), 0.1), Error);
}

TEST(LossC1, MatchesBruteForce) {
  for (std::uint64_t s = 0; s < 20; ++s) {
    Rng rng(s);
    const auto c = check::randomConst({kT, kD}, rng);
    const auto z = check::randomConst({kT, kD}, rng);
    const auto mask = check::detail::randomMask(kT, rng);
    const auto negs = sampleNegatives(mask.indices, 4, s);
    const double got = lossC1(c, z, mask, negs, 0.1).item();
    const double want = static_cast<double>(
        oracle::maskedLoss(asMatrix(c), asMatrix(z), asMatrix(z), negs.positions, negs.sources, 0.1L));
    EXPECT_NEAR(got, want, 1e-6);
    // Negatives drawn from the context output instead.
    const double alt = lossC1(c, z, mask, negs, 0.1, c).item();
    EXPECT_NEAR(alt, static_cast<double>(oracle::maskedLoss(asMatrix(c), asMatrix(z), asMatrix(c), negs.positions,
                                                            negs.sources, 0.1L)),
                1e-6);
  }
}

TEST(LossC2, MatchesBruteForceTwoChannels) {
  for (std::uint64_t s = 0; s < 20; ++s) {
    Rng rng(100 + s);
    const auto c = check::randomConst({kT, kD}, rng);
    const std::vector<TensorD> za{check::randomConst({kT, kD}, rng), check::randomConst({kT, kD}, rng)};
    const auto mask = check::detail::randomMask(kT, rng);
    const std::vector<NegativeSet> negs{sampleNegatives(mask.indices, 3, s), sampleNegatives(mask.indices, 3, s + 50)};
    const auto out = lossC2(c, za, {true, true}, mask, negs, 0.1);
    long double want = 0;
    for (int i = 0; i < 2; ++i) {
      const auto term = oracle::maskedLoss(asMatrix(c), asMatrix(za[i]), asMatrix(za[i]), negs[i].positions,
                                           negs[i].sources, 0.1L);
      EXPECT_NEAR(out.perChannel[i].item(), static_cast<double>(term), 1e-6);
      want += term;
    }
    EXPECT_NEAR(out.total.item(), static_cast<double>(want), 1e-6);
  }
}

TEST(LossC2, IdenticalChannelsScaleAndPermute) {
  Rng rng(7);
  const auto c = check::randomConst({kT, kD}, rng);
  const auto z = check::randomConst({kT, kD}, rng);
  const auto mask = maskFromStarts(kT, 3, {0, 4});
  const auto n = sampleNegatives(mask.indices, 5, 3);
  const double single = lossC2(c, {z}, {true}, mask, {n}, 0.1).total.item();
  const std::vector<TensorD> six(6, z);
  const std::vector<NegativeSet> sixNegs(6, n);
  const double all = lossC2(c, six, std::vector<bool>(6, true), mask, sixNegs, 0.1).total.item();
  EXPECT_NEAR(all, 6.0 * single, 1e-5);

  // Identical content with per-channel negatives, permuted.
  std::vector<NegativeSet> negs;
  for (int i = 0; i < 6; ++i) {
    negs.push_back(sampleNegatives(mask.indices, 5, 40 + i));
  }
  std::vector<NegativeSet> rev(negs.rbegin(), negs.rend());
  const double a = lossC2(c, six, std::vector<bool>(6, true), mask, negs, 0.1).total.item();
  const double b = lossC2(c, six, std::vector<bool>(6, true), mask, rev, 0.1).total.item();
  EXPECT_NEAR(a, b, 1e-6);
}

TEST(LossC2, DroppedChannelsZeroLossAndGradient) {
  Rng rng(8);
  auto c = check::randomParam({kT, kD}, rng);
  auto z0 = check::randomParam({kT, kD}, rng);
  auto z1 = check::randomParam({kT, kD}, rng);
  const auto mask = maskFromStarts(kT, 3, {1, 5});
  const std::vector<NegativeSet> negs{sampleNegatives(mask.indices, 3, 1), sampleNegatives(mask.indices, 3, 2)};
  const auto out = lossC2(c, {z0, z1}, {true, false}, mask, negs, 0.1);
  EXPECT_FALSE(out.perChannel[1].defined());
  const double only0 = lossC2(c, {z0}, {true}, mask, {negs[0]}, 0.1).total.item();
  EXPECT_EQ(out.total.item(), only0);
  const auto g = ad::backward(out.total);
  for (double v : g.of(z1)) {
    EXPECT_EQ(v, 0.0);
  }
  EXPECT_THROW(lossC2(c, {z0, z1}, {false, false}, mask, negs, 0.1), Error);
}

TEST(LossSa, MatchesBruteForceAndLossC1) {
  for (std::uint64_t s = 0; s < 20; ++s) {
    Rng rng(200 + s);
    const auto c = check::randomConst({kT, kD}, rng);
    const auto z = check::randomConst({kT, kD}, rng);
    const auto mask = check::detail::randomMask(kT, rng);
    const auto negs = sampleNegatives(mask.indices, 4, s);
    const double got = lossSa(c, z, mask, negs, 0.1).item();
    EXPECT_EQ(got, lossC1(c, z, mask, negs, 0.1).item());
    EXPECT_NEAR(got,
                static_cast<double>(oracle::maskedLoss(asMatrix(c), asMatrix(z), asMatrix(z), negs.positions,
                                                       negs.sources, 0.1L)),
                1e-6);
  }
}

TEST(LossSa, EmptyMaskRejected) {
  Rng rng(1);
  const auto z = check::randomConst({kT, kD}, rng);
  EXPECT_THROW(lossSa(z, z, MaskSpec{kT}, NegativeSet{}, 0.1), Error);
}

TEST(TotalLoss, Arithmetic) {
  const LossParts<double> parts{TensorD::scalar(0.5), TensorD::scalar(1.5), TensorD::scalar(2.0)};
  EXPECT_DOUBLE_EQ(totalLoss(parts, 1.0, BatchKind::AudioVisual).item(), 4.0);
  EXPECT_DOUBLE_EQ(totalLoss(parts, 0.0, BatchKind::AudioVisual).item(), 2.0);
  EXPECT_DOUBLE_EQ(totalLoss(parts, 0.5, BatchKind::AudioOnly).item(), 1.0);
  const LossParts<double> noSa{TensorD::scalar(0.5), TensorD::scalar(1.5), {}};
  EXPECT_DOUBLE_EQ(totalLoss(noSa, 1.0, BatchKind::AudioVisual).item(), 2.0);
  EXPECT_THROW(totalLoss(noSa, 1.0, BatchKind::AudioOnly), Error);
  EXPECT_THROW(totalLoss(LossParts<double>{{}, TensorD::scalar(1.0), {}}, 1.0, BatchKind::AudioVisual), Error);
}

TEST(TotalLoss, MixedBatchEqualsSubBatches) {
  Rng rng(9);
  const auto mask = maskFromStarts(kT, 3, {0, 5});
  const auto cAv = check::randomConst({kT, kD}, rng);
  const auto zf = check::randomConst({kT, kD}, rng);
  const auto za = check::randomConst({kT, kD}, rng);
  const auto cSa = check::randomConst({kT, kD}, rng);
  const auto zSa = check::randomConst({kT, kD}, rng);
  const auto n = sampleNegatives(mask.indices, 4, 2);
  const auto c1 = lossC1(cAv, zf, mask, n, 0.1);
  const auto c2 = lossC2(cAv, {za}, {true}, mask, {n}, 0.1).total;
  const auto sa = lossSa(cSa, zSa, mask, n, 0.1);
  const double lambda = 0.7;
  const double mixed = totalLoss<double>({c1, c2, sa}, lambda, BatchKind::AudioVisual).item();
  const double av = totalLoss<double>({c1, c2, {}}, lambda, BatchKind::AudioVisual).item();
  const double audio = totalLoss<double>({{}, {}, sa}, lambda, BatchKind::AudioOnly).item();
  EXPECT_NEAR(mixed, av + audio, 1e-6);
}

TEST(LossGradients, MatchFiniteDifferences) {
  for (const auto& r : check::runGradSuite(check::lossCases(), 20, 2)) {
    if (r.name == "ctc") {
      continue; // covered in ctc_test
    }
    EXPECT_LT(r.worst, 1e-4) << r.name;
  }
}

TEST(RankHits, PerfectCopy) {
  Rng rng(4);
  const auto z = check::randomConst({10, 6}, rng);
  const auto mask = maskFromStarts(10, 3, {1, 6});
  const auto negs = sampleNegatives(mask.indices, 10, 5);
  const auto [hits, total] = rankHits(z, z, negs);
  EXPECT_EQ(hits, total);
  EXPECT_EQ(total, static_cast<std::int64_t>(mask.indices.size()));
}
