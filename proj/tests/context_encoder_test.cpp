#include <gtest/gtest.h>

#include <cmath>

#include "avw2/context_encoder.h"
#include "support/gradcheck.h"

using namespace avw2;
using check::TensorD;

namespace {

TransformerConfig small() {
  TransformerConfig c;
  c.layers = 2;
  c.modelDim = 16;
  c.heads = 4;
  c.ffnDim = 32;
  return c;
}

ad::NamedParams<double> paramsOf(const ContextEncoder<double>& enc) {
  ad::NamedParams<double> out;
  enc.visit("context", [&](const std::string& name, const TensorD& t) { out.emplace(name, t); });
  return out;
}

} // namespace

TEST(Project, ZeroInputIsBiasPlusPosition) {
  Rng rng(1);
  ContextEncoder<double> enc(10, small(), rng);
  const auto out = enc.project(TensorD::zeros({5, 10}));
  const auto pe = positionEncoding<double>(5, 16);
  const auto params = paramsOf(enc);
  const auto& bias = params.at("context.input.bias").data();
  for (std::int64_t t = 0; t < 5; ++t) {
    for (std::int64_t d = 0; d < 16; ++d) {
      EXPECT_NEAR(out.at(t, d), bias[d] + pe.at(t, d), 1e-12);
    }
  }
}

TEST(Project, LinearPartDoubles) {
  Rng rng(2);
  ContextEncoder<double> enc(10, small(), rng);
  auto x = check::randomConst({4, 10}, rng);
  const auto base = enc.project(TensorD::zeros({4, 10}));
  const auto one = ad::sub(enc.project(x), base);
  const auto two = ad::sub(enc.project(ad::scale(x, 2.0)), base);
  for (std::size_t i = 0; i < one.data().size(); ++i) {
    EXPECT_NEAR(two.data()[i], 2.0 * one.data()[i], 1e-12);
  }
}

TEST(Project, UnknownWidthRejected) {
  Rng rng(2);
  ContextEncoder<double> enc(10, small(), rng);
  EXPECT_THROW(enc.project(TensorD::zeros({4, 11})), Error);
}

TEST(Project, Gradient) {
  Rng rng(3);
  ContextEncoder<double> enc(6, small(), rng);
  auto x = check::randomParam({4, 6}, rng);
  auto params = paramsOf(enc);
  const double err = check::gradCheck({x, params.at("context.input.weight")}, [&](const std::vector<TensorD>& v) {
    return check::probe(enc.project(v[0]), 5);
  });
  EXPECT_LT(err, 1e-4);
}

TEST(Transformer, AttentionRowsAreDistributions) {
  Rng rng(4);
  ContextEncoder<float> enc(448, TransformerConfig{}, rng);
  Rng data(5);
  std::vector<float> x(25 * 64);
  for (auto& v : x) {
    v = static_cast<float>(data.uniform(-1, 1));
  }
  AttentionTrace trace;
  const auto out = enc.forward(Tensor<float>::constant({25, 64}, x), &trace);
  EXPECT_EQ(out.shape(), (ad::Shape{25, 64}));
  ASSERT_EQ(trace.probs.size(), 4u);
  for (const auto& layer : trace.probs) {
    ASSERT_EQ(layer.size(), 4u);
    for (const auto& head : layer) {
      for (int r = 0; r < 25; ++r) {
        double s = 0.0;
        for (int c = 0; c < 25; ++c) {
          s += head[r * 25 + c];
        }
        EXPECT_NEAR(s, 1.0, 1e-5);
      }
    }
  }
}

TEST(Transformer, SingleFrameFiniteAndDeterministic) {
  Rng rng(6);
  ContextEncoder<float> enc(448, TransformerConfig{}, rng);
  const auto x = Tensor<float>::full({1, 64}, 0.3f);
  const auto a = enc.forward(x);
  const auto b = enc.forward(x);
  EXPECT_EQ(a.data(), b.data());
  for (float v : a.data()) {
    EXPECT_TRUE(std::isfinite(v));
  }
}

TEST(Transformer, DropoutZeroIsDeterministicWithSeed) {
  Rng rng(6);
  ContextEncoder<float> enc(448, TransformerConfig{}, rng);
  const auto x = Tensor<float>::full({3, 64}, 0.1f);
  EXPECT_EQ(enc.forward(x, nullptr, 123).data(), enc.forward(x).data());
}

TEST(Transformer, FullStackGradient) {
  Rng rng(7);
  ContextEncoder<double> enc(6, small(), rng);
  auto x = check::randomParam({4, 16}, rng);
  auto params = paramsOf(enc);
  std::vector<TensorD> leaves{x};
  for (const char* name : {"context.layer0.query.weight", "context.layer1.ffn_in.weight",
                           "context.layer0.attn_norm.gain", "context.final_norm.bias"}) {
    leaves.push_back(params.at(name));
  }
  const double err = check::gradCheck(leaves, [&](const std::vector<TensorD>& v) {
    return check::probe(enc.forward(v[0]), 9);
  });
  EXPECT_LT(err, 1e-4);
}

TEST(TransformerConfig, HeadsDivideWidth) {
  TransformerConfig c;
  c.heads = 5;
  EXPECT_THROW(c.validate(), Error);
}
