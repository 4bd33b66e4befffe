#include <gtest/gtest.h>

#include "avw2/data_synth.h"
#include "avw2/encoders.h"
#include "support/gradcheck.h"

using namespace avw2;
using check::TensorD;

namespace {

AudioEncoderConfig narrowAudio() {
  AudioEncoderConfig c;
  for (auto& l : c.layers) {
    l.channels = 6;
  }
  c.outputDim = 4;
  return c;
}

VisualEncoderConfig narrowVisual() {
  VisualEncoderConfig c;
  c.stemChannels = 3;
  c.hiddenChannels = 4;
  c.outputDim = 4;
  return c;
}

std::vector<float> noise(std::size_t n, std::uint64_t seed) {
  Rng rng(seed);
  std::vector<float> x(n);
  for (auto& v : x) {
    v = static_cast<float>(rng.uniform(-1, 1));
  }
  return x;
}

} // namespace

TEST(NumFrames, OneSecondIs25Frames) {
  EXPECT_EQ(numFrames(AudioEncoderConfig{}, 16000), 25);
}

TEST(NumFrames, MinimumLengthGivesOneFrame) {
  const AudioEncoderConfig cfg;
  const auto n = minSamples(cfg);
  EXPECT_EQ(numFrames(cfg, n), 1);
  try {
    numFrames(cfg, n - 1);
    FAIL();
  } catch (const Error& e) {
    EXPECT_NE(std::string(e.what()).find(std::to_string(n)), std::string::npos) << e.what();
  }
}

TEST(NumFrames, MatchesPerLayerSimulation) {
  const AudioEncoderConfig cfg;
  Rng rng(4);
  for (int i = 0; i < 20; ++i) {
    const std::int64_t n = 640 + static_cast<std::int64_t>(rng.below(64000));
    // Each layer pads by (kernel - stride): floor((L + k - s - k) / s) + 1.
    std::int64_t len = n;
    for (const auto& l : cfg.layers) {
      len = (len + l.kernel - l.stride - l.kernel) / l.stride + 1;
    }
    EXPECT_EQ(numFrames(cfg, n), len) << n;
    EXPECT_EQ(numFrames(cfg, n + 640), numFrames(cfg, n) + 1);
  }
}

TEST(AudioEncoder, StridesMultiplyTo640) {
  AudioEncoderConfig bad;
  bad.layers[0].stride = 4;
  bad.layers[0].kernel = 8;
  EXPECT_THROW(bad.validate(), Error);
  bad = AudioEncoderConfig{};
  bad.layers.pop_back();
  EXPECT_THROW(bad.validate(), Error);
}

TEST(AudioEncoder, DeterministicAndShaped) {
  Rng rng(1);
  AudioEncoder<float> enc(AudioEncoderConfig{}, rng);
  const auto w = noise(16000, 2);
  const auto a = enc.encode(w);
  const auto b = enc.encode(w);
  EXPECT_EQ(a.features.shape(), (ad::Shape{25, 64}));
  EXPECT_EQ(a.features.data(), b.features.data());
}

TEST(AudioEncoder, ZeroWaveformGivesConstantFrames) {
  Rng rng(1);
  AudioEncoder<float> enc(AudioEncoderConfig{}, rng);
  const auto out = enc.encode(std::vector<float>(16000, 0.0f)).features;
  for (std::int64_t t = 2; t < 23; ++t) {
    for (std::int64_t d = 0; d < 64; ++d) {
      EXPECT_NEAR(out.at(t, d), out.at(2, d), 1e-6);
    }
  }
}

TEST(AudioEncoder, NanInputRejected) {
  Rng rng(1);
  AudioEncoder<float> enc(AudioEncoderConfig{}, rng);
  auto w = noise(1280, 1);
  w[100] = std::numeric_limits<float>::quiet_NaN();
  EXPECT_THROW(enc.encode(w), Error);
}

TEST(AudioEncoder, InputGradientMatchesFiniteDifferences) {
  Rng rng(3);
  AudioEncoder<double> enc(narrowAudio(), rng);
  auto x = check::randomParam({1920}, rng, -0.5, 0.5);
  const double err = check::gradCheck({x}, [&](const std::vector<TensorD>& v) {
    return check::probe(enc.encode(v[0]).features, 17);
  });
  EXPECT_LT(err, 1e-4);
}

TEST(EncodeChannels, SharedParameters) {
  Rng rng(1);
  AudioEncoder<float> enc(AudioEncoderConfig{}, rng);
  const auto w = noise(3200, 5);
  const auto u = noise(3200, 6);
  const auto t = [](const std::vector<float>& x) {
    return Tensor<float>::constant({static_cast<std::int64_t>(x.size())}, x);
  };
  const auto same = enc.encodeChannels({t(w), t(w)});
  EXPECT_EQ(same[0].features.data(), same[1].features.data());
  EXPECT_EQ(same[1].channel, 1);
  const auto fwd = enc.encodeChannels({t(w), t(u)});
  const auto rev = enc.encodeChannels({t(u), t(w)});
  EXPECT_EQ(fwd[0].features.data(), rev[1].features.data());
  EXPECT_EQ(fwd[1].features.data(), rev[0].features.data());
  EXPECT_THROW(enc.encodeChannels({t(w), t(noise(3840, 1))}), Error);
}

TEST(EncodeChannels, SynthClipSixChannels) {
  ClipSpec spec;
  spec.tokens = {1, 4, 2};
  spec.durationSec = 1.0;
  spec.delays = {0, 3, -2, 5, 1, -4};
  spec.snrsDb = std::vector<double>(6, 10.0);
  spec.seed = 9;
  const auto clip = genClip(spec);
  Rng rng(1);
  AudioEncoder<float> enc(AudioEncoderConfig{}, rng);
  VisualEncoder<float> vis(VisualEncoderConfig{}, rng);
  std::vector<Tensor<float>> ws;
  for (const auto& ch : clip.channels) {
    ws.push_back(Tensor<float>::constant({clip.numSamples()}, ch));
  }
  const auto seqs = enc.encodeChannels(ws);
  ASSERT_EQ(seqs.size(), 6u);
  const auto video = vis.encode(Tensor<float>::constant({clip.videoFrames, 16, 16}, clip.video));
  for (const auto& s : seqs) {
    EXPECT_EQ(s.frames(), 25);
    EXPECT_EQ(s.dim(), 64);
    EXPECT_EQ(s.frames(), video.frames());
  }
}

TEST(VisualEncoder, OneVectorPerFrame) {
  Rng rng(2);
  VisualEncoder<float> vis(VisualEncoderConfig{}, rng);
  const auto frames = noise(25 * 256, 3);
  const auto out = vis.encode(Tensor<float>::constant({25, 16, 16}, frames));
  EXPECT_EQ(out.features.shape(), (ad::Shape{25, 64}));
  EXPECT_THROW(vis.encode(Tensor<float>::constant({0, 16, 16}, {})), Error);
}

TEST(VisualEncoder, IdenticalFramesIdenticalVectors) {
  Rng rng(2);
  VisualEncoder<float> vis(VisualEncoderConfig{}, rng);
  auto frames = noise(3 * 256, 3);
  std::copy(frames.begin(), frames.begin() + 256, frames.begin() + 512);
  const auto out = vis.encode(Tensor<float>::constant({3, 16, 16}, frames)).features;
  for (std::int64_t d = 0; d < 64; ++d) {
    EXPECT_EQ(out.at(0, d), out.at(2, d));
  }
}

TEST(VisualEncoder, GradientOnTwoFrames) {
  Rng rng(8);
  VisualEncoder<double> vis(narrowVisual(), rng);
  auto x = check::randomParam({2, 16, 16}, rng);
  const double err = check::gradCheck({x}, [&](const std::vector<TensorD>& v) {
    return check::probe(vis.encode(v[0]).features, 23);
  });
  EXPECT_LT(err, 1e-4);
}
