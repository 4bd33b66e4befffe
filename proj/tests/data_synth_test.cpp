#include <gtest/gtest.h>

#include <cmath>

#include "avw2/data_synth.h"
#include "avw2/encoders.h"
#include "avw2/fusion_mask.h"
#include "support/oracles.h"
#include "support/tmpdir.h"

using namespace avw2;
namespace fs = std::filesystem;

namespace {

ClipSpec spec6(std::uint64_t seed, double snr = 10.0) {
  ClipSpec s;
  s.id = "c" + std::to_string(seed);
  s.tokens = {2, 5, 0, 7};
  s.durationSec = 1.0;
  s.delays = {0, 7, -12, 3, 16, -5};
  s.snrsDb = std::vector<double>(6, snr);
  s.seed = seed;
  return s;
}

CorpusConfig smallCorpus(int clips = 10) {
  CorpusConfig c;
  c.clips = clips;
  c.durationSec = 0.5;
  c.minTokens = 2;
  c.maxTokens = 3;
  return c;
}

std::string messageOf(const std::function<void()>& f) {
  try {
    f();
  } catch (const Error& e) {
    return e.what();
  }
  return "";
}

} // namespace

TEST(GenClip, SameSeedBitIdentical) {
  EXPECT_EQ(genClip(spec6(3)), genClip(spec6(3)));
  EXPECT_NE(genClip(spec6(3)).channels[1], genClip(spec6(4)).channels[1]);
}

TEST(GenClip, FrameAlignment) {
  for (double dur : {0.5, 1.0, 1.37, 2.0}) {
    auto s = spec6(1);
    s.durationSec = dur;
    const auto clip = genClip(s);
    EXPECT_EQ(clip.videoFrames, numFrames(AudioEncoderConfig{}, clip.numSamples()));
    EXPECT_EQ(clip.video.size(), static_cast<std::size_t>(clip.videoFrames * 256));
    for (const auto& ch : clip.channels) {
      EXPECT_EQ(ch.size(), clip.channels[0].size());
    }
  }
}

TEST(GenClip, CrossCorrelationPeakAtDelay) {
  const auto s = spec6(2, kNoNoise);
  const auto clip = genClip(s);
  for (int c = 1; c < 6; ++c) {
    EXPECT_EQ(oracle::crossCorrelationPeak(clip.channels[0], clip.channels[c], kMaxDelay), s.delays[c]) << c;
  }
  EXPECT_EQ(clip.meta.delays, s.delays);
}

TEST(GenClip, MeasuredSnr) {
  auto s = spec6(5);
  s.snrsDb = {0.0, 3.0, 5.0, 10.0, 15.0, 20.0};
  const auto clip = genClip(s);
  const auto content = renderContent(s.tokens, s.numSamples());
  for (int c = 0; c < 6; ++c) {
    auto clean = shiftSignal(content, s.delays[c]);
    for (auto& v : clean) {
      v = static_cast<float>(v * clip.meta.gains[c]);
    }
    EXPECT_NEAR(oracle::measuredSnrDb(clean, clip.channels[c]), s.snrsDb[c], 0.5) << c;
  }
}

TEST(GenClip, TokensRecoverableByMatchedFilter) {
  const Transcript tokens{3, 1, 6, 4, 0};
  const std::int64_t n = 32000;
  const auto content = renderContent(tokens, n);
  const auto layout = tokenLayout(tokens, numFrames(AudioEncoderConfig{}, n));
  for (std::size_t j = 0; j < tokens.size(); ++j) {
    const auto begin = layout[j].first * kSamplesPerFrame;
    const auto end = layout[j].second * kSamplesPerFrame;
    int best = -1;
    double bestScore = -2.0;
    for (int k = 0; k < kVocabSize; ++k) {
      auto hyp = tokens;
      hyp[j] = k;
      const auto tmpl = renderContent(hyp, n);
      double xy = 0, xx = 0, yy = 0;
      for (auto i = begin; i < end; ++i) {
        xy += content[i] * tmpl[i];
        xx += content[i] * content[i];
        yy += tmpl[i] * tmpl[i];
      }
      const double score = xy / std::sqrt(xx * yy);
      if (score > bestScore) {
        bestScore = score;
        best = k;
      }
    }
    EXPECT_EQ(best, tokens[j]) << "position " << j;
  }
}

TEST(GenClip, InvalidSpecs) {
  auto s = spec6(1);
  s.delays[2] = 65;
  EXPECT_THROW(genClip(s), Error);
  s = spec6(1);
  s.tokens.push_back(8);
  EXPECT_THROW(genClip(s), Error);
  s = spec6(1);
  s.snrsDb.pop_back();
  EXPECT_THROW(genClip(s), Error);
  s = spec6(1);
  s.durationSec = 0.05;
  EXPECT_THROW(genClip(s), Error);
}

TEST(GenCorpus, ThreadCountDoesNotChangeResult) {
  const auto cfg = smallCorpus(6);
  EXPECT_EQ(genCorpus(cfg, 1), genCorpus(cfg, 4));
}

TEST(Corpus, RoundTripBitExact) {
  check::TempDir dir;
  const auto clips = genCorpus(smallCorpus(10), 2);
  writeCorpus(clips, dir.path());
  EXPECT_TRUE(fs::exists(dir / "manifest.jsonl"));
  EXPECT_TRUE(fs::exists(dir / "audio/clip0003.ch5.f32"));
  EXPECT_TRUE(fs::exists(dir / "video/clip0003.f32"));
  EXPECT_TRUE(fs::exists(dir / "text/clip0003.txt"));
  const auto back = readCorpus(dir.path());
  ASSERT_EQ(back.size(), clips.size());
  for (std::size_t i = 0; i < clips.size(); ++i) {
    EXPECT_TRUE(back[i] == clips[i]) << clips[i].id;
  }
}

TEST(Corpus, NoiselessAndAudioOnlyRoundTrip) {
  check::TempDir dir;
  auto cfg = smallCorpus(3);
  cfg.withVideo = false;
  auto clips = genCorpus(cfg);
  auto s = spec6(9, kNoNoise);
  clips.push_back(genClip(s));
  writeCorpus(clips, dir.path());
  const auto back = readCorpus(dir.path());
  for (std::size_t i = 0; i < clips.size(); ++i) {
    EXPECT_TRUE(back[i] == clips[i]);
  }
  EXPECT_FALSE(back[0].hasVideo());
  EXPECT_TRUE(std::isinf(back[3].meta.snrsDb[0]));
}

TEST(Corpus, TruncatedAudioNamesClip) {
  check::TempDir dir;
  writeCorpus(genCorpus(smallCorpus(3)), dir.path());
  const auto f = dir / "audio/clip0001.ch2.f32";
  fs::resize_file(f, fs::file_size(f) - 8);
  const auto msg = messageOf([&] { readCorpus(dir.path()); });
  EXPECT_NE(msg.find("clip0001"), std::string::npos) << msg;
  EXPECT_NE(msg.find("expected"), std::string::npos) << msg;
}

TEST(Corpus, ChecksumMismatchAndMissingFile) {
  check::TempDir dir;
  writeCorpus(genCorpus(smallCorpus(3)), dir.path());
  auto bytes = check::slurp(dir / "video/clip0002.f32");
  bytes[100] ^= 0x01;
  check::spit(dir / "video/clip0002.f32", bytes);
  auto msg = messageOf([&] { readCorpus(dir.path()); });
  EXPECT_NE(msg.find("clip0002"), std::string::npos) << msg;
  EXPECT_NE(msg.find("checksum"), std::string::npos) << msg;
  fs::remove(dir / "text/clip0000.txt");
  msg = messageOf([&] { readCorpus(dir.path()); });
  EXPECT_NE(msg.find("clip0000"), std::string::npos) << msg;
  EXPECT_NE(msg.find("missing"), std::string::npos) << msg;
}

TEST(Corpus, DuplicateIdRejected) {
  check::TempDir dir;
  writeCorpus(genCorpus(smallCorpus(2)), dir.path());
  const auto manifest = check::slurp(dir / "manifest.jsonl");
  const auto firstLine = manifest.substr(0, manifest.find('\n') + 1);
  check::spit(dir / "manifest.jsonl", manifest + firstLine);
  const auto msg = messageOf([&] { readManifest(dir.path()); });
  EXPECT_NE(msg.find("duplicate"), std::string::npos) << msg;
  EXPECT_THROW(writeCorpus({genClip(spec6(1)), genClip(spec6(1))}, dir / "dup"), Error);
}

TEST(Corpus, MalformedRecordNamesLine) {
  check::TempDir dir;
  writeCorpus(genCorpus(smallCorpus(2)), dir.path());
  auto manifest = check::slurp(dir / "manifest.jsonl");
  check::spit(dir / "manifest.jsonl", manifest + "{\"id\": \"broken\"}\n");
  const auto msg = messageOf([&] { readManifest(dir.path()); });
  EXPECT_NE(msg.find("manifest.jsonl:3"), std::string::npos) << msg;
}

TEST(Corpus, DefaultClipSpecsAreValid) {
  const CorpusConfig cfg;
  for (int i = 0; i < cfg.clips; ++i) {
    const auto s = corpusClipSpec(cfg, i);
    EXPECT_NO_THROW(s.validate());
    EXPECT_EQ(s.delays[0], 0);
    EXPECT_GE(s.tokens.size(), 3u);
    EXPECT_LE(s.tokens.size(), 6u);
  }
}
