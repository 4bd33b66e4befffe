#include <gtest/gtest.h>

#include <cmath>
#include <fstream>
#include <set>

#include "avw2/trainer.h"
#include "support/tmpdir.h"

using namespace avw2;
using nlohmann::json;
namespace fs = std::filesystem;

namespace {

ModelConfig tinyModel(int channels) {
  ModelConfig m;
  m.channels = channels;
  for (auto& l : m.audio.layers) {
    l.channels = 16;
  }
  m.audio.outputDim = 16;
  m.visual.stemChannels = 4;
  m.visual.hiddenChannels = 8;
  m.visual.outputDim = 16;
  m.transformer.layers = 1;
  m.transformer.modelDim = 16;
  m.transformer.heads = 2;
  m.transformer.ffnDim = 32;
  return m;
}

std::vector<MultichannelClip> corpus(int clips, int channels, std::uint64_t seed, bool video = true,
                                     double seconds = 0.5) {
  CorpusConfig c;
  c.clips = clips;
  c.channels = channels;
  c.durationSec = seconds;
  c.minTokens = 2;
  c.maxTokens = 3;
  c.seed = seed;
  c.withVideo = video;
  c.idPrefix = video ? "av" : "sa";
  return genCorpus(c);
}

PretrainConfig tinyPretrain(int channels = 2) {
  PretrainConfig p;
  p.model = tinyModel(channels);
  p.steps = 50;
  p.loss.negatives = 4;
  return p;
}

std::vector<double> totals(const std::vector<StepRecord>& recs) {
  std::vector<double> out;
  for (const auto& r : recs) {
    out.push_back(r.loss.total);
  }
  return out;
}

std::uint64_t checksum(const AvModel<float>& m, const std::string& skipPrefix) {
  std::uint64_t h = 1469598103934665603ull;
  m.visit([&](const std::string& name, const Tensor<float>& t) {
    if (name.rfind(skipPrefix, 0) == 0) {
      return;
    }
    for (float v : t.data()) {
      std::uint32_t bits;
      std::memcpy(&bits, &v, 4);
      h = (h ^ bits) * 1099511628211ull;
    }
  });
  return h;
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

TEST(Schedule, WarmupIsLinearThenConstant) {
  EXPECT_DOUBLE_EQ(learningRateAt(1e-3, 0.1, 100, 1), 1e-4);
  EXPECT_DOUBLE_EQ(learningRateAt(1e-3, 0.1, 100, 5), 5e-4);
  EXPECT_DOUBLE_EQ(learningRateAt(1e-3, 0.1, 100, 10), 1e-3);
  EXPECT_DOUBLE_EQ(learningRateAt(1e-3, 0.1, 100, 90), 1e-3);
  EXPECT_DOUBLE_EQ(learningRateAt(1e-3, 0.0, 100, 1), 1e-3);
}

TEST(Schedule, BatchesDeterministicAndMixed) {
  int audioOnly = 0;
  for (int s = 1; s <= 400; ++s) {
    const auto a = scheduleBatch(3, s, 2, 0.5, 8, 5);
    const auto b = scheduleBatch(3, s, 2, 0.5, 8, 5);
    EXPECT_EQ(a.kind, b.kind);
    EXPECT_EQ(a.clips, b.clips);
    audioOnly += a.kind == BatchKind::AudioOnly;
    EXPECT_EQ(scheduleBatch(3, s, 2, 0.0, 8, 5).kind, BatchKind::AudioVisual);
  }
  EXPECT_NEAR(audioOnly / 400.0, 0.5, 0.1);
  // One epoch of batch size 1 visits every clip once.
  std::set<int> seen;
  for (int s = 1; s <= 8; ++s) {
    seen.insert(scheduleBatch(9, s, 1, 0.0, 8, 0).clips[0]);
  }
  EXPECT_EQ(seen.size(), 8u);
}

TEST(Schedule, TrainingMaskHasTwoPositions) {
  for (std::uint64_t s = 0; s < 200; ++s) {
    EXPECT_GE(drawTrainingMask(12, 3, 0.05, s).indices.size(), 2u);
  }
}

TEST(Config, MixRatioDefaultsAndConflict) {
  PretrainConfig p;
  EXPECT_EQ(p.resolvedMixRatio(false), 0.0);
  EXPECT_EQ(p.resolvedMixRatio(true), 0.5);
  p.mixRatio = 0.3;
  EXPECT_EQ(p.resolvedMixRatio(true), 0.3);
  try {
    p.resolvedMixRatio(false);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::Usage);
  }
}

TEST(Config, JsonRoundTripAndOverrides) {
  auto p = tinyPretrain();
  p.loss.lambda = 0.25;
  p.interChannel = false;
  json j = toJson(p);
  EXPECT_EQ(toJson(pretrainConfigFromJson(j)), j);
  applyOverride(j, "loss.temperature=0.2");
  applyOverride(j, "steps=12");
  applyOverride(j, "mix_ratio=0.4");
  const auto q = pretrainConfigFromJson(j);
  EXPECT_EQ(q.loss.temperature, 0.2);
  EXPECT_EQ(q.steps, 12);
  EXPECT_EQ(q.mixRatio, 0.4);
  EXPECT_THROW(applyOverride(j, "loss.nope=1"), Error);
  EXPECT_THROW(applyOverride(j, "steps=1.5"), Error);
  EXPECT_THROW(applyOverride(j, "loss.stop_target_gradient=3"), Error);
  EXPECT_THROW(applyOverride(j, "steps"), Error);
  FinetuneConfig f;
  f.modality = Modality::Audio;
  EXPECT_EQ(toJson(finetuneConfigFromJson(toJson(f))), toJson(f));
}

TEST(Pretrain, BitDeterministic) {
  const auto clips = corpus(4, 2, 1);
  Pretrainer a(tinyPretrain(), clips);
  Pretrainer b(tinyPretrain(), clips);
  const auto ra = a.run(6);
  const auto rb = b.run(6);
  for (std::size_t i = 0; i < ra.size(); ++i) {
    EXPECT_EQ(ra[i].loss.c1, rb[i].loss.c1);
    EXPECT_EQ(ra[i].loss.c2, rb[i].loss.c2);
    EXPECT_EQ(ra[i].loss.total, rb[i].loss.total);
  }
  EXPECT_TRUE(encodeCheckpoint(a.checkpoint()) == encodeCheckpoint(b.checkpoint()));
}

TEST(Pretrain, NoAudioOnlyBatchesWhenRatioZero) {
  auto cfg = tinyPretrain();
  cfg.mixRatio = 0.0;
  Pretrainer t(cfg, corpus(3, 2, 1), corpus(3, 1, 2, false));
  for (const auto& r : t.run(10)) {
    EXPECT_EQ(r.kind, BatchKind::AudioVisual);
    EXPECT_EQ(r.loss.sa, 0.0);
  }
}

TEST(Pretrain, TotalIsWeightedSumPerStep) {
  check::TempDir dir;
  auto cfg = tinyPretrain();
  cfg.loss.lambda = 0.7;
  cfg.mixRatio = 0.5;
  Pretrainer t(cfg, corpus(3, 2, 1), corpus(3, 1, 2, false));
  {
    MetricsLog log(dir / "m.jsonl", false);
    t.run(12, &log);
  }
  std::ifstream in(dir / "m.jsonl");
  std::string line;
  int n = 0, audioOnly = 0;
  while (std::getline(in, line)) {
    const auto j = json::parse(line);
    for (const char* key : {"step", "l_c1", "l_c2", "l_sa", "total", "lr", "wall_ms"}) {
      EXPECT_TRUE(j.contains(key)) << key;
    }
    const double want = j["l_c1"].get<double>() + j["l_c2"].get<double>() + 0.7 * j["l_sa"].get<double>();
    EXPECT_NEAR(j["total"].get<double>(), want, 1e-6);
    audioOnly += j["l_sa"].get<double>() > 0.0;
    ++n;
  }
  EXPECT_EQ(n, 12);
  EXPECT_GT(audioOnly, 0);
  // The differentiated tensor agrees with the recorded parts.
  AvModel<float> model(cfg.model, 3);
  const auto clips = corpus(1, 2, 5);
  const auto cl = clipPretrainLoss(model, cfg, clips[0], BatchKind::AudioVisual, 11);
  EXPECT_NEAR(cl.total.item(), cl.parts.total, 1e-5 * cl.parts.total);
}

TEST(Pretrain, ChannelCountGenerality) {
  for (int c : {1, 2, 6}) {
    Pretrainer t(tinyPretrain(c), corpus(2, c, 4));
    const auto recs = t.run(2);
    EXPECT_TRUE(std::isfinite(recs.back().loss.total)) << c;
  }
}

TEST(Pretrain, NumericFailureNamesStepAndClips) {
  auto cfg = tinyPretrain();
  cfg.learningRate = 1e30;
  cfg.warmupFraction = 0.0;
  Pretrainer t(cfg, corpus(2, 2, 1));
  const auto msg = messageOf([&] { t.run(5); });
  EXPECT_NE(msg.find("pretrain step"), std::string::npos) << msg;
  EXPECT_NE(msg.find("av00"), std::string::npos) << msg;
}

TEST(Pretrain, UntrainedRankAccuracyNearChance) {
  auto cfg = tinyPretrain();
  cfg.model = ModelConfig{};
  cfg.model.channels = 2;
  const auto clips = corpus(8, 2, 3, true, 1.0);
  const double acc = maskedRankAccuracy(AvModel<float>(cfg.model, 1), clips, cfg, 5);
  EXPECT_NEAR(acc, 1.0 / (cfg.loss.negatives + 1), 0.1);
}

TEST(Checkpoint, SaveLoadSaveByteIdentical) {
  check::TempDir dir;
  Pretrainer t(tinyPretrain(), corpus(2, 2, 1));
  t.run(3);
  saveCheckpoint(t.checkpoint(), dir / "a.avw2");
  const auto loaded = loadCheckpoint(dir / "a.avw2");
  saveCheckpoint(loaded, dir / "b.avw2");
  EXPECT_TRUE(check::slurp(dir / "a.avw2") == check::slurp(dir / "b.avw2"));
  EXPECT_EQ(loaded.step, 3u);
  // Lexicographic tensor order.
  std::string prev;
  for (const auto& [name, tensor] : loaded.tensors) {
    EXPECT_LT(prev, name);
    prev = name;
  }
  const auto model = modelFromCheckpoint(loaded);
  EXPECT_EQ(encodeCheckpoint(makeCheckpoint(model, nullptr, 3, loaded.config)).size() > 0, true);
}

TEST(Checkpoint, CorruptedByteReportsOffset) {
  Pretrainer t(tinyPretrain(), corpus(2, 2, 1));
  const auto bytes = encodeCheckpoint(t.checkpoint());
  for (std::size_t pos : {std::size_t{0}, std::size_t{30}, bytes.size() / 2, bytes.size() - 3}) {
    auto bad = bytes;
    bad[pos] ^= 0x5a;
    const auto msg = messageOf([&] { decodeCheckpoint(bad); });
    EXPECT_NE(msg.find("offset"), std::string::npos) << pos << ": " << msg;
  }
  const auto msg = messageOf([&] { decodeCheckpoint(bytes.substr(0, bytes.size() - 10)); });
  EXPECT_NE(msg.find("truncated"), std::string::npos) << msg;
  auto future = bytes;
  future[4] = 2;
  EXPECT_NE(messageOf([&] { decodeCheckpoint(future); }).find("version"), std::string::npos);
}

TEST(Checkpoint, ShapeDisagreementRejected) {
  Pretrainer t(tinyPretrain(), corpus(2, 2, 1));
  auto ck = t.checkpoint();
  ck.config["model"]["transformer"]["ffn_dim"] = 48;
  EXPECT_THROW(modelFromCheckpoint(ck), Error);
  auto ck2 = t.checkpoint();
  ck2.tensors.erase("mask_embedding");
  EXPECT_THROW(modelFromCheckpoint(ck2), Error);
}

TEST(Checkpoint, ResumeMatchesUninterruptedRun) {
  check::TempDir dir;
  const auto clips = corpus(4, 2, 1);
  const auto audio = corpus(2, 1, 9, false);
  auto cfg = tinyPretrain();
  cfg.mixRatio = 0.3;
  Pretrainer full(cfg, clips, audio);
  const auto whole = totals(full.run(50));

  Pretrainer first(cfg, clips, audio);
  auto part = totals(first.run(25));
  saveCheckpoint(first.checkpoint(), dir / "mid.avw2");
  Pretrainer resumed(loadCheckpoint(dir / "mid.avw2"), clips, audio);
  EXPECT_EQ(resumed.currentStep(), 25);
  const auto rest = totals(resumed.run(25));
  part.insert(part.end(), rest.begin(), rest.end());
  EXPECT_EQ(part, whole);
  EXPECT_TRUE(encodeCheckpoint(resumed.checkpoint()) == encodeCheckpoint(full.checkpoint()));
}

TEST(Finetune, FreezeAllChangesOnlyHead) {
  const auto clips = corpus(3, 2, 1);
  AvModel<float> pre(tinyModel(2), 4);
  FinetuneConfig cfg;
  cfg.freezeAll = true;
  cfg.steps = 5;
  Finetuner ft(cfg, pre, clips);
  const auto names = ft.trainableNames();
  ASSERT_FALSE(names.empty());
  for (const auto& n : names) {
    EXPECT_EQ(n.rfind("ctc.", 0), 0u) << n;
  }
  const auto before = checksum(ft.model(), "ctc.");
  const auto headBefore = ft.model().config().vocab;
  Checkpoint headStart = makeCheckpoint(ft.model(), nullptr, 0, json::object());
  ft.run(5);
  EXPECT_EQ(checksum(ft.model(), "ctc."), before);
  Checkpoint headEnd = makeCheckpoint(ft.model(), nullptr, 0, json::object());
  EXPECT_NE(headStart.tensors.at("ctc.weight"), headEnd.tensors.at("ctc.weight"));
  EXPECT_EQ(headBefore, kVocabSize);
}

TEST(Finetune, DefaultTrainsEncodersAndContextNotPretrainHeads) {
  AvModel<float> pre(tinyModel(2), 4);
  Finetuner ft(FinetuneConfig{}, pre, corpus(2, 2, 1));
  bool audio = false, context = false;
  for (const auto& n : ft.trainableNames()) {
    EXPECT_NE(n.rfind("head.", 0), 0u) << n;
    EXPECT_NE(n, "mask_embedding");
    audio |= n.rfind("audio.", 0) == 0;
    context |= n.rfind("context.", 0) == 0;
  }
  EXPECT_TRUE(audio && context);
}

TEST(Finetune, VocabMismatch) {
  AvModel<float> pre(tinyModel(2), 4);
  pre.addCtcHead(8, 1);
  FinetuneConfig cfg;
  cfg.vocab = 5;
  try {
    Finetuner ft(cfg, pre, corpus(2, 2, 1));
    FAIL();
  } catch (const Error& e) {
    EXPECT_NE(std::string(e.what()).find("vocab mismatch"), std::string::npos);
  }
}

TEST(Finetune, ResumeMatches) {
  check::TempDir dir;
  const auto clips = corpus(3, 2, 1);
  AvModel<float> pre(tinyModel(2), 4);
  FinetuneConfig cfg;
  cfg.steps = 10;
  Finetuner whole(cfg, pre, clips);
  whole.run(10);
  Finetuner first(cfg, pre, clips);
  first.run(4);
  saveCheckpoint(first.checkpoint(), dir / "ft.avw2");
  Finetuner rest(loadCheckpoint(dir / "ft.avw2"), clips);
  rest.run(6);
  EXPECT_TRUE(encodeCheckpoint(rest.checkpoint()) == encodeCheckpoint(whole.checkpoint()));
}

TEST(Finetune, AudioOnlyOverfitReachesZeroCer) {
  // Default-size model; video is zeroed throughout.
  ModelConfig m;
  m.channels = 2;
  const auto clips = corpus(6, 2, 21, true, 1.0);
  FinetuneConfig cfg;
  cfg.modality = Modality::Audio;
  cfg.batchSize = 2;
  cfg.evalEvery = 50;
  Finetuner ft(cfg, AvModel<float>(m, 2), clips);
  const auto history = ft.run(300);
  EXPECT_EQ(history.back().second, 0.0);
  EXPECT_EQ(evaluateCer(ft.model(), clips, Modality::Audio).cer, 0.0);
}

TEST(Features, ShapeDeterminismAndTrainingEffect) {
  check::TempDir dir;
  const auto clips = corpus(2, 2, 1);
  auto cfg = tinyPretrain();
  Pretrainer t(cfg, clips);
  const AvModel<float> untrained = t.model();
  extractFeatures(untrained, clips, dir / "u1");
  extractFeatures(AvModel<float>(cfg.model, cfg.seed), clips, dir / "u2");
  t.run(5);
  extractFeatures(t.model(), clips, dir / "t");
  for (const auto& clip : clips) {
    const auto u = readF32(dir / "u1" / (clip.id + ".f32"));
    EXPECT_EQ(u, readF32(dir / "u2" / (clip.id + ".f32")));
    EXPECT_EQ(static_cast<std::int64_t>(u.size()), clip.videoFrames * cfg.model.transformer.modelDim);
    const auto tr = readF32(dir / "t" / (clip.id + ".f32"));
    double dist = 0.0;
    for (std::size_t i = 0; i < u.size(); ++i) {
      dist += (u[i] - tr[i]) * (u[i] - tr[i]);
    }
    EXPECT_GT(dist, 0.0);
  }
  std::ifstream in(dir / "t" / "features.jsonl");
  std::string line;
  std::getline(in, line);
  EXPECT_EQ(json::parse(line)["frames"].get<std::int64_t>(), clips[0].videoFrames);
}

TEST(Finetune, LeavesCallerModelUntouched) {
  AvModel<float> pre(tinyModel(2), 4);
  const auto before = checksum(pre, "ctc.");
  Finetuner ft(FinetuneConfig{}, pre, corpus(2, 2, 1));
  ft.run(3);
  EXPECT_EQ(checksum(pre, "ctc."), before);
  EXPECT_FALSE(pre.hasCtcHead());
}
