#include "avw2/trainer.h"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <numeric>
#include <sstream>

namespace avw2 {

using nlohmann::json;

namespace {

// Stream tags for deriveSeed.
enum : std::uint64_t {
  kTagBatch = 0x6261,
  kTagClip = 0x636c,
  kTagDropout = 1,
  kTagNoiseSnr = 2,
  kTagNoise = 3,
  kTagMask = 4,
  kTagNegC1 = 5,
  kTagNegC2 = 6,
  kTagNegSa = 7,
  kTagRank = 0x726b,
};

template <typename V>
V field(const json& j, const char* key, V fallback) {
  return j.contains(key) ? j.at(key).get<V>() : fallback;
}

std::vector<std::vector<float>> slotWaveforms(const MultichannelClip& clip, int channels,
                                              const DropoutDecision& d) {
  std::vector<std::vector<float>> waves(channels);
  for (int i = 0; i < channels && i < clip.numChannels(); ++i) {
    if (!d.channelDropped[i]) {
      waves[i] = clip.channels[i];
    }
  }
  return waves;
}

double elapsedMs(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count();
}

std::string joinIds(const std::vector<std::string>& ids) {
  std::string s;
  for (const auto& id : ids) {
    s += (s.empty() ? "" : ", ") + id;
  }
  return s;
}

void checkNotEmpty(const std::vector<MultichannelClip>& clips, const char* what) {
  if (clips.empty()) {
    fail(ErrorKind::Data, std::string(what) + ": corpus is empty");
  }
}

} // namespace

void PretrainConfig::validate() const {
  model.validate();
  loss.validate();
  if (steps < 1 || batchSize < 1) {
    fail(ErrorKind::Domain, "pretrain: steps and batch size must be positive");
  }
  if (!(learningRate > 0.0) || !(warmupFraction >= 0.0 && warmupFraction <= 1.0)) {
    fail(ErrorKind::Domain, "pretrain: invalid learning rate or warmup fraction");
  }
  if (mixRatio > 1.0) {
    fail(ErrorKind::Domain, "pretrain: mix ratio must lie in [0, 1]");
  }
  if (augment.spanLength < 1 || !(augment.maskProb > 0.0 && augment.maskProb <= 1.0)) {
    fail(ErrorKind::Domain, "pretrain: mask span must be >= 1 and mask probability in (0, 1]");
  }
  if (augment.noiseMinDb > augment.noiseMaxDb) {
    fail(ErrorKind::Domain, "pretrain: noise SNR range is empty");
  }
}

double PretrainConfig::resolvedMixRatio(bool haveAudioCorpus) const {
  if (mixRatio < 0.0) {
    return haveAudioCorpus ? 0.5 : 0.0;
  }
  if (mixRatio > 0.0 && !haveAudioCorpus) {
    fail(ErrorKind::Usage, "config conflict: mix ratio " + std::to_string(mixRatio) +
                               " needs an audio-only corpus");
  }
  return mixRatio;
}

Modality parseModality(const std::string& s) {
  if (s == "av") {
    return Modality::AudioVisual;
  }
  if (s == "audio") {
    return Modality::Audio;
  }
  if (s == "video") {
    return Modality::Video;
  }
  fail(ErrorKind::Usage, "unknown modality '" + s + "' (expected av, audio or video)");
}

const char* modalityName(Modality m) {
  switch (m) {
    case Modality::AudioVisual:
      return "av";
    case Modality::Audio:
      return "audio";
    case Modality::Video:
      return "video";
  }
  return "av";
}

void FinetuneConfig::validate() const {
  if (steps < 1 || batchSize < 1 || !(learningRate > 0.0)) {
    fail(ErrorKind::Domain, "finetune: steps, batch size and learning rate must be positive");
  }
  if (vocab < 1) {
    fail(ErrorKind::Domain, "finetune: vocabulary must be non-empty");
  }
  if (evalEvery < 0) {
    fail(ErrorKind::Domain, "finetune: eval_every must be >= 0");
  }
}

json toJson(const PretrainConfig& c) {
  json model;
  to_json(model, c.model);
  return {{"model", model},
          {"augment",
           {{"video_drop", c.augment.dropout.videoProb},
            {"channel_drop", c.augment.dropout.channelProb},
            {"dynamic_noise", c.augment.dynamicNoise},
            {"noise_min_db", c.augment.noiseMinDb},
            {"noise_max_db", c.augment.noiseMaxDb},
            {"span_length", c.augment.spanLength},
            {"mask_prob", c.augment.maskProb}}},
          {"loss",
           {{"temperature", c.loss.temperature},
            {"lambda", c.loss.lambda},
            {"negatives", c.loss.negatives},
            {"stop_target_gradient", c.loss.stopTargetGradient},
            {"context_negatives", c.loss.contextNegatives},
            {"inter_channel", c.interChannel}}},
          {"steps", c.steps},
          {"batch_size", c.batchSize},
          {"learning_rate", c.learningRate},
          {"warmup_fraction", c.warmupFraction},
          {"mix_ratio", c.mixRatio < 0.0 ? json(nullptr) : json(c.mixRatio)},
          {"seed", c.seed},
          {"log_wall_time", c.logWallTime}};
}

PretrainConfig pretrainConfigFromJson(const json& j) {
  PretrainConfig c;
  try {
    if (j.contains("model")) {
      from_json(j.at("model"), c.model);
    }
    if (j.contains("augment")) {
      const auto& a = j.at("augment");
      c.augment.dropout.videoProb = field(a, "video_drop", c.augment.dropout.videoProb);
      c.augment.dropout.channelProb = field(a, "channel_drop", c.augment.dropout.channelProb);
      c.augment.dynamicNoise = field(a, "dynamic_noise", c.augment.dynamicNoise);
      c.augment.noiseMinDb = field(a, "noise_min_db", c.augment.noiseMinDb);
      c.augment.noiseMaxDb = field(a, "noise_max_db", c.augment.noiseMaxDb);
      c.augment.spanLength = field(a, "span_length", c.augment.spanLength);
      c.augment.maskProb = field(a, "mask_prob", c.augment.maskProb);
    }
    if (j.contains("loss")) {
      const auto& l = j.at("loss");
      c.loss.temperature = field(l, "temperature", c.loss.temperature);
      c.loss.lambda = field(l, "lambda", c.loss.lambda);
      c.loss.negatives = field(l, "negatives", c.loss.negatives);
      c.loss.stopTargetGradient = field(l, "stop_target_gradient", c.loss.stopTargetGradient);
      c.loss.contextNegatives = field(l, "context_negatives", c.loss.contextNegatives);
      c.interChannel = field(l, "inter_channel", c.interChannel);
    }
    c.steps = field(j, "steps", c.steps);
    c.batchSize = field(j, "batch_size", c.batchSize);
    c.learningRate = field(j, "learning_rate", c.learningRate);
    c.warmupFraction = field(j, "warmup_fraction", c.warmupFraction);
    if (j.contains("mix_ratio")) {
      c.mixRatio = j.at("mix_ratio").is_null() ? -1.0 : j.at("mix_ratio").get<double>();
    }
    c.seed = field(j, "seed", c.seed);
    c.logWallTime = field(j, "log_wall_time", c.logWallTime);
  } catch (const json::exception& e) {
    fail(ErrorKind::Usage, std::string("pretrain config: ") + e.what());
  }
  c.validate();
  return c;
}

json toJson(const FinetuneConfig& c) {
  return {{"steps", c.steps},
          {"batch_size", c.batchSize},
          {"learning_rate", c.learningRate},
          {"seed", c.seed},
          {"modality", modalityName(c.modality)},
          {"vocab", c.vocab},
          {"freeze_encoders", c.freezeEncoders},
          {"freeze_context", c.freezeContext},
          {"freeze_all", c.freezeAll},
          {"eval_every", c.evalEvery},
          {"label_smoothing", kLabelSmoothing},
          {"log_wall_time", c.logWallTime}};
}

FinetuneConfig finetuneConfigFromJson(const json& j) {
  FinetuneConfig c;
  try {
    c.steps = field(j, "steps", c.steps);
    c.batchSize = field(j, "batch_size", c.batchSize);
    c.learningRate = field(j, "learning_rate", c.learningRate);
    c.seed = field(j, "seed", c.seed);
    c.modality = parseModality(field<std::string>(j, "modality", modalityName(c.modality)));
    c.vocab = field(j, "vocab", c.vocab);
    c.freezeEncoders = field(j, "freeze_encoders", c.freezeEncoders);
    c.freezeContext = field(j, "freeze_context", c.freezeContext);
    c.freezeAll = field(j, "freeze_all", c.freezeAll);
    c.evalEvery = field(j, "eval_every", c.evalEvery);
    c.logWallTime = field(j, "log_wall_time", c.logWallTime);
  } catch (const json::exception& e) {
    fail(ErrorKind::Usage, std::string("finetune config: ") + e.what());
  }
  c.validate();
  return c;
}

void applyOverride(json& config, const std::string& assignment) {
  const auto eq = assignment.find('=');
  if (eq == std::string::npos || eq == 0) {
    fail(ErrorKind::Usage, "override '" + assignment + "' must look like key.path=value");
  }
  const std::string key = assignment.substr(0, eq);
  const std::string text = assignment.substr(eq + 1);
  json* node = &config;
  std::stringstream ks(key);
  std::string part;
  while (std::getline(ks, part, '.')) {
    if (!node->is_object() || !node->contains(part)) {
      fail(ErrorKind::Usage, "unknown config key '" + key + "'");
    }
    node = &(*node)[part];
  }
  json value = json::parse(text, nullptr, false);
  if (value.is_discarded()) {
    value = text;
  }
  const bool numeric = node->is_number() && value.is_number();
  const bool nullable = node->is_null() && (value.is_number() || value.is_null());
  if (!numeric && !nullable && node->type() != value.type()) {
    fail(ErrorKind::Usage, "override '" + key + "': expected " + std::string(node->type_name()) +
                               ", got " + value.type_name());
  }
  if (node->is_number_integer() && !value.is_number_integer()) {
    fail(ErrorKind::Usage, "override '" + key + "': expected an integer");
  }
  *node = value;
}

double learningRateAt(double base, double warmupFraction, int steps, int step) {
  const int warm = static_cast<int>(std::ceil(warmupFraction * steps));
  if (warm <= 0 || step >= warm) {
    return base;
  }
  return base * static_cast<double>(step) / warm;
}

BatchPlan scheduleBatch(std::uint64_t seed, int step, int batchSize, double mixRatio, int avClips,
                        int audioClips) {
  BatchPlan plan;
  Rng kindRng(deriveSeed(seed, kTagBatch, static_cast<std::uint64_t>(step)));
  const bool audioOnly = mixRatio > 0.0 && audioClips > 0 && kindRng.bernoulli(mixRatio);
  plan.kind = audioOnly ? BatchKind::AudioOnly : BatchKind::AudioVisual;
  const int n = audioOnly ? audioClips : avClips;
  if (n <= 0) {
    fail(ErrorKind::Data, "schedule: no clips for a " + std::string(batchKindName(plan.kind)) + " batch");
  }
  // Position in an endless sequence of per-epoch permutations.
  const std::uint64_t stream = audioOnly ? 2 : 1;
  for (int b = 0; b < batchSize; ++b) {
    const auto pos = static_cast<std::uint64_t>(step - 1) * batchSize + b;
    const std::uint64_t epoch = pos / n;
    std::vector<int> perm(n);
    std::iota(perm.begin(), perm.end(), 0);
    Rng rng(deriveSeed(seed, kTagClip, stream, epoch));
    for (int i = n - 1; i > 0; --i) {
      std::swap(perm[i], perm[rng.below(i + 1)]);
    }
    plan.clips.push_back(perm[pos % n]);
  }
  return plan;
}

MaskSpec drawTrainingMask(std::int64_t frames, int spanLength, double prob, std::uint64_t seed) {
  if (frames < 2) {
    fail(ErrorKind::Domain, "mask: need at least 2 frames, got " + std::to_string(frames));
  }
  for (std::uint64_t attempt = 0;; ++attempt) {
    auto m = sampleMask(frames, spanLength, prob, deriveSeed(seed, attempt));
    if (m.indices.size() >= 2) {
      m.seed = seed;
      return m;
    }
  }
}

json metricsJson(const StepRecord& r) {
  return {{"step", r.step}, {"l_c1", r.loss.c1}, {"l_c2", r.loss.c2}, {"l_sa", r.loss.sa},
          {"total", r.loss.total}, {"lr", r.lr}, {"wall_ms", r.wallMs}};
}

MetricsLog::MetricsLog(const std::filesystem::path& path, bool append) {
  if (path.has_parent_path()) {
    std::filesystem::create_directories(path.parent_path());
  }
  out_ = std::make_unique<std::ofstream>(path, append ? std::ios::app : std::ios::trunc);
  if (!*out_) {
    fail(ErrorKind::Io, "cannot open metrics file " + path.string());
  }
}

void MetricsLog::write(const json& record) {
  if (out_) {
    *out_ << record.dump() << '\n';
    out_->flush();
  }
}

ClipLoss clipPretrainLoss(const AvModel<float>& model, const PretrainConfig& cfg,
                          const MultichannelClip& clip, BatchKind kind, std::uint64_t seed) {
  const auto lay = model.layout();
  const auto& aug = cfg.augment;
  const double kappa = cfg.loss.temperature;
  auto noisy = [&](const std::vector<float>& w, int channel) {
    if (!aug.dynamicNoise) {
      return w;
    }
    Rng rng(deriveSeed(seed, kTagNoiseSnr, channel));
    const double snr = rng.uniform(aug.noiseMinDb, aug.noiseMaxDb);
    return addNoise(w, snr, deriveSeed(seed, kTagNoise, channel));
  };

  DropoutDecision decision;
  std::vector<std::vector<float>> waves(lay.channels);
  if (kind == BatchKind::AudioVisual) {
    if (clip.numChannels() != lay.channels) {
      fail(ErrorKind::Shape, "clip '" + clip.id + "' has " + std::to_string(clip.numChannels()) +
                                 " channels, model expects " + std::to_string(lay.channels));
    }
    decision = drawDropout(aug.dropout, lay.channels, deriveSeed(seed, kTagDropout), clip.hasVideo());
    for (int i = 0; i < lay.channels; ++i) {
      if (!decision.channelDropped[i]) {
        waves[i] = noisy(clip.channels[i], i);
      }
    }
  } else {
    decision = DropoutDecision::none(lay.channels);
    decision.videoDropped = true;
    for (int i = 1; i < lay.channels; ++i) {
      decision.channelDropped[i] = true;
    }
    waves[0] = noisy(clip.channels.at(0), 0);
  }
  const auto enc = model.encode(waves, clip.video, clip.videoFrames, decision);
  const std::int64_t frames = enc.fused.dim(0);
  const auto mask = drawTrainingMask(frames, aug.spanLength, aug.maskProb, deriveSeed(seed, kTagMask));
  const auto c = model.context(model.maskFeatures(enc.fused, mask));
  auto target = [&](const Tensor<float>& t) { return cfg.loss.stopTargetGradient ? t.detach() : t; };

  LossParts<float> parts;
  ClipLoss out;
  out.parts.maskedCount = static_cast<std::int64_t>(mask.indices.size());
  const int k = cfg.loss.negatives;
  if (kind == BatchKind::AudioVisual) {
    const auto pred = model.predictFused(c);
    const auto negs = sampleNegatives(mask.indices, k, deriveSeed(seed, kTagNegC1));
    parts.c1 = lossC1(pred, target(enc.fused), mask, negs, kappa,
                      cfg.loss.contextNegatives ? pred : Tensor<float>());
    const auto active = decision.activeChannels();
    out.parts.perChannel.assign(lay.channels, 0.0);
    if (cfg.interChannel && std::find(active.begin(), active.end(), true) != active.end()) {
      const auto predA = model.predictAudio(c);
      std::vector<Tensor<float>> zA(lay.channels);
      std::vector<NegativeSet> negList(lay.channels);
      for (int i = 0; i < lay.channels; ++i) {
        if (active[i]) {
          zA[i] = target(enc.audio[i]);
          negList[i] = sampleNegatives(mask.indices, k, deriveSeed(seed, kTagNegC2, i));
        }
      }
      const auto inter = lossC2(predA, zA, active, mask, negList, kappa);
      parts.c2 = inter.total;
      for (int i = 0; i < lay.channels; ++i) {
        if (active[i]) {
          out.parts.perChannel[i] = inter.perChannel[i].item();
        }
      }
    } else {
      parts.c2 = Tensor<float>::scalar(0.0f);
    }
    out.total = totalLoss(parts, cfg.loss.lambda, kind);
    out.parts.c1 = parts.c1.item();
    out.parts.c2 = parts.c2.item();
  } else {
    const auto negs = sampleNegatives(mask.indices, k, deriveSeed(seed, kTagNegSa));
    parts.sa = lossSa(model.predictAudio(c), target(enc.audio[0]), mask, negs, kappa);
    out.total = totalLoss(parts, cfg.loss.lambda, kind);
    out.parts.sa = parts.sa.item();
  }
  out.parts.total = out.parts.c1 + out.parts.c2 + cfg.loss.lambda * out.parts.sa;
  return out;
}

Pretrainer::Pretrainer(PretrainConfig cfg, std::vector<MultichannelClip> avClips,
                       std::vector<MultichannelClip> audioClips)
    : cfg_(std::move(cfg)), av_(std::move(avClips)), audio_(std::move(audioClips)) {
  cfg_.validate();
  model_ = AvModel<float>(cfg_.model, cfg_.seed);
  init();
}

Pretrainer::Pretrainer(const Checkpoint& ckpt, std::vector<MultichannelClip> avClips,
                       std::vector<MultichannelClip> audioClips)
    : av_(std::move(avClips)), audio_(std::move(audioClips)) {
  if (ckpt.config.value("kind", "") != "pretrain") {
    fail(ErrorKind::Data, "checkpoint was not written by pretraining");
  }
  cfg_ = pretrainConfigFromJson(ckpt.config);
  model_ = modelFromCheckpoint(ckpt);
  init();
  loadAdamState(ckpt, adam_);
  step_ = static_cast<int>(ckpt.step);
}

void Pretrainer::init() {
  checkNotEmpty(av_, "pretrain");
  mixRatio_ = cfg_.resolvedMixRatio(!audio_.empty());
  for (const auto& clip : av_) {
    if (clip.numChannels() != cfg_.model.channels) {
      fail(ErrorKind::Data, "clip '" + clip.id + "' has " + std::to_string(clip.numChannels()) +
                                " channels, config expects " + std::to_string(cfg_.model.channels));
    }
  }
  params_ = collectParameters<float>(model_);
  adam_ = {};
}

StepRecord Pretrainer::step() {
  const auto t0 = std::chrono::steady_clock::now();
  StepRecord rec;
  rec.step = step_ + 1;
  const auto plan = scheduleBatch(cfg_.seed, rec.step, cfg_.batchSize, mixRatio_,
                                  static_cast<int>(av_.size()), static_cast<int>(audio_.size()));
  rec.kind = plan.kind;
  const auto& corpus = plan.kind == BatchKind::AudioOnly ? audio_ : av_;
  for (int idx : plan.clips) {
    rec.clipIds.push_back(corpus[idx].id);
  }
  try {
    Tensor<float> total;
    const double inv = 1.0 / static_cast<double>(plan.clips.size());
    for (std::size_t b = 0; b < plan.clips.size(); ++b) {
      const auto seed = deriveSeed(cfg_.seed, static_cast<std::uint64_t>(rec.step), b + 1);
      const auto cl = clipPretrainLoss(model_, cfg_, corpus[plan.clips[b]], plan.kind, seed);
      const auto scaled = ad::scale(cl.total, inv);
      total = total.defined() ? ad::add(total, scaled) : scaled;
      rec.loss.c1 += inv * cl.parts.c1;
      rec.loss.c2 += inv * cl.parts.c2;
      rec.loss.sa += inv * cl.parts.sa;
      rec.loss.maskedCount += cl.parts.maskedCount;
    }
    rec.loss.total = rec.loss.c1 + rec.loss.c2 + cfg_.loss.lambda * rec.loss.sa;
    const auto grads = ad::backward(total);
    rec.lr = learningRateAt(cfg_.learningRate, cfg_.warmupFraction, cfg_.steps, rec.step);
    ad::adamStep(params_, grads, adam_, rec.lr);
  } catch (const Error& e) {
    if (e.kind() == ErrorKind::Numeric) {
      fail(ErrorKind::Numeric, "pretrain step " + std::to_string(rec.step) + " (clips " +
                                   joinIds(rec.clipIds) + "): " + e.what());
    }
    throw;
  }
  step_ = rec.step;
  rec.wallMs = cfg_.logWallTime ? elapsedMs(t0) : 0.0;
  return rec;
}

std::vector<StepRecord> Pretrainer::run(int steps, MetricsLog* log) {
  std::vector<StepRecord> out;
  for (int i = 0; i < steps; ++i) {
    out.push_back(step());
    if (log) {
      log->write(metricsJson(out.back()));
    }
  }
  return out;
}

Checkpoint Pretrainer::checkpoint() const {
  json cfg = toJson(cfg_);
  cfg["kind"] = "pretrain";
  return makeCheckpoint(model_, &adam_, step_, std::move(cfg));
}

double maskedRankAccuracy(const AvModel<float>& model, const std::vector<MultichannelClip>& clips,
                          const PretrainConfig& cfg, std::uint64_t seed) {
  std::int64_t hits = 0, count = 0;
  for (std::size_t i = 0; i < clips.size(); ++i) {
    const auto enc = model.encodeClip(clips[i]);
    const auto mask = drawTrainingMask(enc.fused.dim(0), cfg.augment.spanLength, cfg.augment.maskProb,
                                       deriveSeed(seed, kTagRank, i, 1));
    const auto c = model.context(model.maskFeatures(enc.fused, mask));
    const auto negs = sampleNegatives(mask.indices, cfg.loss.negatives, deriveSeed(seed, kTagRank, i, 2));
    const auto [h, n] = rankHits(model.predictFused(c), enc.fused, negs);
    hits += h;
    count += n;
  }
  return count == 0 ? 0.0 : static_cast<double>(hits) / static_cast<double>(count);
}

DropoutDecision modalityDecision(Modality m, int channels, const MultichannelClip& clip) {
  auto d = DropoutDecision::none(channels);
  for (int i = clip.numChannels(); i < channels; ++i) {
    d.channelDropped[i] = true;
  }
  d.videoDropped = !clip.hasVideo() || m == Modality::Audio;
  if (m == Modality::Video) {
    if (!clip.hasVideo()) {
      fail(ErrorKind::Data, "clip '" + clip.id + "' has no video for a video-only run");
    }
    std::fill(d.channelDropped.begin(), d.channelDropped.end(), true);
  }
  return d;
}

namespace {

Tensor<float> clipLogProbs(const AvModel<float>& model, const MultichannelClip& clip, Modality m) {
  const int channels = model.layout().channels;
  if (clip.numChannels() > channels) {
    fail(ErrorKind::Shape, "clip '" + clip.id + "' has more channels than the model");
  }
  const auto d = modalityDecision(m, channels, clip);
  const auto enc = model.encode(slotWaveforms(clip, channels, d), clip.video, clip.videoFrames, d);
  return model.ctcLogProbs(model.context(enc.fused));
}

} // namespace

CerReport evaluateCer(const AvModel<float>& model, const std::vector<MultichannelClip>& clips,
                      Modality modality) {
  checkNotEmpty(clips, "evaluate");
  CerReport r;
  for (const auto& clip : clips) {
    auto hyp = greedyDecode(clipLogProbs(model, clip, modality));
    r.edits += editDistance(hyp, clip.transcript);
    r.refLength += static_cast<std::int64_t>(clip.transcript.size());
    r.hypotheses.push_back(std::move(hyp));
  }
  if (r.refLength == 0) {
    fail(ErrorKind::Data, "evaluate: every reference transcript is empty");
  }
  r.cer = static_cast<double>(r.edits) / static_cast<double>(r.refLength);
  return r;
}

Finetuner::Finetuner(FinetuneConfig cfg, AvModel<float> pretrained, std::vector<MultichannelClip> clips)
    : cfg_(std::move(cfg)), clips_(std::move(clips)), model_(cloneModel(pretrained)) {
  cfg_.validate();
  if (!model_.hasCtcHead()) {
    model_.addCtcHead(cfg_.vocab, cfg_.seed);
  }
  init();
}

Finetuner::Finetuner(const Checkpoint& ckpt, std::vector<MultichannelClip> clips)
    : clips_(std::move(clips)) {
  if (ckpt.config.value("kind", "") != "finetune") {
    fail(ErrorKind::Data, "checkpoint was not written by fine-tuning");
  }
  cfg_ = finetuneConfigFromJson(ckpt.config.at("finetune"));
  pretrainSnapshot_ = ckpt.config.value("pretrain", json());
  model_ = modelFromCheckpoint(ckpt);
  init();
  loadAdamState(ckpt, adam_);
  step_ = static_cast<int>(ckpt.step);
}

void Finetuner::init() {
  checkNotEmpty(clips_, "finetune");
  if (model_.config().vocab != cfg_.vocab) {
    fail(ErrorKind::Domain, "vocab mismatch: model head has " + std::to_string(model_.config().vocab) +
                                " tokens, config has " + std::to_string(cfg_.vocab));
  }
  for (const auto& clip : clips_) {
    for (int tok : clip.transcript) {
      if (tok < 0 || tok >= cfg_.vocab) {
        fail(ErrorKind::Domain, "vocab mismatch: clip '" + clip.id + "' uses token " +
                                    std::to_string(tok) + " outside the " +
                                    std::to_string(cfg_.vocab) + "-token vocabulary");
      }
    }
  }
  params_.clear();
  for (auto& [name, t] : collectParameters<float>(model_)) {
    auto starts = [&](const char* p) { return name.rfind(p, 0) == 0; };
    bool train = !starts("head.") && !starts("mask_embedding");
    if (cfg_.freezeAll && !starts("ctc.")) {
      train = false;
    }
    if (cfg_.freezeEncoders && (starts("audio.") || starts("visual."))) {
      train = false;
    }
    if (cfg_.freezeContext && starts("context.")) {
      train = false;
    }
    if (train) {
      params_.emplace(name, t);
    }
  }
  adam_ = {};
}

std::vector<std::string> Finetuner::trainableNames() const {
  std::vector<std::string> out;
  for (const auto& [name, t] : params_) {
    out.push_back(name);
  }
  return out;
}

StepRecord Finetuner::step() {
  const auto t0 = std::chrono::steady_clock::now();
  StepRecord rec;
  rec.step = step_ + 1;
  const auto plan = scheduleBatch(cfg_.seed, rec.step, cfg_.batchSize, 0.0,
                                  static_cast<int>(clips_.size()), 0);
  for (int idx : plan.clips) {
    rec.clipIds.push_back(clips_[idx].id);
  }
  try {
    Tensor<float> total;
    const double inv = 1.0 / static_cast<double>(plan.clips.size());
    for (int idx : plan.clips) {
      const auto& clip = clips_[idx];
      const auto loss = ad::scale(ctcLoss(clipLogProbs(model_, clip, cfg_.modality), clip.transcript), inv);
      total = total.defined() ? ad::add(total, loss) : loss;
    }
    rec.loss.total = total.item();
    const auto grads = ad::backward(total);
    rec.lr = cfg_.learningRate;
    ad::adamStep(params_, grads, adam_, rec.lr);
  } catch (const Error& e) {
    if (e.kind() == ErrorKind::Numeric) {
      fail(ErrorKind::Numeric, "finetune step " + std::to_string(rec.step) + " (clips " +
                                   joinIds(rec.clipIds) + "): " + e.what());
    }
    throw;
  }
  step_ = rec.step;
  rec.wallMs = cfg_.logWallTime ? elapsedMs(t0) : 0.0;
  return rec;
}

std::vector<std::pair<int, double>> Finetuner::run(int steps, MetricsLog* log) {
  std::vector<std::pair<int, double>> history;
  for (int i = 0; i < steps; ++i) {
    const auto rec = step();
    json line = {{"step", rec.step}, {"ctc", rec.loss.total}, {"lr", rec.lr}, {"wall_ms", rec.wallMs}};
    const bool last = i + 1 == steps;
    if (last || (cfg_.evalEvery > 0 && rec.step % cfg_.evalEvery == 0)) {
      const double c = evaluateCer(model_, clips_, cfg_.modality).cer;
      history.emplace_back(rec.step, c);
      line["train_cer"] = c;
    }
    if (log) {
      log->write(line);
    }
  }
  return history;
}

Checkpoint Finetuner::checkpoint() const {
  json cfg;
  cfg["kind"] = "finetune";
  cfg["finetune"] = toJson(cfg_);
  cfg["pretrain"] = pretrainSnapshot_;
  return makeCheckpoint(model_, &adam_, step_, std::move(cfg));
}

Checkpoint makeCheckpoint(const AvModel<float>& model, const ad::AdamState<float>* adam, int step,
                          json config) {
  Checkpoint ckpt;
  ckpt.step = static_cast<std::uint64_t>(step);
  json m;
  to_json(m, model.config());
  config["model"] = m;
  config["optimizer_step"] = adam ? adam->step : 0;
  ckpt.config = std::move(config);
  model.visit([&](const std::string& name, const Tensor<float>& t) {
    ckpt.tensors[name] = {t.shape(), t.data()};
  });
  if (adam) {
    auto put = [&](const std::string& prefix, const std::map<std::string, std::vector<float>>& moments) {
      for (const auto& [name, v] : moments) {
        ckpt.tensors[prefix + name] = {ckpt.tensors.at(name).shape, v};
      }
    };
    put("optim.m.", adam->m);
    put("optim.v.", adam->v);
  }
  return ckpt;
}

AvModel<float> cloneModel(const AvModel<float>& model) {
  return modelFromCheckpoint(makeCheckpoint(model, nullptr, 0, json::object()));
}

AvModel<float> modelFromCheckpoint(const Checkpoint& ckpt) {
  if (!ckpt.config.contains("model")) {
    fail(ErrorKind::Data, "checkpoint config has no model section");
  }
  ModelConfig mc;
  try {
    from_json(ckpt.config.at("model"), mc);
  } catch (const json::exception& e) {
    fail(ErrorKind::Data, std::string("checkpoint model config: ") + e.what());
  }
  AvModel<float> model(mc, 0);
  std::size_t seen = 0;
  model.visit([&](const std::string& name, const Tensor<float>& t) {
    auto it = ckpt.tensors.find(name);
    if (it == ckpt.tensors.end()) {
      fail(ErrorKind::Data, "checkpoint is missing parameter '" + name + "'");
    }
    if (it->second.shape != t.shape()) {
      fail(ErrorKind::Data, "checkpoint parameter '" + name + "' has shape " +
                                ad::shapeString(it->second.shape) + ", config implies " +
                                ad::shapeString(t.shape()));
    }
    auto handle = t;
    handle.mutableData() = it->second.data;
    ++seen;
  });
  const auto stored = std::count_if(ckpt.tensors.begin(), ckpt.tensors.end(),
                                    [](const auto& kv) { return kv.first.rfind("optim.", 0) != 0; });
  if (static_cast<std::size_t>(stored) != seen) {
    fail(ErrorKind::Data, "checkpoint holds " + std::to_string(stored) + " parameters, config describes " +
                              std::to_string(seen));
  }
  return model;
}

void loadAdamState(const Checkpoint& ckpt, ad::AdamState<float>& adam) {
  adam.step = ckpt.config.value("optimizer_step", std::uint64_t{0});
  adam.m.clear();
  adam.v.clear();
  for (const auto& [name, t] : ckpt.tensors) {
    if (name.rfind("optim.m.", 0) == 0) {
      adam.m[name.substr(8)] = t.data;
    } else if (name.rfind("optim.v.", 0) == 0) {
      adam.v[name.substr(8)] = t.data;
    }
  }
}

void extractFeatures(const AvModel<float>& model, const std::vector<MultichannelClip>& clips,
                     const std::filesystem::path& out) {
  std::string lines;
  for (const auto& clip : clips) {
    const auto c = model.context(model.encodeClip(clip).fused);
    const std::string rel = clip.id + ".f32";
    writeF32(out / rel, c.data());
    lines += json({{"id", clip.id}, {"path", rel}, {"frames", c.dim(0)}, {"dim", c.dim(1)}}).dump() + "\n";
  }
  writeFileAtomic(out / "features.jsonl", lines);
}

} // namespace avw2
