#pragma once

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <memory>
#include <nlohmann/json.hpp>
#include <string>
#include <vector>

#include "avw2/checkpoint.h"
#include "avw2/model.h"
#include "avw2/objectives.h"

namespace avw2 {

// Recorded for a future seq2seq decoder; the CTC path does not use it.
constexpr double kLabelSmoothing = 0.1;

struct AugmentConfig {
  DropoutConfig dropout;
  bool dynamicNoise = true;
  double noiseMinDb = 0.0;
  double noiseMaxDb = 20.0;
  int spanLength = 3;
  double maskProb = 0.2;
};

struct PretrainConfig {
  ModelConfig model;
  AugmentConfig augment;
  LossConfig loss;
  bool interChannel = true; // false trains with l_c1 (+ l_sa) only
  int steps = 300;
  int batchSize = 1;
  double learningRate = 5e-4;
  double warmupFraction = 0.1;
  double mixRatio = -1.0; // negative: 0.5 with an audio-only corpus, else 0
  std::uint64_t seed = 1;
  bool logWallTime = false;

  void validate() const;
  double resolvedMixRatio(bool haveAudioCorpus) const;
};

enum class Modality { AudioVisual, Audio, Video };

Modality parseModality(const std::string& s);
const char* modalityName(Modality m);

struct FinetuneConfig {
  int steps = 500;
  int batchSize = 1;
  double learningRate = 1e-3;
  std::uint64_t seed = 1;
  Modality modality = Modality::AudioVisual;
  int vocab = kVocabSize;
  bool freezeEncoders = false;
  bool freezeContext = false;
  bool freezeAll = false; // everything except the CTC head
  int evalEvery = 0;      // 0: evaluate only at the end
  bool logWallTime = false;

  void validate() const;
};

nlohmann::json toJson(const PretrainConfig& c);
PretrainConfig pretrainConfigFromJson(const nlohmann::json& j);
nlohmann::json toJson(const FinetuneConfig& c);
FinetuneConfig finetuneConfigFromJson(const nlohmann::json& j);

// Applies "a.b.c=value" overrides to an existing key. Values parse as JSON
// when possible and as strings otherwise; unknown keys and type changes are
// usage errors.
void applyOverride(nlohmann::json& config, const std::string& assignment);

// Base rate with linear warmup over the first warmupFraction of the steps,
// constant afterwards. `step` is 1-based.
double learningRateAt(double base, double warmupFraction, int steps, int step);

struct BatchPlan {
  BatchKind kind = BatchKind::AudioVisual;
  std::vector<int> clips;
};

// Deterministic in (seed, step): the batch kind is audio-only with
// probability r; clip indices walk a per-epoch seeded permutation of the
// chosen corpus.
BatchPlan scheduleBatch(std::uint64_t seed, int step, int batchSize, double mixRatio, int avClips,
                        int audioClips);

// Masked span set with at least two positions (redrawn otherwise).
MaskSpec drawTrainingMask(std::int64_t frames, int spanLength, double prob, std::uint64_t seed);

struct StepRecord {
  int step = 0;
  BatchKind kind = BatchKind::AudioVisual;
  LossBreakdown loss;
  double lr = 0.0;
  double wallMs = 0.0;
  std::vector<std::string> clipIds;
};

nlohmann::json metricsJson(const StepRecord& r);

// Appends one JSON object per line.
class MetricsLog {
 public:
  MetricsLog() = default;
  MetricsLog(const std::filesystem::path& path, bool append);
  void write(const nlohmann::json& record);
  bool open() const {
    return static_cast<bool>(out_);
  }

 private:
  std::unique_ptr<std::ofstream> out_;
};

// Loss of one training clip: forward through encoders, fusion, masking and
// the context network; intra- and inter-channel terms for audio-visual clips, the
// single-channel term for audio-only clips.
struct ClipLoss {
  Tensor<float> total;
  LossBreakdown parts;
};

ClipLoss clipPretrainLoss(const AvModel<float>& model, const PretrainConfig& cfg,
                          const MultichannelClip& clip, BatchKind kind, std::uint64_t seed);

class Pretrainer {
 public:
  Pretrainer(PretrainConfig cfg, std::vector<MultichannelClip> avClips,
             std::vector<MultichannelClip> audioClips = {});
  // Continues from a checkpoint written by checkpoint(); the configuration is
  // taken from its snapshot.
  Pretrainer(const Checkpoint& ckpt, std::vector<MultichannelClip> avClips,
             std::vector<MultichannelClip> audioClips = {});

  StepRecord step();
  std::vector<StepRecord> run(int steps, MetricsLog* log = nullptr);

  int currentStep() const {
    return step_;
  }
  const PretrainConfig& config() const {
    return cfg_;
  }
  double mixRatio() const {
    return mixRatio_;
  }
  const AvModel<float>& model() const {
    return model_;
  }
  Checkpoint checkpoint() const;

 private:
  void init();

  PretrainConfig cfg_;
  std::vector<MultichannelClip> av_;
  std::vector<MultichannelClip> audio_;
  double mixRatio_ = 0.0;
  AvModel<float> model_;
  ad::NamedParams<float> params_;
  ad::AdamState<float> adam_;
  int step_ = 0;
};

// Fraction of masked positions whose fused prediction is strictly closer to
// its own fused target than to each of K negatives from other masked
// positions. No dropout or noise augmentation; masks and negatives are drawn
// from `seed`.
double maskedRankAccuracy(const AvModel<float>& model, const std::vector<MultichannelClip>& clips,
                          const PretrainConfig& cfg, std::uint64_t seed);

// Streams of a clip under the given modality: Audio zeroes video, Video
// zeroes every channel.
DropoutDecision modalityDecision(Modality m, int channels, const MultichannelClip& clip);

struct CerReport {
  double cer = 0.0;
  std::int64_t edits = 0;
  std::int64_t refLength = 0;
  std::vector<Transcript> hypotheses;
};

// Corpus CER: total edit distance over total reference length.
CerReport evaluateCer(const AvModel<float>& model, const std::vector<MultichannelClip>& clips,
                      Modality modality);

class Finetuner {
 public:
  Finetuner(FinetuneConfig cfg, AvModel<float> pretrained, std::vector<MultichannelClip> clips);
  Finetuner(const Checkpoint& ckpt, std::vector<MultichannelClip> clips);

  StepRecord step();
  // CER history: (step, training CER) at each evaluation.
  std::vector<std::pair<int, double>> run(int steps, MetricsLog* log = nullptr);

  const AvModel<float>& model() const {
    return model_;
  }
  const FinetuneConfig& config() const {
    return cfg_;
  }
  int currentStep() const {
    return step_;
  }
  // Names of the parameters updated by the optimizer.
  std::vector<std::string> trainableNames() const;
  Checkpoint checkpoint() const;

 private:
  void init();

  FinetuneConfig cfg_;
  nlohmann::json pretrainSnapshot_;
  std::vector<MultichannelClip> clips_;
  AvModel<float> model_;
  ad::NamedParams<float> params_;
  ad::AdamState<float> adam_;
  int step_ = 0;
};

// Model parameters (and optimizer moments under "optim.m." / "optim.v.").
Checkpoint makeCheckpoint(const AvModel<float>& model, const ad::AdamState<float>* adam, int step,
                          nlohmann::json config);
// Rebuilds the model described by config["model"] and loads every parameter;
// missing tensors or shapes that disagree with the config are data errors.
AvModel<float> modelFromCheckpoint(const Checkpoint& ckpt);
void loadAdamState(const Checkpoint& ckpt, ad::AdamState<float>& adam);
// Deep copy; copying an AvModel directly shares its parameter storage.
AvModel<float> cloneModel(const AvModel<float>& model);

// Writes <out>/<id>.f32 holding the unmasked context features [frames, d]
// plus features.jsonl describing each file.
void extractFeatures(const AvModel<float>& model, const std::vector<MultichannelClip>& clips,
                     const std::filesystem::path& out);

} // namespace avw2
