#pragma once

#include <cstdint>
#include <nlohmann/json.hpp>
#include <optional>
#include <vector>

#include "avw2/context_encoder.h"
#include "avw2/data_synth.h"
#include "avw2/encoders.h"
#include "avw2/fusion_mask.h"

namespace avw2 {

struct ModelConfig {
  int channels = 6;
  AudioEncoderConfig audio;
  VisualEncoderConfig visual;
  TransformerConfig transformer;
  int vocab = 0; // CTC head over vocab + 1 classes; 0 means no head

  FusionLayout layout() const {
    return {visual.outputDim, audio.outputDim, channels};
  }
  void validate() const;
};

void to_json(nlohmann::json& j, const ModelConfig& c);
void from_json(const nlohmann::json& j, ModelConfig& c);

// Encoder outputs of one clip. Dropped streams are left undefined.
template <typename T>
struct EncodedStreams {
  Tensor<T> video;
  std::vector<Tensor<T>> audio;
  DropoutDecision decision;
  Tensor<T> fused;
};

// Audio and visual encoders, mask embedding, context network and output
// heads. Parameter names: audio.*, visual.*, mask_embedding, context.*,
// head.fused.*, head.audio.*, ctc.*.
template <typename T>
class AvModel {
 public:
  AvModel() = default;
  AvModel(const ModelConfig& config, std::uint64_t seed);

  const ModelConfig& config() const {
    return config_;
  }
  FusionLayout layout() const {
    return config_.layout();
  }
  bool hasCtcHead() const {
    return ctc_.weight.defined();
  }
  // Adds (or replaces) a CTC head over vocab + 1 classes.
  void addCtcHead(int vocab, std::uint64_t seed);

  // Encodes the given waveforms into the fused layout. `waveforms` holds one
  // entry per layout channel; dropped channels may be empty.
  EncodedStreams<T> encode(const std::vector<std::vector<float>>& waveforms,
                           const std::vector<float>& video, std::int64_t videoFrames,
                           const DropoutDecision& decision) const;
  // Every available stream of a clip, nothing dropped. Clips with fewer
  // channels than the layout (e.g. beamformed mono) fill the leading slots and
  // zero the rest; clips without video zero the video block.
  EncodedStreams<T> encodeClip(const MultichannelClip& clip) const;

  Tensor<T> maskFeatures(const Tensor<T>& fused, const MaskSpec& mask) const {
    return applyMask(fused, mask, maskEmbedding_);
  }
  Tensor<T> context(const Tensor<T>& fused, std::uint64_t dropoutSeed = 0) const {
    return context_.encode(fused, dropoutSeed);
  }
  Tensor<T> predictFused(const Tensor<T>& c) const {
    return headFused_(c);
  }
  Tensor<T> predictAudio(const Tensor<T>& c) const {
    return headAudio_(c);
  }
  // Log-probabilities over blank + vocab, [frames, vocab + 1].
  Tensor<T> ctcLogProbs(const Tensor<T>& c) const;

  const ContextEncoder<T>& contextEncoder() const {
    return context_;
  }
  const AudioEncoder<T>& audioEncoder() const {
    return audio_;
  }

  template <typename F>
  void visit(F&& f) const {
    audio_.visit("audio", f);
    visual_.visit("visual", f);
    f(std::string("mask_embedding"), maskEmbedding_);
    context_.visit("context", f);
    headFused_.visit("head.fused", f);
    headAudio_.visit("head.audio", f);
    if (hasCtcHead()) {
      ctc_.visit("ctc", f);
    }
  }

 private:
  ModelConfig config_;
  AudioEncoder<T> audio_;
  VisualEncoder<T> visual_;
  Tensor<T> maskEmbedding_;
  ContextEncoder<T> context_;
  Linear<T> headFused_;
  Linear<T> headAudio_;
  Linear<T> ctc_;
};

// [frames, 16, 16] tensor of a clip's video.
template <typename T>
Tensor<T> videoTensor(const std::vector<float>& video, std::int64_t frames);

} // namespace avw2
