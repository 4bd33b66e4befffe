#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "avw2/nn.h"

namespace avw2 {

constexpr int kSampleRate = 16000;
constexpr int kVideoFps = 25;
constexpr int kSamplesPerFrame = kSampleRate / kVideoFps; // 640, i.e. 40 ms

struct ConvLayerSpec {
  int kernel = 1;
  int stride = 1;
  int channels = 64;
};

// Eight strided conv blocks (conv -> norm -> GELU) and a linear map to the
// output width. The first block normalizes each channel over time, the rest
// normalize each frame over channels. Each layer is zero padded by (kernel - stride) samples so
// the stack yields exactly floor(samples / 640) frames.
struct AudioEncoderConfig {
  std::vector<ConvLayerSpec> layers = {{10, 5, 64}, {3, 2, 64}, {3, 2, 64}, {3, 2, 64},
                                       {3, 2, 64},  {2, 2, 64}, {2, 2, 64}, {2, 2, 64}};
  int outputDim = 64;

  // Exactly 8 layers, stride product 640, kernel >= stride.
  void validate() const;
};

ad::Conv1dParams convParams(const ConvLayerSpec& layer);

// Frame count after the stack; throws naming the minimum length when the
// input is too short.
std::int64_t numFrames(const AudioEncoderConfig& config, std::int64_t numSamples);
// Smallest input producing one frame.
std::int64_t minSamples(const AudioEncoderConfig& config);

struct VisualEncoderConfig {
  int height = 16;
  int width = 16;
  int kernel = 3;
  int stemStride = 2;
  int stemChannels = 8;
  int hiddenChannels = 16;
  int outputDim = 64;

  void validate() const;
};

enum class StreamTag { Visual, AudioChannel, SingleAudio, Fused, Context };

const char* streamTagName(StreamTag tag);

template <typename T>
struct FeatureSequence {
  StreamTag tag = StreamTag::Fused;
  int channel = -1; // audio channel index, -1 otherwise
  Tensor<T> features; // [frames, dim]

  std::int64_t frames() const {
    return features.dim(0);
  }
  std::int64_t dim() const {
    return features.dim(1);
  }
};

template <typename T>
class AudioEncoder {
 public:
  AudioEncoder() = default;
  AudioEncoder(const AudioEncoderConfig& config, Rng& rng);

  // waveform: [samples].
  FeatureSequence<T> encode(const Tensor<T>& waveform, int channel = -1) const;
  FeatureSequence<T> encode(std::span<const float> waveform, int channel = -1) const;
  // One shared parameter set for every channel; output order follows input.
  std::vector<FeatureSequence<T>> encodeChannels(const std::vector<Tensor<T>>& waveforms) const;

  const AudioEncoderConfig& config() const {
    return config_;
  }

  template <typename F>
  void visit(const std::string& prefix, F&& f) const {
    for (std::size_t i = 0; i < conv_.size(); ++i) {
      const std::string p = prefix + ".conv" + std::to_string(i);
      f(p + ".weight", conv_[i].weight);
      f(p + ".bias", conv_[i].bias);
      if (i == 0) {
        firstNorm_.visit(p + ".norm", f);
      } else {
        norm_[i - 1].visit(p + ".norm", f);
      }
    }
    proj_.visit(prefix + ".proj", f);
  }

 private:
  struct Conv {
    Tensor<T> weight;
    Tensor<T> bias;
  };
  AudioEncoderConfig config_;
  std::vector<Conv> conv_;
  TemporalNorm<T> firstNorm_;
  std::vector<LayerNorm<T>> norm_;
  Linear<T> proj_;
};

// Two-layer conv stem, global average pooling, normalization of each pooled
// channel over time and a linear map; one vector per input frame.
template <typename T>
class VisualEncoder {
 public:
  VisualEncoder() = default;
  VisualEncoder(const VisualEncoderConfig& config, Rng& rng);

  // frames: [count, height, width].
  FeatureSequence<T> encode(const Tensor<T>& frames) const;

  const VisualEncoderConfig& config() const {
    return config_;
  }

  template <typename F>
  void visit(const std::string& prefix, F&& f) const {
    f(prefix + ".stem.weight", stemW_);
    f(prefix + ".stem.bias", stemB_);
    f(prefix + ".hidden.weight", hiddenW_);
    f(prefix + ".hidden.bias", hiddenB_);
    norm_.visit(prefix + ".norm", f);
    proj_.visit(prefix + ".proj", f);
  }

 private:
  VisualEncoderConfig config_;
  Tensor<T> stemW_, stemB_, hiddenW_, hiddenB_;
  TemporalNorm<T> norm_;
  Linear<T> proj_;
};

} // namespace avw2
