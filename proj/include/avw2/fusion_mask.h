#pragma once

#include <cstdint>
#include <limits>
#include <span>
#include <vector>

#include "avw2/nn.h"

namespace avw2 {

// Widths of the concatenated streams: video first, then channels 1..C.
struct FusionLayout {
  std::int64_t videoDim = 64;
  std::int64_t audioDim = 64;
  int channels = 6;

  std::int64_t fusedWidth() const {
    return videoDim + channels * audioDim;
  }
  std::int64_t channelOffset(int channel) const {
    return videoDim + channel * audioDim;
  }
};

struct DropoutConfig {
  double videoProb = 0.25;
  double channelProb = 0.1;
};

struct DropoutDecision {
  bool videoDropped = false;
  std::vector<bool> channelDropped;
  std::uint64_t seed = 0;

  int survivingStreams() const;
  std::vector<bool> activeChannels() const;
  // Nothing dropped.
  static DropoutDecision none(int channels);
};

// Independent Bernoulli drop per stream; the joint draw is repeated while
// every stream is dropped. With `hasVideo` false the video stream is always
// dropped and never counts as a survivor.
DropoutDecision drawDropout(const DropoutConfig& config, int channels, std::uint64_t seed,
                            bool hasVideo = true);

// Feature-axis concatenation (video, channel 1..C). Dropped streams contribute
// exact zero blocks and their inputs may be left undefined.
template <typename T>
Tensor<T> fuse(const FusionLayout& layout, const Tensor<T>& video,
               const std::vector<Tensor<T>>& audio, const DropoutDecision& decision);

struct MaskSpec {
  std::int64_t frames = 0;
  int spanLength = 3;
  double startProb = 0.2;
  std::uint64_t seed = 0;
  std::vector<std::int64_t> indices; // sorted, unique

  bool empty() const {
    return indices.empty();
  }
};

// Union of spans of `spanLength` starting at each of `starts`, clipped at
// `frames`.
MaskSpec maskFromStarts(std::int64_t frames, int spanLength, const std::vector<std::int64_t>& starts);

// Every frame starts a span with probability `startProb`. When
// `forceNonEmpty` is set and p > 0 the draw repeats until something is masked.
MaskSpec sampleMask(std::int64_t frames, int spanLength, double startProb, std::uint64_t seed,
                    bool forceNonEmpty = true);

// Masked rows are replaced by the learned embedding ([width]).
template <typename T>
Tensor<T> applyMask(const Tensor<T>& features, const MaskSpec& spec, const Tensor<T>& embedding);

constexpr double kNoNoise = std::numeric_limits<double>::infinity();

// Adds white Gaussian noise whose empirical power is exactly
// signal_power / 10^(snr/10). snrDb == +inf returns the input unchanged.
std::vector<float> addNoise(std::span<const float> waveform, double snrDb, std::uint64_t seed);

double signalPower(std::span<const float> x);

} // namespace avw2
