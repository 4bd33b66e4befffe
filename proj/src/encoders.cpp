#include "avw2/encoders.h"

#include <cmath>

namespace avw2 {

void AudioEncoderConfig::validate() const {
  if (layers.size() != 8) {
    fail(ErrorKind::Domain,
         "audio encoder: expected 8 conv layers, got " + std::to_string(layers.size()));
  }
  std::int64_t stride = 1;
  for (const auto& l : layers) {
    if (l.stride < 1 || l.kernel < l.stride || l.channels < 1) {
      fail(ErrorKind::Domain, "audio encoder: each layer needs kernel >= stride >= 1");
    }
    stride *= l.stride;
  }
  if (stride != kSamplesPerFrame) {
    fail(ErrorKind::Domain, "audio encoder: stride product must be 640 (40 ms at 16 kHz), got " +
                                std::to_string(stride));
  }
  if (outputDim < 1) {
    fail(ErrorKind::Domain, "audio encoder: output dimension must be positive");
  }
}

ad::Conv1dParams convParams(const ConvLayerSpec& layer) {
  const int pad = layer.kernel - layer.stride;
  return {layer.kernel, layer.stride, pad / 2, pad - pad / 2};
}

std::int64_t minSamples(const AudioEncoderConfig& config) {
  std::int64_t need = 1;
  for (auto it = config.layers.rbegin(); it != config.layers.rend(); ++it) {
    const auto p = convParams(*it);
    need = std::max<std::int64_t>(1, (need - 1) * p.stride + p.kernel - p.padLeft - p.padRight);
  }
  return need;
}

std::int64_t numFrames(const AudioEncoderConfig& config, std::int64_t numSamples) {
  std::int64_t len = numSamples;
  for (const auto& layer : config.layers) {
    const auto p = convParams(layer);
    const std::int64_t padded = len + p.padLeft + p.padRight;
    if (padded < p.kernel) {
      fail(ErrorKind::Domain, "audio encoder: input of " + std::to_string(numSamples) +
                                  " samples is shorter than the minimum of " +
                                  std::to_string(minSamples(config)));
    }
    len = (padded - p.kernel) / p.stride + 1;
  }
  return len;
}

void VisualEncoderConfig::validate() const {
  if (height < kernel || width < kernel || stemStride < 1 || outputDim < 1) {
    fail(ErrorKind::Domain, "visual encoder: invalid configuration");
  }
  const int h1 = (height - kernel) / stemStride + 1;
  const int w1 = (width - kernel) / stemStride + 1;
  if (h1 < kernel || w1 < kernel) {
    fail(ErrorKind::Domain, "visual encoder: frame too small for the conv stem");
  }
}

const char* streamTagName(StreamTag tag) {
  switch (tag) {
    case StreamTag::Visual:
      return "visual";
    case StreamTag::AudioChannel:
      return "audio-channel";
    case StreamTag::SingleAudio:
      return "single-audio";
    case StreamTag::Fused:
      return "fused";
    case StreamTag::Context:
      return "context";
  }
  return "unknown";
}

template <typename T>
AudioEncoder<T>::AudioEncoder(const AudioEncoderConfig& config, Rng& rng) : config_(config) {
  config_.validate();
  std::int64_t cin = 1;
  for (const auto& layer : config_.layers) {
    const std::int64_t fanIn = layer.kernel * cin;
    const double bound = 1.0 / std::sqrt(static_cast<double>(fanIn));
    conv_.push_back({uniformParameter<T>({fanIn, layer.channels}, bound, rng),
                     uniformParameter<T>({layer.channels}, bound, rng)});
    if (conv_.size() == 1) {
      firstNorm_ = TemporalNorm<T>(layer.channels);
    } else {
      norm_.emplace_back(layer.channels);
    }
    cin = layer.channels;
  }
  proj_ = Linear<T>(cin, config_.outputDim, rng);
}

template <typename T>
FeatureSequence<T> AudioEncoder<T>::encode(const Tensor<T>& waveform, int channel) const {
  if (waveform.rank() != 1) {
    fail(ErrorKind::Shape, "encode_audio: waveform must be 1-D, got " + ad::shapeString(waveform.shape()));
  }
  for (auto v : waveform.data()) {
    if (!std::isfinite(v)) {
      fail(ErrorKind::Numeric, "encode_audio: non-finite input sample");
    }
  }
  numFrames(config_, waveform.numel()); // length check with a descriptive error
  Tensor<T> x = ad::reshape(waveform, {waveform.numel(), 1});
  for (std::size_t i = 0; i < conv_.size(); ++i) {
    x = ad::conv1d(x, conv_[i].weight, conv_[i].bias, convParams(config_.layers[i]));
    x = ad::gelu(i == 0 ? firstNorm_(x) : norm_[i - 1](x));
  }
  return {channel < 0 ? StreamTag::SingleAudio : StreamTag::AudioChannel, channel, proj_(x)};
}

template <typename T>
FeatureSequence<T> AudioEncoder<T>::encode(std::span<const float> waveform, int channel) const {
  std::vector<T> data(waveform.begin(), waveform.end());
  const auto n = static_cast<std::int64_t>(data.size());
  return encode(Tensor<T>::constant({n}, std::move(data)), channel);
}

template <typename T>
std::vector<FeatureSequence<T>> AudioEncoder<T>::encodeChannels(
    const std::vector<Tensor<T>>& waveforms) const {
  std::vector<FeatureSequence<T>> out;
  for (std::size_t i = 0; i < waveforms.size(); ++i) {
    if (waveforms[i].numel() != waveforms[0].numel()) {
      fail(ErrorKind::Shape, "encode_channels: channel " + std::to_string(i) + " has " +
                                 std::to_string(waveforms[i].numel()) + " samples, channel 0 has " +
                                 std::to_string(waveforms[0].numel()));
    }
    out.push_back(encode(waveforms[i], static_cast<int>(i)));
  }
  return out;
}

template <typename T>
VisualEncoder<T>::VisualEncoder(const VisualEncoderConfig& config, Rng& rng) : config_(config) {
  config_.validate();
  const std::int64_t k2 = config_.kernel * config_.kernel;
  double bound = 1.0 / std::sqrt(static_cast<double>(k2));
  stemW_ = uniformParameter<T>({k2, config_.stemChannels}, bound, rng);
  stemB_ = uniformParameter<T>({config_.stemChannels}, bound, rng);
  bound = 1.0 / std::sqrt(static_cast<double>(k2 * config_.stemChannels));
  hiddenW_ = uniformParameter<T>({k2 * config_.stemChannels, config_.hiddenChannels}, bound, rng);
  hiddenB_ = uniformParameter<T>({config_.hiddenChannels}, bound, rng);
  norm_ = TemporalNorm<T>(config_.hiddenChannels);
  proj_ = Linear<T>(config_.hiddenChannels, config_.outputDim, rng);
}

template <typename T>
FeatureSequence<T> VisualEncoder<T>::encode(const Tensor<T>& frames) const {
  if (frames.rank() != 3 || frames.dim(1) != config_.height || frames.dim(2) != config_.width) {
    fail(ErrorKind::Shape, "encode_video: expected [frames, " + std::to_string(config_.height) +
                               ", " + std::to_string(config_.width) + "], got " +
                               ad::shapeString(frames.shape()));
  }
  const std::int64_t n = frames.dim(0);
  Tensor<T> x = ad::reshape(frames, {n, config_.height, config_.width, 1});
  x = ad::gelu(ad::conv2d(x, stemW_, stemB_, {config_.kernel, config_.kernel, config_.stemStride}));
  x = ad::gelu(ad::conv2d(x, hiddenW_, hiddenB_, {config_.kernel, config_.kernel, 1}));
  x = ad::reshape(x, {n, x.dim(1) * x.dim(2), config_.hiddenChannels});
  x = norm_(ad::meanAxis(x, 1));
  return {StreamTag::Visual, -1, proj_(x)};
}

template class AudioEncoder<float>;
template class AudioEncoder<double>;
template class VisualEncoder<float>;
template class VisualEncoder<double>;

} // namespace avw2
