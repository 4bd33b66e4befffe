#include "avw2/fusion_mask.h"

#include <algorithm>
#include <cmath>

namespace avw2 {

int DropoutDecision::survivingStreams() const {
  int n = videoDropped ? 0 : 1;
  for (bool d : channelDropped) {
    n += d ? 0 : 1;
  }
  return n;
}

std::vector<bool> DropoutDecision::activeChannels() const {
  std::vector<bool> out(channelDropped.size());
  for (std::size_t i = 0; i < out.size(); ++i) {
    out[i] = !channelDropped[i];
  }
  return out;
}

DropoutDecision DropoutDecision::none(int channels) {
  DropoutDecision d;
  d.channelDropped.assign(channels, false);
  return d;
}

DropoutDecision drawDropout(const DropoutConfig& config, int channels, std::uint64_t seed,
                            bool hasVideo) {
  auto checkProb = [](double p) {
    if (!(p >= 0.0 && p <= 1.0)) {
      fail(ErrorKind::Domain, "draw_dropout: probabilities must lie in [0, 1]");
    }
  };
  checkProb(config.videoProb);
  checkProb(config.channelProb);
  if (channels < 1 && !hasVideo) {
    fail(ErrorKind::Domain, "draw_dropout: no streams");
  }
  if (config.channelProb >= 1.0 && (!hasVideo || config.videoProb >= 1.0)) {
    fail(ErrorKind::Domain, "draw_dropout: configuration drops every stream with certainty");
  }
  Rng rng(seed);
  DropoutDecision d;
  d.seed = seed;
  d.channelDropped.assign(channels, false);
  do {
    // Every stream consumes one draw so the stream sequence stays aligned.
    const bool video = rng.bernoulli(config.videoProb);
    d.videoDropped = !hasVideo || video;
    for (int i = 0; i < channels; ++i) {
      d.channelDropped[i] = rng.bernoulli(config.channelProb);
    }
  } while (d.survivingStreams() == 0);
  return d;
}

template <typename T>
Tensor<T> fuse(const FusionLayout& layout, const Tensor<T>& video,
               const std::vector<Tensor<T>>& audio, const DropoutDecision& decision) {
  if (static_cast<int>(audio.size()) != layout.channels ||
      static_cast<int>(decision.channelDropped.size()) != layout.channels) {
    fail(ErrorKind::Shape, "fuse: expected " + std::to_string(layout.channels) + " audio streams, got " +
                               std::to_string(audio.size()));
  }
  std::int64_t frames = -1;
  auto checkStream = [&](const Tensor<T>& t, std::int64_t width, const std::string& what) {
    if (!t.defined()) {
      fail(ErrorKind::Shape, "fuse: " + what + " is missing but not dropped");
    }
    if (t.rank() != 2 || t.dim(1) != width) {
      fail(ErrorKind::Shape, "fuse: " + what + " has shape " + ad::shapeString(t.shape()) +
                                 ", expected width " + std::to_string(width));
    }
    if (frames >= 0 && t.dim(0) != frames) {
      fail(ErrorKind::Shape, "fuse: " + what + " has " + std::to_string(t.dim(0)) +
                                 " frames, expected " + std::to_string(frames));
    }
    frames = t.dim(0);
  };
  if (!decision.videoDropped) {
    checkStream(video, layout.videoDim, "video");
  }
  for (int i = 0; i < layout.channels; ++i) {
    if (!decision.channelDropped[i]) {
      checkStream(audio[i], layout.audioDim, "channel " + std::to_string(i));
    }
  }
  if (frames < 0) {
    fail(ErrorKind::Domain, "fuse: every stream is dropped");
  }
  std::vector<Tensor<T>> blocks;
  blocks.push_back(decision.videoDropped ? Tensor<T>::zeros({frames, layout.videoDim}) : video);
  for (int i = 0; i < layout.channels; ++i) {
    blocks.push_back(decision.channelDropped[i] ? Tensor<T>::zeros({frames, layout.audioDim})
                                                : audio[i]);
  }
  return ad::concat(blocks, -1);
}

MaskSpec maskFromStarts(std::int64_t frames, int spanLength, const std::vector<std::int64_t>& starts) {
  MaskSpec spec;
  spec.frames = frames;
  spec.spanLength = spanLength;
  std::vector<std::uint8_t> hit(frames, 0);
  for (auto s : starts) {
    for (std::int64_t t = s; t < std::min<std::int64_t>(frames, s + spanLength); ++t) {
      hit[t] = 1;
    }
  }
  for (std::int64_t t = 0; t < frames; ++t) {
    if (hit[t]) {
      spec.indices.push_back(t);
    }
  }
  return spec;
}

MaskSpec sampleMask(std::int64_t frames, int spanLength, double startProb, std::uint64_t seed,
                    bool forceNonEmpty) {
  if (frames < 1 || spanLength < 1 || !(startProb >= 0.0 && startProb <= 1.0)) {
    fail(ErrorKind::Domain, "sample_mask: need frames >= 1, span >= 1, p in [0, 1]");
  }
  Rng rng(seed);
  std::vector<std::int64_t> starts;
  do {
    starts.clear();
    for (std::int64_t t = 0; t < frames; ++t) {
      if (rng.bernoulli(startProb)) {
        starts.push_back(t);
      }
    }
  } while (starts.empty() && forceNonEmpty && startProb > 0.0);
  MaskSpec spec = maskFromStarts(frames, spanLength, starts);
  spec.startProb = startProb;
  spec.seed = seed;
  return spec;
}

template <typename T>
Tensor<T> applyMask(const Tensor<T>& features, const MaskSpec& spec, const Tensor<T>& embedding) {
  if (features.rank() != 2 || embedding.rank() != 1 || embedding.dim(0) != features.dim(1)) {
    fail(ErrorKind::Shape, "apply_mask: embedding " + ad::shapeString(embedding.shape()) +
                               " does not match features " + ad::shapeString(features.shape()));
  }
  if (spec.empty()) {
    return features;
  }
  return ad::replaceRows(features, spec.indices, embedding);
}

double signalPower(std::span<const float> x) {
  double s = 0.0;
  for (float v : x) {
    s += static_cast<double>(v) * v;
  }
  return x.empty() ? 0.0 : s / static_cast<double>(x.size());
}

std::vector<float> addNoise(std::span<const float> waveform, double snrDb, std::uint64_t seed) {
  std::vector<float> out(waveform.begin(), waveform.end());
  if (std::isinf(snrDb) && snrDb > 0) {
    return out;
  }
  const double ps = signalPower(waveform);
  if (!(ps > 0.0)) {
    fail(ErrorKind::Domain, "add_noise: signal has zero power");
  }
  Rng rng(seed);
  std::vector<double> noise(out.size());
  double pn = 0.0;
  for (auto& n : noise) {
    n = rng.normal();
    pn += n * n;
  }
  pn /= static_cast<double>(noise.size());
  const double gain = std::sqrt(ps / std::pow(10.0, snrDb / 10.0) / pn);
  for (std::size_t i = 0; i < out.size(); ++i) {
    out[i] = static_cast<float>(out[i] + gain * noise[i]);
  }
  return out;
}

template Tensor<float> fuse(const FusionLayout&, const Tensor<float>&,
                            const std::vector<Tensor<float>>&, const DropoutDecision&);
template Tensor<double> fuse(const FusionLayout&, const Tensor<double>&,
                             const std::vector<Tensor<double>>&, const DropoutDecision&);
template Tensor<float> applyMask(const Tensor<float>&, const MaskSpec&, const Tensor<float>&);
template Tensor<double> applyMask(const Tensor<double>&, const MaskSpec&, const Tensor<double>&);

} // namespace avw2
