#include "avw2/model.h"

namespace avw2 {

using nlohmann::json;

void ModelConfig::validate() const {
  if (channels < 1) {
    fail(ErrorKind::Domain, "model: need at least one audio channel");
  }
  if (vocab < 0) {
    fail(ErrorKind::Domain, "model: negative vocabulary size");
  }
  audio.validate();
  visual.validate();
  transformer.validate();
}

void to_json(json& j, const ModelConfig& c) {
  json layers = json::array();
  for (const auto& l : c.audio.layers) {
    layers.push_back({{"kernel", l.kernel}, {"stride", l.stride}, {"channels", l.channels}});
  }
  j = {{"channels", c.channels},
       {"audio", {{"layers", layers}, {"output_dim", c.audio.outputDim}}},
       {"visual",
        {{"height", c.visual.height},
         {"width", c.visual.width},
         {"kernel", c.visual.kernel},
         {"stem_stride", c.visual.stemStride},
         {"stem_channels", c.visual.stemChannels},
         {"hidden_channels", c.visual.hiddenChannels},
         {"output_dim", c.visual.outputDim}}},
       {"transformer",
        {{"layers", c.transformer.layers},
         {"model_dim", c.transformer.modelDim},
         {"heads", c.transformer.heads},
         {"ffn_dim", c.transformer.ffnDim},
         {"dropout", c.transformer.dropout}}},
       {"vocab", c.vocab}};
}

void from_json(const json& j, ModelConfig& c) {
  c.channels = j.at("channels").get<int>();
  c.audio.layers.clear();
  for (const auto& l : j.at("audio").at("layers")) {
    c.audio.layers.push_back(
        {l.at("kernel").get<int>(), l.at("stride").get<int>(), l.at("channels").get<int>()});
  }
  c.audio.outputDim = j.at("audio").at("output_dim").get<int>();
  const auto& v = j.at("visual");
  c.visual.height = v.at("height").get<int>();
  c.visual.width = v.at("width").get<int>();
  c.visual.kernel = v.at("kernel").get<int>();
  c.visual.stemStride = v.at("stem_stride").get<int>();
  c.visual.stemChannels = v.at("stem_channels").get<int>();
  c.visual.hiddenChannels = v.at("hidden_channels").get<int>();
  c.visual.outputDim = v.at("output_dim").get<int>();
  const auto& t = j.at("transformer");
  c.transformer.layers = t.at("layers").get<int>();
  c.transformer.modelDim = t.at("model_dim").get<int>();
  c.transformer.heads = t.at("heads").get<int>();
  c.transformer.ffnDim = t.at("ffn_dim").get<int>();
  c.transformer.dropout = t.at("dropout").get<double>();
  c.vocab = j.at("vocab").get<int>();
}

template <typename T>
Tensor<T> videoTensor(const std::vector<float>& video, std::int64_t frames) {
  if (static_cast<std::int64_t>(video.size()) != frames * kFrameSize * kFrameSize) {
    fail(ErrorKind::Shape, "video: " + std::to_string(video.size()) + " values for " +
                               std::to_string(frames) + " frames");
  }
  return Tensor<T>::constant({frames, kFrameSize, kFrameSize}, std::vector<T>(video.begin(), video.end()));
}

template <typename T>
AvModel<T>::AvModel(const ModelConfig& config, std::uint64_t seed) : config_(config) {
  config_.validate();
  Rng rng(deriveSeed(seed, 0x6d6f64656c));
  audio_ = AudioEncoder<T>(config_.audio, rng);
  visual_ = VisualEncoder<T>(config_.visual, rng);
  const auto width = layout().fusedWidth();
  maskEmbedding_ = uniformParameter<T>({width}, 1.0, rng);
  context_ = ContextEncoder<T>(width, config_.transformer, rng);
  headFused_ = Linear<T>(config_.transformer.modelDim, width, rng);
  headAudio_ = Linear<T>(config_.transformer.modelDim, config_.audio.outputDim, rng);
  if (config_.vocab > 0) {
    addCtcHead(config_.vocab, seed);
  }
}

template <typename T>
void AvModel<T>::addCtcHead(int vocab, std::uint64_t seed) {
  if (vocab < 1) {
    fail(ErrorKind::Domain, "ctc head: vocabulary must be non-empty");
  }
  Rng rng(deriveSeed(seed, 0x637463));
  ctc_ = Linear<T>(config_.transformer.modelDim, vocab + 1, rng);
  config_.vocab = vocab;
}

template <typename T>
Tensor<T> AvModel<T>::ctcLogProbs(const Tensor<T>& c) const {
  if (!hasCtcHead()) {
    fail(ErrorKind::Domain, "model has no CTC head");
  }
  return ad::logSoftmax(ctc_(c));
}

template <typename T>
EncodedStreams<T> AvModel<T>::encode(const std::vector<std::vector<float>>& waveforms,
                                     const std::vector<float>& video, std::int64_t videoFrames,
                                     const DropoutDecision& decision) const {
  const auto lay = layout();
  if (static_cast<int>(waveforms.size()) != lay.channels ||
      static_cast<int>(decision.channelDropped.size()) != lay.channels) {
    fail(ErrorKind::Shape, "model: expected " + std::to_string(lay.channels) + " channel slots, got " +
                               std::to_string(waveforms.size()));
  }
  EncodedStreams<T> out;
  out.decision = decision;
  out.audio.resize(lay.channels);
  for (int i = 0; i < lay.channels; ++i) {
    if (!decision.channelDropped[i]) {
      out.audio[i] = audio_.encode(std::span<const float>(waveforms[i]), i).features;
    }
  }
  if (!decision.videoDropped) {
    if (videoFrames <= 0) {
      fail(ErrorKind::Shape, "model: video stream is active but the clip has no video");
    }
    out.video = visual_.encode(videoTensor<T>(video, videoFrames)).features;
  }
  out.fused = fuse(lay, out.video, out.audio, decision);
  return out;
}

template <typename T>
EncodedStreams<T> AvModel<T>::encodeClip(const MultichannelClip& clip) const {
  const auto lay = layout();
  if (clip.numChannels() > lay.channels) {
    fail(ErrorKind::Shape, "clip '" + clip.id + "' has " + std::to_string(clip.numChannels()) +
                               " channels, model expects at most " + std::to_string(lay.channels));
  }
  std::vector<std::vector<float>> waves(lay.channels);
  DropoutDecision d = DropoutDecision::none(lay.channels);
  for (int i = 0; i < lay.channels; ++i) {
    if (i < clip.numChannels()) {
      waves[i] = clip.channels[i];
    } else {
      d.channelDropped[i] = true;
    }
  }
  d.videoDropped = !clip.hasVideo();
  return encode(waves, clip.video, clip.videoFrames, d);
}

template class AvModel<float>;
template class AvModel<double>;
template Tensor<float> videoTensor(const std::vector<float>&, std::int64_t);
template Tensor<double> videoTensor(const std::vector<float>&, std::int64_t);

} // namespace avw2
