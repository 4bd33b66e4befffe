#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "avw2/ctc.h"

namespace avw2 {

constexpr int kFrameSize = 16; // video frames are kFrameSize x kFrameSize
constexpr int kVocabSize = 8;
constexpr int kMaxDelay = 64;

struct ClipSpec {
  std::string id = "clip";
  Transcript tokens;
  int channels = 6;
  double durationSec = 2.0;
  std::vector<int> delays;     // samples, per channel
  std::vector<double> snrsDb;  // per channel; +inf for noiseless
  std::uint64_t seed = 0;
  bool withVideo = true;

  std::int64_t numSamples() const;
  void validate() const;
};

struct ClipMetadata {
  std::vector<int> delays;
  std::vector<double> snrsDb;
  // Per-channel scale applied after mixing to keep samples within [-1, 1].
  std::vector<double> gains;
  std::uint64_t seed = 0;
  bool beamformed = false;

  bool operator==(const ClipMetadata&) const = default;
};

struct MultichannelClip {
  std::string id;
  std::vector<std::vector<float>> channels; // 16 kHz samples
  std::vector<float> video;                 // frame-major [frames, 16, 16]; empty when absent
  std::int64_t videoFrames = 0;
  Transcript transcript;
  ClipMetadata meta;

  int numChannels() const {
    return static_cast<int>(channels.size());
  }
  std::int64_t numSamples() const {
    return channels.empty() ? 0 : static_cast<std::int64_t>(channels.front().size());
  }
  bool hasVideo() const {
    return videoFrames > 0;
  }
  bool operator==(const MultichannelClip&) const = default;
};

// Frame range [begin, end) of each token; consecutive tokens are separated by
// one silent frame.
std::vector<std::pair<std::int64_t, std::int64_t>> tokenLayout(const Transcript& tokens,
                                                               std::int64_t frames);

// Noiseless token-conditioned waveform: each token sounds a fixed harmonic
// signature with a token-specific pitch glide across its slice.
std::vector<float> renderContent(const Transcript& tokens, std::int64_t numSamples);
// Deterministic 16x16 pattern per active token, neutral frame in gaps.
std::vector<float> renderVideo(const Transcript& tokens, std::int64_t frames);
// content delayed by `delay` samples (positive = later), zero filled.
std::vector<float> shiftSignal(const std::vector<float>& x, int delay);

MultichannelClip genClip(const ClipSpec& spec);

struct CorpusConfig {
  int clips = 64;
  int channels = 6;
  double durationSec = 2.0;
  int minTokens = 3;
  int maxTokens = 6;
  double snrMinDb = 5.0;
  double snrMaxDb = 20.0;
  int maxDelay = 16;
  std::uint64_t seed = 7;
  bool withVideo = true;
  std::string idPrefix = "clip";
};

ClipSpec corpusClipSpec(const CorpusConfig& config, int index);
// Clips are generated independently; `threads` > 1 splits the work without
// changing the result.
std::vector<MultichannelClip> genCorpus(const CorpusConfig& config, int threads = 1);

struct ManifestRecord {
  std::string id;
  std::vector<std::string> audio; // relative paths, one per channel
  std::string video;              // empty when absent
  std::string text;
  int sampleRate = 16000;
  int fps = 25;
  std::uint64_t seed = 0;
  std::int64_t numSamples = 0;
  std::int64_t videoFrames = 0;
  std::vector<int> delays;
  std::vector<double> snrsDb;
  std::vector<double> gains;
  bool beamformed = false;
  std::vector<std::uint32_t> audioCrc;
  std::uint32_t videoCrc = 0;
  std::uint32_t textCrc = 0;
};

struct CorpusManifest {
  std::filesystem::path root;
  std::vector<ManifestRecord> records;
};

constexpr const char* kManifestName = "manifest.jsonl";

// Writes audio/<id>.ch<k>.f32, video/<id>.f32, text/<id>.txt and
// manifest.jsonl. Each file is written to a temporary name and renamed.
CorpusManifest writeCorpus(const std::vector<MultichannelClip>& clips,
                           const std::filesystem::path& dir);
// Accepts the corpus directory or the manifest path. Rejects duplicate ids,
// missing or truncated files and checksum mismatches with an error naming the
// clip.
CorpusManifest readManifest(const std::filesystem::path& path);
std::vector<MultichannelClip> readCorpus(const CorpusManifest& manifest);
std::vector<MultichannelClip> readCorpus(const std::filesystem::path& path);

// Raw little-endian float32 helpers.
void writeF32(const std::filesystem::path& path, const std::vector<float>& data);
std::vector<float> readF32(const std::filesystem::path& path);
void writeFileAtomic(const std::filesystem::path& path, const std::string& bytes);
std::uint32_t crc32Of(const void* data, std::size_t size);

} // namespace avw2
