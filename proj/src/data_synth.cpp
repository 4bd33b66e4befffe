#include "avw2/data_synth.h"

#include <zlib.h>

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <iomanip>
#include <nlohmann/json.hpp>
#include <numbers>
#include <set>
#include <sstream>
#include <thread>

#include "avw2/encoders.h"
#include "avw2/fusion_mask.h"

namespace avw2 {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

struct TokenVoice {
  double f0;        // Hz
  double glide;     // relative pitch change across the slice
  double harmonics[4];
};

// Fixed per-token signatures; changing them changes every generated corpus.
constexpr TokenVoice kVoices[kVocabSize] = {
    {180.0, 0.30, {1.00, 0.50, 0.25, 0.10}}, {230.0, -0.30, {0.60, 1.00, 0.30, 0.20}},
    {290.0, 0.40, {1.00, 0.20, 0.60, 0.10}}, {350.0, -0.40, {0.40, 0.40, 1.00, 0.30}},
    {420.0, 0.25, {1.00, 0.70, 0.10, 0.40}}, {500.0, -0.25, {0.30, 1.00, 0.60, 0.10}},
    {600.0, 0.35, {1.00, 0.10, 0.10, 0.60}}, {720.0, -0.35, {0.50, 0.60, 0.20, 1.00}},
};

constexpr double kContentPeak = 0.25;

void checkToken(int tok) {
  if (tok < 0 || tok >= kVocabSize) {
    fail(ErrorKind::Domain, "gen_clip: token " + std::to_string(tok) + " outside the " +
                                std::to_string(kVocabSize) + "-token vocabulary");
  }
}

std::string crcHex(std::uint32_t v) {
  std::ostringstream ss;
  ss << std::hex << std::setw(8) << std::setfill('0') << v;
  return ss.str();
}

std::uint32_t parseCrc(const std::string& s) {
  return static_cast<std::uint32_t>(std::stoul(s, nullptr, 16));
}

std::string readFileBytes(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) {
    fail(ErrorKind::Io, "cannot open " + path.string());
  }
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

std::string f32Bytes(const std::vector<float>& data) {
  std::string bytes(data.size() * 4, '\0');
  for (std::size_t i = 0; i < data.size(); ++i) {
    auto u = std::bit_cast<std::uint32_t>(data[i]);
    if constexpr (std::endian::native == std::endian::big) {
      u = __builtin_bswap32(u);
    }
    std::memcpy(bytes.data() + 4 * i, &u, 4);
  }
  return bytes;
}

std::vector<float> f32FromBytes(const std::string& bytes) {
  std::vector<float> out(bytes.size() / 4);
  for (std::size_t i = 0; i < out.size(); ++i) {
    std::uint32_t u;
    std::memcpy(&u, bytes.data() + 4 * i, 4);
    if constexpr (std::endian::native == std::endian::big) {
      u = __builtin_bswap32(u);
    }
    out[i] = std::bit_cast<float>(u);
  }
  return out;
}

std::string transcriptText(const Transcript& t) {
  std::string s;
  for (std::size_t i = 0; i < t.size(); ++i) {
    s += (i ? " " : "") + std::to_string(t[i]);
  }
  return s + "\n";
}

json snrJson(double v) {
  return std::isinf(v) ? json(nullptr) : json(v);
}

double snrFromJson(const json& j) {
  return j.is_null() ? kNoNoise : j.get<double>();
}

} // namespace

std::int64_t ClipSpec::numSamples() const {
  return static_cast<std::int64_t>(std::llround(durationSec * kSampleRate));
}

void ClipSpec::validate() const {
  auto bad = [this](const std::string& why) {
    fail(ErrorKind::Domain, "gen_clip '" + id + "': " + why);
  };
  if (tokens.empty()) {
    bad("empty transcript");
  }
  for (int t : tokens) {
    checkToken(t);
  }
  if (channels < 1) {
    bad("needs at least one channel");
  }
  if (static_cast<int>(delays.size()) != channels || static_cast<int>(snrsDb.size()) != channels) {
    bad("delays and SNRs must list one value per channel");
  }
  for (int d : delays) {
    if (std::abs(d) > kMaxDelay) {
      bad("delay " + std::to_string(d) + " exceeds +/-" + std::to_string(kMaxDelay) + " samples");
    }
  }
  for (double s : snrsDb) {
    if (std::isnan(s) || (std::isinf(s) && s < 0)) {
      bad("invalid SNR");
    }
  }
  const std::int64_t frames = numSamples() / kSamplesPerFrame;
  const auto n = static_cast<std::int64_t>(tokens.size());
  if (frames < 2 || frames < 3 * n - 1) {
    bad("duration of " + std::to_string(durationSec) + " s is too short for " +
        std::to_string(n) + " tokens");
  }
}

std::vector<std::pair<std::int64_t, std::int64_t>> tokenLayout(const Transcript& tokens,
                                                               std::int64_t frames) {
  const auto n = static_cast<std::int64_t>(tokens.size());
  const std::int64_t usable = frames - (n - 1);
  if (n == 0 || usable < n) {
    fail(ErrorKind::Domain, "token layout: " + std::to_string(frames) + " frames cannot hold " +
                                std::to_string(n) + " tokens");
  }
  std::vector<std::pair<std::int64_t, std::int64_t>> out;
  std::int64_t start = 0;
  for (std::int64_t i = 0; i < n; ++i) {
    const std::int64_t len = usable / n + (i < usable % n ? 1 : 0);
    out.emplace_back(start, start + len);
    start += len + 1;
  }
  return out;
}

std::vector<float> renderContent(const Transcript& tokens, std::int64_t numSamples) {
  std::vector<float> out(numSamples, 0.0f);
  const std::int64_t frames = numSamples / kSamplesPerFrame;
  const auto layout = tokenLayout(tokens, frames);
  double norm = 0.0;
  for (const auto& v : kVoices) {
    double s = 0.0;
    for (double h : v.harmonics) {
      s += h;
    }
    norm = std::max(norm, s);
  }
  for (std::size_t k = 0; k < tokens.size(); ++k) {
    const TokenVoice& voice = kVoices[tokens[k]];
    const std::int64_t a = layout[k].first * kSamplesPerFrame;
    const std::int64_t b = layout[k].second * kSamplesPerFrame;
    const double len = static_cast<double>(b - a);
    double phase = 0.0;
    for (std::int64_t n = a; n < b; ++n) {
      const double pos = (n - a) / len;
      const double f = voice.f0 * (1.0 + voice.glide * (pos - 0.5));
      phase += 2.0 * std::numbers::pi * f / kSampleRate;
      // Short raised-cosine ramps at the slice edges avoid clicks.
      const double ramp = std::min({1.0, (n - a) / 160.0, (b - 1 - n) / 160.0});
      double s = 0.0;
      for (int h = 0; h < 4; ++h) {
        s += voice.harmonics[h] * std::sin((h + 1) * phase);
      }
      out[n] = static_cast<float>(kContentPeak * ramp * s / norm);
    }
  }
  return out;
}

std::vector<float> renderVideo(const Transcript& tokens, std::int64_t frames) {
  constexpr int px = kFrameSize * kFrameSize;
  std::vector<float> out(frames * px, 0.1f);
  const auto layout = tokenLayout(tokens, frames);
  for (std::size_t k = 0; k < tokens.size(); ++k) {
    const int tok = tokens[k];
    const double width = 3.0 + (tok % 4) * 1.2;
    const double height = 1.0 + (tok / 4) * 1.5;
    const double angle = tok * std::numbers::pi / kVocabSize;
    const auto [first, last] = layout[k];
    for (std::int64_t f = first; f < last; ++f) {
      const double pos = (f - first + 0.5) / static_cast<double>(last - first);
      const double open = 0.5 + 0.5 * std::sin(std::numbers::pi * pos);
      float* frame = out.data() + f * px;
      for (int y = 0; y < kFrameSize; ++y) {
        for (int x = 0; x < kFrameSize; ++x) {
          const double dx = x - 7.5, dy = y - 7.5;
          const double r = (dx * dx) / (width * width) + (dy * dy) / (height * height * open * open);
          const double grating = 0.5 + 0.5 * std::cos(0.9 * (dx * std::cos(angle) + dy * std::sin(angle)));
          frame[y * kFrameSize + x] = static_cast<float>(r <= 1.0 ? 0.9 : 0.1 + 0.3 * grating);
        }
      }
    }
  }
  return out;
}

std::vector<float> shiftSignal(const std::vector<float>& x, int delay) {
  const auto n = static_cast<std::int64_t>(x.size());
  std::vector<float> out(n, 0.0f);
  for (std::int64_t i = 0; i < n; ++i) {
    const std::int64_t src = i - delay;
    if (src >= 0 && src < n) {
      out[i] = x[src];
    }
  }
  return out;
}

MultichannelClip genClip(const ClipSpec& spec) {
  spec.validate();
  const std::int64_t samples = spec.numSamples();
  const std::int64_t frames = samples / kSamplesPerFrame;
  const auto content = renderContent(spec.tokens, samples);

  MultichannelClip clip;
  clip.id = spec.id;
  clip.transcript = spec.tokens;
  clip.meta.delays = spec.delays;
  clip.meta.snrsDb = spec.snrsDb;
  clip.meta.seed = spec.seed;
  for (int c = 0; c < spec.channels; ++c) {
    auto ch = addNoise(shiftSignal(content, spec.delays[c]), spec.snrsDb[c], deriveSeed(spec.seed, 1, c));
    float peak = 0.0f;
    for (float v : ch) {
      peak = std::max(peak, std::abs(v));
    }
    double gain = 1.0;
    if (peak > 1.0f) {
      gain = 1.0 / peak;
      for (auto& v : ch) {
        v = static_cast<float>(v * gain);
      }
    }
    clip.meta.gains.push_back(gain);
    clip.channels.push_back(std::move(ch));
  }
  if (spec.withVideo) {
    clip.video = renderVideo(spec.tokens, frames);
    clip.videoFrames = frames;
  }
  return clip;
}

ClipSpec corpusClipSpec(const CorpusConfig& config, int index) {
  if (config.minTokens < 1 || config.maxTokens < config.minTokens) {
    fail(ErrorKind::Domain, "corpus: invalid token count range");
  }
  Rng rng(deriveSeed(config.seed, 0x636c6970, index));
  ClipSpec spec;
  std::ostringstream id;
  id << config.idPrefix << std::setw(4) << std::setfill('0') << index;
  spec.id = id.str();
  spec.channels = config.channels;
  spec.durationSec = config.durationSec;
  spec.withVideo = config.withVideo;
  spec.seed = deriveSeed(config.seed, 0x6e6f6973, index);
  const int n = config.minTokens + static_cast<int>(rng.below(config.maxTokens - config.minTokens + 1));
  for (int i = 0; i < n; ++i) {
    spec.tokens.push_back(static_cast<int>(rng.below(kVocabSize)));
  }
  for (int c = 0; c < config.channels; ++c) {
    const int d = c == 0 ? 0 : static_cast<int>(rng.below(2 * config.maxDelay + 1)) - config.maxDelay;
    spec.delays.push_back(d);
    spec.snrsDb.push_back(rng.uniform(config.snrMinDb, config.snrMaxDb));
  }
  return spec;
}

std::vector<MultichannelClip> genCorpus(const CorpusConfig& config, int threads) {
  std::vector<MultichannelClip> clips(config.clips);
  threads = std::clamp(threads, 1, std::max(1, config.clips));
  if (threads == 1) {
    for (int i = 0; i < config.clips; ++i) {
      clips[i] = genClip(corpusClipSpec(config, i));
    }
    return clips;
  }
  std::vector<std::thread> pool;
  std::vector<std::exception_ptr> errors(threads);
  for (int w = 0; w < threads; ++w) {
    pool.emplace_back([&, w] {
      try {
        for (int i = w; i < config.clips; i += threads) {
          clips[i] = genClip(corpusClipSpec(config, i));
        }
      } catch (...) {
        errors[w] = std::current_exception();
      }
    });
  }
  for (auto& t : pool) {
    t.join();
  }
  for (auto& e : errors) {
    if (e) {
      std::rethrow_exception(e);
    }
  }
  return clips;
}

std::uint32_t crc32Of(const void* data, std::size_t size) {
  return static_cast<std::uint32_t>(
      ::crc32(0L, static_cast<const Bytef*>(data), static_cast<uInt>(size)));
}

void writeFileAtomic(const fs::path& path, const std::string& bytes) {
  if (path.has_parent_path()) {
    fs::create_directories(path.parent_path());
  }
  const fs::path tmp = path.string() + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) {
      fail(ErrorKind::Io, "cannot write " + tmp.string());
    }
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!out) {
      fail(ErrorKind::Io, "write failed for " + tmp.string());
    }
  }
  std::error_code ec;
  fs::rename(tmp, path, ec);
  if (ec) {
    fail(ErrorKind::Io, "cannot rename " + tmp.string() + ": " + ec.message());
  }
}

void writeF32(const fs::path& path, const std::vector<float>& data) {
  writeFileAtomic(path, f32Bytes(data));
}

std::vector<float> readF32(const fs::path& path) {
  const auto bytes = readFileBytes(path);
  if (bytes.size() % 4 != 0) {
    fail(ErrorKind::Data, path.string() + ": size is not a multiple of 4 bytes");
  }
  return f32FromBytes(bytes);
}

CorpusManifest writeCorpus(const std::vector<MultichannelClip>& clips, const fs::path& dir) {
  std::set<std::string> ids;
  CorpusManifest manifest;
  manifest.root = dir;
  std::string lines;
  for (const auto& clip : clips) {
    if (!ids.insert(clip.id).second) {
      fail(ErrorKind::Data, "write_corpus: duplicate clip id '" + clip.id + "'");
    }
    ManifestRecord rec;
    rec.id = clip.id;
    rec.seed = clip.meta.seed;
    rec.numSamples = clip.numSamples();
    rec.videoFrames = clip.videoFrames;
    rec.delays = clip.meta.delays;
    rec.snrsDb = clip.meta.snrsDb;
    rec.gains = clip.meta.gains;
    rec.beamformed = clip.meta.beamformed;
    for (int c = 0; c < clip.numChannels(); ++c) {
      const std::string rel = "audio/" + clip.id + ".ch" + std::to_string(c) + ".f32";
      const auto bytes = f32Bytes(clip.channels[c]);
      writeFileAtomic(dir / rel, bytes);
      rec.audio.push_back(rel);
      rec.audioCrc.push_back(crc32Of(bytes.data(), bytes.size()));
    }
    if (clip.hasVideo()) {
      rec.video = "video/" + clip.id + ".f32";
      const auto bytes = f32Bytes(clip.video);
      writeFileAtomic(dir / rec.video, bytes);
      rec.videoCrc = crc32Of(bytes.data(), bytes.size());
    }
    rec.text = "text/" + clip.id + ".txt";
    const auto text = transcriptText(clip.transcript);
    writeFileAtomic(dir / rec.text, text);
    rec.textCrc = crc32Of(text.data(), text.size());

    json j;
    j["id"] = rec.id;
    j["audio"] = rec.audio;
    j["video"] = rec.video.empty() ? json(nullptr) : json(rec.video);
    j["text"] = rec.text;
    j["sample_rate"] = rec.sampleRate;
    j["fps"] = rec.fps;
    j["seed"] = rec.seed;
    j["num_samples"] = rec.numSamples;
    j["video_frames"] = rec.videoFrames;
    j["delays"] = rec.delays;
    json snrs = json::array();
    for (double s : rec.snrsDb) {
      snrs.push_back(snrJson(s));
    }
    j["snrs_db"] = snrs;
    j["gains"] = rec.gains;
    j["beamformed"] = rec.beamformed;
    json crcs = json::array();
    for (auto c : rec.audioCrc) {
      crcs.push_back(crcHex(c));
    }
    j["audio_crc32"] = crcs;
    j["video_crc32"] = rec.video.empty() ? json(nullptr) : json(crcHex(rec.videoCrc));
    j["text_crc32"] = crcHex(rec.textCrc);
    lines += j.dump() + "\n";
    manifest.records.push_back(std::move(rec));
  }
  writeFileAtomic(dir / kManifestName, lines);
  return manifest;
}

CorpusManifest readManifest(const fs::path& path) {
  const fs::path file = fs::is_directory(path) ? path / kManifestName : path;
  std::ifstream in(file);
  if (!in) {
    fail(ErrorKind::Data, "corpus manifest not found: " + file.string());
  }
  CorpusManifest manifest;
  manifest.root = file.parent_path();
  std::set<std::string> ids;
  std::string line;
  int lineNo = 0;
  while (std::getline(in, line)) {
    ++lineNo;
    if (line.empty()) {
      continue;
    }
    ManifestRecord rec;
    try {
      const json j = json::parse(line);
      rec.id = j.at("id").get<std::string>();
      rec.audio = j.at("audio").get<std::vector<std::string>>();
      rec.video = j.at("video").is_null() ? "" : j.at("video").get<std::string>();
      rec.text = j.at("text").get<std::string>();
      rec.sampleRate = j.at("sample_rate").get<int>();
      rec.fps = j.at("fps").get<int>();
      rec.seed = j.at("seed").get<std::uint64_t>();
      rec.numSamples = j.at("num_samples").get<std::int64_t>();
      rec.videoFrames = j.at("video_frames").get<std::int64_t>();
      rec.delays = j.at("delays").get<std::vector<int>>();
      for (const auto& s : j.at("snrs_db")) {
        rec.snrsDb.push_back(snrFromJson(s));
      }
      rec.gains = j.at("gains").get<std::vector<double>>();
      rec.beamformed = j.value("beamformed", false);
      for (const auto& c : j.at("audio_crc32")) {
        rec.audioCrc.push_back(parseCrc(c.get<std::string>()));
      }
      if (!rec.video.empty()) {
        rec.videoCrc = parseCrc(j.at("video_crc32").get<std::string>());
      }
      rec.textCrc = parseCrc(j.at("text_crc32").get<std::string>());
    } catch (const std::exception& e) {
      fail(ErrorKind::Data, file.string() + ":" + std::to_string(lineNo) +
                                ": malformed manifest record: " + e.what());
    }
    // Beamformed records keep the source array's per-channel metadata.
    const bool perChannelOk = rec.beamformed ? rec.audio.size() == 1 && rec.delays.size() == rec.snrsDb.size()
                                             : rec.delays.size() == rec.audio.size() &&
                                                   rec.snrsDb.size() == rec.audio.size();
    if (rec.audio.empty() || rec.audio.size() != rec.audioCrc.size() || !perChannelOk) {
      fail(ErrorKind::Data, file.string() + ":" + std::to_string(lineNo) + ": record '" + rec.id +
                                "' has inconsistent per-channel fields");
    }
    if (rec.sampleRate != kSampleRate || rec.fps != kVideoFps) {
      fail(ErrorKind::Data, "clip '" + rec.id + "': unsupported sample rate or frame rate");
    }
    if (!ids.insert(rec.id).second) {
      fail(ErrorKind::Data, file.string() + ":" + std::to_string(lineNo) + ": duplicate clip id '" +
                                rec.id + "'");
    }
    manifest.records.push_back(std::move(rec));
  }
  return manifest;
}

std::vector<MultichannelClip> readCorpus(const CorpusManifest& manifest) {
  std::vector<MultichannelClip> clips;
  for (const auto& rec : manifest.records) {
    auto load = [&](const std::string& rel, std::uint32_t crc, std::size_t expectBytes) {
      const fs::path p = manifest.root / rel;
      if (!fs::exists(p)) {
        fail(ErrorKind::Data, "clip '" + rec.id + "': missing file " + rel);
      }
      auto bytes = readFileBytes(p);
      if (expectBytes && bytes.size() != expectBytes) {
        fail(ErrorKind::Data, "clip '" + rec.id + "': " + rel + " has " + std::to_string(bytes.size()) +
                                  " bytes, expected " + std::to_string(expectBytes) + " (truncated?)");
      }
      if (crc32Of(bytes.data(), bytes.size()) != crc) {
        fail(ErrorKind::Data, "clip '" + rec.id + "': checksum mismatch in " + rel);
      }
      return bytes;
    };
    MultichannelClip clip;
    clip.id = rec.id;
    for (std::size_t c = 0; c < rec.audio.size(); ++c) {
      clip.channels.push_back(
          f32FromBytes(load(rec.audio[c], rec.audioCrc[c], static_cast<std::size_t>(rec.numSamples) * 4)));
    }
    if (!rec.video.empty()) {
      clip.video = f32FromBytes(load(rec.video, rec.videoCrc,
                                     static_cast<std::size_t>(rec.videoFrames) * kFrameSize * kFrameSize * 4));
      clip.videoFrames = rec.videoFrames;
    }
    std::istringstream text(load(rec.text, rec.textCrc, 0));
    int tok;
    while (text >> tok) {
      clip.transcript.push_back(tok);
    }
    if (!text.eof()) {
      fail(ErrorKind::Data, "clip '" + rec.id + "': malformed transcript");
    }
    clip.meta.delays = rec.delays;
    clip.meta.snrsDb = rec.snrsDb;
    clip.meta.gains = rec.gains;
    clip.meta.seed = rec.seed;
    clip.meta.beamformed = rec.beamformed;
    clips.push_back(std::move(clip));
  }
  return clips;
}

std::vector<MultichannelClip> readCorpus(const fs::path& path) {
  return readCorpus(readManifest(path));
}

} // namespace avw2
