#include "avw2/checkpoint.h"

#include <bit>
#include <fstream>
#include <sstream>

#include "avw2/data_synth.h"
#include "avw2/error.h"

namespace avw2 {

namespace {

template <typename U>
void put(std::string& out, U v) {
  auto u = static_cast<std::make_unsigned_t<U>>(v);
  for (std::size_t i = 0; i < sizeof(U); ++i) {
    out.push_back(static_cast<char>((u >> (8 * i)) & 0xff));
  }
}

void putFloat(std::string& out, float f) {
  put(out, std::bit_cast<std::uint32_t>(f));
}

class Reader {
 public:
  explicit Reader(const std::string& bytes) : bytes_(bytes) {}

  template <typename U>
  U get(const char* what) {
    need(sizeof(U), what);
    std::make_unsigned_t<U> u = 0;
    for (std::size_t i = 0; i < sizeof(U); ++i) {
      u |= static_cast<std::make_unsigned_t<U>>(static_cast<unsigned char>(bytes_[pos_ + i])) << (8 * i);
    }
    pos_ += sizeof(U);
    return static_cast<U>(u);
  }
  std::string raw(std::size_t n, const char* what) {
    need(n, what);
    std::string s = bytes_.substr(pos_, n);
    pos_ += n;
    return s;
  }
  std::size_t pos() const {
    return pos_;
  }
  bool done() const {
    return pos_ == bytes_.size();
  }
  std::uint32_t crcSince(std::size_t start) const {
    return crc32Of(bytes_.data() + start, pos_ - start);
  }

 private:
  void need(std::size_t n, const char* what) {
    if (bytes_.size() - pos_ < n) {
      fail(ErrorKind::Data, "checkpoint truncated at byte offset " + std::to_string(pos_) +
                                " while reading " + what);
    }
  }
  const std::string& bytes_;
  std::size_t pos_ = 0;
};

} // namespace

std::int64_t Checkpoint::parameterCount(const std::string& prefixToSkip) const {
  std::int64_t n = 0;
  for (const auto& [name, t] : tensors) {
    if (prefixToSkip.empty() || name.rfind(prefixToSkip, 0) != 0) {
      n += static_cast<std::int64_t>(t.data.size());
    }
  }
  return n;
}

std::string encodeCheckpoint(const Checkpoint& ckpt) {
  std::string out = "AVW2";
  put<std::uint32_t>(out, ckpt.version);
  put<std::uint64_t>(out, ckpt.step);
  const std::string cfg = ckpt.config.dump();
  put<std::uint32_t>(out, static_cast<std::uint32_t>(cfg.size()));
  out += cfg;
  put<std::uint32_t>(out, crc32Of(out.data(), out.size()));
  put<std::uint32_t>(out, static_cast<std::uint32_t>(ckpt.tensors.size()));
  for (const auto& [name, t] : ckpt.tensors) {
    if (static_cast<std::int64_t>(t.data.size()) != (t.shape.empty() ? 1 : ad::numel(t.shape))) {
      fail(ErrorKind::Shape, "checkpoint: tensor '" + name + "' data does not match its shape");
    }
    const std::size_t start = out.size();
    put<std::uint32_t>(out, static_cast<std::uint32_t>(name.size()));
    out += name;
    put<std::uint32_t>(out, static_cast<std::uint32_t>(t.shape.size()));
    for (auto d : t.shape) {
      put<std::int64_t>(out, d);
    }
    for (float v : t.data) {
      putFloat(out, v);
    }
    put<std::uint32_t>(out, crc32Of(out.data() + start, out.size() - start));
  }
  return out;
}

Checkpoint decodeCheckpoint(const std::string& bytes) {
  Reader r(bytes);
  if (r.raw(4, "magic") != "AVW2") {
    fail(ErrorKind::Data, "checkpoint: bad magic at byte offset 0 (not an AVW2 checkpoint)");
  }
  Checkpoint ckpt;
  ckpt.version = r.get<std::uint32_t>("version");
  if (ckpt.version != kCheckpointVersion) {
    fail(ErrorKind::Data, "checkpoint: unsupported version " + std::to_string(ckpt.version) +
                              " at byte offset 4 (expected " + std::to_string(kCheckpointVersion) + ")");
  }
  ckpt.step = r.get<std::uint64_t>("step");
  const auto cfgLen = r.get<std::uint32_t>("config length");
  const std::string cfg = r.raw(cfgLen, "config");
  const std::uint32_t headerCrc = r.crcSince(0);
  if (r.get<std::uint32_t>("header checksum") != headerCrc) {
    fail(ErrorKind::Data, "checkpoint: header checksum mismatch in section at byte offset 0 (" +
                              std::to_string(r.pos() - 4) + " bytes)");
  }
  try {
    ckpt.config = nlohmann::json::parse(cfg);
  } catch (const std::exception& e) {
    fail(ErrorKind::Data, std::string("checkpoint: malformed config at byte offset 20: ") + e.what());
  }
  const auto count = r.get<std::uint32_t>("tensor count");
  std::string prev;
  for (std::uint32_t i = 0; i < count; ++i) {
    const std::size_t start = r.pos();
    const auto nameLen = r.get<std::uint32_t>("tensor name length");
    std::string name = r.raw(nameLen, "tensor name");
    const auto rank = r.get<std::uint32_t>("tensor rank");
    if (rank > 8) {
      fail(ErrorKind::Data, "checkpoint: implausible rank " + std::to_string(rank) +
                                " for tensor at byte offset " + std::to_string(start));
    }
    StoredTensor t;
    std::int64_t n = 1;
    for (std::uint32_t k = 0; k < rank; ++k) {
      const auto d = r.get<std::int64_t>("tensor dims");
      if (d <= 0 || d > (std::int64_t{1} << 32)) {
        fail(ErrorKind::Data, "checkpoint: bad dimension in tensor at byte offset " +
                                  std::to_string(start));
      }
      t.shape.push_back(d);
      n *= d;
    }
    if (static_cast<std::uint64_t>(n) * 4 > bytes.size()) {
      fail(ErrorKind::Data, "checkpoint: tensor at byte offset " + std::to_string(start) +
                                " claims more data than the file holds");
    }
    t.data.resize(n);
    for (auto& v : t.data) {
      v = std::bit_cast<float>(r.get<std::uint32_t>("tensor data"));
    }
    const std::uint32_t crc = r.crcSince(start);
    if (r.get<std::uint32_t>("tensor checksum") != crc) {
      fail(ErrorKind::Data, "checkpoint: checksum mismatch in tensor section at byte offset " +
                                std::to_string(start) + " (" + std::to_string(r.pos() - 4 - start) +
                                " bytes)");
    }
    if (i > 0 && !(prev < name)) {
      fail(ErrorKind::Data, "checkpoint: tensor '" + name + "' at byte offset " +
                                std::to_string(start) + " is out of order");
    }
    prev = name;
    ckpt.tensors.emplace(std::move(name), std::move(t));
  }
  if (!r.done()) {
    fail(ErrorKind::Data, "checkpoint: trailing bytes at offset " + std::to_string(r.pos()));
  }
  return ckpt;
}

void saveCheckpoint(const Checkpoint& ckpt, const std::filesystem::path& path) {
  writeFileAtomic(path, encodeCheckpoint(ckpt));
}

Checkpoint loadCheckpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) {
    fail(ErrorKind::Data, "checkpoint not found: " + path.string());
  }
  std::ostringstream ss;
  ss << in.rdbuf();
  try {
    return decodeCheckpoint(ss.str());
  } catch (const Error& e) {
    throw Error(e.kind(), path.string() + ": " + e.what());
  }
}

} // namespace avw2
