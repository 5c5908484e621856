#include "lorakey/container.hpp"

#include <algorithm>
#include <bit>
#include <cstring>
#include <fstream>

#include <zlib.h>

#include "lorakey/error.hpp"

namespace lorakey {

static_assert(std::endian::native == std::endian::little, "LKW1 I/O assumes a little-endian host");

namespace {

constexpr char kMagic[4] = {'L', 'K', 'W', '1'};
constexpr std::size_t kPrefix = 4 + 8;

template <typename T>
void put_le(std::vector<std::uint8_t>& out, T v) {
  std::uint8_t buf[sizeof(T)];
  std::memcpy(buf, &v, sizeof(T));
  out.insert(out.end(), buf, buf + sizeof(T));
}

template <typename T>
T get_le(const std::uint8_t* p) {
  T v;
  std::memcpy(&v, p, sizeof(T));
  return v;
}

}  // namespace

std::uint32_t crc32_of(const std::uint8_t* data, std::size_t size) {
  uLong crc = crc32(0L, Z_NULL, 0);
  // zlib takes uInt lengths; feed in chunks.
  while (size > 0) {
    const uInt chunk = static_cast<uInt>(std::min<std::size_t>(size, 1u << 30));
    crc = crc32(crc, data, chunk);
    data += chunk;
    size -= chunk;
  }
  return static_cast<std::uint32_t>(crc);
}

std::uint32_t crc32_of(const std::vector<std::uint8_t>& bytes) { return crc32_of(bytes.data(), bytes.size()); }

void Container::add(const std::string& name, const Tensor& value) {
  if (name.empty()) throw FormatError("container tensor names must be non-empty");
  Stored s;
  s.shape = value.shape();
  s.values.reserve(value.size());
  for (double v : value.values()) s.values.push_back(static_cast<float>(v));
  tensors_[name] = std::move(s);
}

Tensor Container::get(const std::string& name) const {
  auto it = tensors_.find(name);
  if (it == tensors_.end()) throw FormatError("container has no tensor '" + name + "'");
  std::vector<double> v(it->second.values.begin(), it->second.values.end());
  return Tensor(it->second.shape, std::move(v));
}

std::vector<std::string> Container::names() const {
  std::vector<std::string> out;
  for (const auto& [k, v] : tensors_) out.push_back(k);
  return out;
}

std::vector<std::uint8_t> Container::serialize() const {
  nlohmann::json header;
  header["metadata"] = metadata_;
  header["tensors"] = nlohmann::json::object();
  std::vector<std::uint8_t> payload;
  for (const auto& [name, s] : tensors_) {
    const std::size_t offset = payload.size();
    for (float f : s.values) put_le(payload, f);
    header["tensors"][name] = {{"dtype", "f32"},
                               {"shape", s.shape},
                               {"offset", offset},
                               {"length", payload.size() - offset}};
  }
  const std::string text = header.dump();
  std::vector<std::uint8_t> out(kMagic, kMagic + 4);
  put_le<std::uint64_t>(out, text.size());
  out.insert(out.end(), text.begin(), text.end());
  out.insert(out.end(), payload.begin(), payload.end());
  put_le<std::uint32_t>(out, crc32_of(payload));
  return out;
}

Container Container::parse(const std::vector<std::uint8_t>& bytes) {
  // A prefix of a valid file (including an empty one) reads as truncation.
  const std::size_t magic_len = std::min<std::size_t>(bytes.size(), 4);
  if (magic_len > 0 && std::memcmp(bytes.data(), kMagic, magic_len) != 0) throw FormatError("not an LKW1 container");
  if (bytes.size() < kPrefix) throw ChecksumError("LKW1 container truncated before its header");
  const std::uint64_t header_len = get_le<std::uint64_t>(bytes.data() + 4);
  if (header_len > bytes.size() - kPrefix) throw ChecksumError("LKW1 container truncated inside its header");
  const std::string text(reinterpret_cast<const char*>(bytes.data() + kPrefix), header_len);
  nlohmann::json header;
  try {
    header = nlohmann::json::parse(text);
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("LKW1 header is not valid JSON: ") + e.what());
  }
  if (!header.is_object() || !header.contains("tensors") || !header["tensors"].is_object()) {
    throw FormatError("LKW1 header lacks a tensor table");
  }

  const std::size_t payload_start = kPrefix + header_len;
  if (bytes.size() < payload_start + 4) throw ChecksumError("LKW1 container truncated: missing checksum");
  const std::size_t payload_len = bytes.size() - payload_start - 4;
  const std::uint32_t stored_crc = get_le<std::uint32_t>(bytes.data() + bytes.size() - 4);
  if (crc32_of(bytes.data() + payload_start, payload_len) != stored_crc) {
    throw ChecksumError("LKW1 payload checksum mismatch (corrupt or truncated container)");
  }

  Container c;
  if (header.contains("metadata")) c.metadata_ = header["metadata"];
  std::vector<std::pair<std::size_t, std::size_t>> spans;
  for (const auto& [name, info] : header["tensors"].items()) {
    try {
      if (info.at("dtype").get<std::string>() != "f32") throw FormatError("tensor '" + name + "' is not f32");
      Stored s;
      s.shape = info.at("shape").get<Shape>();
      const std::size_t offset = info.at("offset").get<std::size_t>();
      const std::size_t length = info.at("length").get<std::size_t>();
      if (s.shape.empty() || shape_size(s.shape) * sizeof(float) != length) {
        throw FormatError("tensor '" + name + "' length does not match its shape");
      }
      if (offset > payload_len || length > payload_len - offset) {
        throw FormatError("tensor '" + name + "' lies outside the payload");
      }
      spans.emplace_back(offset, length);
      s.values.resize(length / sizeof(float));
      std::memcpy(s.values.data(), bytes.data() + payload_start + offset, length);
      c.tensors_[name] = std::move(s);
    } catch (const nlohmann::json::exception& e) {
      throw FormatError("malformed entry for tensor '" + name + "': " + e.what());
    }
  }
  std::sort(spans.begin(), spans.end());
  for (std::size_t i = 1; i < spans.size(); ++i) {
    if (spans[i - 1].first + spans[i - 1].second > spans[i].first) throw FormatError("LKW1 tensors overlap");
  }
  return c;
}

std::vector<std::uint8_t> read_file_bytes(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DependencyError("cannot open '" + path.string() + "'");
  return std::vector<std::uint8_t>(std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>());
}

void write_file_bytes(const std::filesystem::path& path, const std::vector<std::uint8_t>& bytes) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw Error("cannot write '" + path.string() + "'");
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw Error("failed writing '" + path.string() + "'");
}

void Container::save(const std::filesystem::path& path) const { write_file_bytes(path, serialize()); }

Container Container::load(const std::filesystem::path& path) { return parse(read_file_bytes(path)); }

}  // namespace lorakey
