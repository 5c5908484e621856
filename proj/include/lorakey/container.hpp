#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include "json.hpp"
#include "lorakey/tensor.hpp"

namespace lorakey {

// LKW1 weight container:
//
//   "LKW1" | u64 LE header length | JSON header | payload | u32 LE CRC-32(payload)
//
// The header maps tensor names to {dtype: "f32", shape, offset, length}
// (offsets relative to the payload start) and carries a free-form metadata
// object. Tensors are stored as little-endian f32.
class Container {
 public:
  Container() = default;

  // Stores `value` rounded to f32.
  void add(const std::string& name, const Tensor& value);
  bool contains(const std::string& name) const { return tensors_.count(name) != 0; }
  // Widened back to f64.
  Tensor get(const std::string& name) const;
  std::vector<std::string> names() const;

  nlohmann::json& metadata() { return metadata_; }
  const nlohmann::json& metadata() const { return metadata_; }

  std::vector<std::uint8_t> serialize() const;
  static Container parse(const std::vector<std::uint8_t>& bytes);

  void save(const std::filesystem::path& path) const;
  static Container load(const std::filesystem::path& path);

 private:
  struct Stored {
    Shape shape;
    std::vector<float> values;
  };
  std::map<std::string, Stored> tensors_;
  nlohmann::json metadata_ = nlohmann::json::object();
};

std::uint32_t crc32_of(const std::uint8_t* data, std::size_t size);
std::uint32_t crc32_of(const std::vector<std::uint8_t>& bytes);
std::vector<std::uint8_t> read_file_bytes(const std::filesystem::path& path);
void write_file_bytes(const std::filesystem::path& path, const std::vector<std::uint8_t>& bytes);

}  // namespace lorakey
