#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "asp/tensor/tensor.hpp"

namespace asp::runner {

/// ASPC v1 container: magic "ASPC", u32 version, u32 record count, then
/// records of (u32 name length, name, u32 kind, payload). Payloads:
///   tensor: u32 flags (bit 0 = trainable), u32 rank, u32 dims, float32 values
///   u64s:   u32 count, u64 values
///   text:   u32 length, bytes
/// All integers and floats are little-endian.
class CheckpointFile {
 public:
  enum class Kind : std::uint32_t { tensor = 0, u64 = 1, text = 2 };

  struct Record {
    std::string name;
    Kind kind = Kind::tensor;
    tensor::Tensor<float> tensor;
    std::vector<std::uint64_t> u64;
    std::string text;
  };

  void put(std::string name, const tensor::Tensor<float>& t);
  void put(std::string name, std::vector<std::uint64_t> values);
  void put(std::string name, std::string text);

  bool contains(const std::string& name) const;
  const Record& at(const std::string& name) const;
  const std::vector<Record>& records() const { return records_; }

  std::vector<std::uint8_t> encode() const;
  static CheckpointFile decode(std::span<const std::uint8_t> bytes);
  void save(const std::filesystem::path& path) const;
  static CheckpointFile load(const std::filesystem::path& path);

 private:
  std::vector<Record> records_;
};

}  // namespace asp::runner
