#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "asp/tensor/tensor.hpp"

namespace asp::data {

/// Image classification data, one H x W x C float image per sample.
struct Dataset {
  std::uint32_t height = 0;
  std::uint32_t width = 0;
  std::uint32_t channels = 0;
  std::uint32_t num_classes = 0;
  std::uint64_t seed = 0;
  std::vector<std::uint32_t> labels;
  std::vector<float> pixels;  // size() * pixels_per_image(), row-major

  std::size_t size() const { return labels.size(); }
  std::size_t pixels_per_image() const { return std::size_t{height} * width * channels; }
  std::span<const float> image(std::size_t i) const {
    return std::span<const float>(pixels).subspan(i * pixels_per_image(), pixels_per_image());
  }
  /// Bitwise comparison of every field.
  bool identical(const Dataset& other) const;
};

struct GenerateConfig {
  std::uint32_t num_classes = 52;
  std::uint32_t per_class = 64;
  std::uint32_t image_size = 32;
  std::uint32_t channels = 3;
  double pixel_noise = 0.05;
  std::uint64_t seed = 0;

  void validate() const;
  bool operator==(const GenerateConfig&) const = default;
};

/// Procedural oriented gratings. Each class draws a frequency, orientation
/// and colour pair; each sample jitters them, draws a fresh phase and adds
/// pixel noise. Sample i is a pure function of (seed, i).
Dataset generate(const GenerateConfig& config);

struct SplitConfig {
  std::uint32_t pretrain_classes = 20;
  std::uint32_t base_classes = 12;
  std::uint32_t ways = 4;
  std::uint32_t shots = 5;
  std::uint32_t tasks = 5;
  std::uint32_t test_per_class = 20;
  std::uint32_t base_train_per_class = 0;  // 0 keeps every non-test sample
  std::uint64_t seed = 0;

  void validate() const;
  bool operator==(const SplitConfig&) const = default;
};

/// One training task: its classes and the dataset indices of its training samples.
struct TaskSplit {
  std::vector<std::uint32_t> classes;
  std::vector<std::size_t> train;
};

/// Pretraining data plus the FSCIL sequence. `tasks[0]` is the base task.
/// `test[t]` holds the held-out samples of the classes first seen in task t.
struct TaskStream {
  std::vector<std::uint32_t> pretrain_classes;
  std::vector<std::size_t> pretrain;
  std::vector<TaskSplit> tasks;
  std::vector<std::vector<std::size_t>> test;

  /// Held-out samples of every class seen in tasks 0..t, in task order.
  std::vector<std::size_t> test_upto(std::size_t t) const;
};

/// Seeded class assignment and per-class sample selection. Shots come from
/// a fixed per-class permutation, so a larger K extends a smaller K's shots.
TaskStream split_fscil(const Dataset& dataset, const SplitConfig& config);

/// ASPD v1: magic "ASPD", little-endian u32 version, N, H, W, C,
/// num_classes, seed low, seed high, then N records of (u32 label, floats).
void save(const Dataset& dataset, const std::filesystem::path& path);
Dataset load(const std::filesystem::path& path);
std::vector<std::uint8_t> encode(const Dataset& dataset);
Dataset decode(std::span<const std::uint8_t> bytes);

nlohmann::json to_json(const TaskStream& stream);
TaskStream stream_from_json(const nlohmann::json& j);
/// `<dir>/<name>.split.json`
std::filesystem::path split_sidecar_path(const std::filesystem::path& dataset_path);

/// Read-through view that counts how often each sample is materialised.
class DataView {
 public:
  explicit DataView(const Dataset& dataset) : dataset_(&dataset), reads_(dataset.size(), 0) {}

  const Dataset& dataset() const { return *dataset_; }
  /// Images of the given samples, one per row.
  tensor::Tensor<float> images(std::span<const std::size_t> indices);
  std::vector<std::uint32_t> labels(std::span<const std::size_t> indices) const;

  std::uint64_t reads(std::size_t index) const { return reads_.at(index); }
  std::uint64_t reads(std::span<const std::size_t> indices) const;
  std::uint64_t total_reads() const;
  const std::vector<std::uint64_t>& read_counts() const { return reads_; }
  /// Restores counts saved from an earlier view of the same dataset.
  void restore_reads(std::vector<std::uint64_t> counts);

 private:
  const Dataset* dataset_;
  std::vector<std::uint64_t> reads_;
};

}  // namespace asp::data
