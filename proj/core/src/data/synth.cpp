#include "asp/data/synth.hpp"

#include <algorithm>
#include <array>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <iterator>
#include <numbers>
#include <unordered_set>

#include "asp/errors.hpp"
#include "asp/tensor/rng.hpp"

namespace asp::data {

namespace {

using tensor::RngStream;

constexpr std::array<char, 4> kMagic{'A', 'S', 'P', 'D'};
constexpr std::uint32_t kVersion = 1;
constexpr std::size_t kHeaderBytes = 4 + 8 * 4;
constexpr std::uint64_t kClassTag = 0xC1A55ull << 32;

struct ClassStyle {
  double frequency;    // cycles across the image
  double orientation;  // radians
  double second_frequency;
  double second_orientation;
  double mix;  // weight of the second grating
  std::array<double, 3> low, high;
};

ClassStyle class_style(RngStream rng) {
  ClassStyle s{};
  s.frequency = rng.uniform(1.5, 6.0);
  s.orientation = rng.uniform(0.0, std::numbers::pi);
  s.second_frequency = rng.uniform(1.0, 4.0);
  s.second_orientation = rng.uniform(0.0, std::numbers::pi);
  s.mix = rng.uniform(0.0, 0.5);
  for (std::size_t c = 0; c < 3; ++c) {
    s.low[c] = rng.uniform(0.0, 0.6);
    s.high[c] = rng.uniform(0.4, 1.0);
  }
  return s;
}

void render(const ClassStyle& style, RngStream rng, std::uint32_t size, std::uint32_t channels,
            double noise, std::span<float> out) {
  const double f1 = style.frequency * rng.uniform(0.9, 1.1);
  const double o1 = style.orientation + rng.uniform(-0.15, 0.15);
  const double f2 = style.second_frequency * rng.uniform(0.9, 1.1);
  const double o2 = style.second_orientation + rng.uniform(-0.15, 0.15);
  const double p1 = rng.uniform(0.0, 2.0 * std::numbers::pi);
  const double p2 = rng.uniform(0.0, 2.0 * std::numbers::pi);
  const double contrast = rng.uniform(0.7, 1.0);
  const double shift = rng.uniform(-0.1, 0.1);
  const double c1 = std::cos(o1), s1 = std::sin(o1), c2 = std::cos(o2), s2 = std::sin(o2);
  const double two_pi = 2.0 * std::numbers::pi;
  std::size_t k = 0;
  for (std::uint32_t y = 0; y < size; ++y) {
    for (std::uint32_t x = 0; x < size; ++x) {
      const double u = (x + 0.5) / size, v = (y + 0.5) / size;
      const double g1 = std::sin(two_pi * f1 * (u * c1 + v * s1) + p1);
      const double g2 = std::sin(two_pi * f2 * (u * c2 + v * s2) + p2);
      const double t = 0.5 + 0.5 * contrast * ((1.0 - style.mix) * g1 + style.mix * g2);
      for (std::uint32_t c = 0; c < channels; ++c) {
        const double lo = style.low[c % 3], hi = style.high[c % 3];
        const double value = lo + (hi - lo) * t + shift + noise * rng.normal();
        out[k++] = static_cast<float>(std::clamp(value, 0.0, 1.0));
      }
    }
  }
}

template <class U>
void put(std::vector<std::uint8_t>& out, U value) {
  static_assert(std::endian::native == std::endian::little, "little-endian host required");
  const auto* p = reinterpret_cast<const std::uint8_t*>(&value);
  out.insert(out.end(), p, p + sizeof(U));
}

class Reader {
 public:
  explicit Reader(std::span<const std::uint8_t> bytes) : bytes_(bytes) {}

  template <class U>
  U get(const char* what) {
    need(sizeof(U), what);
    U value;
    std::memcpy(&value, bytes_.data() + offset_, sizeof(U));
    offset_ += sizeof(U);
    return value;
  }
  void read(void* dst, std::size_t n, const char* what) {
    need(n, what);
    std::memcpy(dst, bytes_.data() + offset_, n);
    offset_ += n;
  }
  std::size_t offset() const { return offset_; }
  std::size_t remaining() const { return bytes_.size() - offset_; }

 private:
  void need(std::size_t n, const char* what) const {
    if (remaining() < n) {
      throw FormatError(std::string("ASPD: truncated ") + what + " at byte offset " +
                        std::to_string(offset_) + ": expected " + std::to_string(n) +
                        " bytes, got " + std::to_string(remaining()));
    }
  }

  std::span<const std::uint8_t> bytes_;
  std::size_t offset_ = 0;
};

}  // namespace

bool Dataset::identical(const Dataset& o) const {
  return height == o.height && width == o.width && channels == o.channels &&
         num_classes == o.num_classes && seed == o.seed && labels == o.labels &&
         pixels.size() == o.pixels.size() &&
         (pixels.empty() || std::memcmp(pixels.data(), o.pixels.data(), pixels.size() * sizeof(float)) == 0);
}

void GenerateConfig::validate() const {
  if (num_classes < 1) throw ConfigError("generate: num_classes must be at least 1");
  if (per_class < 1) throw ConfigError("generate: per_class must be at least 1");
  if (image_size < 1 || channels < 1) throw ConfigError("generate: empty image geometry");
  if (!(pixel_noise >= 0.0)) throw ConfigError("generate: pixel_noise must be non-negative");
}

Dataset generate(const GenerateConfig& config) {
  config.validate();
  Dataset ds;
  ds.height = ds.width = config.image_size;
  ds.channels = config.channels;
  ds.num_classes = config.num_classes;
  ds.seed = config.seed;
  const std::size_t n = std::size_t{config.num_classes} * config.per_class;
  ds.labels.resize(n);
  ds.pixels.resize(n * ds.pixels_per_image());
  const RngStream root(config.seed);
  std::vector<ClassStyle> styles;
  for (std::uint32_t c = 0; c < config.num_classes; ++c) styles.push_back(class_style(root.split(kClassTag + c)));
  for (std::size_t i = 0; i < n; ++i) {
    const auto label = static_cast<std::uint32_t>(i / config.per_class);
    ds.labels[i] = label;
    auto out = std::span<float>(ds.pixels).subspan(i * ds.pixels_per_image(), ds.pixels_per_image());
    render(styles[label], root.split(i), config.image_size, config.channels, config.pixel_noise, out);
  }
  return ds;
}

void SplitConfig::validate() const {
  if (base_classes < 1) throw ConfigError("split: base_classes must be at least 1");
  if (tasks > 0 && (ways < 1 || shots < 1)) throw ConfigError("split: ways and shots must be at least 1");
  if (test_per_class < 1) throw ConfigError("split: test_per_class must be at least 1");
}

std::vector<std::size_t> TaskStream::test_upto(std::size_t t) const {
  std::vector<std::size_t> out;
  for (std::size_t i = 0; i <= t && i < test.size(); ++i) out.insert(out.end(), test[i].begin(), test[i].end());
  return out;
}

TaskStream split_fscil(const Dataset& dataset, const SplitConfig& config) {
  config.validate();
  const std::size_t needed = std::size_t{config.pretrain_classes} + config.base_classes +
                             std::size_t{config.ways} * config.tasks;
  if (needed > dataset.num_classes) {
    throw ConfigError("split: needs " + std::to_string(needed) + " classes, dataset has " +
                      std::to_string(dataset.num_classes));
  }
  std::vector<std::vector<std::size_t>> by_class(dataset.num_classes);
  for (std::size_t i = 0; i < dataset.size(); ++i) by_class.at(dataset.labels[i]).push_back(i);

  RngStream rng = RngStream(config.seed).split(0x5B117ull);
  std::vector<std::uint32_t> order(dataset.num_classes);
  for (std::uint32_t c = 0; c < dataset.num_classes; ++c) order[c] = c;
  rng.shuffle(order.begin(), order.end());

  TaskStream stream;
  std::size_t next = 0;
  for (std::uint32_t i = 0; i < config.pretrain_classes; ++i) {
    const auto c = order[next++];
    stream.pretrain_classes.push_back(c);
    stream.pretrain.insert(stream.pretrain.end(), by_class[c].begin(), by_class[c].end());
  }
  auto take_class = [&](std::uint32_t c, std::size_t train_count, TaskSplit& task,
                        std::vector<std::size_t>& test) {
    auto samples = by_class[c];
    const std::size_t available = samples.size();
    if (available < config.test_per_class + std::max<std::size_t>(train_count, 1)) {
      throw ConfigError("split: class " + std::to_string(c) + " has " + std::to_string(available) +
                        " samples, needs " + std::to_string(config.test_per_class) + " test plus " +
                        std::to_string(std::max<std::size_t>(train_count, 1)) + " train");
    }
    RngStream crng = RngStream(config.seed).split(0xC1A55000ull + c);
    crng.shuffle(samples.begin(), samples.end());
    test.insert(test.end(), samples.begin(), samples.begin() + config.test_per_class);
    const auto first = samples.begin() + config.test_per_class;
    const std::size_t take = train_count == 0 ? available - config.test_per_class : train_count;
    task.classes.push_back(c);
    task.train.insert(task.train.end(), first, first + static_cast<std::ptrdiff_t>(take));
  };

  const std::size_t tasks = std::size_t{config.tasks} + 1;
  stream.tasks.resize(tasks);
  stream.test.resize(tasks);
  for (std::uint32_t i = 0; i < config.base_classes; ++i) {
    take_class(order[next++], config.base_train_per_class, stream.tasks[0], stream.test[0]);
  }
  for (std::size_t t = 1; t < tasks; ++t) {
    for (std::uint32_t i = 0; i < config.ways; ++i) {
      take_class(order[next++], config.shots, stream.tasks[t], stream.test[t]);
    }
  }
  return stream;
}

std::vector<std::uint8_t> encode(const Dataset& ds) {
  if (ds.pixels.size() != ds.size() * ds.pixels_per_image()) {
    throw DimensionError("ASPD: pixel buffer does not match sample count");
  }
  std::vector<std::uint8_t> out;
  out.reserve(kHeaderBytes + ds.size() * (4 + 4 * ds.pixels_per_image()));
  out.insert(out.end(), kMagic.begin(), kMagic.end());
  put<std::uint32_t>(out, kVersion);
  put<std::uint32_t>(out, static_cast<std::uint32_t>(ds.size()));
  put<std::uint32_t>(out, ds.height);
  put<std::uint32_t>(out, ds.width);
  put<std::uint32_t>(out, ds.channels);
  put<std::uint32_t>(out, ds.num_classes);
  put<std::uint32_t>(out, static_cast<std::uint32_t>(ds.seed & 0xFFFFFFFFu));
  put<std::uint32_t>(out, static_cast<std::uint32_t>(ds.seed >> 32));
  for (std::size_t i = 0; i < ds.size(); ++i) {
    put<std::uint32_t>(out, ds.labels[i]);
    const auto img = ds.image(i);
    const auto* p = reinterpret_cast<const std::uint8_t*>(img.data());
    out.insert(out.end(), p, p + img.size_bytes());
  }
  return out;
}

Dataset decode(std::span<const std::uint8_t> bytes) {
  Reader r(bytes);
  std::array<char, 4> magic{};
  r.read(magic.data(), magic.size(), "magic");
  if (magic != kMagic) throw FormatError("ASPD: bad magic at byte offset 0");
  const auto version = r.get<std::uint32_t>("version");
  if (version != kVersion) {
    throw FormatError("ASPD: unsupported version " + std::to_string(version) + " at byte offset 4");
  }
  Dataset ds;
  const auto n = r.get<std::uint32_t>("header");
  ds.height = r.get<std::uint32_t>("header");
  ds.width = r.get<std::uint32_t>("header");
  ds.channels = r.get<std::uint32_t>("header");
  ds.num_classes = r.get<std::uint32_t>("header");
  const auto lo = r.get<std::uint32_t>("header");
  const auto hi = r.get<std::uint32_t>("header");
  ds.seed = (std::uint64_t{hi} << 32) | lo;

  const std::size_t record = 4 + 4 * ds.pixels_per_image();
  const std::size_t expected = kHeaderBytes + std::size_t{n} * record;
  if (bytes.size() != expected) {
    throw FormatError("ASPD: payload length mismatch at byte offset " + std::to_string(kHeaderBytes) +
                      ": expected " + std::to_string(expected) + " bytes, got " +
                      std::to_string(bytes.size()));
  }
  ds.labels.resize(n);
  ds.pixels.resize(std::size_t{n} * ds.pixels_per_image());
  for (std::size_t i = 0; i < n; ++i) {
    const std::size_t at = r.offset();
    ds.labels[i] = r.get<std::uint32_t>("label");
    if (ds.labels[i] >= ds.num_classes) {
      throw FormatError("ASPD: label " + std::to_string(ds.labels[i]) + " out of range at byte offset " +
                        std::to_string(at));
    }
    r.read(ds.pixels.data() + i * ds.pixels_per_image(), 4 * ds.pixels_per_image(), "pixels");
  }
  return ds;
}

void save(const Dataset& dataset, const std::filesystem::path& path) {
  const auto bytes = encode(dataset);
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error("cannot open " + path.string() + " for writing");
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw std::runtime_error("write failed: " + path.string());
}

Dataset load(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open " + path.string());
  const std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return decode(bytes);
}

nlohmann::json to_json(const TaskStream& s) {
  nlohmann::json tasks = nlohmann::json::array();
  for (std::size_t t = 0; t < s.tasks.size(); ++t) {
    tasks.push_back({{"classes", s.tasks[t].classes}, {"train", s.tasks[t].train}, {"test", s.test[t]}});
  }
  return {{"pretrain_classes", s.pretrain_classes}, {"pretrain", s.pretrain}, {"tasks", tasks}};
}

TaskStream stream_from_json(const nlohmann::json& j) {
  try {
    TaskStream s;
    j.at("pretrain_classes").get_to(s.pretrain_classes);
    j.at("pretrain").get_to(s.pretrain);
    for (const auto& t : j.at("tasks")) {
      TaskSplit task;
      t.at("classes").get_to(task.classes);
      t.at("train").get_to(task.train);
      s.tasks.push_back(std::move(task));
      s.test.push_back(t.at("test").get<std::vector<std::size_t>>());
    }
    return s;
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("split sidecar: ") + e.what());
  }
}

std::filesystem::path split_sidecar_path(const std::filesystem::path& dataset_path) {
  return dataset_path.parent_path() / (dataset_path.stem().string() + ".split.json");
}

tensor::Tensor<float> DataView::images(std::span<const std::size_t> indices) {
  const std::size_t p = dataset_->pixels_per_image();
  tensor::Tensor<float> out({indices.size(), p});
  for (std::size_t r = 0; r < indices.size(); ++r) {
    const auto img = dataset_->image(indices[r]);
    std::copy(img.begin(), img.end(), out.row(r).begin());
    ++reads_.at(indices[r]);
  }
  return out;
}

std::vector<std::uint32_t> DataView::labels(std::span<const std::size_t> indices) const {
  std::vector<std::uint32_t> out;
  out.reserve(indices.size());
  for (auto i : indices) out.push_back(dataset_->labels.at(i));
  return out;
}

std::uint64_t DataView::reads(std::span<const std::size_t> indices) const {
  std::uint64_t total = 0;
  for (auto i : indices) total += reads_.at(i);
  return total;
}

void DataView::restore_reads(std::vector<std::uint64_t> counts) {
  if (counts.size() != reads_.size()) throw DimensionError("DataView: read counts do not match the dataset");
  reads_ = std::move(counts);
}

std::uint64_t DataView::total_reads() const {
  std::uint64_t total = 0;
  for (auto r : reads_) total += r;
  return total;
}

}  // namespace asp::data
