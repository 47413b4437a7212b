#include "asp/runner/checkpoint.hpp"

#include <array>
#include <bit>
#include <cstring>
#include <fstream>
#include <iterator>

#include "asp/errors.hpp"

namespace asp::runner {

namespace {

constexpr std::array<char, 4> kMagic{'A', 'S', 'P', 'C'};
constexpr std::uint32_t kVersion = 1;
constexpr std::uint32_t kTrainable = 1;

template <class U>
void put_raw(std::vector<std::uint8_t>& out, U value) {
  static_assert(std::endian::native == std::endian::little, "little-endian host required");
  const auto* p = reinterpret_cast<const std::uint8_t*>(&value);
  out.insert(out.end(), p, p + sizeof(U));
}

void put_bytes(std::vector<std::uint8_t>& out, const void* data, std::size_t n) {
  const auto* p = static_cast<const std::uint8_t*>(data);
  out.insert(out.end(), p, p + n);
}

class Reader {
 public:
  explicit Reader(std::span<const std::uint8_t> bytes) : bytes_(bytes) {}

  template <class U>
  U get(const std::string& what) {
    U value;
    read(&value, sizeof(U), what);
    return value;
  }
  void read(void* dst, std::size_t n, const std::string& what) {
    if (bytes_.size() - offset_ < n) {
      throw FormatError("ASPC: truncated " + what + " at byte offset " + std::to_string(offset_) +
                        ": expected " + std::to_string(n) + " bytes, got " +
                        std::to_string(bytes_.size() - offset_));
    }
    std::memcpy(dst, bytes_.data() + offset_, n);
    offset_ += n;
  }
  std::size_t offset() const { return offset_; }
  bool done() const { return offset_ == bytes_.size(); }

 private:
  std::span<const std::uint8_t> bytes_;
  std::size_t offset_ = 0;
};

}  // namespace

void CheckpointFile::put(std::string name, const tensor::Tensor<float>& t) {
  Record r;
  r.name = std::move(name);
  r.kind = Kind::tensor;
  r.tensor = t;
  r.tensor.clear_grad();
  records_.push_back(std::move(r));
}

void CheckpointFile::put(std::string name, std::vector<std::uint64_t> values) {
  Record r;
  r.name = std::move(name);
  r.kind = Kind::u64;
  r.u64 = std::move(values);
  records_.push_back(std::move(r));
}

void CheckpointFile::put(std::string name, std::string text) {
  Record r;
  r.name = std::move(name);
  r.kind = Kind::text;
  r.text = std::move(text);
  records_.push_back(std::move(r));
}

bool CheckpointFile::contains(const std::string& name) const {
  for (const auto& r : records_)
    if (r.name == name) return true;
  return false;
}

const CheckpointFile::Record& CheckpointFile::at(const std::string& name) const {
  for (const auto& r : records_)
    if (r.name == name) return r;
  throw FormatError("ASPC: missing record '" + name + "'");
}

std::vector<std::uint8_t> CheckpointFile::encode() const {
  std::vector<std::uint8_t> out(kMagic.begin(), kMagic.end());
  put_raw<std::uint32_t>(out, kVersion);
  put_raw<std::uint32_t>(out, static_cast<std::uint32_t>(records_.size()));
  for (const auto& r : records_) {
    put_raw<std::uint32_t>(out, static_cast<std::uint32_t>(r.name.size()));
    put_bytes(out, r.name.data(), r.name.size());
    put_raw<std::uint32_t>(out, static_cast<std::uint32_t>(r.kind));
    switch (r.kind) {
      case Kind::tensor:
        put_raw<std::uint32_t>(out, r.tensor.requires_grad() ? kTrainable : 0);
        put_raw<std::uint32_t>(out, static_cast<std::uint32_t>(r.tensor.rank()));
        for (auto d : r.tensor.shape()) put_raw<std::uint32_t>(out, static_cast<std::uint32_t>(d));
        put_bytes(out, r.tensor.data().data(), r.tensor.numel() * sizeof(float));
        break;
      case Kind::u64:
        put_raw<std::uint32_t>(out, static_cast<std::uint32_t>(r.u64.size()));
        put_bytes(out, r.u64.data(), r.u64.size() * sizeof(std::uint64_t));
        break;
      case Kind::text:
        put_raw<std::uint32_t>(out, static_cast<std::uint32_t>(r.text.size()));
        put_bytes(out, r.text.data(), r.text.size());
        break;
    }
  }
  return out;
}

CheckpointFile CheckpointFile::decode(std::span<const std::uint8_t> bytes) {
  Reader in(bytes);
  std::array<char, 4> magic{};
  in.read(magic.data(), magic.size(), "magic");
  if (magic != kMagic) throw FormatError("ASPC: bad magic at byte offset 0");
  const auto version = in.get<std::uint32_t>("version");
  if (version != kVersion) {
    throw FormatError("ASPC: unsupported version " + std::to_string(version) + " at byte offset 4");
  }
  const auto count = in.get<std::uint32_t>("record count");
  CheckpointFile file;
  for (std::uint32_t i = 0; i < count; ++i) {
    Record r;
    const auto name_len = in.get<std::uint32_t>("record name length");
    r.name.resize(name_len);
    in.read(r.name.data(), name_len, "record name");
    const std::size_t kind_at = in.offset();
    const auto kind = in.get<std::uint32_t>("record kind");
    if (kind > 2) {
      throw FormatError("ASPC: unknown record kind " + std::to_string(kind) + " at byte offset " +
                        std::to_string(kind_at));
    }
    r.kind = static_cast<Kind>(kind);
    const std::string what = "record '" + r.name + "'";
    if (r.kind == Kind::tensor) {
      const auto flags = in.get<std::uint32_t>(what);
      const auto rank = in.get<std::uint32_t>(what);
      if (rank > 8) throw FormatError("ASPC: implausible rank in " + what);
      tensor::Shape shape(rank);
      for (auto& d : shape) d = in.get<std::uint32_t>(what);
      std::vector<float> values(tensor::numel_of(shape));
      in.read(values.data(), values.size() * sizeof(float), what);
      r.tensor = tensor::Tensor<float>(std::move(shape), std::move(values));
      r.tensor.set_requires_grad((flags & kTrainable) != 0);
    } else if (r.kind == Kind::u64) {
      r.u64.resize(in.get<std::uint32_t>(what));
      in.read(r.u64.data(), r.u64.size() * sizeof(std::uint64_t), what);
    } else {
      r.text.resize(in.get<std::uint32_t>(what));
      in.read(r.text.data(), r.text.size(), what);
    }
    file.records_.push_back(std::move(r));
  }
  if (!in.done()) {
    throw FormatError("ASPC: trailing bytes at byte offset " + std::to_string(in.offset()) + ": expected " +
                      std::to_string(in.offset()) + " bytes, got " + std::to_string(bytes.size()));
  }
  return file;
}

void CheckpointFile::save(const std::filesystem::path& path) const {
  const auto bytes = encode();
  const auto tmp = path.string() + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw std::runtime_error("cannot open " + tmp + " for writing");
    out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw std::runtime_error("write failed: " + tmp);
  }
  std::filesystem::rename(tmp, path);
}

CheckpointFile CheckpointFile::load(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open " + path.string());
  const std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return decode(bytes);
}

}  // namespace asp::runner
