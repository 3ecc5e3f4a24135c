#include "dysp/checkpoint.hpp"

#include <bit>
#include <fstream>
#include <iterator>

#include "dysp/error.hpp"

namespace dysp {

namespace {

constexpr char kMagic[4] = {'D', 'Y', 'S', 'P'};

template <typename T>
void put_le(std::vector<std::uint8_t>& out, T value) {
  for (std::size_t i = 0; i < sizeof(T); ++i)
    out.push_back(static_cast<std::uint8_t>((static_cast<std::uint64_t>(value) >> (8 * i)) & 0xFF));
}

class Reader {
 public:
  explicit Reader(const std::vector<std::uint8_t>& bytes) : bytes_(bytes) {}

  template <typename T>
  T get() {
    need(sizeof(T));
    std::uint64_t v = 0;
    for (std::size_t i = 0; i < sizeof(T); ++i) v |= static_cast<std::uint64_t>(bytes_[pos_ + i]) << (8 * i);
    pos_ += sizeof(T);
    return static_cast<T>(v);
  }

  std::string get_string(std::size_t len) {
    need(len);
    std::string s(bytes_.begin() + static_cast<std::ptrdiff_t>(pos_),
                  bytes_.begin() + static_cast<std::ptrdiff_t>(pos_ + len));
    pos_ += len;
    return s;
  }

  bool done() const { return pos_ == bytes_.size(); }

 private:
  void need(std::size_t n) const {
    if (pos_ + n > bytes_.size()) throw IoError("checkpoint: truncated data");
  }

  const std::vector<std::uint8_t>& bytes_;
  std::size_t pos_ = 0;
};

}  // namespace

std::vector<std::uint8_t> encode_checkpoint(const std::vector<NamedTensor>& entries) {
  std::vector<std::uint8_t> out(std::begin(kMagic), std::end(kMagic));
  put_le<std::uint32_t>(out, kCheckpointVersion);
  put_le<std::uint32_t>(out, static_cast<std::uint32_t>(entries.size()));
  for (const auto& e : entries) {
    if (e.name.size() > 0xFFFF) throw ValidationError("checkpoint: name too long: " + e.name);
    put_le<std::uint16_t>(out, static_cast<std::uint16_t>(e.name.size()));
    out.insert(out.end(), e.name.begin(), e.name.end());
    const auto& shape = e.value.shape();
    if (shape.size() > 0xFF) throw ValidationError("checkpoint: rank too large for " + e.name);
    put_le<std::uint8_t>(out, static_cast<std::uint8_t>(shape.size()));
    for (auto extent : shape) {
      if (extent > 0xFFFFFFFFu) throw ValidationError("checkpoint: extent too large for " + e.name);
      put_le<std::uint32_t>(out, static_cast<std::uint32_t>(extent));
    }
    for (double v : e.value.data()) put_le<std::uint64_t>(out, std::bit_cast<std::uint64_t>(v));
  }
  return out;
}

std::vector<NamedTensor> decode_checkpoint(const std::vector<std::uint8_t>& bytes) {
  if (bytes.size() < 4 || !std::equal(std::begin(kMagic), std::end(kMagic), bytes.begin(),
                                      [](char a, std::uint8_t b) { return static_cast<std::uint8_t>(a) == b; }))
    throw IoError("checkpoint: bad magic");
  Reader r(bytes);
  r.get_string(4);
  const auto version = r.get<std::uint32_t>();
  if (version != kCheckpointVersion)
    throw IoError("checkpoint: unsupported version " + std::to_string(version));
  const auto count = r.get<std::uint32_t>();
  std::vector<NamedTensor> entries;
  entries.reserve(count);
  for (std::uint32_t i = 0; i < count; ++i) {
    const auto name_len = r.get<std::uint16_t>();
    std::string name = r.get_string(name_len);
    const auto rank = r.get<std::uint8_t>();
    Shape shape(rank);
    for (auto& extent : shape) extent = r.get<std::uint32_t>();
    std::vector<double> data(shape_numel(shape));
    for (auto& v : data) v = std::bit_cast<double>(r.get<std::uint64_t>());
    entries.push_back({std::move(name), Tensor::from(std::move(shape), std::move(data))});
  }
  if (!r.done()) throw IoError("checkpoint: trailing bytes");
  return entries;
}

void write_checkpoint(const std::filesystem::path& path, const std::vector<NamedTensor>& entries) {
  const auto bytes = encode_checkpoint(entries);
  std::ofstream os(path, std::ios::binary);
  if (!os) throw IoError("cannot open " + path.string() + " for writing");
  os.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!os) throw IoError("failed writing " + path.string());
}

std::vector<NamedTensor> read_checkpoint(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("cannot open checkpoint " + path.string());
  std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(is)), std::istreambuf_iterator<char>());
  return decode_checkpoint(bytes);
}

}  // namespace dysp
