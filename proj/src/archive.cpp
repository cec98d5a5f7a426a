#include "swinlab/archive.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <sstream>

namespace swinlab {

namespace {

constexpr char kMagic[4] = {'S', 'W', 'L', '2'};

template <typename T>
void put(std::string& out, T value) {
  using U = std::conditional_t<sizeof(T) == 8, std::uint64_t,
                               std::conditional_t<sizeof(T) == 4, std::uint32_t,
                                                  std::conditional_t<sizeof(T) == 2, std::uint16_t, std::uint8_t>>>;
  const U bits = std::bit_cast<U>(value);
  for (std::size_t i = 0; i < sizeof(T); ++i) out.push_back(static_cast<char>((bits >> (8 * i)) & 0xFF));
}

class Reader {
 public:
  explicit Reader(const std::string& bytes) : bytes_(bytes) {}

  template <typename T>
  T get() {
    using U = std::conditional_t<sizeof(T) == 8, std::uint64_t,
                                 std::conditional_t<sizeof(T) == 4, std::uint32_t,
                                                    std::conditional_t<sizeof(T) == 2, std::uint16_t, std::uint8_t>>>;
    need(sizeof(T));
    U bits = 0;
    for (std::size_t i = 0; i < sizeof(T); ++i) {
      bits |= static_cast<U>(static_cast<unsigned char>(bytes_[pos_ + i])) << (8 * i);
    }
    pos_ += sizeof(T);
    return std::bit_cast<T>(bits);
  }

  std::string take(std::size_t n) {
    need(n);
    std::string s = bytes_.substr(pos_, n);
    pos_ += n;
    return s;
  }

  bool done() const { return pos_ == bytes_.size(); }

 private:
  void need(std::size_t n) const {
    if (bytes_.size() - pos_ < n) throw FormatError("checkpoint truncated at byte " + std::to_string(pos_));
  }

  const std::string& bytes_;
  std::size_t pos_ = 0;
};

}  // namespace

const ArchiveEntry* Checkpoint::find(const std::string& name) const {
  for (const auto& e : entries)
    if (e.name == name) return &e;
  return nullptr;
}

std::string encode_checkpoint(const Checkpoint& ckpt) {
  std::string out(kMagic, 4);
  put<std::uint32_t>(out, kArchiveVersion);
  put<std::uint32_t>(out, static_cast<std::uint32_t>(ckpt.entries.size()));
  for (const auto& e : ckpt.entries) {
    if (e.name.size() > 0xFFFF) throw FormatError("tensor name too long: " + e.name.substr(0, 32) + "...");
    if (e.shape.size() > 0xFF) throw FormatError("tensor rank too large: " + e.name);
    if (static_cast<Index>(e.values.size()) != shape_numel(e.shape)) {
      throw FormatError("tensor " + e.name + " has " + std::to_string(e.values.size()) + " values for shape " +
                        to_string(e.shape));
    }
    put<std::uint16_t>(out, static_cast<std::uint16_t>(e.name.size()));
    out += e.name;
    put<std::uint8_t>(out, static_cast<std::uint8_t>(e.shape.size()));
    for (Index d : e.shape) put<std::uint64_t>(out, static_cast<std::uint64_t>(d));
    for (double v : e.values) put<double>(out, v);
  }
  return out;
}

Checkpoint decode_checkpoint(const std::string& bytes) {
  Reader r(bytes);
  if (r.take(4) != std::string(kMagic, 4)) throw FormatError("not a checkpoint (bad magic)");
  const auto version = r.get<std::uint32_t>();
  if (version != kArchiveVersion) throw FormatError("unsupported checkpoint version " + std::to_string(version));
  const auto count = r.get<std::uint32_t>();
  Checkpoint ckpt;
  for (std::uint32_t i = 0; i < count; ++i) {
    ArchiveEntry e;
    e.name = r.take(r.get<std::uint16_t>());
    const auto rank = r.get<std::uint8_t>();
    std::uint64_t numel = 1;
    for (std::uint8_t d = 0; d < rank; ++d) {
      const auto extent = r.get<std::uint64_t>();
      if (extent == 0 || extent > (std::uint64_t{1} << 40)) throw FormatError("bad extent in tensor " + e.name);
      e.shape.push_back(static_cast<Index>(extent));
      numel *= extent;
      if (numel > (std::uint64_t{1} << 40)) throw FormatError("tensor " + e.name + " too large");
    }
    if (numel * 8 > bytes.size()) throw FormatError("checkpoint truncated in tensor " + e.name);
    e.values.resize(static_cast<std::size_t>(numel));
    for (auto& v : e.values) v = r.get<double>();
    ckpt.entries.push_back(std::move(e));
  }
  if (!r.done()) throw FormatError("trailing bytes after checkpoint");
  return ckpt;
}

void save_checkpoint(const Checkpoint& ckpt, const std::filesystem::path& path) {
  const std::string bytes = encode_checkpoint(ckpt);
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw FormatError("cannot open " + path.string() + " for writing");
  f.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!f) throw FormatError("failed writing " + path.string());
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw FormatError("cannot open checkpoint " + path.string());
  std::ostringstream ss;
  ss << f.rdbuf();
  return decode_checkpoint(ss.str());
}

Checkpoint snapshot(const NamedTensors& params) {
  Checkpoint ckpt;
  for (const auto& [name, t] : params) ckpt.entries.push_back({name, t.shape(), t.to_vector()});
  return ckpt;
}

Checkpoint snapshot(const Model& model) { return snapshot(model.parameters()); }

void restore(Model& model, const Checkpoint& ckpt) {
  NamedTensors params = model.parameters();
  if (params.size() != ckpt.entries.size()) {
    throw FormatError("checkpoint has " + std::to_string(ckpt.entries.size()) + " tensors, model expects " +
                      std::to_string(params.size()));
  }
  for (auto& [name, t] : params) {
    const ArchiveEntry* e = ckpt.find(name);
    if (e == nullptr) throw FormatError("checkpoint is missing tensor " + name);
    if (e->shape != t.shape()) {
      throw FormatError("tensor " + name + " has shape " + to_string(e->shape) + ", model expects " +
                        to_string(t.shape()));
    }
    auto dst = t.mutable_values();
    std::copy(e->values.begin(), e->values.end(), dst.begin());
  }
}

}  // namespace swinlab
