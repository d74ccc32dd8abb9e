#include "dyadflow/io/container.hpp"

#include <algorithm>
#include <bit>
#include <cstring>
#include <fstream>
#include <iterator>
#include <set>

namespace dyadflow::io {

namespace {

constexpr char kMagic[4] = {'N', 'A', 'R', 'Y'};

template <typename T>
void put(std::vector<std::uint8_t>& out, T v) {
  std::uint8_t raw[sizeof(T)];
  std::memcpy(raw, &v, sizeof(T));
  if constexpr (std::endian::native == std::endian::big) std::reverse(raw, raw + sizeof(T));
  out.insert(out.end(), raw, raw + sizeof(T));
}

class Reader {
 public:
  explicit Reader(const std::vector<std::uint8_t>& b) : bytes_(b) {}

  template <typename T>
  T take() {
    need(sizeof(T));
    std::uint8_t raw[sizeof(T)];
    std::memcpy(raw, bytes_.data() + pos_, sizeof(T));
    if constexpr (std::endian::native == std::endian::big) std::reverse(raw, raw + sizeof(T));
    pos_ += sizeof(T);
    T v;
    std::memcpy(&v, raw, sizeof(T));
    return v;
  }

  const std::uint8_t* take_bytes(std::size_t n) {
    need(n);
    const auto* p = bytes_.data() + pos_;
    pos_ += n;
    return p;
  }

  bool done() const { return pos_ == bytes_.size(); }
  std::size_t remaining() const { return bytes_.size() - pos_; }

 private:
  void need(std::size_t n) const {
    if (bytes_.size() - pos_ < n) throw CorruptionError("container truncated at byte " + std::to_string(pos_));
  }
  const std::vector<std::uint8_t>& bytes_;
  std::size_t pos_ = 0;
};

template <typename T>
diff::Array<T> read_payload(Reader& r, const diff::Shape& shape) {
  const std::size_t n = diff::shape_size(shape);
  if (n > r.remaining() / sizeof(T)) throw CorruptionError("container payload shorter than its header claims");
  std::vector<T> data(n);
  for (auto& v : data) v = r.take<T>();
  return diff::Array<T>(shape, std::move(data));
}

}  // namespace

DType dtype_of(const AnyArray& a) { return static_cast<DType>(a.index()); }

const diff::Shape& shape_of(const AnyArray& a) {
  return std::visit([](const auto& x) -> const diff::Shape& { return x.shape(); }, a);
}

void Container::add(std::string name, AnyArray array) {
  if (contains(name)) throw ContractError("duplicate container entry '" + name + "'");
  if (name.size() > 0xFFFF) throw ContractError("container entry name too long");
  entries_.emplace_back(std::move(name), std::move(array));
}

void Container::set(std::string name, AnyArray array) {
  for (auto& [n, a] : entries_)
    if (n == name) {
      a = std::move(array);
      return;
    }
  add(std::move(name), std::move(array));
}

bool Container::contains(const std::string& name) const {
  return std::any_of(entries_.begin(), entries_.end(), [&](const auto& e) { return e.first == name; });
}

const AnyArray& Container::at(const std::string& name) const {
  for (const auto& [n, a] : entries_)
    if (n == name) return a;
  throw FormatError("container has no entry '" + name + "'");
}

diff::Array<double> Container::get_f64(const std::string& name) const {
  const auto& a = at(name);
  if (const auto* d = std::get_if<diff::Array<double>>(&a)) return *d;
  if (const auto* f = std::get_if<diff::Array<float>>(&a)) return f->cast<double>();
  throw FormatError("entry '" + name + "' is not floating point");
}

std::vector<std::uint8_t> encode_container(const Container& c) {
  std::vector<std::uint8_t> out(kMagic, kMagic + 4);
  put<std::uint32_t>(out, kContainerVersion);
  put<std::uint32_t>(out, static_cast<std::uint32_t>(c.size()));
  for (const auto& [name, array] : c.entries()) {
    put<std::uint16_t>(out, static_cast<std::uint16_t>(name.size()));
    out.insert(out.end(), name.begin(), name.end());
    put<std::uint8_t>(out, static_cast<std::uint8_t>(dtype_of(array)));
    const auto& shape = shape_of(array);
    if (shape.size() > 255) throw ContractError("array rank too large for container");
    put<std::uint8_t>(out, static_cast<std::uint8_t>(shape.size()));
    for (auto e : shape) put<std::uint64_t>(out, e);
    std::visit([&](const auto& a) { for (auto v : a.values()) put(out, v); }, array);
  }
  return out;
}

Container decode_container(const std::vector<std::uint8_t>& bytes) {
  if (bytes.size() < 4 || !std::equal(kMagic, kMagic + 4, bytes.begin())) throw FormatError("not a NARY container");
  Reader r(bytes);
  r.take_bytes(4);
  const auto version = r.take<std::uint32_t>();
  if (version != kContainerVersion) throw FormatError("unsupported container version " + std::to_string(version));
  const auto count = r.take<std::uint32_t>();
  Container c;
  std::set<std::string> seen;
  for (std::uint32_t i = 0; i < count; ++i) {
    const auto len = r.take<std::uint16_t>();
    const auto* p = r.take_bytes(len);
    std::string name(reinterpret_cast<const char*>(p), len);
    if (!seen.insert(name).second) throw CorruptionError("duplicate entry '" + name + "' in container");
    const auto tag = r.take<std::uint8_t>();
    const auto ndim = r.take<std::uint8_t>();
    diff::Shape shape(ndim);
    for (auto& e : shape) {
      e = r.take<std::uint64_t>();
      if (e == 0) throw CorruptionError("zero extent in entry '" + name + "'");
    }
    if (ndim == 0) throw CorruptionError("entry '" + name + "' has rank 0");
    switch (tag) {
      case 0: c.add(name, read_payload<float>(r, shape)); break;
      case 1: c.add(name, read_payload<double>(r, shape)); break;
      case 2: c.add(name, read_payload<std::uint8_t>(r, shape)); break;
      default: throw FormatError("unknown dtype tag " + std::to_string(tag));
    }
  }
  if (!r.done()) throw CorruptionError("trailing bytes after last container entry");
  return c;
}

void save_container(const std::filesystem::path& path, const Container& c) {
  const auto bytes = encode_container(c);
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw std::runtime_error("cannot open " + path.string() + " for writing");
  f.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!f) throw std::runtime_error("write failed: " + path.string());
}

Container load_container(const std::filesystem::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("cannot open " + path.string());
  std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
  return decode_container(bytes);
}

}  // namespace dyadflow::io
