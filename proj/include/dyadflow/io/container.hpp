#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <variant>
#include <vector>

#include "dyadflow/diff/array.hpp"

namespace dyadflow::io {

// On-disk layout, all integers little-endian:
//   "NARY" | u32 version | u32 count
//   per entry: u16 name_len | name | u8 dtype | u8 ndim | u64 shape[ndim] | payload
inline constexpr std::uint32_t kContainerVersion = 1;

enum class DType : std::uint8_t { f32 = 0, f64 = 1, u8 = 2 };

using AnyArray = std::variant<diff::Array<float>, diff::Array<double>, diff::Array<std::uint8_t>>;

DType dtype_of(const AnyArray& a);
const diff::Shape& shape_of(const AnyArray& a);

class Container {
 public:
  // Throws ContractError if the name is already present.
  void add(std::string name, AnyArray array);
  void set(std::string name, AnyArray array);
  bool contains(const std::string& name) const;
  const AnyArray& at(const std::string& name) const;

  template <typename T>
  const diff::Array<T>& get(const std::string& name) const {
    const auto* a = std::get_if<diff::Array<T>>(&at(name));
    if (!a) throw FormatError("entry '" + name + "' has an unexpected dtype");
    return *a;
  }

  // Float entries converted to double regardless of stored precision.
  diff::Array<double> get_f64(const std::string& name) const;

  const std::vector<std::pair<std::string, AnyArray>>& entries() const { return entries_; }
  std::size_t size() const { return entries_.size(); }

 private:
  std::vector<std::pair<std::string, AnyArray>> entries_;
};

std::vector<std::uint8_t> encode_container(const Container& c);
Container decode_container(const std::vector<std::uint8_t>& bytes);

void save_container(const std::filesystem::path& path, const Container& c);
// FormatError on bad magic/version, CorruptionError on truncation or trailing bytes.
Container load_container(const std::filesystem::path& path);

}  // namespace dyadflow::io
