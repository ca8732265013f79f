#pragma once

// Self-describing binary container shared by model files and benign-space
// files:
//
//   magic       8 bytes  "SETDETC\0"
//   version     u32 LE
//   header_len  u64 LE, followed by header_len bytes of JSON
//   array_count u64 LE
//   per array:  u32 LE name length, name bytes, u64 LE element count,
//               element count IEEE-754 binary64 values, little-endian
//
// Values are copied bit-for-bit, so write(read(bytes)) == bytes.

#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <iterator>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "setdet/errors.hpp"
#include "setdet/matrix.hpp"

namespace setdet {

inline constexpr std::uint32_t kContainerVersion = 1;

struct Container {
  nlohmann::json header = nlohmann::json::object();
  // Ordered by name; the on-disk order follows the map order.
  std::map<std::string, std::vector<double>> arrays;

  void put(const std::string& name, std::vector<double> values) { arrays[name] = std::move(values); }
  void put(const std::string& name, const Matrix& m) { arrays[name] = m.values(); }

  const std::vector<double>& get(const std::string& name) const {
    auto it = arrays.find(name);
    if (it == arrays.end()) throw FormatError("missing array '" + name + "'");
    return it->second;
  }

  Matrix get_matrix(const std::string& name, std::size_t rows, std::size_t cols) const {
    const auto& v = get(name);
    if (v.size() != rows * cols) {
      throw FormatError("array '" + name + "' has " + std::to_string(v.size()) + " values, expected " +
                        std::to_string(rows * cols));
    }
    return Matrix(rows, cols, v);
  }
};

namespace detail {

inline constexpr char kMagic[8] = {'S', 'E', 'T', 'D', 'E', 'T', 'C', '\0'};

template <typename T>
void put_le(std::string& out, T value) {
  static_assert(std::is_unsigned_v<T>);
  for (std::size_t i = 0; i < sizeof(T); ++i) out.push_back(static_cast<char>((value >> (8 * i)) & 0xFF));
}

class ByteReader {
 public:
  explicit ByteReader(const std::string& bytes) : bytes_(bytes) {}

  template <typename T>
  T get_le() {
    need(sizeof(T));
    T v = 0;
    for (std::size_t i = 0; i < sizeof(T); ++i) {
      v |= static_cast<T>(static_cast<unsigned char>(bytes_[pos_ + i])) << (8 * i);
    }
    pos_ += sizeof(T);
    return v;
  }

  std::string get_bytes(std::size_t n) {
    need(n);
    std::string s = bytes_.substr(pos_, n);
    pos_ += n;
    return s;
  }

  bool done() const { return pos_ == bytes_.size(); }

 private:
  void need(std::size_t n) const {
    if (bytes_.size() - pos_ < n) throw FormatError("container truncated");
  }
  const std::string& bytes_;
  std::size_t pos_ = 0;
};

}  // namespace detail

inline std::string serialize_container(const Container& c) {
  std::string out(detail::kMagic, sizeof(detail::kMagic));
  detail::put_le<std::uint32_t>(out, kContainerVersion);
  const std::string header = c.header.dump();
  detail::put_le<std::uint64_t>(out, header.size());
  out += header;
  detail::put_le<std::uint64_t>(out, c.arrays.size());
  for (const auto& [name, values] : c.arrays) {
    detail::put_le<std::uint32_t>(out, static_cast<std::uint32_t>(name.size()));
    out += name;
    detail::put_le<std::uint64_t>(out, values.size());
    for (double v : values) detail::put_le<std::uint64_t>(out, std::bit_cast<std::uint64_t>(v));
  }
  return out;
}

inline Container deserialize_container(const std::string& bytes) {
  detail::ByteReader in(bytes);
  if (in.get_bytes(sizeof(detail::kMagic)) != std::string(detail::kMagic, sizeof(detail::kMagic))) {
    throw FormatError("bad container magic");
  }
  const auto version = in.get_le<std::uint32_t>();
  if (version != kContainerVersion) {
    throw FormatError("unsupported container version " + std::to_string(version));
  }
  Container c;
  const auto header_len = in.get_le<std::uint64_t>();
  try {
    c.header = nlohmann::json::parse(in.get_bytes(header_len));
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("container header: ") + e.what());
  }
  const auto count = in.get_le<std::uint64_t>();
  for (std::uint64_t a = 0; a < count; ++a) {
    const auto name_len = in.get_le<std::uint32_t>();
    std::string name = in.get_bytes(name_len);
    const auto n = in.get_le<std::uint64_t>();
    std::vector<double> values;
    values.reserve(n);
    for (std::uint64_t i = 0; i < n; ++i) values.push_back(std::bit_cast<double>(in.get_le<std::uint64_t>()));
    c.arrays.emplace(std::move(name), std::move(values));
  }
  if (!in.done()) throw FormatError("trailing bytes after container");
  return c;
}

inline void write_file(const std::string& path, const std::string& bytes) {
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw Error("cannot open '" + path + "' for writing");
  f.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!f) throw Error("failed writing '" + path + "'");
}

inline std::string read_file(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw Error("cannot open '" + path + "'");
  return {std::istreambuf_iterator<char>(f), std::istreambuf_iterator<char>()};
}

}  // namespace setdet
