#ifndef EVISURRO_CONTAINER_HPP_
#define EVISURRO_CONTAINER_HPP_

// Section-tagged binary container shared by checkpoints and calibration
// tables.
//
//   "EVISURRO1"            9-byte magic
//   u32 format_version     currently 1
//   repeated section:
//     char[8] tag          ASCII, NUL padded
//     u64 length           payload bytes
//     payload
//
// Integers are little-endian u64 unless noted, reals are little-endian IEEE
// binary64, strings and arrays carry a u64 element count.

#include <algorithm>
#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <map>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "evisurro/errors.hpp"

namespace evisurro::container {

static_assert(std::endian::native == std::endian::little,
              "container I/O assumes a little-endian host");

inline constexpr std::string_view kMagic = "EVISURRO1";
inline constexpr std::uint32_t kFormatVersion = 1;

class Writer {
 public:
  void u64(std::uint64_t v) { raw(&v, sizeof v); }
  void f64(double v) { raw(&v, sizeof v); }
  void str(std::string_view s) {
    u64(s.size());
    buf_.append(s);
  }
  void f64s(std::span<const double> v) {
    u64(v.size());
    raw(v.data(), v.size() * sizeof(double));
  }
  void u64s(std::span<const std::uint64_t> v) {
    u64(v.size());
    raw(v.data(), v.size() * sizeof(std::uint64_t));
  }
  const std::string& bytes() const { return buf_; }

 private:
  void raw(const void* p, std::size_t n) { buf_.append(static_cast<const char*>(p), n); }
  std::string buf_;
};

class Reader {
 public:
  Reader(std::string_view bytes, std::string context)
      : data_(bytes), context_(std::move(context)) {}

  std::uint64_t u64() {
    std::uint64_t v;
    raw(&v, sizeof v);
    return v;
  }
  double f64() {
    double v;
    raw(&v, sizeof v);
    return v;
  }
  std::string str() {
    const auto n = count(1);
    std::string s(data_.substr(pos_, n));
    pos_ += n;
    return s;
  }
  std::vector<double> f64s() {
    std::vector<double> v(count(sizeof(double)));
    raw(v.data(), v.size() * sizeof(double));
    return v;
  }
  std::vector<std::uint64_t> u64s() {
    std::vector<std::uint64_t> v(count(sizeof(std::uint64_t)));
    raw(v.data(), v.size() * sizeof(std::uint64_t));
    return v;
  }
  bool done() const { return pos_ == data_.size(); }
  void expect_done() const {
    if (!done()) throw DataError(context_ + ": trailing bytes in section");
  }

 private:
  std::size_t count(std::size_t elem) {
    const auto n = u64();
    if (n > (data_.size() - pos_) / elem) throw DataError(context_ + ": truncated array");
    return static_cast<std::size_t>(n);
  }
  void raw(void* p, std::size_t n) {
    if (data_.size() - pos_ < n) throw DataError(context_ + ": truncated data");
    std::memcpy(p, data_.data() + pos_, n);
    pos_ += n;
  }
  std::string_view data_;
  std::size_t pos_ = 0;
  std::string context_;
};

// Ordered list of (tag, payload).
struct Sections {
  std::vector<std::pair<std::string, std::string>> items;

  void add(std::string tag, const Writer& w) { items.emplace_back(std::move(tag), w.bytes()); }

  const std::string* find(std::string_view tag) const {
    for (const auto& [t, p] : items)
      if (t == tag) return &p;
    return nullptr;
  }
  const std::string& require(std::string_view tag, const std::string& path) const {
    if (const auto* p = find(tag)) return *p;
    throw DataError(path + ": missing section '" + std::string(tag) + "'");
  }
};

inline std::string encode(const Sections& s) {
  std::string out(kMagic);
  const std::uint32_t version = kFormatVersion;
  out.append(reinterpret_cast<const char*>(&version), sizeof version);
  for (const auto& [tag, payload] : s.items) {
    char t[8] = {};
    std::memcpy(t, tag.data(), std::min<std::size_t>(tag.size(), 8));
    out.append(t, 8);
    const std::uint64_t len = payload.size();
    out.append(reinterpret_cast<const char*>(&len), sizeof len);
    out.append(payload);
  }
  return out;
}

inline Sections decode(std::string_view bytes, const std::string& path) {
  if (bytes.size() < kMagic.size() || bytes.substr(0, kMagic.size()) != kMagic)
    throw DataError(path + ": not an evisurro container (bad magic)");
  std::size_t pos = kMagic.size();
  if (bytes.size() < pos + 4) throw DataError(path + ": truncated header");
  std::uint32_t version;
  std::memcpy(&version, bytes.data() + pos, 4);
  pos += 4;
  if (version != kFormatVersion)
    throw VersionError(path + ": format version " + std::to_string(version) +
                       ", this build reads version " + std::to_string(kFormatVersion));
  Sections s;
  while (pos < bytes.size()) {
    if (bytes.size() - pos < 16) throw DataError(path + ": truncated section header");
    std::string tag(bytes.substr(pos, 8));
    tag.erase(tag.find_last_not_of('\0') + 1);
    pos += 8;
    std::uint64_t len;
    std::memcpy(&len, bytes.data() + pos, 8);
    pos += 8;
    if (bytes.size() - pos < len)
      throw DataError(path + ": section '" + tag + "' truncated (corrupt file)");
    s.items.emplace_back(tag, std::string(bytes.substr(pos, len)));
    pos += len;
  }
  return s;
}

inline std::string read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open " + path.string());
  std::string bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return bytes;
}

inline void write_file(const std::filesystem::path& path, std::string_view bytes) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw DataError("cannot write " + path.string());
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw DataError("write failed: " + path.string());
}

}  // namespace evisurro::container

#endif  // EVISURRO_CONTAINER_HPP_
