#pragma once

#include <cstdint>
#include <map>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include "facectl/tensor.hpp"

namespace facectl {

enum class DType { Float64, Float32, Int32 };

std::string to_string(DType d);

class ArchiveError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Named-array container ("FCAR"). Layout: magic, format version, manifest
// length and CRC32, a JSON manifest, then the raw little-endian array
// payloads. See docs/formats.md.
class Archive {
 public:
  static constexpr std::uint32_t kFormatVersion = 1;

  void put(const std::string& name, const Tensor& t, DType dtype = DType::Float64);
  void put_ints(const std::string& name, const std::vector<int>& values, const Shape& shape);

  bool contains(const std::string& name) const { return index_.count(name) != 0; }
  Shape shape(const std::string& name) const;
  DType dtype(const std::string& name) const;
  Tensor get(const std::string& name) const;
  std::vector<int> get_ints(const std::string& name) const;
  std::vector<std::string> names() const;

  void set_meta(const std::string& key, const std::string& value) { meta_[key] = value; }
  bool has_meta(const std::string& key) const { return meta_.count(key) != 0; }
  std::string meta(const std::string& key) const;
  const std::map<std::string, std::string>& all_meta() const { return meta_; }

  std::string serialize() const;
  static Archive deserialize(std::string_view bytes);
  void save(const std::string& path) const;
  static Archive load(const std::string& path);

 private:
  struct Entry {
    std::string name;
    DType dtype;
    Shape shape;
    std::vector<unsigned char> bytes;
  };
  const Entry& entry(const std::string& name) const;
  void insert(Entry e);

  std::vector<Entry> entries_;
  std::map<std::string, std::size_t> index_;
  std::map<std::string, std::string> meta_;
};

// Copies every entry and meta key of `from` into `into`, names prefixed.
void merge_archive(Archive& into, const Archive& from, const std::string& prefix);
// Entries and meta keys under `prefix`, with the prefix stripped.
Archive sub_archive(const Archive& from, const std::string& prefix);

}  // namespace facectl
