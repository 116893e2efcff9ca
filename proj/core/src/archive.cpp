#include "facectl/archive.hpp"

#include <zlib.h>

#include <cmath>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <sstream>

#include "json.hpp"

namespace facectl {

namespace {

constexpr char kMagic[4] = {'F', 'C', 'A', 'R'};
constexpr std::size_t kHeaderSize = 4 + 4 + 8 + 4;

std::uint32_t crc_of(const void* data, std::size_t n) {
  uLong crc = crc32(0L, Z_NULL, 0);
  return static_cast<std::uint32_t>(crc32(crc, static_cast<const Bytef*>(data), static_cast<uInt>(n)));
}

std::size_t element_size(DType d) { return d == DType::Float64 ? 8 : 4; }

DType parse_dtype(const std::string& s) {
  if (s == "float64") return DType::Float64;
  if (s == "float32") return DType::Float32;
  if (s == "int32") return DType::Int32;
  throw ArchiveError("unknown dtype '" + s + "' in archive manifest");
}

template <typename T>
void put_le(std::string& out, T v) {
  char buf[sizeof(T)];
  std::memcpy(buf, &v, sizeof(T));
  out.append(buf, sizeof(T));
}

template <typename T>
T get_le(std::string_view in, std::size_t off) {
  T v;
  std::memcpy(&v, in.data() + off, sizeof(T));
  return v;
}

}  // namespace

std::string to_string(DType d) {
  switch (d) {
    case DType::Float64: return "float64";
    case DType::Float32: return "float32";
    case DType::Int32: return "int32";
  }
  return "?";
}

void Archive::insert(Entry e) {
  auto it = index_.find(e.name);
  if (it != index_.end()) {
    entries_[it->second] = std::move(e);
    return;
  }
  index_[e.name] = entries_.size();
  entries_.push_back(std::move(e));
}

void Archive::put(const std::string& name, const Tensor& t, DType dtype) {
  Entry e{name, dtype, t.shape(), {}};
  e.bytes.resize(t.size() * element_size(dtype));
  if (dtype == DType::Float64) {
    std::memcpy(e.bytes.data(), t.data(), e.bytes.size());
  } else if (dtype == DType::Float32) {
    for (std::size_t i = 0; i < t.size(); ++i) {
      const float f = static_cast<float>(t[i]);
      std::memcpy(e.bytes.data() + 4 * i, &f, 4);
    }
  } else {
    for (std::size_t i = 0; i < t.size(); ++i) {
      const std::int32_t v = static_cast<std::int32_t>(std::llround(t[i]));
      std::memcpy(e.bytes.data() + 4 * i, &v, 4);
    }
  }
  insert(std::move(e));
}

void Archive::put_ints(const std::string& name, const std::vector<int>& values, const Shape& shape) {
  if (numel(shape) != values.size()) throw std::invalid_argument("put_ints: shape does not match value count for '" + name + "'");
  Entry e{name, DType::Int32, shape, std::vector<unsigned char>(values.size() * 4)};
  for (std::size_t i = 0; i < values.size(); ++i) {
    const std::int32_t v = values[i];
    std::memcpy(e.bytes.data() + 4 * i, &v, 4);
  }
  insert(std::move(e));
}

const Archive::Entry& Archive::entry(const std::string& name) const {
  auto it = index_.find(name);
  if (it == index_.end()) throw ArchiveError("archive has no array named '" + name + "'");
  return entries_[it->second];
}

Shape Archive::shape(const std::string& name) const { return entry(name).shape; }
DType Archive::dtype(const std::string& name) const { return entry(name).dtype; }

Tensor Archive::get(const std::string& name) const {
  const Entry& e = entry(name);
  Tensor t(e.shape);
  for (std::size_t i = 0; i < t.size(); ++i) {
    if (e.dtype == DType::Float64) {
      std::memcpy(&t[i], e.bytes.data() + 8 * i, 8);
    } else if (e.dtype == DType::Float32) {
      float f;
      std::memcpy(&f, e.bytes.data() + 4 * i, 4);
      t[i] = f;
    } else {
      std::int32_t v;
      std::memcpy(&v, e.bytes.data() + 4 * i, 4);
      t[i] = v;
    }
  }
  return t;
}

std::vector<int> Archive::get_ints(const std::string& name) const {
  const Entry& e = entry(name);
  if (e.dtype != DType::Int32) throw ArchiveError("array '" + name + "' is " + to_string(e.dtype) + ", expected int32");
  std::vector<int> out(e.bytes.size() / 4);
  for (std::size_t i = 0; i < out.size(); ++i) {
    std::int32_t v;
    std::memcpy(&v, e.bytes.data() + 4 * i, 4);
    out[i] = v;
  }
  return out;
}

std::vector<std::string> Archive::names() const {
  std::vector<std::string> out;
  for (const auto& e : entries_) out.push_back(e.name);
  return out;
}

std::string Archive::meta(const std::string& key) const {
  auto it = meta_.find(key);
  if (it == meta_.end()) throw ArchiveError("archive has no metadata key '" + key + "'");
  return it->second;
}

std::string Archive::serialize() const {
  nlohmann::json manifest;
  manifest["format"] = "FCAR";
  manifest["version"] = kFormatVersion;
  manifest["meta"] = meta_;
  nlohmann::json arrays = nlohmann::json::array();
  std::size_t offset = 0;
  for (const auto& e : entries_) {
    arrays.push_back({{"name", e.name},
                      {"dtype", to_string(e.dtype)},
                      {"shape", e.shape},
                      {"offset", offset},
                      {"nbytes", e.bytes.size()},
                      {"crc32", crc_of(e.bytes.data(), e.bytes.size())}});
    offset += e.bytes.size();
  }
  manifest["arrays"] = std::move(arrays);
  const std::string text = manifest.dump();

  std::string out;
  out.reserve(kHeaderSize + text.size() + offset);
  out.append(kMagic, 4);
  put_le<std::uint32_t>(out, kFormatVersion);
  put_le<std::uint64_t>(out, text.size());
  put_le<std::uint32_t>(out, crc_of(text.data(), text.size()));
  out += text;
  for (const auto& e : entries_) out.append(reinterpret_cast<const char*>(e.bytes.data()), e.bytes.size());
  return out;
}

Archive Archive::deserialize(std::string_view bytes) {
  if (bytes.size() < kHeaderSize || std::memcmp(bytes.data(), kMagic, 4) != 0) {
    throw ArchiveError("not an FCAR archive (bad magic or file shorter than header)");
  }
  const auto version = get_le<std::uint32_t>(bytes, 4);
  if (version != kFormatVersion) {
    throw ArchiveError("unsupported archive format version " + std::to_string(version) + " (expected " +
                       std::to_string(kFormatVersion) + ")");
  }
  const auto mlen = get_le<std::uint64_t>(bytes, 8);
  const auto mcrc = get_le<std::uint32_t>(bytes, 16);
  if (mlen > bytes.size() - kHeaderSize) throw ArchiveError("archive truncated inside manifest");
  const std::string_view text = bytes.substr(kHeaderSize, mlen);
  if (crc_of(text.data(), text.size()) != mcrc) throw ArchiveError("archive manifest checksum mismatch");

  nlohmann::json manifest;
  try {
    manifest = nlohmann::json::parse(text);
  } catch (const nlohmann::json::exception& ex) {
    throw ArchiveError(std::string("corrupt archive manifest: ") + ex.what());
  }

  Archive a;
  try {
    if (manifest.at("format") != "FCAR" || manifest.at("version").get<std::uint32_t>() != version) {
      throw ArchiveError("archive manifest header disagrees with file header");
    }
    a.meta_ = manifest.at("meta").get<std::map<std::string, std::string>>();
    const std::string_view payload = bytes.substr(kHeaderSize + mlen);
    std::size_t expected_end = 0;
    for (const auto& j : manifest.at("arrays")) {
      Entry e;
      e.name = j.at("name").get<std::string>();
      e.dtype = parse_dtype(j.at("dtype").get<std::string>());
      e.shape = j.at("shape").get<Shape>();
      const auto off = j.at("offset").get<std::size_t>();
      const auto n = j.at("nbytes").get<std::size_t>();
      if (n != numel(e.shape) * element_size(e.dtype)) {
        throw ArchiveError("array '" + e.name + "' byte count does not match shape " + to_string(e.shape));
      }
      if (off != expected_end || off + n > payload.size()) {
        throw ArchiveError("archive truncated or misaligned at array '" + e.name + "'");
      }
      if (crc_of(payload.data() + off, n) != j.at("crc32").get<std::uint32_t>()) {
        throw ArchiveError("checksum mismatch in array '" + e.name + "'");
      }
      e.bytes.assign(payload.begin() + off, payload.begin() + off + n);
      expected_end = off + n;
      a.insert(std::move(e));
    }
    if (expected_end != payload.size()) throw ArchiveError("archive has trailing bytes after the last array");
  } catch (const nlohmann::json::exception& ex) {
    throw ArchiveError(std::string("corrupt archive manifest: ") + ex.what());
  }
  return a;
}

void Archive::save(const std::string& path) const {
  const std::string bytes = serialize();
  const std::string tmp = path + ".tmp";
  {
    std::ofstream f(tmp, std::ios::binary | std::ios::trunc);
    if (!f) throw ArchiveError("cannot open '" + tmp + "' for writing");
    f.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!f) throw ArchiveError("write failed for '" + tmp + "'");
  }
  if (std::rename(tmp.c_str(), path.c_str()) != 0) throw ArchiveError("cannot move '" + tmp + "' to '" + path + "'");
}

Archive Archive::load(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw ArchiveError("cannot open archive '" + path + "'");
  std::ostringstream ss;
  ss << f.rdbuf();
  try {
    return deserialize(ss.str());
  } catch (const ArchiveError& e) {
    throw ArchiveError(path + ": " + e.what());
  }
}

void merge_archive(Archive& into, const Archive& from, const std::string& prefix) {
  for (const std::string& name : from.names()) {
    if (from.dtype(name) == DType::Int32) {
      into.put_ints(prefix + name, from.get_ints(name), from.shape(name));
    } else {
      into.put(prefix + name, from.get(name), from.dtype(name));
    }
  }
  for (const auto& [key, value] : from.all_meta()) into.set_meta(prefix + key, value);
}

Archive sub_archive(const Archive& from, const std::string& prefix) {
  Archive out;
  for (const std::string& name : from.names()) {
    if (name.rfind(prefix, 0) != 0) continue;
    const std::string stripped = name.substr(prefix.size());
    if (from.dtype(name) == DType::Int32) {
      out.put_ints(stripped, from.get_ints(name), from.shape(name));
    } else {
      out.put(stripped, from.get(name), from.dtype(name));
    }
  }
  for (const auto& [key, value] : from.all_meta())
    if (key.rfind(prefix, 0) == 0) out.set_meta(key.substr(prefix.size()), value);
  return out;
}

}  // namespace facectl
