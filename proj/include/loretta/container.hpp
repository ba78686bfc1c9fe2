#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "loretta/errors.hpp"

namespace loretta {

// Little-endian scalar IO shared by the shard and container formats.
namespace le {

template <typename U>
void put(std::string& out, U v) {
  static_assert(std::is_unsigned_v<U>);
  for (std::size_t i = 0; i < sizeof(U); ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

template <typename U>
U get(const char* p) {
  static_assert(std::is_unsigned_v<U>);
  U v = 0;
  for (std::size_t i = 0; i < sizeof(U); ++i) v |= static_cast<U>(static_cast<unsigned char>(p[i])) << (8 * i);
  return v;
}

}  // namespace le

inline std::string read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError("cannot open " + path.string());
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

inline void write_file(const std::filesystem::path& path, const std::string& bytes) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  const auto tmp = path.string() + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw FormatError("cannot write " + tmp);
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw FormatError("short write to " + tmp);
  }
  std::filesystem::rename(tmp, path);
}

enum class DType { kF32, kF64 };

inline const char* dtype_name(DType d) { return d == DType::kF32 ? "f32" : "f64"; }
inline std::size_t dtype_size(DType d) { return d == DType::kF32 ? 4 : 8; }

// A named tensor; values are held as double and narrowed to dtype on write.
struct NamedTensor {
  std::string name;
  std::vector<std::int64_t> shape;
  DType dtype = DType::kF32;
  std::vector<double> values;

  std::size_t numel() const {
    std::size_t n = 1;
    for (auto s : shape) n *= static_cast<std::size_t>(s);
    return n;
  }
};

// Container layout:
//   u64 header_length (LE) | header (UTF-8 JSON) | body
// The header holds {"format_version", "meta", "tensors": [{name, dtype,
// shape, offset, nbytes}]}; offsets are relative to the body start and
// tensors are packed back to back in little-endian.
struct Container {
  static constexpr int kFormatVersion = 1;

  nlohmann::json meta = nlohmann::json::object();
  std::vector<NamedTensor> tensors;

  const NamedTensor& tensor(const std::string& name) const {
    for (const auto& t : tensors)
      if (t.name == name) return t;
    throw FormatError("container has no tensor '" + name + "'");
  }
  bool has_tensor(const std::string& name) const {
    for (const auto& t : tensors)
      if (t.name == name) return true;
    return false;
  }

  std::string serialize() const {
    nlohmann::json dir = nlohmann::json::array();
    std::string body;
    for (const auto& t : tensors) {
      if (t.values.size() != t.numel()) throw InputError("tensor " + t.name + ": shape does not match value count");
      const std::size_t off = body.size();
      for (double v : t.values) {
        if (t.dtype == DType::kF32)
          le::put(body, std::bit_cast<std::uint32_t>(static_cast<float>(v)));
        else
          le::put(body, std::bit_cast<std::uint64_t>(v));
      }
      dir.push_back({{"name", t.name}, {"dtype", dtype_name(t.dtype)}, {"shape", t.shape}, {"offset", off},
                     {"nbytes", body.size() - off}});
    }
    const nlohmann::json header = {{"format_version", kFormatVersion}, {"meta", meta}, {"tensors", dir}};
    const std::string text = header.dump();
    std::string out;
    le::put<std::uint64_t>(out, text.size());
    out += text;
    out += body;
    return out;
  }

  static Container deserialize(const std::string& bytes) {
    if (bytes.size() < 8) throw FormatError("container: truncated header length");
    const auto hlen = le::get<std::uint64_t>(bytes.data());
    if (hlen > bytes.size() - 8) throw FormatError("container: header length out of bounds");
    nlohmann::json header;
    try {
      header = nlohmann::json::parse(bytes.begin() + 8, bytes.begin() + 8 + static_cast<std::ptrdiff_t>(hlen));
    } catch (const nlohmann::json::exception& e) {
      throw FormatError(std::string("container: bad header: ") + e.what());
    }
    if (header.value("format_version", 0) != kFormatVersion) throw FormatError("container: unsupported format version");
    const std::size_t body = 8 + hlen;
    const std::size_t body_len = bytes.size() - body;

    Container c;
    c.meta = header.at("meta");
    std::vector<std::pair<std::size_t, std::size_t>> ranges;
    for (const auto& e : header.at("tensors")) {
      NamedTensor t;
      t.name = e.at("name").get<std::string>();
      const auto dt = e.at("dtype").get<std::string>();
      if (dt == "f32")
        t.dtype = DType::kF32;
      else if (dt == "f64")
        t.dtype = DType::kF64;
      else
        throw FormatError("container: unknown dtype " + dt);
      t.shape = e.at("shape").get<std::vector<std::int64_t>>();
      const auto off = e.at("offset").get<std::size_t>();
      const auto nbytes = e.at("nbytes").get<std::size_t>();
      if (nbytes != t.numel() * dtype_size(t.dtype)) throw FormatError("container: " + t.name + " size mismatch");
      if (off > body_len || nbytes > body_len - off) throw FormatError("container: " + t.name + " out of bounds");
      ranges.emplace_back(off, off + nbytes);
      t.values.resize(t.numel());
      const char* p = bytes.data() + body + off;
      for (std::size_t i = 0; i < t.values.size(); ++i) {
        if (t.dtype == DType::kF32)
          t.values[i] = std::bit_cast<float>(le::get<std::uint32_t>(p + 4 * i));
        else
          t.values[i] = std::bit_cast<double>(le::get<std::uint64_t>(p + 8 * i));
      }
      c.tensors.push_back(std::move(t));
    }
    std::sort(ranges.begin(), ranges.end());
    for (std::size_t i = 1; i < ranges.size(); ++i)
      if (ranges[i].first < ranges[i - 1].second) throw FormatError("container: overlapping tensor blobs");
    return c;
  }

  void save(const std::filesystem::path& path) const { write_file(path, serialize()); }
  static Container load(const std::filesystem::path& path) { return deserialize(read_file(path)); }
};

}  // namespace loretta
