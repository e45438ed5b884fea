#pragma once

// Binary checkpoint container: named f64 tensors plus a key=value config
// block. Layout (all integers little-endian):
//
//   magic "ILMF" | version u32 | tensor count u32
//   | config length u32 | config bytes (UTF-8, "key=value\n" lines)
//   | per tensor: name length u16, name bytes, rank u8, extents u32 each,
//                 row-major f64 payload
//
// The same container carries NMT models, language models, ILM average
// statistics and mini-attention parameters.

#include <cstdint>
#include <cstring>
#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "ilmf/error.hpp"
#include "ilmf/tensor.hpp"

namespace ilmf {

inline constexpr uint32_t kCheckpointVersion = 1;

struct Checkpoint {
  std::vector<std::pair<std::string, Tensor>> tensors;
  std::map<std::string, std::string> config;

  const Tensor* find(const std::string& name) const {
    for (const auto& [n, t] : tensors)
      if (n == name) return &t;
    return nullptr;
  }
  const Tensor& require(const std::string& name) const {
    const Tensor* t = find(name);
    if (!t) throw FormatError("checkpoint is missing tensor '" + name + "'");
    return *t;
  }
  void add(const std::string& name, const Tensor& t) {
    if (find(name)) throw ContractError("duplicate checkpoint tensor '" + name + "'");
    tensors.push_back({name, t});
  }

  std::string config_str(const std::string& key, const std::string& fallback = "") const {
    auto it = config.find(key);
    return it == config.end() ? fallback : it->second;
  }
  double config_num(const std::string& key, double fallback) const {
    auto it = config.find(key);
    return it == config.end() ? fallback : std::stod(it->second);
  }
};

namespace detail {

inline void put_u16(std::string& out, uint16_t v) {
  out.push_back(static_cast<char>(v & 0xff));
  out.push_back(static_cast<char>((v >> 8) & 0xff));
}
inline void put_u32(std::string& out, uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}
inline void put_f64(std::string& out, double d) {
  uint64_t v;
  std::memcpy(&v, &d, 8);
  for (int i = 0; i < 8; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

class ByteReader {
 public:
  ByteReader(const std::string& bytes, const std::string& path)
      : bytes_(bytes), path_(path) {}

  uint64_t take(int n) {
    if (pos_ + static_cast<size_t>(n) > bytes_.size())
      throw FormatError("truncated checkpoint " + path_ + " at offset " + std::to_string(pos_));
    uint64_t v = 0;
    for (int i = 0; i < n; ++i)
      v |= static_cast<uint64_t>(static_cast<unsigned char>(bytes_[pos_ + static_cast<size_t>(i)])) << (8 * i);
    pos_ += static_cast<size_t>(n);
    return v;
  }
  std::string take_str(size_t n) {
    if (pos_ + n > bytes_.size())
      throw FormatError("truncated checkpoint " + path_ + " at offset " + std::to_string(pos_));
    std::string s = bytes_.substr(pos_, n);
    pos_ += n;
    return s;
  }
  double take_f64() {
    uint64_t v = take(8);
    double d;
    std::memcpy(&d, &v, 8);
    return d;
  }
  size_t pos() const { return pos_; }
  bool exhausted() const { return pos_ == bytes_.size(); }

 private:
  const std::string& bytes_;
  std::string path_;
  size_t pos_ = 0;
};

}  // namespace detail

inline void save_checkpoint(const Checkpoint& ckpt, const std::string& path) {
  std::string out;
  out += "ILMF";
  detail::put_u32(out, kCheckpointVersion);
  detail::put_u32(out, static_cast<uint32_t>(ckpt.tensors.size()));

  std::string cfg;
  for (const auto& [k, v] : ckpt.config) cfg += k + "=" + v + "\n";
  detail::put_u32(out, static_cast<uint32_t>(cfg.size()));
  out += cfg;

  for (const auto& [name, t] : ckpt.tensors) {
    if (name.size() > 0xffff) throw ContractError("tensor name too long: " + name);
    detail::put_u16(out, static_cast<uint16_t>(name.size()));
    out += name;
    out.push_back(static_cast<char>(t.rank()));
    for (int i = 0; i < t.rank(); ++i) detail::put_u32(out, static_cast<uint32_t>(t.dim(i)));
    for (double d : t.data()) detail::put_f64(out, d);
  }

  std::ofstream os(path, std::ios::binary);
  if (!os) throw IoError("cannot write checkpoint to " + path);
  os.write(out.data(), static_cast<std::streamsize>(out.size()));
  if (!os) throw IoError("short write while saving checkpoint to " + path);
}

inline Checkpoint load_checkpoint(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("cannot read checkpoint from " + path);
  std::ostringstream buf;
  buf << is.rdbuf();
  const std::string bytes = buf.str();

  detail::ByteReader r(bytes, path);
  if (r.take_str(4) != "ILMF")
    throw FormatError("bad magic in " + path + " at offset 0 (not an ILMF checkpoint)");
  const uint32_t version = static_cast<uint32_t>(r.take(4));
  if (version != kCheckpointVersion)
    throw FormatError("unsupported checkpoint version " + std::to_string(version) + " in " + path);
  const uint32_t count = static_cast<uint32_t>(r.take(4));

  Checkpoint ckpt;
  const uint32_t cfg_len = static_cast<uint32_t>(r.take(4));
  std::istringstream cfg(r.take_str(cfg_len));
  std::string line;
  while (std::getline(cfg, line)) {
    if (line.empty()) continue;
    const size_t eq = line.find('=');
    if (eq == std::string::npos)
      throw FormatError("malformed config line in " + path + ": '" + line + "'");
    ckpt.config[line.substr(0, eq)] = line.substr(eq + 1);
  }

  for (uint32_t i = 0; i < count; ++i) {
    const size_t name_len = r.take(2);
    std::string name = r.take_str(name_len);
    const int rank = static_cast<int>(r.take(1));
    std::vector<int> shape(static_cast<size_t>(rank));
    size_t numel = 1;
    for (int k = 0; k < rank; ++k) {
      shape[static_cast<size_t>(k)] = static_cast<int>(r.take(4));
      if (shape[static_cast<size_t>(k)] <= 0)
        throw FormatError("bad tensor extent in " + path + " at offset " + std::to_string(r.pos()));
      numel *= static_cast<size_t>(shape[static_cast<size_t>(k)]);
    }
    std::vector<double> data(numel);
    for (size_t k = 0; k < numel; ++k) data[k] = r.take_f64();
    ckpt.tensors.push_back({std::move(name), Tensor::of(std::move(data), std::move(shape))});
  }
  if (!r.exhausted())
    throw FormatError("trailing bytes in " + path + " at offset " + std::to_string(r.pos()));
  return ckpt;
}

}  // namespace ilmf
