#pragma once
#include <cstdint>
#include <cstring>
#include <fstream>
#include <string>
#include <vector>

#include "cromac/nn.hpp"

namespace cromac {

// Versioned parameter container. Little-endian throughout; doubles are stored
// as raw IEEE-754 bits so save/load round-trips are bit exact. The config
// text travels inside the file so evaluation can rebuild the exact networks,
// and its FNV-1a hash sits in the header for a cheap mismatch check.
inline constexpr std::uint32_t kCheckpointVersion = 1;
inline constexpr char kCheckpointMagic[8] = {'C', 'R', 'M', 'C', 'K', 'P', 'T', '\0'};

inline std::uint64_t fnv1a64(const std::string& s) {
  std::uint64_t h = 1469598103934665603ULL;
  for (unsigned char c : s) {
    h ^= c;
    h *= 1099511628211ULL;
  }
  return h;
}

namespace detail {

inline void put_u32(std::ostream& os, std::uint32_t v) {
  unsigned char b[4];
  for (int i = 0; i < 4; ++i) b[i] = static_cast<unsigned char>(v >> (8 * i));
  os.write(reinterpret_cast<const char*>(b), 4);
}
inline void put_u64(std::ostream& os, std::uint64_t v) {
  unsigned char b[8];
  for (int i = 0; i < 8; ++i) b[i] = static_cast<unsigned char>(v >> (8 * i));
  os.write(reinterpret_cast<const char*>(b), 8);
}
inline void put_f64(std::ostream& os, double d) {
  std::uint64_t v;
  std::memcpy(&v, &d, 8);
  put_u64(os, v);
}
inline std::uint32_t get_u32(std::istream& is) {
  unsigned char b[4];
  is.read(reinterpret_cast<char*>(b), 4);
  std::uint32_t v = 0;
  for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(b[i]) << (8 * i);
  return v;
}
inline std::uint64_t get_u64(std::istream& is) {
  unsigned char b[8];
  is.read(reinterpret_cast<char*>(b), 8);
  std::uint64_t v = 0;
  for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(b[i]) << (8 * i);
  return v;
}
inline double get_f64(std::istream& is) {
  std::uint64_t v = get_u64(is);
  double d;
  std::memcpy(&d, &v, 8);
  return d;
}

}  // namespace detail

inline void save_checkpoint(const std::string& path, const ParamList& params,
                            const std::string& config_text) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw ContractError("save_checkpoint: cannot open " + path);
  os.write(kCheckpointMagic, 8);
  detail::put_u32(os, kCheckpointVersion);
  detail::put_u64(os, fnv1a64(config_text));
  detail::put_u32(os, static_cast<std::uint32_t>(config_text.size()));
  os.write(config_text.data(), static_cast<std::streamsize>(config_text.size()));
  detail::put_u32(os, static_cast<std::uint32_t>(params.size()));
  for (const auto& p : params) {
    detail::put_u32(os, static_cast<std::uint32_t>(p.name.size()));
    os.write(p.name.data(), static_cast<std::streamsize>(p.name.size()));
    detail::put_u32(os, static_cast<std::uint32_t>(p.tensor->shape.size()));
    for (std::size_t d : p.tensor->shape) detail::put_u64(os, d);
    for (double v : p.tensor->data) detail::put_f64(os, v);
  }
  if (!os) throw ContractError("save_checkpoint: write failed for " + path);
}

struct CheckpointData {
  std::uint32_t version = 0;
  std::uint64_t config_hash = 0;
  std::string config_text;
  std::vector<std::pair<std::string, Tensor>> params;

  const Tensor* find(const std::string& name) const {
    for (const auto& [n, t] : params)
      if (n == name) return &t;
    return nullptr;
  }
};

inline CheckpointData load_checkpoint(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw ContractError("load_checkpoint: cannot open " + path);
  char magic[8];
  is.read(magic, 8);
  if (!is || std::memcmp(magic, kCheckpointMagic, 8) != 0)
    throw ContractError("load_checkpoint: bad magic in " + path);
  CheckpointData ck;
  ck.version = detail::get_u32(is);
  if (ck.version != kCheckpointVersion)
    throw ContractError("load_checkpoint: unsupported version");
  ck.config_hash = detail::get_u64(is);
  const std::uint32_t clen = detail::get_u32(is);
  ck.config_text.resize(clen);
  is.read(ck.config_text.data(), clen);
  if (fnv1a64(ck.config_text) != ck.config_hash)
    throw ContractError("load_checkpoint: config hash mismatch");
  const std::uint32_t n = detail::get_u32(is);
  for (std::uint32_t i = 0; i < n; ++i) {
    const std::uint32_t nlen = detail::get_u32(is);
    std::string name(nlen, '\0');
    is.read(name.data(), nlen);
    const std::uint32_t ndim = detail::get_u32(is);
    std::vector<std::size_t> shape(ndim);
    for (auto& d : shape) d = static_cast<std::size_t>(detail::get_u64(is));
    Tensor t(shape);
    for (auto& v : t.data) v = detail::get_f64(is);
    ck.params.emplace_back(std::move(name), std::move(t));
  }
  if (!is) throw ContractError("load_checkpoint: truncated file " + path);
  return ck;
}

// Restore into an existing registry; every registered name must be present
// with a matching shape.
inline void restore_params(const CheckpointData& ck, const ParamList& params) {
  for (const auto& p : params) {
    const Tensor* src = ck.find(p.name);
    if (src == nullptr) throw ContractError("restore_params: missing " + p.name);
    if (!src->same_shape(*p.tensor))
      throw ContractError("restore_params: shape mismatch at " + p.name);
    p.tensor->data = src->data;
  }
}

}  // namespace cromac
