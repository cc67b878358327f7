#pragma once

// Binary checkpoint: little-endian throughout.
//
//   magic      4 bytes  "PFCK"
//   version    u32      1
//   meta_len   u64      length of the JSON metadata blob that follows
//   meta       bytes    UTF-8 JSON (run configuration)
//   count      u32      number of parameter tensors
//   per tensor:
//     name_len u32, name bytes
//     rank     u32, dims u64 × rank
//     data     f64 × prod(dims)

#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <map>
#include <stdexcept>
#include <string>
#include <vector>

#include "poifusion/adamw.hpp"
#include "poifusion/tensor.hpp"

namespace poifusion {

static_assert(std::endian::native == std::endian::little, "checkpoint I/O assumes a little-endian host");

class CheckpointError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

inline constexpr char kCheckpointMagic[4] = {'P', 'F', 'C', 'K'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

struct CheckpointTensor {
  Shape shape;
  std::vector<double> data;
};

struct Checkpoint {
  std::string meta;  // JSON text
  std::vector<std::pair<std::string, CheckpointTensor>> tensors;
};

namespace detail {

template <class T>
void put(std::ostream& os, T v) {
  os.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <class T>
T get(std::istream& is) {
  T v{};
  if (!is.read(reinterpret_cast<char*>(&v), sizeof(T))) throw CheckpointError("checkpoint truncated");
  return v;
}

inline std::string get_bytes(std::istream& is, std::uint64_t n) {
  constexpr std::uint64_t kMaxBlob = std::uint64_t{1} << 32;
  if (n > kMaxBlob) throw CheckpointError("checkpoint field length out of range");
  std::string s(n, '\0');
  if (n && !is.read(s.data(), static_cast<std::streamsize>(n))) throw CheckpointError("checkpoint truncated");
  return s;
}

}  // namespace detail

inline void write_checkpoint(std::ostream& os, const ParameterList& params, const std::string& meta) {
  os.write(kCheckpointMagic, 4);
  detail::put<std::uint32_t>(os, kCheckpointVersion);
  detail::put<std::uint64_t>(os, meta.size());
  os.write(meta.data(), static_cast<std::streamsize>(meta.size()));
  detail::put<std::uint32_t>(os, static_cast<std::uint32_t>(params.size()));
  for (const NamedTensor& p : params) {
    detail::put<std::uint32_t>(os, static_cast<std::uint32_t>(p.name.size()));
    os.write(p.name.data(), static_cast<std::streamsize>(p.name.size()));
    detail::put<std::uint32_t>(os, static_cast<std::uint32_t>(p.tensor.rank()));
    for (std::size_t d : p.tensor.shape()) detail::put<std::uint64_t>(os, d);
    const auto data = p.tensor.data();
    os.write(reinterpret_cast<const char*>(data.data()), static_cast<std::streamsize>(data.size() * sizeof(double)));
  }
}

inline void save_checkpoint(const std::string& path, const ParameterList& params, const std::string& meta) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw CheckpointError("cannot write checkpoint " + path);
  write_checkpoint(os, params, meta);
  if (!os) throw CheckpointError("failed writing checkpoint " + path);
}

inline Checkpoint read_checkpoint(std::istream& is) {
  char magic[4];
  if (!is.read(magic, 4) || std::memcmp(magic, kCheckpointMagic, 4) != 0) throw CheckpointError("not a checkpoint (bad magic)");
  const auto version = detail::get<std::uint32_t>(is);
  if (version != kCheckpointVersion) throw CheckpointError("unsupported checkpoint version " + std::to_string(version));
  Checkpoint ck;
  ck.meta = detail::get_bytes(is, detail::get<std::uint64_t>(is));
  const auto count = detail::get<std::uint32_t>(is);
  for (std::uint32_t k = 0; k < count; ++k) {
    std::string name = detail::get_bytes(is, detail::get<std::uint32_t>(is));
    const auto rank = detail::get<std::uint32_t>(is);
    if (rank > kMaxRank) throw CheckpointError("tensor '" + name + "' has rank " + std::to_string(rank));
    CheckpointTensor t;
    std::uint64_t n = 1;
    for (std::uint32_t r = 0; r < rank; ++r) {
      t.shape.push_back(detail::get<std::uint64_t>(is));
      n *= t.shape.back();
    }
    if (n > (std::uint64_t{1} << 31)) throw CheckpointError("tensor '" + name + "' too large");
    t.data.resize(n);
    if (n && !is.read(reinterpret_cast<char*>(t.data.data()), static_cast<std::streamsize>(n * sizeof(double))))
      throw CheckpointError("checkpoint truncated in tensor '" + name + "'");
    ck.tensors.emplace_back(std::move(name), std::move(t));
  }
  return ck;
}

inline Checkpoint load_checkpoint(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw CheckpointError("cannot open checkpoint " + path);
  return read_checkpoint(is);
}

/// Copies checkpoint values into `params`; names and shapes must match exactly.
inline void restore_parameters(const Checkpoint& ck, ParameterList& params) {
  std::map<std::string, const CheckpointTensor*> by_name;
  for (const auto& [name, t] : ck.tensors) by_name[name] = &t;
  if (by_name.size() != params.size())
    throw CheckpointError("checkpoint has " + std::to_string(by_name.size()) + " tensors, model has " +
                          std::to_string(params.size()));
  for (NamedTensor& p : params) {
    auto it = by_name.find(p.name);
    if (it == by_name.end()) throw CheckpointError("checkpoint lacks tensor '" + p.name + "'");
    if (it->second->shape != p.tensor.shape())
      throw CheckpointError("tensor '" + p.name + "' has shape " + shape_str(it->second->shape) + ", model expects " +
                            shape_str(p.tensor.shape()));
    std::copy(it->second->data.begin(), it->second->data.end(), p.tensor.data().begin());
  }
}

}  // namespace poifusion
