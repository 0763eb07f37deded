#pragma once

// Binary parameter checkpoints.
//
//   8 bytes   magic "GLSTMCK1"
//   u64       length of the model config text, then that many bytes
//   u64       tensor count
//   per tensor:
//     u64 name length, name bytes
//     u64 rank, rank x u64 extents
//     product(extents) x f64 values
//
// All integers and reals are little-endian.

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <istream>
#include <ostream>
#include <stdexcept>
#include <string>

#include "glstm/model_config.hpp"
#include "glstm/params.hpp"

namespace glstm {

class CheckpointError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

namespace detail {

inline constexpr char kCheckpointMagic[8] = {'G', 'L', 'S', 'T', 'M', 'C', 'K', '1'};

inline void put_u64(std::ostream& os, std::uint64_t v) {
  unsigned char b[8];
  for (int i = 0; i < 8; ++i) b[i] = static_cast<unsigned char>(v >> (8 * i));
  os.write(reinterpret_cast<const char*>(b), 8);
}

inline std::uint64_t get_u64(std::istream& is) {
  unsigned char b[8];
  if (!is.read(reinterpret_cast<char*>(b), 8)) throw CheckpointError("checkpoint truncated");
  std::uint64_t v = 0;
  for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(b[i]) << (8 * i);
  return v;
}

inline std::string get_string(std::istream& is, std::uint64_t limit = 1 << 20) {
  const std::uint64_t n = get_u64(is);
  if (n > limit) throw CheckpointError("checkpoint string length out of range");
  std::string s(n, '\0');
  if (!is.read(s.data(), static_cast<std::streamsize>(n))) throw CheckpointError("checkpoint truncated");
  return s;
}

}  // namespace detail

inline void write_checkpoint(std::ostream& os, const ModelConfig& cfg, const ParamStore& params) {
  os.write(detail::kCheckpointMagic, 8);
  const std::string header = model_config_text(cfg);
  detail::put_u64(os, header.size());
  os.write(header.data(), static_cast<std::streamsize>(header.size()));
  detail::put_u64(os, params.size());
  for (const auto& [name, t] : params.items()) {
    detail::put_u64(os, name.size());
    os.write(name.data(), static_cast<std::streamsize>(name.size()));
    detail::put_u64(os, t.rank());
    for (std::size_t e : t.shape()) detail::put_u64(os, e);
    for (double v : t.data()) detail::put_u64(os, std::bit_cast<std::uint64_t>(v));
  }
  if (!os) throw CheckpointError("failed writing checkpoint");
}

struct Checkpoint {
  ModelConfig config;
  ParamStore params;
};

inline Checkpoint read_checkpoint(std::istream& is) {
  char magic[8];
  if (!is.read(magic, 8) || std::memcmp(magic, detail::kCheckpointMagic, 8) != 0)
    throw CheckpointError("not a checkpoint (bad magic)");
  Checkpoint ck;
  try {
    ck.config = parse_model_config_text(detail::get_string(is));
  } catch (const ConfigError& e) {
    throw CheckpointError(std::string("checkpoint header: ") + e.what());
  }
  const std::uint64_t count = detail::get_u64(is);
  for (std::uint64_t i = 0; i < count; ++i) {
    std::string name = detail::get_string(is, 4096);
    const std::uint64_t rank = detail::get_u64(is);
    if (rank > 8) throw CheckpointError("tensor '" + name + "' has implausible rank");
    Shape shape(rank);
    for (auto& e : shape) e = detail::get_u64(is);
    std::vector<double> data(shape_size(shape));
    for (double& v : data) v = std::bit_cast<double>(detail::get_u64(is));
    ck.params.add(name, Tensor(shape, std::move(data)));
  }
  return ck;
}

inline void save_checkpoint(const std::filesystem::path& path, const ModelConfig& cfg, const ParamStore& params) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw CheckpointError("cannot open " + path.string() + " for writing");
  write_checkpoint(os, cfg, params);
}

inline Checkpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw CheckpointError("cannot open checkpoint " + path.string());
  return read_checkpoint(is);
}

}  // namespace glstm
