#include "voxloc/checkpoint.hpp"

#include <cstring>
#include <fstream>
#include <stdexcept>
#include <vector>

namespace voxloc {

namespace {

constexpr char kMagic[4] = {'V', 'X', 'C', 'K'};
constexpr std::uint32_t kVersion = 1;

void put_u32(std::ostream& os, std::uint32_t v) {
  unsigned char b[4] = {static_cast<unsigned char>(v), static_cast<unsigned char>(v >> 8),
                        static_cast<unsigned char>(v >> 16), static_cast<unsigned char>(v >> 24)};
  os.write(reinterpret_cast<const char*>(b), 4);
}

void put_i64(std::ostream& os, std::int64_t v) {
  auto u = static_cast<std::uint64_t>(v);
  unsigned char b[8];
  for (int i = 0; i < 8; ++i) b[i] = static_cast<unsigned char>(u >> (8 * i));
  os.write(reinterpret_cast<const char*>(b), 8);
}

std::uint32_t get_u32(std::istream& is) {
  unsigned char b[4];
  is.read(reinterpret_cast<char*>(b), 4);
  if (!is) throw std::runtime_error("checkpoint: truncated file");
  return static_cast<std::uint32_t>(b[0]) | (static_cast<std::uint32_t>(b[1]) << 8) |
         (static_cast<std::uint32_t>(b[2]) << 16) | (static_cast<std::uint32_t>(b[3]) << 24);
}

std::int64_t get_i64(std::istream& is) {
  unsigned char b[8];
  is.read(reinterpret_cast<char*>(b), 8);
  if (!is) throw std::runtime_error("checkpoint: truncated file");
  std::uint64_t u = 0;
  for (int i = 0; i < 8; ++i) u |= static_cast<std::uint64_t>(b[i]) << (8 * i);
  return static_cast<std::int64_t>(u);
}

void put_floats(std::ostream& os, const Tensor<float>& t) {
  os.write(reinterpret_cast<const char*>(t.data()), static_cast<std::streamsize>(t.numel() * 4));
}

void get_floats(std::istream& is, Tensor<float>& t) {
  is.read(reinterpret_cast<char*>(t.data()), static_cast<std::streamsize>(t.numel() * 4));
  if (!is) throw std::runtime_error("checkpoint: truncated file");
}

void put_string(std::ostream& os, const std::string& s) {
  put_u32(os, static_cast<std::uint32_t>(s.size()));
  os.write(s.data(), static_cast<std::streamsize>(s.size()));
}

std::string get_string(std::istream& is) {
  std::uint32_t n = get_u32(is);
  std::string s(n, '\0');
  is.read(s.data(), n);
  if (!is) throw std::runtime_error("checkpoint: truncated file");
  return s;
}

}  // namespace

void save_checkpoint(const std::string& path, const CheckpointData& data) {
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw std::runtime_error("checkpoint: cannot open '" + path + "' for writing");
  os.write(kMagic, 4);
  put_u32(os, kVersion);
  put_string(os, data.config_json);
  put_i64(os, data.step);
  put_u32(os, static_cast<std::uint32_t>(data.params.size()));
  for (int i = 0; i < data.params.size(); ++i) {
    const auto& e = data.params[i];
    put_string(os, e.name);
    const Shape& s = e.value.shape();
    put_u32(os, static_cast<std::uint32_t>(s.rank));
    for (int d = 0; d < s.rank; ++d) put_u32(os, static_cast<std::uint32_t>(s.d[d]));
    put_floats(os, e.value);
    put_floats(os, e.m);
    put_floats(os, e.v);
  }
  if (!os) throw std::runtime_error("checkpoint: short write to '" + path + "'");
}

CheckpointData load_checkpoint(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("checkpoint: cannot open '" + path + "'");
  char magic[4];
  is.read(magic, 4);
  if (!is || std::memcmp(magic, kMagic, 4) != 0)
    throw std::runtime_error("checkpoint: bad magic in '" + path + "'");
  std::uint32_t version = get_u32(is);
  if (version != kVersion)
    throw std::runtime_error("checkpoint: version " + std::to_string(version) + " unsupported");
  CheckpointData data;
  data.config_json = get_string(is);
  data.step = get_i64(is);
  std::uint32_t count = get_u32(is);
  for (std::uint32_t i = 0; i < count; ++i) {
    std::string name = get_string(is);
    std::uint32_t rank = get_u32(is);
    if (rank < 1 || rank > 4) throw std::runtime_error("checkpoint: bad rank");
    Shape s;
    s.rank = static_cast<int>(rank);
    for (std::uint32_t d = 0; d < rank; ++d) s.d[d] = static_cast<int>(get_u32(is));
    Tensor<float> value(s), m(s), v(s);
    get_floats(is, value);
    get_floats(is, m);
    get_floats(is, v);
    int id = data.params.add(name, std::move(value));
    data.params[id].m = std::move(m);
    data.params[id].v = std::move(v);
  }
  return data;
}

}  // namespace voxloc
