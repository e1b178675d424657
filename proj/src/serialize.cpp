#include "cimlite/serialize.hpp"

#include <cstring>
#include <fstream>

#include "cimlite/errors.hpp"
#include "cimlite/wire.hpp"

namespace cimlite {

using wire::get_f32;
using wire::get_u32;
using wire::put_f32;
using wire::put_u32;

void save_weights(const std::string& path, const std::vector<NamedTensor>& tensors,
                  uint32_t version) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw IoError("cannot open for writing: " + path);
  os.write("CIMW", 4);
  put_u32(os, version);
  put_u32(os, static_cast<uint32_t>(tensors.size()));
  for (const auto& nt : tensors) {
    put_u32(os, static_cast<uint32_t>(nt.name.size()));
    os.write(nt.name.data(), static_cast<std::streamsize>(nt.name.size()));
    put_u32(os, static_cast<uint32_t>(nt.tensor.rank()));
    for (int e : nt.tensor.shape) put_u32(os, static_cast<uint32_t>(e));
    for (double v : nt.tensor.data) put_f32(os, static_cast<float>(v));
  }
  if (!os) throw IoError("write failed: " + path);
}

std::vector<NamedTensor> load_weights(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("cannot open weight file: " + path);
  char magic[4];
  if (!is.read(magic, 4) || std::memcmp(magic, "CIMW", 4) != 0)
    throw IoError("bad magic in weight file: " + path);
  get_u32(is, "version");
  const uint32_t count = get_u32(is, "tensor count");
  std::vector<NamedTensor> out;
  out.reserve(count);
  for (uint32_t i = 0; i < count; ++i) {
    NamedTensor nt;
    const uint32_t name_len = get_u32(is, "name length");
    if (name_len > (1u << 16)) throw IoError("implausible name length in " + path);
    nt.name.resize(name_len);
    if (!is.read(nt.name.data(), name_len)) throw IoError("truncated name in " + path);
    const uint32_t rank = get_u32(is, "rank");
    if (rank < 1 || rank > 4) throw IoError("unsupported tensor rank in " + path);
    std::vector<int> shape(rank);
    for (auto& e : shape) e = static_cast<int>(get_u32(is, "extent"));
    nt.tensor = Tensor(shape);
    for (auto& v : nt.tensor.data) v = static_cast<double>(get_f32(is, "payload"));
    out.push_back(std::move(nt));
  }
  return out;
}

}  // namespace cimlite
