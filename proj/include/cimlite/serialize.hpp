#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "cimlite/tensor.hpp"

namespace cimlite {

struct NamedTensor {
  std::string name;
  Tensor tensor;
};

// "CIMW" weight container: magic, u32 version, u32 count, then per tensor
// u32 name length, name bytes, u32 rank, u32 extents, float32 payload.
// Everything little-endian. Values are rounded to float32 on save.
void save_weights(const std::string& path, const std::vector<NamedTensor>& tensors,
                  uint32_t version = 1);
std::vector<NamedTensor> load_weights(const std::string& path);

}  // namespace cimlite
