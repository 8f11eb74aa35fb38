#pragma once

#include <map>
#include <string>
#include <vector>

#include "selfshot/tensor.hpp"

namespace selfshot {

// Binary parameter container shared by the embedder and the VIS model:
// magic, format version, JSON architecture descriptor, then named tensors
// with shape/dtype headers and little-endian payloads (f32 or f64).
enum class CkptDtype : std::uint8_t { F32 = 0, F64 = 1 };

struct Checkpoint {
  std::string arch_json;
  std::vector<std::pair<std::string, Tensor>> tensors;

  std::map<std::string, Tensor> tensor_map() const;
  const Tensor& get(const std::string& name) const;
};

void save_checkpoint(const std::string& path, const std::string& arch_json,
                     const std::vector<std::pair<std::string, Tensor>>& tensors,
                     CkptDtype dtype = CkptDtype::F64);
Checkpoint load_checkpoint(const std::string& path);

}  // namespace selfshot
