#pragma once

// Binary tensor container.
//
//   magic   8 bytes  "WAVRCKPT"
//   version 1 byte   0x01
//   count   u64
//   record* { u32 name_len, name bytes, u32 ndim, u64 dims[ndim], f64 payload[numel] }
//
// All integers and payload doubles are little-endian. Records keep their
// order, so save(load(x)) is byte-identical.

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "waver/tensor.hpp"

namespace waver {

struct NamedTensor {
    std::string name;
    Tensor tensor;
};

using TensorList = std::vector<NamedTensor>;

inline constexpr char kCheckpointMagic[8] = {'W', 'A', 'V', 'R', 'C', 'K', 'P', 'T'};
inline constexpr std::uint8_t kCheckpointVersion = 1;

std::vector<std::uint8_t> encode_checkpoint(const TensorList& records);
TensorList decode_checkpoint(const std::vector<std::uint8_t>& bytes);

void save_checkpoint(const std::filesystem::path& path, const TensorList& records);
TensorList load_checkpoint(const std::filesystem::path& path);

// Linear lookup; throws ContractError when absent.
const Tensor& find_tensor(const TensorList& records, const std::string& name);
bool has_tensor(const TensorList& records, const std::string& name);

}  // namespace waver
