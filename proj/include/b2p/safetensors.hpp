#pragma once

#include <filesystem>
#include <map>
#include <string>
#include <utility>
#include <vector>

#include "b2p/tensor.hpp"

namespace b2p {

// Minimal safetensors container: little-endian u64 header length, JSON
// header, raw tensor bytes. Reads F32/F16/BF16/F64 (converted to float),
// writes F32.
std::map<std::string, Tensor> read_safetensors(const std::filesystem::path& path,
                                               std::map<std::string, std::string>* metadata = nullptr);

void write_safetensors(const std::filesystem::path& path,
                       const std::vector<std::pair<std::string, const Tensor*>>& tensors,
                       const std::map<std::string, std::string>& metadata = {});

}  // namespace b2p
