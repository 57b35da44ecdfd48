#pragma once

// Reader/writer for the safetensors container: an 8-byte little-endian header
// length, a JSON header describing every tensor (dtype, shape, byte range)
// plus an optional string-to-string "__metadata__" map, then raw data.

#include "flip/autograd.hpp"

#include <filesystem>
#include <map>
#include <string>
#include <vector>

namespace flip {

struct NamedTensor {
  std::vector<long> shape;
  Matrix value;  // rows = shape[0] (or 1), cols = product of the rest
};

struct TensorArchive {
  std::map<std::string, NamedTensor> tensors;
  std::map<std::string, std::string> metadata;
};

enum class StorageType { F32, F64 };

/// Maps a logical tensor shape onto the matrix layout used in memory.
std::pair<long, long> matrix_extent(const std::vector<long>& shape);

TensorArchive read_safetensors(const std::filesystem::path& path);
void write_safetensors(const std::filesystem::path& path, const TensorArchive& archive,
                       StorageType storage = StorageType::F64);

}  // namespace flip
