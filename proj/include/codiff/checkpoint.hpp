#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <string>

#include "codiff/params.hpp"
#include "codiff/tensor.hpp"

// Binary tensor files:
//   "CODF" | u16 version | entries sorted by name, each
//   u32 name length | UTF-8 name | u8 rank | u32 dims[rank] | f32 values
// All integers and floats little-endian. Adam moments go to a sibling file of
// the same layout.
namespace codiff::checkpoint {

inline constexpr std::uint16_t kFormatVersion = 1;

using TensorMap = std::map<std::string, Tensor<float>>;

void write_tensor_file(const std::filesystem::path& path, const TensorMap& entries);
TensorMap read_tensor_file(const std::filesystem::path& path);

// Parameter values plus optional extra entries (e.g. "meta.*").
template <typename T>
void save_values(const ParamStore<T>& store, const std::filesystem::path& path, const TensorMap& extra = {});

// Overwrites the values of every parameter in `store` from `path`. Missing
// names or shape mismatches throw. Entries not present in the store are
// returned.
template <typename T>
TensorMap load_values(ParamStore<T>& store, const std::filesystem::path& path);

// "<name>.adam_m" / "<name>.adam_v" per parameter plus "adam.step".
template <typename T>
void save_adam_state(const ParamStore<T>& store, const std::filesystem::path& path);

template <typename T>
void load_adam_state(ParamStore<T>& store, const std::filesystem::path& path);

}  // namespace codiff::checkpoint
