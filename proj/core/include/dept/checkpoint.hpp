#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "dept/tensor.hpp"

namespace dept {

// Binary checkpoint layout, all integers little-endian:
//
//   "DEPTCKPT"                    8 magic bytes
//   u32 version                   kCheckpointVersion
//   u32 tensor count
//   per tensor:
//     u32 name length, name bytes (UTF-8)
//     u32 rank
//     u64 dims[rank]
//     f32 values[prod(dims)]      IEEE-754 binary32
//
// Metadata travels as ordinary named tensors ("backbone.config", "peft.meta")
// whose integer fields are stored exactly as float values.
inline constexpr std::uint32_t kCheckpointVersion = 1;

struct CheckpointTensor {
  std::string name;
  Shape shape;
  std::vector<float> values;
};

struct Checkpoint {
  std::vector<CheckpointTensor> tensors;

  const CheckpointTensor* find(std::string_view name) const;
  const CheckpointTensor& at(std::string_view name) const;
  void add(std::string name, Shape shape, std::vector<float> values);
  template <typename T>
  void add(std::string name, const Tensor<T>& t) {
    add(std::move(name), t.shape(), std::vector<float>(t.data().begin(), t.data().end()));
  }
};

std::vector<std::uint8_t> encode_checkpoint(const Checkpoint& ckpt);
Checkpoint decode_checkpoint(std::span<const std::uint8_t> bytes);

void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt);
Checkpoint load_checkpoint(const std::filesystem::path& path);

std::vector<std::uint8_t> read_file_bytes(const std::filesystem::path& path);

}  // namespace dept
