// SPDX-License-Identifier: Apache-2.0
//
// Versioned binary container shared by models, filter banks and optimizer state.
//
//   "TEDCKPT1"            8 bytes magic
//   u32 format version
//   u64 n, n bytes        metadata as canonical "key=value\n" text, keys sorted
//   u64 blob count
//   per blob: u32 name length, name, u8 dtype tag (1 = f32, 2 = f64), u32 rank,
//             rank x u64 dims, u64 byte count, raw little-endian data
//
// All integers are little-endian.

#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "ted/tensor.hpp"

namespace ted {

inline constexpr char kCheckpointMagic[8] = {'T', 'E', 'D', 'C', 'K', 'P', 'T', '1'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

enum class DType : std::uint8_t { F32 = 1, F64 = 2 };

template <typename T>
constexpr DType dtype_of();
template <>
constexpr DType dtype_of<float>() {
  return DType::F32;
}
template <>
constexpr DType dtype_of<double>() {
  return DType::F64;
}

using Metadata = std::map<std::string, std::string>;

/// Sorted "key=value\n" lines. Keys and values must not contain '\n'; keys must not contain '='.
std::string canonical_kv(const Metadata& meta);
Metadata parse_kv(const std::string& text);

struct Blob {
  std::string name;
  DType dtype = DType::F32;
  Shape shape;
  std::vector<std::uint8_t> bytes;  // little-endian element data
};

class Checkpoint {
 public:
  Metadata meta;

  template <typename T>
  void put(const std::string& name, const Tensor<T>& tensor);
  /// Values of blob `name` as a fresh leaf. The stored dtype must match T.
  template <typename T>
  Tensor<T> get(const std::string& name, bool requires_grad = false) const;
  /// Copies blob `name` into an existing leaf of identical shape.
  template <typename T>
  void load_into(const std::string& name, Tensor<T>& target) const;

  bool contains(const std::string& name) const;
  const Blob& blob(const std::string& name) const;
  const std::vector<Blob>& blobs() const { return blobs_; }
  std::vector<std::string> names() const;

  std::vector<std::uint8_t> serialize() const;
  static Checkpoint deserialize(std::span<const std::uint8_t> bytes);

  void save(const std::filesystem::path& path) const;
  static Checkpoint load(const std::filesystem::path& path);

 private:
  std::vector<Blob> blobs_;
  std::map<std::string, std::size_t> index_;
};

}  // namespace ted
