#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "coda/tensor.hpp"

namespace coda {

// Checkpoint file layout (all integers little-endian):
//   magic "CODA" | u32 version | u64 iteration | u64 entry count
//   per entry: u32 name length | name bytes | u8 dtype (0=f64, 1=u64)
//              | u8 rank | u64 dims[rank] | raw little-endian payload
struct CheckpointEntry {
  std::string name;
  std::uint8_t dtype = 0;
  Shape dims;
  std::vector<double> f64;
  std::vector<std::uint64_t> u64;
};

struct Checkpoint {
  std::uint64_t iteration = 0;
  std::vector<CheckpointEntry> entries;

  void add_f64(const std::string& name, const Shape& dims,
               const std::vector<double>& values);
  void add_u64(const std::string& name, const std::vector<std::uint64_t>& values);

  const CheckpointEntry& find(const std::string& name) const;
  const CheckpointEntry* find_or_null(const std::string& name) const;
};

inline constexpr std::uint32_t kCheckpointVersion = 1;

void save_checkpoint(const std::string& path, const Checkpoint& ckpt);
Checkpoint load_checkpoint(const std::string& path);

}  // namespace coda
