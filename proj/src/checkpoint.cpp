#include "coda/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>

#include "coda/common.hpp"

static_assert(std::endian::native == std::endian::little,
              "checkpoint writer assumes a little-endian host");

namespace coda {

void Checkpoint::add_f64(const std::string& name, const Shape& dims,
                         const std::vector<double>& values) {
  if (shape_size(dims) != values.size())
    throw Error("checkpoint: entry " + name + " dims do not match payload");
  CheckpointEntry e;
  e.name = name;
  e.dtype = 0;
  e.dims = dims;
  e.f64 = values;
  entries.push_back(std::move(e));
}

void Checkpoint::add_u64(const std::string& name,
                         const std::vector<std::uint64_t>& values) {
  CheckpointEntry e;
  e.name = name;
  e.dtype = 1;
  e.dims = {values.size()};
  e.u64 = values;
  entries.push_back(std::move(e));
}

const CheckpointEntry* Checkpoint::find_or_null(const std::string& name) const {
  for (const auto& e : entries)
    if (e.name == name) return &e;
  return nullptr;
}

const CheckpointEntry& Checkpoint::find(const std::string& name) const {
  const CheckpointEntry* e = find_or_null(name);
  if (!e) throw IoError("checkpoint: missing entry " + name);
  return *e;
}

namespace {

template <typename T>
void put(std::ofstream& out, T value) {
  out.write(reinterpret_cast<const char*>(&value), sizeof value);
}

template <typename T>
T get(std::ifstream& in) {
  T value;
  in.read(reinterpret_cast<char*>(&value), sizeof value);
  if (!in) throw IoError("checkpoint: truncated file");
  return value;
}

}  // namespace

void save_checkpoint(const std::string& path, const Checkpoint& ckpt) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write " + path);
  out.write("CODA", 4);
  put<std::uint32_t>(out, kCheckpointVersion);
  put<std::uint64_t>(out, ckpt.iteration);
  put<std::uint64_t>(out, ckpt.entries.size());
  for (const auto& e : ckpt.entries) {
    put<std::uint32_t>(out, static_cast<std::uint32_t>(e.name.size()));
    out.write(e.name.data(), static_cast<std::streamsize>(e.name.size()));
    put<std::uint8_t>(out, e.dtype);
    put<std::uint8_t>(out, static_cast<std::uint8_t>(e.dims.size()));
    for (std::size_t d : e.dims) put<std::uint64_t>(out, d);
    if (e.dtype == 0)
      out.write(reinterpret_cast<const char*>(e.f64.data()),
                static_cast<std::streamsize>(e.f64.size() * sizeof(double)));
    else
      out.write(reinterpret_cast<const char*>(e.u64.data()),
                static_cast<std::streamsize>(e.u64.size() * sizeof(std::uint64_t)));
  }
  if (!out) throw IoError("failed while writing " + path);
}

Checkpoint load_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path);
  char magic[4];
  in.read(magic, 4);
  if (!in || std::memcmp(magic, "CODA", 4) != 0)
    throw IoError("checkpoint: bad magic in " + path);
  const auto version = get<std::uint32_t>(in);
  if (version != kCheckpointVersion)
    throw IoError("checkpoint: unsupported format version " +
                  std::to_string(version));

  Checkpoint ckpt;
  ckpt.iteration = get<std::uint64_t>(in);
  const auto count = get<std::uint64_t>(in);
  ckpt.entries.reserve(count);
  for (std::uint64_t i = 0; i < count; ++i) {
    CheckpointEntry e;
    const auto name_len = get<std::uint32_t>(in);
    e.name.resize(name_len);
    in.read(e.name.data(), name_len);
    if (!in) throw IoError("checkpoint: truncated file");
    e.dtype = get<std::uint8_t>(in);
    if (e.dtype > 1)
      throw IoError("checkpoint: unknown dtype tag " + std::to_string(e.dtype) +
                    " for entry " + e.name);
    const auto rank = get<std::uint8_t>(in);
    std::size_t total = 1;
    e.dims.resize(rank);
    for (std::uint8_t d = 0; d < rank; ++d) {
      e.dims[d] = get<std::uint64_t>(in);
      total *= e.dims[d];
    }
    if (e.dtype == 0) {
      e.f64.resize(total);
      in.read(reinterpret_cast<char*>(e.f64.data()),
              static_cast<std::streamsize>(total * sizeof(double)));
    } else {
      e.u64.resize(total);
      in.read(reinterpret_cast<char*>(e.u64.data()),
              static_cast<std::streamsize>(total * sizeof(std::uint64_t)));
    }
    if (!in) throw IoError("checkpoint: truncated file");
    ckpt.entries.push_back(std::move(e));
  }
  return ckpt;
}

}  // namespace coda
