#pragma once

#include <cstdint>
#include <map>
#include <string>

#include "apt/dataset.hpp"
#include "apt/tensor.hpp"

namespace apt {

// APTDS binary dataset format, version 1. Little-endian throughout; strings
// and metadata lines are u16-length-prefixed UTF-8; numeric payloads are f32.
//
//   "APTDS1" | version u16
//   sample count u32 | dim u8 | d_a u8 | d_z u8
//   scalar schema: count u8, names
//   per sample:
//     mesh_mode u8 (0 fixed, 1 adaptive) | n_times u16 | times f32[n_times]
//     fixed:    n_nodes u32, coords, features, scalars, fields f32[t*n*d_z]
//     adaptive: scalars, then per snapshot: n_nodes u32, coords, features, fields
//   metadata block: line count u16, "key=value" lines
//     (per-sample entries use the "sample.<i>." prefix)
void write_dataset(const std::string& path, const Dataset& ds);
Dataset read_dataset(const std::string& path);

// Checkpoint format, version 1: config echo, per-dataset normalization stats,
// named parameter entries (name, dtype tag, rank u8, shape u32[], payload),
// CRC32 over everything that precedes it.
struct CheckpointPayload {
  std::string config_echo;
  std::map<std::string, NormalizationStats> stats;  // keyed by dataset id
  struct Entry {
    Dtype dtype = Dtype::f32;
    std::vector<int64_t> shape;
    std::vector<double> values;
  };
  std::map<std::string, Entry> params;
};

void save_checkpoint(const std::string& path, const CheckpointPayload& payload);
CheckpointPayload load_checkpoint(const std::string& path);

uint32_t crc32(const uint8_t* data, size_t len, uint32_t seed = 0);

}  // namespace apt
