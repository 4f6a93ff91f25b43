#pragma once

#include "bparse/nn.hpp"

#include <nlohmann/json.hpp>

#include <string>

namespace bparse {

// Single-file parameter container:
//   bytes 0..7   magic "BPCKPT01"
//   bytes 8..15  little-endian u64 header length
//   header       JSON: {"meta": {...}, "tensors": [{name, dtype, rows,
//                cols, offset, nbytes}, ...]} sorted by name
//   payload      raw little-endian doubles, column-major per tensor
// save -> load -> save reproduces the file byte for byte.
struct CheckpointMeta {
  std::string stage;        // "prompt" | "mae" | "finetune"
  int64_t step = 0;
  uint64_t seed = 0;
  std::string config_hash;
  std::string config_text;  // canonical config, lets predict rebuild the model
  nlohmann::ordered_json metrics = nlohmann::ordered_json::object();  // snapshot, optional
};

struct Checkpoint {
  CheckpointMeta meta;
  ParamStore params;
};

void save_checkpoint(const Checkpoint& c, const std::string& path);
Checkpoint load_checkpoint(const std::string& path);

}  // namespace bparse
