#pragma once

#include <filesystem>
#include <map>
#include <string>

#include <nlohmann/json.hpp>

#include "amecam/nn/layers.hpp"
#include "amecam/tensor.hpp"

namespace amecam {

// Named parameter tensors plus a JSON metadata block (configs, phase, epoch,
// seed, metrics trail). Serialized as a single binary archive:
//   "AMECKPT1" | u64 meta_len | meta json | u32 count | {u32 name_len, name, u32 rank, i32 dims[rank], f32 data[]}*
struct Checkpoint {
  std::map<std::string, Tensor> params;
  nlohmann::json metadata = nlohmann::json::object();

  bool operator==(const Checkpoint&) const = default;
};

void save_checkpoint(const Checkpoint& ckpt, const std::filesystem::path& path);
Checkpoint load_checkpoint(const std::filesystem::path& path);

void store_parameters(const nn::ParameterList& params, Checkpoint& ckpt);
// Copies tensors into params; a missing name or shape mismatch is IncompatibleCheckpoint.
void restore_parameters(const Checkpoint& ckpt, const nn::ParameterList& params);

// FNV-1a over names, shapes and raw bytes; a cheap fingerprint for freeze checks.
std::string parameter_hash(const nn::ParameterList& params);

}  // namespace amecam
