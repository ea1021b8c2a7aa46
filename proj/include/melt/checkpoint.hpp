#pragma once

// Checkpoint file: one line of JSON (format, version, manifest of tensor
// names and shapes, plus caller metadata), a newline, then each tensor's
// float32 values little-endian in manifest order.

#include <filesystem>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "melt/melt_model.hpp"
#include "melt/tensor.hpp"

namespace melt {

inline constexpr int kCheckpointVersion = 1;
inline constexpr const char* kCheckpointFormat = "melt-checkpoint";

struct CheckpointTensor {
  std::string name;
  Matrix<float> values;
};

struct Checkpoint {
  /// Caller metadata (config, encoder, dev MSE, epoch, seed, ...).
  nlohmann::json meta = nlohmann::json::object();
  std::vector<CheckpointTensor> tensors;

  const CheckpointTensor* find(const std::string& name) const;
};

/// Serialized bytes; identical inputs give identical bytes.
std::string serialize_checkpoint(const Checkpoint& checkpoint);
Checkpoint deserialize_checkpoint(const std::string& bytes, const std::string& source = "<bytes>");

/// Writes to a temporary file next to `path` and renames it into place.
void save_checkpoint(const Checkpoint& checkpoint, const std::filesystem::path& path);
Checkpoint load_checkpoint(const std::filesystem::path& path);

void append_tensors(Checkpoint& checkpoint, const std::vector<NamedTensor<float>>& tensors);

/// Copies checkpoint tensors into `tensors` by name; every name must be
/// present with the same shape.
void load_tensors(const Checkpoint& checkpoint, const std::vector<NamedTensor<float>>& tensors);

/// meta["config"] must hold a MeltConfig.
Checkpoint make_model_checkpoint(const MeltModel<float>& model, nlohmann::json meta);
MeltModel<float> model_from_checkpoint(const Checkpoint& checkpoint);

}  // namespace melt
