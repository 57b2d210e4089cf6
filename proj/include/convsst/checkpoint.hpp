#pragma once

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <string>
#include <vector>

#include "convsst/model.hpp"
#include "convsst/training.hpp"
#include "json.hpp"

namespace convsst {

enum class DType : std::uint8_t { f32 = 0, f64 = 1 };

/// One stored tensor. Values are held widened to double; f32 entries convert
/// back exactly.
struct NamedTensor {
  std::string name;
  Shape shape;
  DType dtype = DType::f32;
  std::vector<double> values;

  friend bool operator==(const NamedTensor&, const NamedTensor&) = default;
};

/// File layout (all integers little-endian):
///   "CSST" | version u32 | config JSON (u32 length + UTF-8) | tensor count u32 |
///   per tensor: name (u32 length + UTF-8), ndim u32, dims u64..., dtype u8, raw values
/// The config JSON holds {"model": ..., "train": ..., "meta": ...}.
struct Checkpoint {
  static constexpr std::uint32_t kVersion = 1;

  std::uint32_t version = kVersion;
  nlohmann::ordered_json config = nlohmann::ordered_json::object();
  std::vector<NamedTensor> tensors;

  const NamedTensor* find(const std::string& name) const;
  ModelConfig model_config() const;
};

void write_checkpoint(std::ostream& out, const Checkpoint& checkpoint);
Checkpoint read_checkpoint(std::istream& in);
void save_checkpoint(const Checkpoint& checkpoint, const std::filesystem::path& path);
Checkpoint load_checkpoint(const std::filesystem::path& path);

/// Snapshot of weights, BatchNorm buffers and (optionally) Adam moments,
/// stored as "adam.m.<name>", "adam.v.<name>" and "adam.step".
template <typename Scalar>
Checkpoint make_checkpoint(const ModelWeights<Scalar>& weights, const ModelConfig& model,
                           const TrainConfig& train, const nlohmann::ordered_json& meta,
                           const AdamState<Scalar>* adam = nullptr);

/// Copies stored tensors into `weights`; every parameter and buffer must be
/// present with an identical shape. Errors name the offending tensor.
template <typename Scalar>
void restore_weights(const Checkpoint& checkpoint, ModelWeights<Scalar>& weights);

/// Restores Adam moments; returns false when the checkpoint has none.
template <typename Scalar>
bool restore_adam(const Checkpoint& checkpoint, const ModelWeights<Scalar>& weights, AdamState<Scalar>& state);

}  // namespace convsst
