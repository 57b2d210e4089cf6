#pragma once

#include <cstdint>
#include <functional>
#include <span>
#include <string_view>
#include <vector>

#include "convsst/hsi_data.hpp"
#include "convsst/metrics.hpp"
#include "convsst/model.hpp"
#include "json.hpp"

namespace convsst {

struct TrainConfig {
  std::size_t epochs = 500;
  std::size_t batch = 64;
  double lr = 5e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  std::uint64_t seed = 42;
  std::size_t eval_interval = 0;  // 0 disables periodic evaluation
  bool check_finite = false;      // validate every op output for NaN/Inf

  void validate() const;
};

nlohmann::ordered_json to_json(const TrainConfig& config);
TrainConfig train_config_from_json(const nlohmann::json& j);

/// Independent seed for a named random stream ("init", "split", "shuffle",
/// "dropout") derived from the run seed.
std::uint64_t derive_seed(std::uint64_t seed, std::string_view stream);

template <typename Scalar>
struct AdamState {
  std::vector<Tensor<Scalar>> m, v;  // aligned with the parameter list
  std::uint64_t step = 0;
};

struct AdamOptions {
  double lr = 5e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

/// One bias-corrected Adam update of every trainable parameter from its grad.
/// Moment buffers are created on the first call.
template <typename Scalar>
void adam_step(std::span<Parameter<Scalar>* const> params, AdamState<Scalar>& state, const AdamOptions& options);

struct EpochRecord {
  std::size_t epoch = 0;  // 1-based
  double loss = 0.0;      // sample-weighted mean cross-entropy
  double train_acc = 0.0; // accuracy of the training-mode predictions
};

struct TrainCallbacks {
  std::function<void(const EpochRecord&)> on_epoch;
  /// Called every `eval_interval` epochs.
  std::function<void(std::size_t epoch)> on_eval;
};

/// Mini-batch Adam over cross-entropy. Weights and optimizer state are
/// updated in place; throws NonFiniteError as soon as the loss is NaN/Inf.
template <typename Scalar>
std::vector<EpochRecord> train(ModelWeights<Scalar>& weights, AdamState<Scalar>& state, const ModelConfig& model,
                               const HsiCube& cube, std::span<const PixelSample> samples, const TrainConfig& config,
                               const TrainCallbacks& callbacks = {});

/// Row-wise argmax; ties go to the lowest index.
template <typename Scalar>
std::vector<std::int32_t> argmax_rows(const Tensor<Scalar>& logits);

/// Eval-mode class predictions (dropout off, BatchNorm running statistics).
template <typename Scalar>
std::vector<std::int32_t> predict(const ModelWeights<Scalar>& weights, const ModelConfig& model, const HsiCube& cube,
                                  std::span<const PixelSample> samples, std::size_t batch = 64);

struct Evaluation {
  std::vector<std::int32_t> predictions;
  ConfusionMatrix confusion;
};

template <typename Scalar>
Evaluation evaluate(const ModelWeights<Scalar>& weights, const ModelConfig& model, const HsiCube& cube,
                    std::span<const PixelSample> samples, std::size_t batch = 64);

}  // namespace convsst
