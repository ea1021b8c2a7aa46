#pragma once

// Masked-document pre-training: each selected slot's top-layer output goes
// through the reconstruction head and is scored by MSE against the slot's
// original message vector.

#include <cstdint>
#include <functional>
#include <optional>
#include <span>
#include <vector>

#include <nlohmann/json.hpp>

#include "melt/corpus.hpp"
#include "melt/melt_model.hpp"
#include "melt/ops.hpp"
#include "melt/optim.hpp"

namespace melt {

struct PretrainConfig {
  double base_lr = 4e-3;
  double weight_decay = 0.1;
  std::int64_t warmup_steps = 2000;
  std::int64_t epochs = 5;
  std::size_t batch_size = 100;
  std::uint64_t seed = 1337;
  /// Global gradient-norm clip; off when unset.
  std::optional<double> clip_norm;
  bool shuffle = true;
  MaskingRates rates;

  void validate() const;
};

void to_json(nlohmann::json& j, const PretrainConfig& c);

/// Mean over selected slots of the per-slot MSE. Both inputs are S x d; with
/// S == 0 the loss is a constant zero.
template <typename Scalar>
Tensor<Scalar> masked_loss(const Tensor<Scalar>& predictions, const Tensor<Scalar>& targets) {
  if (predictions.rows() != targets.rows() || predictions.cols() != targets.cols()) {
    throw DimensionError("masked_loss: predictions " + predictions.shape_str() + " vs targets " +
                         targets.shape_str());
  }
  if (predictions.rows() == 0) return Tensor<Scalar>::scalar(Scalar(0));
  // Every slot has d elements, so the mean over all elements equals the mean
  // of per-slot means.
  return mse_loss(predictions, targets);
}

/// Reconstruction predictions and targets for a group of chunks, stacked.
template <typename Scalar>
struct BatchPredictions {
  Tensor<Scalar> predictions;
  Tensor<Scalar> targets;
  std::size_t selected = 0;
};

template <typename Scalar>
BatchPredictions<Scalar> predict_masked(const MeltModel<Scalar>& model,
                                        std::span<const SequenceChunk> chunks,
                                        std::span<const MaskPlan<Scalar>> plans,
                                        const Matrix<Scalar>& vectors, ForwardMode mode = {}) {
  if (chunks.size() != plans.size()) {
    throw DimensionError("predict_masked: " + std::to_string(plans.size()) + " plans for " +
                         std::to_string(chunks.size()) + " chunks");
  }
  std::vector<Tensor<Scalar>> preds;
  std::vector<Tensor<Scalar>> targets;
  BatchPredictions<Scalar> out;
  for (std::size_t i = 0; i < chunks.size(); ++i) {
    const auto& plan = plans[i];
    if (plan.selected.empty()) continue;
    const auto inputs = slot_inputs(chunks[i], plan, vectors);
    const std::span<const SlotInput<Scalar>> view(inputs);
    Tensor<Scalar> top = encoder_forward(model, embed_sequence(model, view),
                                         attention_mask(view), mode);
    preds.push_back(reconstruct(model, top, plan.selected));
    targets.push_back(Tensor<Scalar>::constant(plan.targets));
    out.selected += plan.selected.size();
  }
  const Index d = model.config().d_model;
  if (preds.empty()) {
    out.predictions = Tensor<Scalar>::constant(Matrix<Scalar>(0, d));
    out.targets = Tensor<Scalar>::constant(Matrix<Scalar>(0, d));
  } else {
    out.predictions = concat_rows(preds);
    out.targets = concat_rows(targets);
  }
  return out;
}

struct StepRecord {
  std::int64_t step = 0;
  double lr = 0.0;
  double loss = 0.0;
};

struct EpochRecord {
  std::int64_t epoch = 0;
  double dev_mse = 0.0;
};

/// Index of the lowest dev MSE; ties go to the earliest epoch.
std::size_t select_best_epoch(std::span<const EpochRecord> epochs);

/// Mask plans for dev chunks, drawn once from `seed` and reused every epoch.
std::vector<MaskPlan<float>> dev_mask_plans(std::span<const SequenceChunk> dev,
                                            const Matrix<float>& vectors,
                                            const PretrainConfig& config);

/// Pooled masked-reconstruction MSE over every selected dev slot, eval mode.
double evaluate_dev(const MeltModel<float>& model, std::span<const SequenceChunk> dev,
                    std::span<const MaskPlan<float>> plans, const Matrix<float>& vectors);

struct PretrainResult {
  MeltModel<float> model;
  std::vector<StepRecord> steps;
  std::vector<EpochRecord> epochs;
  std::size_t best_epoch = 0;
  double best_dev_mse = 0.0;
};

/// Runs config.epochs epochs of AdamW with linear warm-up. Training masks
/// are redrawn each epoch from seed ^ epoch (epochs count from 1); dev masks
/// use seed ^ 0. The returned model holds the parameters of the epoch with
/// the lowest dev MSE. `vectors` is constant, so the word level never moves.
PretrainResult pretrain(MeltModel<float> model, const Matrix<float>& vectors,
                        std::span<const SequenceChunk> train, std::span<const SequenceChunk> dev,
                        const PretrainConfig& config,
                        const std::function<void(const StepRecord&)>& on_step = {});

/// Copies of parameter values, for best-epoch snapshots.
template <typename Scalar>
std::vector<Matrix<Scalar>> snapshot_values(std::span<const Tensor<Scalar>> params) {
  std::vector<Matrix<Scalar>> out;
  out.reserve(params.size());
  for (const auto& p : params) out.push_back(p.value());
  return out;
}

template <typename Scalar>
void restore_values(std::span<Tensor<Scalar>> params, const std::vector<Matrix<Scalar>>& values) {
  for (std::size_t i = 0; i < params.size(); ++i) params[i].mutable_value() = values[i];
}

/// Scales all gradients so their joint L2 norm is at most max_norm.
template <typename Scalar>
void clip_grad_norm(std::span<Tensor<Scalar>> params, double max_norm) {
  double total = 0.0;
  for (const auto& p : params) {
    if (p.has_grad()) total += static_cast<double>(p.grad().squaredNorm());
  }
  const double norm = std::sqrt(total);
  if (norm <= max_norm || norm == 0.0) return;
  const auto factor = static_cast<Scalar>(max_norm / norm);
  for (auto& p : params) {
    if (p.has_grad()) p.mutable_grad() *= factor;
  }
}

}  // namespace melt
