#include "melt/pretrain.hpp"

#include <cmath>
#include <numeric>

namespace melt {

namespace {

// Dropout draws come from their own stream so masking stays independent of it.
constexpr std::uint64_t kDropoutStream = 0x9e3779b97f4a7c15ULL;

}  // namespace

void PretrainConfig::validate() const {
  if (!(base_lr > 0.0)) throw InputError("learning rate must be positive");
  if (weight_decay < 0.0) throw InputError("weight decay must be non-negative");
  if (warmup_steps < 0) throw InputError("warm-up steps must be non-negative");
  if (epochs < 1) throw InputError("epochs must be at least 1");
  if (batch_size < 1) throw InputError("batch size must be positive");
  if (clip_norm && !(*clip_norm > 0.0)) throw InputError("clip norm must be positive");
}

void to_json(nlohmann::json& j, const PretrainConfig& c) {
  j = {{"base_lr", c.base_lr},       {"weight_decay", c.weight_decay},
       {"warmup_steps", c.warmup_steps}, {"epochs", c.epochs},
       {"batch_size", c.batch_size}, {"seed", c.seed},
       {"shuffle", c.shuffle},       {"mask_select", c.rates.select},
       {"mask_token", c.rates.mask_token}, {"mask_unchanged", c.rates.unchanged}};
  if (c.clip_norm) j["clip_norm"] = *c.clip_norm;
}

std::size_t select_best_epoch(std::span<const EpochRecord> epochs) {
  if (epochs.empty()) throw InputError("no epochs to select from");
  std::size_t best = 0;
  for (std::size_t i = 1; i < epochs.size(); ++i) {
    if (epochs[i].dev_mse < epochs[best].dev_mse) best = i;
  }
  return best;
}

std::vector<MaskPlan<float>> dev_mask_plans(std::span<const SequenceChunk> dev,
                                            const Matrix<float>& vectors,
                                            const PretrainConfig& config) {
  const auto batches = batch_chunks(dev, config.batch_size);
  return mask_batches<float>(batches, vectors, config.seed ^ 0ULL, config.rates);
}

double evaluate_dev(const MeltModel<float>& model, std::span<const SequenceChunk> dev,
                    std::span<const MaskPlan<float>> plans, const Matrix<float>& vectors) {
  if (dev.empty()) throw InputError("evaluate_dev: empty dev set");
  if (dev.size() != plans.size()) {
    throw DimensionError("evaluate_dev: " + std::to_string(plans.size()) + " plans for " +
                         std::to_string(dev.size()) + " chunks");
  }
  double squared = 0.0;
  std::size_t elements = 0;
  for (std::size_t i = 0; i < dev.size(); ++i) {
    auto out = predict_masked<float>(model, dev.subspan(i, 1), plans.subspan(i, 1), vectors);
    if (out.selected == 0) continue;
    const Matrix<float> diff = out.predictions.value() - out.targets.value();
    squared += diff.cast<double>().squaredNorm();
    elements += static_cast<std::size_t>(diff.size());
  }
  if (elements == 0) throw InputError("evaluate_dev: dev masks selected no slots");
  return squared / static_cast<double>(elements);
}

PretrainResult pretrain(MeltModel<float> model, const Matrix<float>& vectors,
                        std::span<const SequenceChunk> train, std::span<const SequenceChunk> dev,
                        const PretrainConfig& config,
                        const std::function<void(const StepRecord&)>& on_step) {
  config.validate();
  if (train.empty()) throw InputError("pretrain: no training chunks");
  if (vectors.cols() != model.config().d_model) {
    throw DimensionError("pretrain: message vectors have " + std::to_string(vectors.cols()) +
                         " dims, model expects " + std::to_string(model.config().d_model));
  }
  auto params = model.parameters();
  std::span<Tensor<float>> param_view(params);
  AdamWOptions opts;
  opts.base_lr = config.base_lr;
  opts.weight_decay = config.weight_decay;
  auto state = AdamWState<float>::for_parameters(params, opts);

  const auto dev_plans = dev_mask_plans(dev, vectors, config);
  Rng dropout_rng(config.seed ^ kDropoutStream);

  std::vector<StepRecord> steps;
  std::vector<EpochRecord> epochs;
  std::vector<Matrix<float>> best_values;
  double best_mse = std::numeric_limits<double>::infinity();
  std::size_t best_epoch = 0;

  for (std::int64_t epoch = 1; epoch <= config.epochs; ++epoch) {
    const std::uint64_t epoch_seed = config.seed ^ static_cast<std::uint64_t>(epoch);
    std::vector<SequenceChunk> order(train.begin(), train.end());
    if (config.shuffle) {
      Rng shuffle_rng(epoch_seed);
      shuffle_rng.shuffle(order.begin(), order.end());
    }
    const auto batches = batch_chunks(std::span<const SequenceChunk>(order), config.batch_size);
    const auto plans = mask_batches<float>(batches, vectors, epoch_seed, config.rates);

    std::size_t plan_offset = 0;
    for (const auto& batch : batches) {
      const std::span<const MaskPlan<float>> batch_plans(plans.data() + plan_offset, batch.size());
      plan_offset += batch.size();

      zero_grads(param_view);
      auto out = predict_masked<float>(model, batch, batch_plans, vectors,
                                       ForwardMode{true, &dropout_rng});
      const std::int64_t step = state.step + 1;
      if (out.selected == 0) {
        // Nothing to reconstruct: zero loss, no update.
        steps.push_back({step - 1, warmup_lr(step - 1, config.base_lr, config.warmup_steps), 0.0});
        continue;
      }
      Tensor<float> loss = masked_loss(out.predictions, out.targets);
      const double value = loss.item();
      if (!std::isfinite(value)) {
        throw NumericError("non-finite loss at step " + std::to_string(step) + " (epoch " +
                           std::to_string(epoch) + ")");
      }
      backward(loss);
      if (config.clip_norm) clip_grad_norm(param_view, *config.clip_norm);
      const double lr = warmup_lr(step, config.base_lr, config.warmup_steps);
      adamw_step(param_view, state, lr);
      StepRecord record{step, lr, value};
      steps.push_back(record);
      if (on_step) on_step(record);
    }

    const double dev_mse = dev.empty() ? 0.0 : evaluate_dev(model, dev, dev_plans, vectors);
    if (!std::isfinite(dev_mse)) {
      throw NumericError("non-finite dev MSE after epoch " + std::to_string(epoch));
    }
    epochs.push_back({epoch, dev_mse});
    if (dev_mse < best_mse) {
      best_mse = dev_mse;
      best_epoch = static_cast<std::size_t>(epoch);
      best_values = snapshot_values<float>(params);
    }
  }
  restore_values(param_view, best_values);
  for (auto& p : params) p.clear_grad();
  return PretrainResult{std::move(model), std::move(steps), std::move(epochs), best_epoch,
                        best_mse};
}

}  // namespace melt
