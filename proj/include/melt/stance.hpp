#pragma once

// Stance fine-tuning. A classifier maps a StanceExample to 3 logits
// (against, none, favor); finetune() trains it with softmax cross-entropy,
// early-stops on dev loss and hands back the best-dev snapshot.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <functional>
#include <iosfwd>
#include <limits>
#include <map>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "melt/corpus.hpp"
#include "melt/errors.hpp"
#include "melt/melt_model.hpp"
#include "melt/ops.hpp"
#include "melt/optim.hpp"
#include "melt/pretrain.hpp"
#include "melt/word_encoder.hpp"

namespace melt {

struct StanceHeadConfig {
  Index hidden1 = 768;
  Index hidden2 = 384;
};

/// dropout -> Linear(in, 768) -> sigmoid -> Linear(768, 384) -> Linear(384, 3).
template <typename Scalar>
struct StanceHead {
  Linear<Scalar> layer1, layer2, classifier;

  StanceHead() = default;
  StanceHead(Index input_dim, const StanceHeadConfig& c, Rng& rng)
      : layer1(input_dim, c.hidden1, rng, "stance.layer1"),
        layer2(c.hidden1, c.hidden2, rng, "stance.layer2"),
        classifier(c.hidden2, kStanceClasses, rng, "stance.classifier") {}

  Tensor<Scalar> operator()(const Tensor<Scalar>& x, double dropout_p, ForwardMode mode) const {
    Rng no_rng(0);
    Rng& rng = mode.rng ? *mode.rng : no_rng;
    if (mode.train && dropout_p > 0.0 && mode.rng == nullptr) {
      throw DimensionError("stance head: training mode with dropout needs an RNG");
    }
    Tensor<Scalar> h = dropout(x, dropout_p, rng, mode.train);
    return classifier(layer2(sigmoid(layer1(h))));
  }

  Index input_dim() const { return layer1.weight.rows(); }

  void collect(std::vector<NamedTensor<Scalar>>& out) const {
    layer1.collect(out);
    layer2.collect(out);
    classifier.collect(out);
  }

  StanceHead clone() const {
    auto copy_linear = [](const Linear<Scalar>& src) {
      Linear<Scalar> dst;
      dst.weight = src.weight.detach_copy();
      dst.bias = src.bias.detach_copy();
      return dst;
    };
    StanceHead copy;
    copy.layer1 = copy_linear(layer1);
    copy.layer2 = copy_linear(layer2);
    copy.classifier = copy_linear(classifier);
    return copy;
  }
};

struct FinetuneConfig {
  double lr = 1e-3;
  double weight_decay = 0.01;
  /// Applied to the vector entering the head.
  double dropout = 0.0;
  std::size_t batch_size = 10;
  std::int64_t max_epochs = 20;
  /// Epochs without a dev-loss improvement before stopping.
  std::int64_t patience = 5;
  bool unfreeze_word = true;
  /// Maximum sequence length, target included.
  std::size_t history_len = kMaxHistory;
  std::uint64_t seed = 1337;

  void validate() const;
};

void to_json(nlohmann::json& j, const FinetuneConfig& c);

template <typename Scalar>
class StanceClassifier {
 public:
  virtual ~StanceClassifier() = default;
  virtual Tensor<Scalar> logits(const StanceExample& example, ForwardMode mode) const = 0;
  /// Everything finetune() updates, in a fixed order.
  virtual std::vector<NamedTensor<Scalar>> trainable_parameters() const = 0;
  virtual void set_word_trainable(bool on) = 0;
  virtual std::unique_ptr<StanceClassifier> clone() const = 0;
  virtual std::string kind() const = 0;

  void set_head_dropout(double p) { head_dropout_ = p; }
  double head_dropout() const { return head_dropout_; }

 protected:
  double head_dropout_ = 0.0;
};

/// Top-layer MeLT vector at the target slot, fed to the stance head.
template <typename Scalar>
class MeltStanceClassifier final : public StanceClassifier<Scalar> {
 public:
  MeltStanceClassifier(MeltModel<Scalar> model, std::unique_ptr<MessageEncoder<Scalar>> encoder,
                       StanceHead<Scalar> head, std::size_t history_len)
      : model_(std::move(model)), encoder_(std::move(encoder)), head_(std::move(head)),
        history_len_(history_len) {
    const auto& c = model_.config();
    if (encoder_->dim() != c.d_model) {
      throw DimensionError("encoder dim " + std::to_string(encoder_->dim()) +
                           " does not match model d_model " + std::to_string(c.d_model));
    }
    if (head_.input_dim() != c.d_model) {
      throw DimensionError("stance head input " + std::to_string(head_.input_dim()) +
                           " does not match model d_model " + std::to_string(c.d_model));
    }
    if (history_len_ < 1 || static_cast<Index>(history_len_) > c.max_seq) {
      throw InputError("history length " + std::to_string(history_len_) + " outside 1.." +
                       std::to_string(c.max_seq));
    }
  }

  Tensor<Scalar> logits(const StanceExample& example, ForwardMode mode) const override {
    const FinetuneSequence seq = build_finetune_sequence(example, history_len_);
    std::vector<SlotInput<Scalar>> inputs(seq.chunk.slots.size());
    for (std::size_t s = 0; s < inputs.size(); ++s) {
      if (!seq.chunk.slots[s]) continue;
      inputs[s].kind = SlotKind::Content;
      inputs[s].vector = encoder_->encode(example.message(*seq.chunk.slots[s]));
    }
    const std::span<const SlotInput<Scalar>> view(inputs);
    Tensor<Scalar> top =
        encoder_forward(model_, embed_sequence(model_, view), attention_mask(view), mode);
    const Index row = static_cast<Index>(seq.target_slot);
    return head_(gather_rows(top, std::span<const Index>(&row, 1)), this->head_dropout_, mode);
  }

  std::vector<NamedTensor<Scalar>> trainable_parameters() const override {
    std::vector<NamedTensor<Scalar>> out;
    // The reconstruction head only serves pre-training.
    for (auto& np : model_.named_parameters()) {
      if (np.name.rfind("head.", 0) != 0) out.push_back(np);
    }
    head_.collect(out);
    if (encoder_->trainable()) {
      for (auto& t : encoder_->parameters()) out.push_back({t.name(), t});
    }
    return out;
  }

  void set_word_trainable(bool on) override { encoder_->set_trainable(on); }

  std::unique_ptr<StanceClassifier<Scalar>> clone() const override {
    auto copy = std::make_unique<MeltStanceClassifier>(model_.clone(), encoder_->clone(),
                                                       head_.clone(), history_len_);
    copy->set_head_dropout(this->head_dropout_);
    return copy;
  }

  std::string kind() const override { return "melt"; }

  const MeltModel<Scalar>& model() const { return model_; }
  const MessageEncoder<Scalar>& encoder() const { return *encoder_; }
  std::size_t history_len() const { return history_len_; }
  void set_history_len(std::size_t n) {
    if (n < 1 || static_cast<Index>(n) > model_.config().max_seq) {
      throw InputError("history length " + std::to_string(n) + " outside 1.." +
                       std::to_string(model_.config().max_seq));
    }
    history_len_ = n;
  }

 private:
  MeltModel<Scalar> model_;
  std::unique_ptr<MessageEncoder<Scalar>> encoder_;
  StanceHead<Scalar> head_;
  std::size_t history_len_;
};

/// Word-level baselines: the target's message vector, optionally concatenated
/// with the mean vector of up to `history_len` recent history messages (zero
/// when there is no history).
template <typename Scalar>
class WordStanceClassifier final : public StanceClassifier<Scalar> {
 public:
  WordStanceClassifier(std::unique_ptr<MessageEncoder<Scalar>> encoder, StanceHead<Scalar> head,
                       bool with_history, std::size_t history_len = kMaxHistory)
      : encoder_(std::move(encoder)), head_(std::move(head)), with_history_(with_history),
        history_len_(history_len) {
    const Index want = encoder_->dim() * (with_history_ ? 2 : 1);
    if (head_.input_dim() != want) {
      throw DimensionError("stance head input " + std::to_string(head_.input_dim()) +
                           ", expected " + std::to_string(want));
    }
  }

  /// The classifier input vector (1 x d or 1 x 2d).
  Tensor<Scalar> features(const StanceExample& example) const {
    Tensor<Scalar> target = encoder_->encode(example.target);
    if (!with_history_) return target;
    return concat_cols<Scalar>({target, history_mean(example)});
  }

  Tensor<Scalar> history_mean(const StanceExample& example) const {
    const std::size_t n = std::min(example.history.size(), history_len_);
    if (n == 0) {
      return Tensor<Scalar>::constant(Matrix<Scalar>::Zero(1, encoder_->dim()));
    }
    std::vector<Tensor<Scalar>> rows;
    rows.reserve(n);
    for (std::size_t i = example.history.size() - n; i < example.history.size(); ++i) {
      rows.push_back(encoder_->encode(example.history[i]));
    }
    return mean_rows(rows.size() == 1 ? rows.front() : concat_rows(rows));
  }

  Tensor<Scalar> logits(const StanceExample& example, ForwardMode mode) const override {
    return head_(features(example), this->head_dropout_, mode);
  }

  std::vector<NamedTensor<Scalar>> trainable_parameters() const override {
    std::vector<NamedTensor<Scalar>> out;
    head_.collect(out);
    if (encoder_->trainable()) {
      for (auto& t : encoder_->parameters()) out.push_back({t.name(), t});
    }
    return out;
  }

  void set_word_trainable(bool on) override { encoder_->set_trainable(on); }

  std::unique_ptr<StanceClassifier<Scalar>> clone() const override {
    auto copy = std::make_unique<WordStanceClassifier>(encoder_->clone(), head_.clone(),
                                                       with_history_, history_len_);
    copy->set_head_dropout(this->head_dropout_);
    return copy;
  }

  std::string kind() const override { return with_history_ ? "word-hist" : "word"; }

  const MessageEncoder<Scalar>& encoder() const { return *encoder_; }

 private:
  std::unique_ptr<MessageEncoder<Scalar>> encoder_;
  StanceHead<Scalar> head_;
  bool with_history_;
  std::size_t history_len_;
};

// ---------------------------------------------------------------------------
// Prediction

struct Prediction {
  std::string example_id;
  std::string target;
  Stance gold = Stance::None;
  Stance predicted = Stance::None;
  /// Softmax of the logits, against/none/favor.
  std::array<double, 3> probabilities{};
};

/// Highest logit; exact ties go to the lower class index.
template <typename Derived>
Stance argmax_stance(const Eigen::MatrixBase<Derived>& logits) {
  int best = 0;
  for (int c = 1; c < kStanceClasses; ++c) {
    if (logits(0, c) > logits(0, best)) best = c;
  }
  return static_cast<Stance>(best);
}

template <typename Derived>
std::array<double, 3> stance_probabilities(const Eigen::MatrixBase<Derived>& logits) {
  std::array<double, 3> p{};
  double top = -std::numeric_limits<double>::infinity();
  for (int c = 0; c < kStanceClasses; ++c) top = std::max(top, static_cast<double>(logits(0, c)));
  double total = 0.0;
  for (int c = 0; c < kStanceClasses; ++c) {
    p[c] = std::exp(static_cast<double>(logits(0, c)) - top);
    total += p[c];
  }
  for (double& v : p) v /= total;
  return p;
}

template <typename Scalar>
std::vector<Prediction> predict(const StanceClassifier<Scalar>& classifier,
                                std::span<const StanceExample> examples) {
  std::vector<Prediction> out;
  out.reserve(examples.size());
  for (const auto& ex : examples) {
    const Matrix<Scalar> z = classifier.logits(ex, ForwardMode{}).value();
    out.push_back({ex.target.message_id, ex.stance_target, ex.label, argmax_stance(z),
                   stance_probabilities(z)});
  }
  return out;
}

/// Most frequent label; ties go to the lower class index.
Stance mfc_label(std::span<const Stance> labels);

std::vector<Prediction> predict_constant(std::span<const StanceExample> examples, Stance label);

// ---------------------------------------------------------------------------
// Training

struct FinetuneEpoch {
  std::int64_t epoch = 0;
  double train_loss = 0.0;
  double dev_loss = 0.0;
};

struct FinetuneResult {
  std::vector<FinetuneEpoch> epochs;
  std::int64_t best_epoch = 0;
  double best_dev_loss = 0.0;
  FinetuneConfig config;
};

/// Mean cross-entropy over examples in eval mode.
template <typename Scalar>
double mean_loss(const StanceClassifier<Scalar>& classifier,
                 std::span<const StanceExample> examples) {
  if (examples.empty()) throw InputError("mean_loss: no examples");
  double total = 0.0;
  for (const auto& ex : examples) {
    total += cross_entropy(classifier.logits(ex, ForwardMode{}), static_cast<Index>(ex.label))
                 .item();
  }
  return total / static_cast<double>(examples.size());
}

template <typename Scalar>
FinetuneResult finetune(StanceClassifier<Scalar>& classifier,
                        std::span<const StanceExample> train,
                        std::span<const StanceExample> dev, const FinetuneConfig& config) {
  config.validate();
  if (train.empty()) throw InputError("finetune: empty training set");
  if (dev.empty()) throw InputError("finetune: empty dev set (needed for early stopping)");

  classifier.set_word_trainable(config.unfreeze_word);
  classifier.set_head_dropout(config.dropout);
  std::vector<Tensor<Scalar>> params;
  for (auto& np : classifier.trainable_parameters()) params.push_back(np.tensor);
  std::span<Tensor<Scalar>> view(params);
  AdamWOptions opts;
  opts.base_lr = config.lr;
  opts.weight_decay = config.weight_decay;
  auto state = AdamWState<Scalar>::for_parameters(params, opts);
  Rng dropout_rng(config.seed ^ 0x9e3779b97f4a7c15ULL);

  FinetuneResult result;
  result.config = config;
  result.best_dev_loss = std::numeric_limits<double>::infinity();
  auto best = snapshot_values<Scalar>(params);
  std::int64_t stale = 0;

  std::vector<std::size_t> order(train.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;

  for (std::int64_t epoch = 1; epoch <= config.max_epochs; ++epoch) {
    Rng shuffle_rng(config.seed ^ static_cast<std::uint64_t>(epoch));
    shuffle_rng.shuffle(order.begin(), order.end());
    double train_total = 0.0;
    for (std::size_t start = 0; start < order.size(); start += config.batch_size) {
      const std::size_t end = std::min(order.size(), start + config.batch_size);
      zero_grads(view);
      Tensor<Scalar> loss;
      for (std::size_t i = start; i < end; ++i) {
        const auto& ex = train[order[i]];
        Tensor<Scalar> l = cross_entropy(classifier.logits(ex, ForwardMode{true, &dropout_rng}),
                                         static_cast<Index>(ex.label));
        loss = loss.defined() ? add(loss, l) : l;
      }
      loss = scale(loss, Scalar(1) / static_cast<Scalar>(end - start));
      const double value = loss.item();
      if (!std::isfinite(value)) {
        throw NumericError("non-finite fine-tuning loss in epoch " + std::to_string(epoch));
      }
      train_total += value * static_cast<double>(end - start);
      backward(loss);
      adamw_step(view, state, config.lr);
    }
    const double dev_loss = mean_loss(classifier, dev);
    if (!std::isfinite(dev_loss)) {
      throw NumericError("non-finite dev loss in epoch " + std::to_string(epoch));
    }
    result.epochs.push_back({epoch, train_total / static_cast<double>(train.size()), dev_loss});
    if (dev_loss < result.best_dev_loss) {
      result.best_dev_loss = dev_loss;
      result.best_epoch = epoch;
      best = snapshot_values<Scalar>(params);
      stale = 0;
    } else if (++stale >= config.patience) {
      break;
    }
  }
  restore_values(view, best);
  for (auto& p : params) p.clear_grad();
  return result;
}

/// Trial 0 is `base`; later trials draw lr and weight decay log-uniformly and
/// dropout uniformly from the allowed ranges.
std::vector<FinetuneConfig> sample_finetune_configs(const FinetuneConfig& base, int trials);

/// Runs every sampled config from a fresh copy of `classifier` and keeps the
/// one with the lowest dev loss; `classifier` ends up holding its weights.
template <typename Scalar>
FinetuneResult search_finetune(std::unique_ptr<StanceClassifier<Scalar>>& classifier,
                               std::span<const StanceExample> train,
                               std::span<const StanceExample> dev, const FinetuneConfig& base,
                               int trials) {
  const auto configs = sample_finetune_configs(base, trials);
  std::unique_ptr<StanceClassifier<Scalar>> best_model;
  FinetuneResult best;
  best.best_dev_loss = std::numeric_limits<double>::infinity();
  for (const auto& cfg : configs) {
    auto candidate = classifier->clone();
    FinetuneResult r = finetune(*candidate, train, dev, cfg);
    if (!best_model || r.best_dev_loss < best.best_dev_loss) {
      best = std::move(r);
      best_model = std::move(candidate);
    }
  }
  classifier = std::move(best_model);
  return best;
}

// ---------------------------------------------------------------------------
// Grouping and I/O

/// Examples split by stance target, in canonical target order.
std::map<std::string, std::vector<StanceExample>> group_by_target(
    std::span<const StanceExample> examples);

/// `example_id,target,gold,pred,p_against,p_none,p_favor`
void write_predictions_csv(std::ostream& out, std::span<const Prediction> predictions);
std::vector<Prediction> read_predictions_csv(std::istream& in, const std::string& source);

}  // namespace melt
