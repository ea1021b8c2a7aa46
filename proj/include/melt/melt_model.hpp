#pragma once

// The message-level transformer. Positions are whole messages: each slot of a
// sequence carries a pooled message vector, the learned MASK vector, or the
// learned PAD vector, plus a learned position embedding. A stack of post-norm
// encoder layers with padding-masked bidirectional self-attention follows, and
// a dense head maps top-layer outputs back into message-vector space.
//
// Parameter layout per encoder layer (d = d_model, f = ff_dim):
//   query/key/value/output projections   4 * (d*d + d)
//   feed-forward d->f->d                 d*f + f + f*d + d
//   two layer norms                      4 * d
// plus reconstruction head d*d + d, position table max_seq*d, MASK and PAD d each.

#include <cmath>
#include <cstdint>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "melt/corpus.hpp"
#include "melt/errors.hpp"
#include "melt/ops.hpp"
#include "melt/random.hpp"
#include "melt/tensor.hpp"

namespace melt {

struct MeltConfig {
  Index n_layers = 2;
  Index d_model = 768;
  Index ff_dim = 2048;
  Index n_heads = 8;
  double dropout = 0.1;
  Index max_seq = 40;
  bool position_embeddings = true;
  /// Standard deviation of the Gaussian init of linear weights; embedding
  /// rows always start at 0.02.
  double init_std = 0.02;

  void validate() const {
    if (n_layers < 1 || d_model < 1 || ff_dim < 1 || n_heads < 1 || max_seq < 1) {
      throw DimensionError("MeltConfig: all extents must be at least 1");
    }
    if (d_model % n_heads != 0) {
      throw DimensionError("MeltConfig: d_model " + std::to_string(d_model) +
                           " is not divisible by n_heads " + std::to_string(n_heads));
    }
    if (dropout < 0.0 || dropout >= 1.0) throw DimensionError("MeltConfig: dropout out of [0, 1)");
    if (!(init_std > 0.0)) throw DimensionError("MeltConfig: init_std must be positive");
  }

  bool operator==(const MeltConfig&) const = default;
};

inline void to_json(nlohmann::json& j, const MeltConfig& c) {
  j = {{"n_layers", c.n_layers}, {"d_model", c.d_model},   {"ff_dim", c.ff_dim},
       {"n_heads", c.n_heads},   {"dropout", c.dropout},   {"max_seq", c.max_seq},
       {"position_embeddings", c.position_embeddings}, {"init_std", c.init_std}};
}

inline void from_json(const nlohmann::json& j, MeltConfig& c) {
  j.at("n_layers").get_to(c.n_layers);
  j.at("d_model").get_to(c.d_model);
  j.at("ff_dim").get_to(c.ff_dim);
  j.at("n_heads").get_to(c.n_heads);
  j.at("dropout").get_to(c.dropout);
  j.at("max_seq").get_to(c.max_seq);
  j.at("position_embeddings").get_to(c.position_embeddings);
  c.init_std = j.value("init_std", 0.02);
}

/// Closed-form trainable parameter count for a config.
inline std::int64_t melt_parameter_count(const MeltConfig& c) {
  const std::int64_t d = c.d_model;
  const std::int64_t f = c.ff_dim;
  const std::int64_t per_layer = 4 * (d * d + d) + (d * f + f) + (f * d + d) + 4 * d;
  const std::int64_t head = d * d + d;
  const std::int64_t embeddings = (c.position_embeddings ? c.max_seq * d : 0) + 2 * d;
  return c.n_layers * per_layer + head + embeddings;
}

template <typename Scalar>
struct NamedTensor {
  std::string name;
  Tensor<Scalar> tensor;
};

namespace detail {

template <typename Scalar>
Tensor<Scalar> gaussian_parameter(Index rows, Index cols, double stddev, Rng& rng,
                                  std::string name) {
  Matrix<Scalar> m(rows, cols);
  for (Index i = 0; i < m.size(); ++i) m.data()[i] = static_cast<Scalar>(rng.normal() * stddev);
  return Tensor<Scalar>::parameter(std::move(m), std::move(name));
}

}  // namespace detail

/// y = x W + b with W stored in x out.
template <typename Scalar>
struct Linear {
  Tensor<Scalar> weight;
  Tensor<Scalar> bias;

  Linear() = default;
  Linear(Index in, Index out, Rng& rng, const std::string& name, double init_std = 0.02)
      : weight(detail::gaussian_parameter<Scalar>(in, out, init_std, rng, name + ".weight")),
        bias(Tensor<Scalar>::parameter(Matrix<Scalar>::Zero(1, out), name + ".bias")) {}

  Tensor<Scalar> operator()(const Tensor<Scalar>& x) const { return add(matmul(x, weight), bias); }

  void collect(std::vector<NamedTensor<Scalar>>& out) const {
    out.push_back({weight.name(), weight});
    out.push_back({bias.name(), bias});
  }
};

template <typename Scalar>
struct EncoderLayer {
  Linear<Scalar> query, key, value, output;
  Tensor<Scalar> attn_norm_gamma, attn_norm_beta;
  Linear<Scalar> ff_in, ff_out;
  Tensor<Scalar> ff_norm_gamma, ff_norm_beta;

  EncoderLayer() = default;
  EncoderLayer(const MeltConfig& c, Rng& rng, const std::string& prefix)
      : query(c.d_model, c.d_model, rng, prefix + ".attn.query", c.init_std),
        key(c.d_model, c.d_model, rng, prefix + ".attn.key", c.init_std),
        value(c.d_model, c.d_model, rng, prefix + ".attn.value", c.init_std),
        output(c.d_model, c.d_model, rng, prefix + ".attn.output", c.init_std),
        attn_norm_gamma(Tensor<Scalar>::parameter(Matrix<Scalar>::Ones(1, c.d_model),
                                                  prefix + ".attn_norm.gamma")),
        attn_norm_beta(Tensor<Scalar>::parameter(Matrix<Scalar>::Zero(1, c.d_model),
                                                 prefix + ".attn_norm.beta")),
        ff_in(c.d_model, c.ff_dim, rng, prefix + ".ff.in", c.init_std),
        ff_out(c.ff_dim, c.d_model, rng, prefix + ".ff.out", c.init_std),
        ff_norm_gamma(Tensor<Scalar>::parameter(Matrix<Scalar>::Ones(1, c.d_model),
                                                prefix + ".ff_norm.gamma")),
        ff_norm_beta(Tensor<Scalar>::parameter(Matrix<Scalar>::Zero(1, c.d_model),
                                               prefix + ".ff_norm.beta")) {}

  void collect(std::vector<NamedTensor<Scalar>>& out) const {
    query.collect(out);
    key.collect(out);
    value.collect(out);
    output.collect(out);
    out.push_back({attn_norm_gamma.name(), attn_norm_gamma});
    out.push_back({attn_norm_beta.name(), attn_norm_beta});
    ff_in.collect(out);
    ff_out.collect(out);
    out.push_back({ff_norm_gamma.name(), ff_norm_gamma});
    out.push_back({ff_norm_beta.name(), ff_norm_beta});
  }
};

template <typename Scalar>
class MeltModel {
 public:
  MeltModel(const MeltConfig& config, Rng& rng) : config_(config) {
    config_.validate();
    const Index d = config_.d_model;
    if (config_.position_embeddings) {
      positions_ = detail::gaussian_parameter<Scalar>(config_.max_seq, d, 0.02, rng,
                                                      "position_embeddings");
    }
    mask_vector_ = detail::gaussian_parameter<Scalar>(1, d, 0.02, rng, "mask_vector");
    pad_vector_ = detail::gaussian_parameter<Scalar>(1, d, 0.02, rng, "pad_vector");
    for (Index l = 0; l < config_.n_layers; ++l) {
      layers_.emplace_back(config_, rng, "layers." + std::to_string(l));
    }
    head_ = Linear<Scalar>(d, d, rng, "head", config_.init_std);
  }

  MeltModel(MeltModel&&) noexcept = default;
  MeltModel& operator=(MeltModel&&) noexcept = default;
  MeltModel(const MeltModel&) = delete;
  MeltModel& operator=(const MeltModel&) = delete;

  /// Deep copy; the clone shares no parameter storage.
  MeltModel clone() const {
    Rng unused(0);
    MeltConfig tiny = config_;
    MeltModel copy(std::move(tiny), unused);
    auto src = named_parameters();
    auto dst = copy.named_parameters();
    for (std::size_t i = 0; i < src.size(); ++i) {
      dst[i].tensor.mutable_value() = src[i].tensor.value();
      dst[i].tensor.set_requires_grad(src[i].tensor.requires_grad());
    }
    return copy;
  }

  const MeltConfig& config() const { return config_; }

  /// Fixed order: embeddings, layers bottom-up, head.
  std::vector<NamedTensor<Scalar>> named_parameters() const {
    std::vector<NamedTensor<Scalar>> out;
    if (positions_.defined()) out.push_back({positions_.name(), positions_});
    out.push_back({mask_vector_.name(), mask_vector_});
    out.push_back({pad_vector_.name(), pad_vector_});
    for (const auto& layer : layers_) layer.collect(out);
    head_.collect(out);
    return out;
  }

  std::vector<Tensor<Scalar>> parameters() const {
    std::vector<Tensor<Scalar>> out;
    for (auto& np : named_parameters()) out.push_back(np.tensor);
    return out;
  }

  std::int64_t parameter_count() const {
    std::int64_t total = 0;
    for (const auto& np : named_parameters()) total += np.tensor.size();
    return total;
  }

  const Tensor<Scalar>& positions() const { return positions_; }
  const Tensor<Scalar>& mask_vector() const { return mask_vector_; }
  const Tensor<Scalar>& pad_vector() const { return pad_vector_; }
  const std::vector<EncoderLayer<Scalar>>& layers() const { return layers_; }
  const Linear<Scalar>& head() const { return head_; }

 private:
  MeltConfig config_;
  Tensor<Scalar> positions_;
  Tensor<Scalar> mask_vector_;
  Tensor<Scalar> pad_vector_;
  std::vector<EncoderLayer<Scalar>> layers_;
  Linear<Scalar> head_;
};

// ---------------------------------------------------------------------------
// Sequence inputs

enum class SlotKind : std::uint8_t { Pad, Mask, Content };

template <typename Scalar>
struct SlotInput {
  SlotKind kind = SlotKind::Pad;
  /// 1 x d message vector for Content slots.
  Tensor<Scalar> vector;
};

using AttentionMask = std::vector<bool>;

/// Per-slot inputs for a corpus chunk under a mask plan. `vectors` holds one
/// message vector per corpus message.
template <typename Scalar>
std::vector<SlotInput<Scalar>> slot_inputs(const SequenceChunk& chunk, const MaskPlan<Scalar>& plan,
                                           const Matrix<Scalar>& vectors) {
  if (plan.slots.size() != chunk.slots.size()) {
    throw DimensionError("mask plan has " + std::to_string(plan.slots.size()) +
                         " slots for a chunk of " + std::to_string(chunk.slots.size()));
  }
  std::vector<SlotInput<Scalar>> out(chunk.slots.size());
  for (std::size_t s = 0; s < chunk.slots.size(); ++s) {
    const auto& slot = chunk.slots[s];
    const auto& sp = plan.slots[s];
    if (!slot) {
      if (sp.action != MaskAction::Keep) {
        throw DimensionError("mask plan selects PAD slot " + std::to_string(s));
      }
      continue;
    }
    switch (sp.action) {
      case MaskAction::MaskToken:
        out[s].kind = SlotKind::Mask;
        break;
      case MaskAction::RandomReplace:
        out[s].kind = SlotKind::Content;
        out[s].vector = Tensor<Scalar>::constant(
            vectors.row(static_cast<Index>(sp.replacement.value_or(*slot))));
        break;
      case MaskAction::Keep:
      case MaskAction::UnchangedPredict:
        out[s].kind = SlotKind::Content;
        out[s].vector = Tensor<Scalar>::constant(vectors.row(static_cast<Index>(*slot)));
        break;
    }
  }
  return out;
}

template <typename Scalar>
AttentionMask attention_mask(std::span<const SlotInput<Scalar>> inputs) {
  AttentionMask mask(inputs.size());
  for (std::size_t s = 0; s < inputs.size(); ++s) mask[s] = inputs[s].kind != SlotKind::Pad;
  return mask;
}

/// L x d matrix: the slot's vector (MASK / PAD / message) plus its position
/// embedding.
template <typename Scalar>
Tensor<Scalar> embed_sequence(const MeltModel<Scalar>& model,
                              std::span<const SlotInput<Scalar>> inputs) {
  const auto& c = model.config();
  if (inputs.empty() || static_cast<Index>(inputs.size()) > c.max_seq) {
    throw DimensionError("embed_sequence: " + std::to_string(inputs.size()) +
                         " slots, model supports 1.." + std::to_string(c.max_seq));
  }
  std::vector<Tensor<Scalar>> rows;
  rows.reserve(inputs.size());
  for (const auto& in : inputs) {
    switch (in.kind) {
      case SlotKind::Pad: rows.push_back(model.pad_vector()); break;
      case SlotKind::Mask: rows.push_back(model.mask_vector()); break;
      case SlotKind::Content:
        if (in.vector.rows() != 1 || in.vector.cols() != c.d_model) {
          throw DimensionError("embed_sequence: message vector " + in.vector.shape_str() +
                               " for d_model " + std::to_string(c.d_model));
        }
        rows.push_back(in.vector);
        break;
    }
  }
  Tensor<Scalar> x = concat_rows(rows);
  if (model.positions().defined()) {
    std::vector<Index> pos(inputs.size());
    for (std::size_t i = 0; i < pos.size(); ++i) pos[i] = static_cast<Index>(i);
    x = add(x, gather_rows(model.positions(), std::span<const Index>(pos)));
  }
  return x;
}

struct ForwardMode {
  bool train = false;
  Rng* rng = nullptr;
};

/// Attention probabilities per layer and head, filled when requested.
template <typename Scalar>
struct AttentionTrace {
  std::vector<std::vector<Matrix<Scalar>>> probabilities;
};

/// Post-norm encoder stack:
///   h = LN(x + Dropout(MultiHeadAttention(x)))
///   y = LN(h + Dropout(FF(h))),  FF = W2 GELU(W1 h)
/// Scores use scale 1/sqrt(d/h); keys where mask is false are excluded.
template <typename Scalar>
Tensor<Scalar> encoder_forward(const MeltModel<Scalar>& model, const Tensor<Scalar>& inputs,
                               const AttentionMask& mask, ForwardMode mode = {},
                               AttentionTrace<Scalar>* trace = nullptr) {
  const auto& c = model.config();
  if (inputs.cols() != c.d_model || static_cast<Index>(mask.size()) != inputs.rows()) {
    throw DimensionError("encoder_forward: inputs " + inputs.shape_str() + " with mask of " +
                         std::to_string(mask.size()));
  }
  if (mode.train && c.dropout > 0.0 && mode.rng == nullptr) {
    throw DimensionError("encoder_forward: training mode with dropout needs an RNG");
  }
  Rng no_rng(0);
  Rng& rng = mode.rng ? *mode.rng : no_rng;
  const Index head_dim = c.d_model / c.n_heads;
  const Scalar score_scale = Scalar(1) / std::sqrt(static_cast<Scalar>(head_dim));

  Tensor<Scalar> x = dropout(inputs, c.dropout, rng, mode.train);
  for (const auto& layer : model.layers()) {
    Tensor<Scalar> q = layer.query(x);
    Tensor<Scalar> k = layer.key(x);
    Tensor<Scalar> v = layer.value(x);
    std::vector<Tensor<Scalar>> heads;
    std::vector<Matrix<Scalar>> probs_for_trace;
    for (Index h = 0; h < c.n_heads; ++h) {
      Tensor<Scalar> qh = slice_cols(q, h * head_dim, head_dim);
      Tensor<Scalar> kh = slice_cols(k, h * head_dim, head_dim);
      Tensor<Scalar> vh = slice_cols(v, h * head_dim, head_dim);
      Tensor<Scalar> scores = scale(matmul(qh, transpose(kh)), score_scale);
      Tensor<Scalar> probs = masked_softmax(scores, mask);
      if (trace) probs_for_trace.push_back(probs.value());
      heads.push_back(matmul(probs, vh));
    }
    if (trace) trace->probabilities.push_back(std::move(probs_for_trace));
    Tensor<Scalar> attended = layer.output(heads.size() == 1 ? heads.front() : concat_cols(heads));
    x = layer_norm(add(x, dropout(attended, c.dropout, rng, mode.train)), layer.attn_norm_gamma,
                   layer.attn_norm_beta);
    Tensor<Scalar> ff = layer.ff_out(gelu(layer.ff_in(x)));
    x = layer_norm(add(x, dropout(ff, c.dropout, rng, mode.train)), layer.ff_norm_gamma,
                   layer.ff_norm_beta);
  }
  return x;
}

/// Applies the reconstruction head to the top-layer rows at `selected`.
template <typename Scalar>
Tensor<Scalar> reconstruct(const MeltModel<Scalar>& model, const Tensor<Scalar>& outputs,
                           std::span<const std::size_t> selected) {
  if (selected.empty()) {
    return Tensor<Scalar>::constant(Matrix<Scalar>(0, model.config().d_model));
  }
  std::vector<Index> rows(selected.begin(), selected.end());
  return model.head()(gather_rows(outputs, std::span<const Index>(rows)));
}

/// Top-layer vector at `slot`, eval mode, no masking and no head.
template <typename Scalar>
Tensor<Scalar> message_representation(const MeltModel<Scalar>& model,
                                      std::span<const SlotInput<Scalar>> inputs,
                                      std::size_t slot) {
  if (slot >= inputs.size() || inputs[slot].kind == SlotKind::Pad) {
    throw DimensionError("message_representation: slot " + std::to_string(slot) +
                         " is not a message");
  }
  const auto mask = attention_mask(inputs);
  Tensor<Scalar> out = encoder_forward(model, embed_sequence(model, inputs), mask);
  const Index row = static_cast<Index>(slot);
  return gather_rows(out, std::span<const Index>(&row, 1));
}

}  // namespace melt
