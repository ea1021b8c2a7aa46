#pragma once

// Word level: tokenization, a frozen word encoder producing one vector per
// token, mean pooling into message vectors, and message encoders that turn a
// RawMessage into its d-dim message vector.

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <memory>
#include <optional>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include <nlohmann/json.hpp>

#include "melt/errors.hpp"
#include "melt/message.hpp"
#include "melt/ops.hpp"
#include "melt/random.hpp"
#include "melt/tensor.hpp"

namespace melt {

inline constexpr std::size_t kDefaultTokenLimit = 50;
inline constexpr std::string_view kEmptyToken = "<empty>";

struct TokenSequence {
  std::vector<std::string> tokens;
  bool truncated = false;
};

/// Lowercases, splits on whitespace and splits every ASCII punctuation
/// character into its own token. Keeps at most `limit` tokens. Blank text
/// becomes the single token "<empty>".
TokenSequence tokenize(std::string_view text, std::size_t limit = kDefaultTokenLimit);

/// 64-bit FNV-1a.
std::uint64_t fnv1a64(std::string_view bytes);

template <typename Scalar>
class WordEncoder {
 public:
  virtual ~WordEncoder() = default;
  virtual Index dim() const = 0;
  /// One row per token.
  virtual Tensor<Scalar> encode_tokens(const TokenSequence& tokens) const = 0;
  virtual std::vector<Tensor<Scalar>> parameters() const = 0;
  virtual bool frozen() const = 0;
  virtual void set_frozen(bool frozen) = 0;
};

/// Feature-hashing embeddings: token -> table[fnv1a64(token) mod buckets].
/// The table is N(0, 1) times `scale` (default 1/sqrt(d)), from a seeded RNG.
template <typename Scalar>
class HashEmbeddingEncoder final : public WordEncoder<Scalar> {
 public:
  HashEmbeddingEncoder(Index dim, std::size_t buckets = 65536, std::uint64_t seed = 1337,
                       std::optional<double> scale = std::nullopt)
      : dim_(dim), buckets_(buckets), seed_(seed),
        scale_(scale.value_or(dim > 0 ? 1.0 / std::sqrt(static_cast<double>(dim)) : 1.0)) {
    if (dim < 1 || buckets < 1) throw DimensionError("HashEmbeddingEncoder: empty table");
    if (!(scale_ > 0.0)) throw DimensionError("HashEmbeddingEncoder: scale must be positive");
    Rng rng(seed);
    Matrix<Scalar> table(static_cast<Index>(buckets), dim);
    for (Index i = 0; i < table.size(); ++i) {
      table.data()[i] = static_cast<Scalar>(rng.normal() * scale_);
    }
    table_ = Tensor<Scalar>::constant(std::move(table));
    table_.set_name("word.table");
  }

  HashEmbeddingEncoder(const HashEmbeddingEncoder& other)
      : dim_(other.dim_), buckets_(other.buckets_), seed_(other.seed_), scale_(other.scale_),
        table_(other.table_.detach_copy()) {}
  HashEmbeddingEncoder& operator=(const HashEmbeddingEncoder&) = delete;

  Index dim() const override { return dim_; }
  std::size_t buckets() const { return buckets_; }
  std::uint64_t seed() const { return seed_; }
  double scale() const { return scale_; }

  Index bucket(std::string_view token) const {
    return static_cast<Index>(fnv1a64(token) % buckets_);
  }

  Tensor<Scalar> encode_tokens(const TokenSequence& toks) const override {
    std::vector<Index> rows;
    rows.reserve(toks.tokens.size());
    for (const auto& t : toks.tokens) rows.push_back(bucket(t));
    return gather_rows(table_, std::span<const Index>(rows));
  }

  std::vector<Tensor<Scalar>> parameters() const override { return {table_}; }
  bool frozen() const override { return !table_.requires_grad(); }
  void set_frozen(bool frozen) override { table_.set_requires_grad(!frozen); }

  const Tensor<Scalar>& table() const { return table_; }
  Tensor<Scalar>& table() { return table_; }

 private:
  Index dim_;
  std::size_t buckets_;
  std::uint64_t seed_;
  double scale_;
  Tensor<Scalar> table_;
};

/// Elementwise mean of the token vectors (rows) of one message.
template <typename Scalar>
Tensor<Scalar> pool_message(const Tensor<Scalar>& token_vectors) {
  if (token_vectors.rows() == 0) throw DimensionError("pool_message: no token vectors");
  return mean_rows(token_vectors);
}

/// Message vectors produced outside this program, keyed by message id.
class PrecomputedVectorStore {
 public:
  explicit PrecomputedVectorStore(Index dim) : dim_(dim) {}

  Index dim() const { return dim_; }
  std::size_t size() const { return vectors_.size(); }
  bool contains(const std::string& id) const { return vectors_.count(id) != 0; }

  void insert(const std::string& id, RowVector<float> v);
  const RowVector<float>& at(const std::string& id) const;

  /// Ids in file order.
  const std::vector<std::string>& ids() const { return order_; }

 private:
  Index dim_;
  std::unordered_map<std::string, RowVector<float>> vectors_;
  std::vector<std::string> order_;
};

/// Reads `#dim=<d>` then `id<TAB>hex` rows, where hex is the little-endian
/// bytes of d float32 values. A nonzero expected_dim must match the header.
PrecomputedVectorStore load_precomputed(const std::filesystem::path& path,
                                        Index expected_dim = 0);
void write_precomputed(const std::filesystem::path& path, const PrecomputedVectorStore& store);

std::string encode_floats_hex(const RowVector<float>& v);
RowVector<float> decode_floats_hex(std::string_view hex);

/// Maps a message to its d-dim message vector (a 1 x d tensor). Both the
/// reconstruction label and the model input come from encode().
template <typename Scalar>
class MessageEncoder {
 public:
  virtual ~MessageEncoder() = default;
  virtual Index dim() const = 0;
  virtual Tensor<Scalar> encode(const RawMessage& message) const = 0;
  /// Word-level parameters (updated only when trainable).
  virtual std::vector<Tensor<Scalar>> parameters() const = 0;
  virtual bool trainable() const = 0;
  virtual void set_trainable(bool on) = 0;
  virtual std::unique_ptr<MessageEncoder> clone() const = 0;
  virtual nlohmann::json describe() const = 0;
};

/// tokenize -> hash embeddings -> mean pool.
template <typename Scalar>
class PooledHashEncoder final : public MessageEncoder<Scalar> {
 public:
  PooledHashEncoder(Index dim, std::size_t buckets, std::uint64_t seed,
                    std::size_t token_limit = kDefaultTokenLimit,
                    std::optional<double> scale = std::nullopt)
      : words_(dim, buckets, seed, scale), token_limit_(token_limit) {}

  Index dim() const override { return words_.dim(); }

  Tensor<Scalar> encode(const RawMessage& message) const override {
    return pool_message(words_.encode_tokens(tokenize(message.text, token_limit_)));
  }

  std::vector<Tensor<Scalar>> parameters() const override { return words_.parameters(); }
  bool trainable() const override { return !words_.frozen(); }
  void set_trainable(bool on) override { words_.set_frozen(!on); }

  std::unique_ptr<MessageEncoder<Scalar>> clone() const override {
    return std::make_unique<PooledHashEncoder>(*this);
  }

  nlohmann::json describe() const override {
    return {{"kind", "hash"},
            {"dim", words_.dim()},
            {"buckets", words_.buckets()},
            {"seed", words_.seed()},
            {"scale", words_.scale()},
            {"token_limit", token_limit_}};
  }

  const HashEmbeddingEncoder<Scalar>& words() const { return words_; }
  HashEmbeddingEncoder<Scalar>& words() { return words_; }

 private:
  HashEmbeddingEncoder<Scalar> words_;
  std::size_t token_limit_;
};

/// Looks vectors up by message id. When trainable, a d x d adapter
/// (identity at start) is applied so the word level can still adapt.
template <typename Scalar>
class PrecomputedEncoder final : public MessageEncoder<Scalar> {
 public:
  PrecomputedEncoder(std::shared_ptr<const PrecomputedVectorStore> store, std::string source)
      : store_(std::move(store)), source_(std::move(source)) {
    adapter_ = Tensor<Scalar>::constant(Matrix<Scalar>::Identity(store_->dim(), store_->dim()));
    adapter_.set_name("word.adapter");
  }

  PrecomputedEncoder(const PrecomputedEncoder& other)
      : store_(other.store_), source_(other.source_),
        adapter_(other.adapter_.detach_copy()) {}
  PrecomputedEncoder& operator=(const PrecomputedEncoder&) = delete;

  Index dim() const override { return store_->dim(); }

  Tensor<Scalar> encode(const RawMessage& message) const override {
    if (!store_->contains(message.message_id)) {
      throw InputError("no precomputed vector for message '" + message.message_id + "'");
    }
    auto v = Tensor<Scalar>::constant(store_->at(message.message_id).template cast<Scalar>());
    if (!adapter_.requires_grad() && adapter_.value().isIdentity(0)) return v;
    return matmul(v, adapter_);
  }

  std::vector<Tensor<Scalar>> parameters() const override { return {adapter_}; }
  bool trainable() const override { return adapter_.requires_grad(); }
  void set_trainable(bool on) override { adapter_.set_requires_grad(on); }

  std::unique_ptr<MessageEncoder<Scalar>> clone() const override {
    return std::make_unique<PrecomputedEncoder>(*this);
  }

  nlohmann::json describe() const override {
    return {{"kind", "precomputed"}, {"dim", store_->dim()}, {"path", source_}};
  }

  Tensor<Scalar>& adapter() { return adapter_; }

 private:
  std::shared_ptr<const PrecomputedVectorStore> store_;
  std::string source_;
  Tensor<Scalar> adapter_;
};

/// Rebuilds an encoder from describe() output.
std::unique_ptr<MessageEncoder<float>> make_message_encoder(const nlohmann::json& description);

/// Every message's vector as one row, in corpus order.
template <typename Scalar, typename Messages>
Matrix<Scalar> encode_all(const MessageEncoder<Scalar>& encoder, const Messages& messages) {
  Matrix<Scalar> out(static_cast<Index>(messages.size()), encoder.dim());
  Index r = 0;
  for (const RawMessage& m : messages) out.row(r++) = encoder.encode(m).value();
  return out;
}

}  // namespace melt
