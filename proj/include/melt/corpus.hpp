#pragma once

// Message corpora, per-user chunking into fixed-length sequences, the
// masked-document masking plan, batching and fine-tuning sequence assembly.

#include <cstdint>
#include <filesystem>
#include <istream>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "melt/errors.hpp"
#include "melt/message.hpp"
#include "melt/random.hpp"
#include "melt/tensor.hpp"

namespace melt {

inline constexpr std::size_t kMaxHistory = 40;

struct UserHistory {
  std::string user_id;
  /// Indices into Corpus::messages ordered by (timestamp, message_id).
  std::vector<std::size_t> messages;
};

struct Corpus {
  std::vector<RawMessage> messages;
  /// Sorted by user_id.
  std::vector<UserHistory> users;

  const UserHistory* find_user(const std::string& user_id) const;
};

/// Groups messages by user and sorts each history. Rejects duplicate ids.
Corpus make_corpus(std::vector<RawMessage> messages);

/// JSONL with keys user_id, message_id, timestamp, text.
Corpus parse_corpus_jsonl(std::istream& in, const std::string& source = "<stream>");
Corpus ingest_jsonl(const std::filesystem::path& path);
void write_corpus_jsonl(const std::filesystem::path& path, std::span<const RawMessage> messages);

/// A slot holds a message index or nothing (PAD).
using Slot = std::optional<std::size_t>;

struct SequenceChunk {
  std::string user_id;
  std::vector<Slot> slots;
  /// Chunk index within the user.
  std::size_t origin = 0;

  std::size_t real_count() const;
  bool operator==(const SequenceChunk&) const = default;
};

/// Splits one user's sorted history into windows of exactly `length` slots.
/// n >= length: ceil(n/length) windows; a short last window is completed
/// with the trailing messages of the window before it. n < length: one
/// window of n messages followed by PAD.
std::vector<SequenceChunk> build_chunks(const std::string& user_id,
                                        std::span<const std::size_t> history,
                                        std::size_t length = kMaxHistory);

std::vector<SequenceChunk> build_all_chunks(const Corpus& corpus,
                                            std::size_t length = kMaxHistory);

/// Order-preserving split into groups of `batch_size`; the last may be short.
template <typename T>
std::vector<std::vector<T>> batch_chunks(std::span<const T> items, std::size_t batch_size = 100) {
  if (batch_size == 0) throw InputError("batch size must be positive");
  std::vector<std::vector<T>> batches;
  for (std::size_t i = 0; i < items.size(); i += batch_size) {
    const std::size_t end = std::min(items.size(), i + batch_size);
    batches.emplace_back(items.begin() + static_cast<std::ptrdiff_t>(i),
                         items.begin() + static_cast<std::ptrdiff_t>(end));
  }
  return batches;
}

/// Chunks index the original corpus; held-out messages appear only in dev.
struct DevSplit {
  std::vector<SequenceChunk> train_chunks;
  std::vector<SequenceChunk> dev_chunks;
  std::vector<std::string> dev_users;
};

/// Picks floor(fraction * eligible users) users (seeded) and sets aside their
/// last `holdout` messages as dev sequences. Users with no more than
/// `holdout` messages are never picked.
struct DevSplitOptions {
  double user_fraction = 0.5;
  std::size_t holdout = 20;
  std::size_t length = kMaxHistory;
  std::uint64_t seed = 1337;
};
DevSplit split_dev(const Corpus& corpus, const DevSplitOptions& options);

// ---------------------------------------------------------------------------
// Masking

enum class MaskAction : std::uint8_t { Keep, MaskToken, UnchangedPredict, RandomReplace };

struct MaskingRates {
  double select = 0.15;
  double mask_token = 0.8;
  double unchanged = 0.1;
  // The remainder (0.1) is random replacement.
};

struct SlotPlan {
  MaskAction action = MaskAction::Keep;
  /// Message whose vector is substituted for RandomReplace.
  std::optional<std::size_t> replacement;
};

template <typename Scalar>
struct MaskPlan {
  std::vector<SlotPlan> slots;
  /// Slot indices with action != Keep, ascending.
  std::vector<std::size_t> selected;
  /// One row per selected slot: the original message vector.
  Matrix<Scalar> targets;
  std::uint64_t seed = 0;
};

/// Plan with every slot Keep.
template <typename Scalar>
MaskPlan<Scalar> keep_all_plan(const SequenceChunk& chunk, Index dim) {
  MaskPlan<Scalar> plan;
  plan.slots.resize(chunk.slots.size());
  plan.targets.resize(0, dim);
  return plan;
}

/// Selects each real slot with probability rates.select; a selected slot is
/// MaskToken / UnchangedPredict / RandomReplace with the configured split.
/// Replacements come uniformly from `batch_pool` entries that refer to a
/// different message; with no such entry the slot keeps its own vector.
/// `vectors` holds one message vector per corpus message.
template <typename Scalar>
MaskPlan<Scalar> apply_masking(const SequenceChunk& chunk, std::span<const std::size_t> batch_pool,
                               const Matrix<Scalar>& vectors, Rng& rng,
                               const MaskingRates& rates = {}, std::uint64_t seed_tag = 0) {
  if (chunk.real_count() == 0) {
    throw InputError("apply_masking: chunk of user '" + chunk.user_id + "' has no messages");
  }
  MaskPlan<Scalar> plan;
  plan.seed = seed_tag;
  plan.slots.resize(chunk.slots.size());
  for (std::size_t s = 0; s < chunk.slots.size(); ++s) {
    if (!chunk.slots[s]) continue;
    if (rng.uniform() >= rates.select) continue;
    SlotPlan& sp = plan.slots[s];
    const double u = rng.uniform();
    if (u < rates.mask_token) {
      sp.action = MaskAction::MaskToken;
    } else if (u < rates.mask_token + rates.unchanged) {
      sp.action = MaskAction::UnchangedPredict;
    } else {
      sp.action = MaskAction::RandomReplace;
      const std::size_t self = *chunk.slots[s];
      std::vector<std::size_t> candidates;
      candidates.reserve(batch_pool.size());
      for (std::size_t m : batch_pool) {
        if (m != self) candidates.push_back(m);
      }
      sp.replacement = candidates.empty() ? self : candidates[rng.index(candidates.size())];
    }
    plan.selected.push_back(s);
  }
  plan.targets.resize(static_cast<Index>(plan.selected.size()), vectors.cols());
  for (std::size_t i = 0; i < plan.selected.size(); ++i) {
    const std::size_t message = *chunk.slots[plan.selected[i]];
    plan.targets.row(static_cast<Index>(i)) = vectors.row(static_cast<Index>(message));
  }
  return plan;
}

/// Real message indices of a batch, in slot order (duplicates kept).
std::vector<std::size_t> batch_pool(std::span<const SequenceChunk> batch);

/// Masks every chunk of every batch with one RNG stream.
template <typename Scalar>
std::vector<MaskPlan<Scalar>> mask_batches(const std::vector<std::vector<SequenceChunk>>& batches,
                                           const Matrix<Scalar>& vectors, std::uint64_t seed,
                                           const MaskingRates& rates = {}) {
  Rng rng(seed);
  std::vector<MaskPlan<Scalar>> plans;
  for (const auto& batch : batches) {
    const auto pool = batch_pool(batch);
    for (const auto& chunk : batch) {
      plans.push_back(apply_masking<Scalar>(chunk, pool, vectors, rng, rates, seed));
    }
  }
  return plans;
}

// ---------------------------------------------------------------------------
// Stance data

struct StanceRow {
  RawMessage message;
  std::string stance_target;
  Stance label = Stance::None;
};

struct StanceExample {
  RawMessage target;
  Stance label = Stance::None;
  std::string stance_target;
  /// Earlier messages by the same author, oldest first.
  std::vector<RawMessage> history;

  /// history followed by the target.
  const RawMessage& message(std::size_t i) const {
    return i < history.size() ? history[i] : target;
  }
};

/// Stance JSONL: corpus keys plus stance_target and label.
std::vector<StanceRow> parse_stance_jsonl(std::istream& in, const std::string& source = "<stream>");
std::vector<StanceRow> load_stance_jsonl(const std::filesystem::path& path);
void write_stance_jsonl(const std::filesystem::path& path, std::span<const StanceRow> rows);

/// Attaches up to `max_history` most recent messages by the same author that
/// are strictly older than the target. `history` may be null.
std::vector<StanceExample> attach_history(std::span<const StanceRow> rows, const Corpus* history,
                                          std::size_t max_history = kMaxHistory);

struct FinetuneSequence {
  /// Slot values index StanceExample::message().
  SequenceChunk chunk;
  std::size_t target_slot = 0;
};

/// Up to length-1 most recent history messages, then the target, then PAD.
FinetuneSequence build_finetune_sequence(const StanceExample& example,
                                         std::size_t length = kMaxHistory);

}  // namespace melt
