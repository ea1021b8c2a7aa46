#pragma once

// Generated corpora for the constructed experiments. All text is built from
// small named token pools, so message vectors from the hash encoder inherit
// the pool structure.

#include <array>
#include <cstdint>
#include <string>
#include <vector>

#include "melt/corpus.hpp"
#include "melt/message.hpp"

namespace melt {

/// Users write about a couple of personal themes, switching between them
/// as a sticky Markov chain, so a message resembles its neighbours and its
/// author's centroid more than the corpus at large.
struct TopicCorpusOptions {
  std::size_t users = 50;
  std::size_t messages_per_user = 80;
  std::size_t themes = 12;
  std::size_t themes_per_user = 2;
  std::size_t pool_size = 24;
  std::size_t theme_tokens = 6;
  std::size_t filler_tokens = 2;
  /// Probability that the next message keeps the current theme.
  double stay = 0.9;
  std::uint64_t seed = 1337;
};

std::vector<RawMessage> synthetic_topic_corpus(const TopicCorpusOptions& options);

struct SyntheticStanceData {
  /// Every message (histories and targets) for history lookup/pre-training.
  std::vector<RawMessage> messages;
  std::vector<StanceRow> rows;
};

/// Each user leans pro or anti; history messages draw most of their tokens
/// from the leaning's pool. The target message is either neutral (NONE) or
/// opinionated, and then its label is FAVOR for pro users and AGAINST for
/// anti users. The target text alone does not reveal the leaning.
struct StanceCorpusOptions {
  std::size_t users = 300;
  std::size_t history = 40;
  std::size_t tokens_per_message = 8;
  std::size_t pool_size = 15;
  /// Share of a history message's tokens taken from the leaning pool.
  double leaning_share = 0.5;
  /// Fraction of target messages that are neutral.
  double neutral_fraction = 1.0 / 3.0;
  std::string stance_target = "abortion";
  std::string user_prefix = "u";
  std::uint64_t seed = 1337;
};

SyntheticStanceData synthetic_stance_corpus(const StanceCorpusOptions& options);

/// Labels drawn with fixed class frequencies, independent of all text.
struct ImbalancedCorpusOptions {
  std::size_t users = 200;
  std::size_t history = 10;
  std::size_t tokens_per_message = 8;
  /// against, none, favor
  std::array<double, 3> class_frequencies{0.7, 0.2, 0.1};
  std::string stance_target = "abortion";
  std::string user_prefix = "u";
  std::uint64_t seed = 1337;
};

SyntheticStanceData synthetic_imbalanced_corpus(const ImbalancedCorpusOptions& options);

}  // namespace melt
