#pragma once

// Independent reference implementations the library is checked against.
// They are written for obviousness, not speed, and share no code with src/.

#include <boost/rational.hpp>

#include <cstdint>
#include <optional>
#include <vector>

#include "melt/message.hpp"

namespace melt::testing {

/// Chunk layout as positions into a sorted history of n messages.
using ChunkLayout = std::vector<std::vector<std::optional<std::size_t>>>;

/// Windows of L consecutive messages; a short final window is replaced by the
/// last L messages (i.e. left-extended with the previous window's tail). With
/// fewer than L messages, one window padded on the right.
inline ChunkLayout reference_chunks(std::size_t n, std::size_t L) {
  ChunkLayout out;
  if (n == 0) return out;
  if (n < L) {
    std::vector<std::optional<std::size_t>> w;
    for (std::size_t i = 0; i < n; ++i) w.push_back(i);
    while (w.size() < L) w.push_back(std::nullopt);
    out.push_back(w);
    return out;
  }
  for (std::size_t start = 0; start < n; start += L) {
    const std::size_t first = start + L <= n ? start : n - L;
    std::vector<std::optional<std::size_t>> w;
    for (std::size_t i = first; i < first + L; ++i) w.push_back(i);
    out.push_back(w);
  }
  return out;
}

using Q = boost::rational<std::int64_t>;

struct OracleScores {
  Q weighted_precision{0}, weighted_recall{0}, weighted_f1{0}, semeval_f1{0};
};

/// Counts by looping over the pairs once per class.
inline OracleScores oracle_scores(const std::vector<Stance>& gold, const std::vector<Stance>& pred) {
  OracleScores s;
  const auto n = static_cast<std::int64_t>(gold.size());
  Q f1_of[3];
  for (int c = 0; c < 3; ++c) {
    std::int64_t tp = 0, fp = 0, fn = 0, support = 0;
    for (std::size_t i = 0; i < gold.size(); ++i) {
      const bool g = static_cast<int>(gold[i]) == c;
      const bool p = static_cast<int>(pred[i]) == c;
      support += g;
      tp += g && p;
      fp += !g && p;
      fn += g && !p;
    }
    const Q precision = tp + fp == 0 ? Q(0) : Q(tp, tp + fp);
    const Q recall = tp + fn == 0 ? Q(0) : Q(tp, tp + fn);
    const Q f1 = precision + recall == Q(0) ? Q(0) : Q(2) * precision * recall / (precision + recall);
    f1_of[c] = f1;
    const Q weight(support, n);
    s.weighted_precision += weight * precision;
    s.weighted_recall += weight * recall;
    s.weighted_f1 += weight * f1;
  }
  s.semeval_f1 = (f1_of[static_cast<int>(Stance::Favor)] + f1_of[static_cast<int>(Stance::Against)]) / Q(2);
  return s;
}

inline double to_double(const Q& q) {
  return static_cast<double>(q.numerator()) / static_cast<double>(q.denominator());
}

}  // namespace melt::testing
