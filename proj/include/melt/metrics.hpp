#pragma once

// Stance evaluation from a 3x3 confusion matrix (rows gold, columns
// predicted, order against/none/favor). Scores are formed as exact integer
// ratios and converted to double once, so equal counts always give equal
// doubles regardless of example order.

#include <array>
#include <cstdint>
#include <iosfwd>
#include <span>
#include <string>
#include <vector>

#include "melt/message.hpp"

namespace melt {

class ConfusionMatrix {
 public:
  void add(Stance gold, Stance predicted) {
    ++counts_[static_cast<std::size_t>(gold)][static_cast<std::size_t>(predicted)];
  }

  std::int64_t at(Stance gold, Stance predicted) const {
    return counts_[static_cast<std::size_t>(gold)][static_cast<std::size_t>(predicted)];
  }

  std::int64_t total() const;
  std::int64_t gold_count(Stance c) const;
  std::int64_t predicted_count(Stance c) const;

  bool operator==(const ConfusionMatrix&) const = default;

 private:
  std::array<std::array<std::int64_t, 3>, 3> counts_{};
};

ConfusionMatrix confusion(std::span<const Stance> gold, std::span<const Stance> predicted);

struct ClassScores {
  double precision = 0.0;
  double recall = 0.0;
  double f1 = 0.0;
  std::int64_t support = 0;
};

struct WeightedScores {
  double precision = 0.0;
  double recall = 0.0;
  double f1 = 0.0;
};

struct MetricsReport {
  std::array<ClassScores, 3> per_class;
  WeightedScores weighted;
  double semeval_f1 = 0.0;
  std::int64_t examples = 0;
};

/// Per-class scores; a zero denominator scores 0.
ClassScores class_scores(const ConfusionMatrix& cm, Stance c);

/// Per-class P/R/F1 averaged with gold-frequency weights.
WeightedScores weighted_scores(const ConfusionMatrix& cm);

/// Mean of the one-vs-rest F1 of FAVOR and AGAINST.
double semeval_f1(const ConfusionMatrix& cm);

MetricsReport metrics_report(const ConfusionMatrix& cm);

struct LabeledPrediction {
  std::string example_id;
  std::string target;
  Stance gold = Stance::None;
  Stance predicted = Stance::None;
};

struct TargetRow {
  std::string target;
  MetricsReport report;
};

struct TargetTable {
  /// One row per target present, in canonical target order.
  std::vector<TargetRow> rows;
  /// Unweighted mean of the per-target weighted F1.
  double average_f1 = 0.0;
  double average_semeval_f1 = 0.0;
  /// All examples pooled into one confusion matrix.
  MetricsReport pooled;
};

TargetTable per_target_report(std::span<const LabeledPrediction> predictions);

/// Aligned plain-text table; `pooled_average` prints the pooled F1 as the
/// aggregate instead of the per-target mean.
void print_target_table(std::ostream& out, const TargetTable& table, bool pooled_average = false);
void write_target_csv(std::ostream& out, const TargetTable& table);

}  // namespace melt
