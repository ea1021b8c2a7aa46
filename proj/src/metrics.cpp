#include "melt/metrics.hpp"

#include <iomanip>
#include <map>
#include <numeric>
#include <ostream>

#include "melt/errors.hpp"

namespace melt {

namespace {

// Non-negative rational with 128-bit parts; reduced after every operation.
struct Ratio {
  __int128 num = 0;
  __int128 den = 1;

  static Ratio of(std::int64_t n, std::int64_t d) {
    if (d == 0) return {0, 1};
    return Ratio{n, d}.reduced();
  }

  Ratio reduced() const {
    __int128 a = num < 0 ? -num : num;
    __int128 b = den;
    while (b != 0) {
      const __int128 t = a % b;
      a = b;
      b = t;
    }
    if (a <= 1) return *this;
    return {num / a, den / a};
  }

  Ratio operator+(const Ratio& o) const { return Ratio{num * o.den + o.num * den, den * o.den}.reduced(); }
  Ratio operator*(const Ratio& o) const { return Ratio{num * o.num, den * o.den}.reduced(); }

  double to_double() const { return static_cast<double>(num) / static_cast<double>(den); }
};

struct ExactScores {
  Ratio precision, recall, f1;
};

ExactScores exact_class_scores(const ConfusionMatrix& cm, Stance c) {
  const std::int64_t tp = cm.at(c, c);
  const std::int64_t fp = cm.predicted_count(c) - tp;
  const std::int64_t fn = cm.gold_count(c) - tp;
  return {Ratio::of(tp, tp + fp), Ratio::of(tp, tp + fn), Ratio::of(2 * tp, 2 * tp + fp + fn)};
}

}  // namespace

std::int64_t ConfusionMatrix::total() const {
  std::int64_t t = 0;
  for (const auto& row : counts_) t = std::accumulate(row.begin(), row.end(), t);
  return t;
}

std::int64_t ConfusionMatrix::gold_count(Stance c) const {
  const auto& row = counts_[static_cast<std::size_t>(c)];
  return std::accumulate(row.begin(), row.end(), std::int64_t{0});
}

std::int64_t ConfusionMatrix::predicted_count(Stance c) const {
  std::int64_t t = 0;
  for (const auto& row : counts_) t += row[static_cast<std::size_t>(c)];
  return t;
}

ConfusionMatrix confusion(std::span<const Stance> gold, std::span<const Stance> predicted) {
  if (gold.size() != predicted.size()) {
    throw InputError("confusion: " + std::to_string(gold.size()) + " gold labels but " +
                     std::to_string(predicted.size()) + " predictions");
  }
  if (gold.empty()) throw InputError("confusion: no examples");
  ConfusionMatrix cm;
  for (std::size_t i = 0; i < gold.size(); ++i) cm.add(gold[i], predicted[i]);
  return cm;
}

ClassScores class_scores(const ConfusionMatrix& cm, Stance c) {
  const auto e = exact_class_scores(cm, c);
  return {e.precision.to_double(), e.recall.to_double(), e.f1.to_double(), cm.gold_count(c)};
}

WeightedScores weighted_scores(const ConfusionMatrix& cm) {
  const std::int64_t n = cm.total();
  if (n == 0) throw InputError("weighted_scores: empty confusion matrix");
  Ratio p, r, f;
  for (Stance c : kAllStances) {
    const auto e = exact_class_scores(cm, c);
    const Ratio weight = Ratio::of(cm.gold_count(c), n);
    p = p + weight * e.precision;
    r = r + weight * e.recall;
    f = f + weight * e.f1;
  }
  return {p.to_double(), r.to_double(), f.to_double()};
}

double semeval_f1(const ConfusionMatrix& cm) {
  if (cm.total() == 0) throw InputError("semeval_f1: empty confusion matrix");
  const Ratio sum = exact_class_scores(cm, Stance::Favor).f1 +
                    exact_class_scores(cm, Stance::Against).f1;
  return (sum * Ratio::of(1, 2)).to_double();
}

MetricsReport metrics_report(const ConfusionMatrix& cm) {
  MetricsReport report;
  for (Stance c : kAllStances) report.per_class[static_cast<std::size_t>(c)] = class_scores(cm, c);
  report.weighted = weighted_scores(cm);
  report.semeval_f1 = semeval_f1(cm);
  report.examples = cm.total();
  return report;
}

TargetTable per_target_report(std::span<const LabeledPrediction> predictions) {
  if (predictions.empty()) throw InputError("per_target_report: no predictions");
  std::map<std::string, ConfusionMatrix> by_target;
  ConfusionMatrix pooled;
  for (const auto& p : predictions) {
    if (!is_stance_target(p.target)) {
      throw InputError("unknown stance target '" + p.target + "' for example " + p.example_id);
    }
    by_target[p.target].add(p.gold, p.predicted);
    pooled.add(p.gold, p.predicted);
  }
  TargetTable table;
  for (auto target : kStanceTargets) {
    auto it = by_target.find(std::string(target));
    if (it == by_target.end()) continue;
    table.rows.push_back({it->first, metrics_report(it->second)});
  }
  for (const auto& row : table.rows) {
    table.average_f1 += row.report.weighted.f1;
    table.average_semeval_f1 += row.report.semeval_f1;
  }
  table.average_f1 /= static_cast<double>(table.rows.size());
  table.average_semeval_f1 /= static_cast<double>(table.rows.size());
  table.pooled = metrics_report(pooled);
  return table;
}

void print_target_table(std::ostream& out, const TargetTable& table, bool pooled_average) {
  const auto flags = out.flags();
  const auto precision = out.precision();
  out << std::left << std::setw(12) << "target" << std::right << std::setw(8) << "n"
      << std::setw(8) << "F1" << std::setw(8) << "Prec" << std::setw(8) << "Recall"
      << std::setw(12) << "SemEval F1" << '\n';
  out << std::fixed << std::setprecision(2);
  auto line = [&](const std::string& name, const MetricsReport& r, double f1, double semeval) {
    out << std::left << std::setw(12) << name << std::right << std::setw(8) << r.examples
        << std::setw(8) << 100.0 * f1 << std::setw(8) << 100.0 * r.weighted.precision
        << std::setw(8) << 100.0 * r.weighted.recall << std::setw(12) << 100.0 * semeval << '\n';
  };
  for (const auto& row : table.rows) {
    line(row.target, row.report, row.report.weighted.f1, row.report.semeval_f1);
  }
  if (pooled_average) {
    line("All(pooled)", table.pooled, table.pooled.weighted.f1, table.pooled.semeval_f1);
  } else {
    line("All(Avg)", table.pooled, table.average_f1, table.average_semeval_f1);
  }
  out.flags(flags);
  out.precision(precision);
}

void write_target_csv(std::ostream& out, const TargetTable& table) {
  out << "target,n,weighted_f1,weighted_precision,weighted_recall,semeval_f1\n";
  out << std::setprecision(17);
  for (const auto& row : table.rows) {
    const auto& r = row.report;
    out << row.target << ',' << r.examples << ',' << r.weighted.f1 << ',' << r.weighted.precision
        << ',' << r.weighted.recall << ',' << r.semeval_f1 << '\n';
  }
  out << "all_avg," << table.pooled.examples << ',' << table.average_f1 << ",,,"
      << table.average_semeval_f1 << '\n';
  const auto& p = table.pooled;
  out << "all_pooled," << p.examples << ',' << p.weighted.f1 << ',' << p.weighted.precision << ','
      << p.weighted.recall << ',' << p.semeval_f1 << '\n';
}

}  // namespace melt
