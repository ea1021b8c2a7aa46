#include "melt/stance.hpp"

#include <cmath>
#include <istream>
#include <ostream>
#include <sstream>

namespace melt {

void FinetuneConfig::validate() const {
  if (!(lr >= 6e-6 && lr <= 3e-3)) {
    throw InputError("fine-tuning lr " + std::to_string(lr) + " outside [6e-6, 3e-3]");
  }
  if (!(weight_decay >= 1e-4 && weight_decay <= 1.0)) {
    throw InputError("fine-tuning weight decay " + std::to_string(weight_decay) +
                     " outside [1e-4, 1]");
  }
  if (!(dropout >= 0.0 && dropout <= 0.05)) {
    throw InputError("fine-tuning dropout " + std::to_string(dropout) + " outside [0, 0.05]");
  }
  if (batch_size < 1) throw InputError("fine-tuning batch size must be positive");
  if (max_epochs < 1) throw InputError("fine-tuning needs at least one epoch");
  if (patience < 1) throw InputError("early-stopping patience must be at least 1");
  if (history_len < 1) throw InputError("history length must be at least 1");
}

void to_json(nlohmann::json& j, const FinetuneConfig& c) {
  j = {{"lr", c.lr},
       {"weight_decay", c.weight_decay},
       {"dropout", c.dropout},
       {"batch_size", c.batch_size},
       {"max_epochs", c.max_epochs},
       {"patience", c.patience},
       {"unfreeze_word", c.unfreeze_word},
       {"history_len", c.history_len},
       {"seed", c.seed}};
}

Stance mfc_label(std::span<const Stance> labels) {
  if (labels.empty()) throw InputError("mfc_label: no training labels");
  std::array<std::size_t, 3> counts{};
  for (Stance s : labels) ++counts[static_cast<std::size_t>(s)];
  std::size_t best = 0;
  for (std::size_t c = 1; c < counts.size(); ++c) {
    if (counts[c] > counts[best]) best = c;
  }
  return static_cast<Stance>(best);
}

std::vector<Prediction> predict_constant(std::span<const StanceExample> examples, Stance label) {
  std::vector<Prediction> out;
  out.reserve(examples.size());
  std::array<double, 3> p{};
  p[static_cast<std::size_t>(label)] = 1.0;
  for (const auto& ex : examples) {
    out.push_back({ex.target.message_id, ex.stance_target, ex.label, label, p});
  }
  return out;
}

std::vector<FinetuneConfig> sample_finetune_configs(const FinetuneConfig& base, int trials) {
  if (trials < 1) throw InputError("search needs at least one trial");
  base.validate();
  std::vector<FinetuneConfig> out{base};
  Rng rng(base.seed ^ 0x5eedULL);
  auto log_uniform = [&](double lo, double hi) {
    return std::exp(std::log(lo) + rng.uniform() * (std::log(hi) - std::log(lo)));
  };
  for (int t = 1; t < trials; ++t) {
    FinetuneConfig c = base;
    c.lr = std::clamp(log_uniform(6e-6, 3e-3), 6e-6, 3e-3);
    c.weight_decay = std::clamp(log_uniform(1e-4, 1.0), 1e-4, 1.0);
    c.dropout = 0.05 * rng.uniform();
    c.seed = base.seed + static_cast<std::uint64_t>(t);
    out.push_back(c);
  }
  return out;
}

std::map<std::string, std::vector<StanceExample>> group_by_target(
    std::span<const StanceExample> examples) {
  std::map<std::string, std::vector<StanceExample>> out;
  for (const auto& ex : examples) {
    if (!is_stance_target(ex.stance_target)) {
      throw InputError("unknown stance target '" + ex.stance_target + "'");
    }
    out[ex.stance_target].push_back(ex);
  }
  return out;
}

void write_predictions_csv(std::ostream& out, std::span<const Prediction> predictions) {
  out << "example_id,target,gold,pred,p_against,p_none,p_favor\n";
  const auto old = out.precision(9);
  for (const auto& p : predictions) {
    if (p.example_id.find_first_of(",\"\n") != std::string::npos) {
      throw InputError("example id '" + p.example_id + "' cannot be written to CSV");
    }
    out << p.example_id << ',' << p.target << ',' << stance_name(p.gold) << ','
        << stance_name(p.predicted) << ',' << p.probabilities[0] << ',' << p.probabilities[1]
        << ',' << p.probabilities[2] << '\n';
  }
  out.precision(old);
}

std::vector<Prediction> read_predictions_csv(std::istream& in, const std::string& source) {
  std::string line;
  std::size_t lineno = 1;
  if (!std::getline(in, line) || line != "example_id,target,gold,pred,p_against,p_none,p_favor") {
    throw InputError(source + ":1: expected predictions CSV header");
  }
  std::vector<Prediction> out;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    std::vector<std::string> fields;
    std::stringstream ss(line);
    std::string f;
    while (std::getline(ss, f, ',')) fields.push_back(f);
    const std::string where = source + ":" + std::to_string(lineno) + ": ";
    if (fields.size() != 7) throw InputError(where + "expected 7 fields");
    Prediction p;
    p.example_id = fields[0];
    p.target = fields[1];
    auto gold = parse_stance(fields[2]);
    auto pred = parse_stance(fields[3]);
    if (!gold || !pred) throw InputError(where + "bad stance label");
    p.gold = *gold;
    p.predicted = *pred;
    try {
      for (int c = 0; c < 3; ++c) p.probabilities[c] = std::stod(fields[4 + c]);
    } catch (const std::exception&) {
      throw InputError(where + "bad probability");
    }
    out.push_back(std::move(p));
  }
  return out;
}

}  // namespace melt
