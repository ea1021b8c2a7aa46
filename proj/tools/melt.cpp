// melt: synthetic data, chunk preparation, masked-document pre-training,
// stance fine-tuning and evaluation.
//
// Settings come from flags, then an optional --config file, then MELT_*
// environment variables, then defaults. Every command prints its resolved
// settings as a config file that reproduces the run.

#include <CLI11.hpp>

#include <algorithm>
#include <atomic>
#include <cctype>
#include <exception>
#include <functional>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <map>
#include <set>
#include <sstream>
#include <thread>
#include <type_traits>

#include "melt/checkpoint.hpp"
#include "melt/corpus.hpp"
#include "melt/metrics.hpp"
#include "melt/pretrain.hpp"
#include "melt/stance.hpp"
#include "melt/synthetic.hpp"
#include "melt/word_encoder.hpp"

namespace fs = std::filesystem;
using json = nlohmann::json;
using namespace melt;

namespace {

constexpr int kExitInput = 2;
constexpr int kExitNumeric = 3;

// ---------------------------------------------------------------------------
// Shared plumbing

std::ofstream open_out(const fs::path& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw InputError("cannot write " + path.string());
  return out;
}

/// Writes through a sibling temp file so readers never see half a file.
void write_atomically(const fs::path& path, const std::string& bytes) {
  const fs::path tmp = path.string() + ".tmp";
  {
    auto out = open_out(tmp);
    out << bytes;
    if (!out.flush()) throw InputError("cannot write " + tmp.string());
  }
  fs::rename(tmp, path);
}

json read_json_file(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw InputError("cannot open " + path.string());
  try {
    return json::parse(in);
  } catch (const json::exception& e) {
    throw InputError(path.string() + ": malformed JSON (" + e.what() + ")");
  }
}

/// Resolved values of one subcommand's options, printed as a config file.
class Echo {
 public:
  explicit Echo(CLI::App* cmd) : cmd_(cmd) {}

  template <typename T>
  CLI::Option* option(const std::string& flag, T& var, const std::string& help = "") {
    CLI::Option* opt = cmd_->add_option(flag, var, help)->capture_default_str();
    remember(flag, var);
    return opt;
  }

  CLI::Option* flag(const std::string& flag, bool& var, const std::string& help = "") {
    CLI::Option* opt = cmd_->add_flag(flag, var, help);
    remember(flag, var);
    return opt;
  }

  CLI::App* app() const { return cmd_; }

  std::string str() const {
    std::ostringstream out;
    for (const auto& [name, show] : items_) {
      out << cmd_->get_name() << "." << name << "=" << show() << "\n";
    }
    return out.str();
  }

 private:
  template <typename T>
  void remember(const std::string& flag, T& var) {
    const std::string name = flag.substr(flag.find_first_not_of('-'));
    items_.emplace_back(name, [&var] {
      std::ostringstream v;
      if constexpr (std::is_same_v<T, std::string>) {
        v << std::quoted(var);
      } else if constexpr (std::is_same_v<T, bool>) {
        v << (var ? "true" : "false");
      } else {
        v << std::setprecision(17) << var;
      }
      return v.str();
    });
  }

  CLI::App* cmd_;
  std::vector<std::pair<std::string, std::function<std::string()>>> items_;
};

/// MELT_<SUBCOMMAND>_<OPTION> for every long option of `cmd`.
void bind_env(CLI::App* cmd) {
  for (CLI::Option* opt : cmd->get_options()) {
    if (opt->get_lnames().empty() || opt->get_lnames().front() == "help") continue;
    std::string name = "MELT_" + cmd->get_name() + "_" + opt->get_lnames().front();
    for (char& ch : name) {
      ch = ch == '-' ? '_' : static_cast<char>(std::toupper(static_cast<unsigned char>(ch)));
    }
    opt->envname(name);
  }
}

std::vector<std::size_t> parse_lengths(const std::string& text) {
  std::vector<std::size_t> out;
  std::stringstream ss(text);
  std::string item;
  while (std::getline(ss, item, ',')) {
    try {
      std::size_t used = 0;
      const long v = std::stol(item, &used);
      if (used != item.size() || v < 1) throw std::invalid_argument(item);
      out.push_back(static_cast<std::size_t>(v));
    } catch (const std::logic_error&) {
      throw InputError("--history-len: '" + item + "' is not a positive integer");
    }
  }
  if (out.empty()) throw InputError("--history-len: no lengths given");
  return out;
}

struct ModelFlags {
  MeltConfig config;
  std::string encoder = "hash";
  std::size_t buckets = 65536;
  double hash_scale = 0.0;
  bool no_positions = false;

  /// Folds the negated flag into the config once parsing is done.
  MeltConfig resolved() const {
    MeltConfig c = config;
    c.position_embeddings = !no_positions;
    return c;
  }
};

void add_model_flags(Echo& e, ModelFlags& f) {
  e.option("--layers", f.config.n_layers, "message-level layers (2L / 6L)");
  e.option("--d-model", f.config.d_model, "message vector width");
  e.option("--ff-dim", f.config.ff_dim, "feed-forward width");
  e.option("--heads", f.config.n_heads, "attention heads");
  e.option("--model-dropout", f.config.dropout, "dropout inside the encoder layers");
  e.option("--max-seq", f.config.max_seq, "sequence length");
  e.option("--init-std", f.config.init_std, "std of linear weight init");
  e.option("--encoder", f.encoder, "word encoder: hash | precomputed:<path>");
  e.option("--hash-buckets", f.buckets, "hash embedding rows");
  e.option("--hash-scale", f.hash_scale, "hash table std (0: 1/sqrt(d-model))");
  e.flag("--no-positions", f.no_positions, "drop the position embeddings");
}

std::unique_ptr<MessageEncoder<float>> make_encoder(const ModelFlags& f, std::uint64_t seed) {
  if (f.encoder == "hash") {
    return std::make_unique<PooledHashEncoder<float>>(
        f.config.d_model, f.buckets, seed, kDefaultTokenLimit,
        f.hash_scale > 0.0 ? std::optional<double>(f.hash_scale) : std::nullopt);
  }
  const std::string prefix = "precomputed:";
  if (f.encoder.rfind(prefix, 0) == 0) {
    const std::string path = f.encoder.substr(prefix.size());
    auto store = std::make_shared<PrecomputedVectorStore>(load_precomputed(path, f.config.d_model));
    return std::make_unique<PrecomputedEncoder<float>>(std::move(store), path);
  }
  throw InputError("--encoder must be 'hash' or 'precomputed:<path>', got '" + f.encoder + "'");
}

// ---------------------------------------------------------------------------
// synth

struct SynthArgs {
  std::string kind = "stance";
  std::string out;
  std::size_t users = 0;
  std::size_t history = 0;
  double test_fraction = 0.2;
  std::uint64_t seed = 1337;
};

/// Seeded split of stance rows into train and test.
std::pair<std::vector<StanceRow>, std::vector<StanceRow>> split_rows(std::vector<StanceRow> rows,
                                                                     double test_fraction,
                                                                     std::uint64_t seed) {
  Rng rng(seed ^ 0x7e57ULL);
  rng.shuffle(rows.begin(), rows.end());
  const auto n_test = static_cast<std::size_t>(test_fraction * static_cast<double>(rows.size()));
  std::vector<StanceRow> test(rows.begin(), rows.begin() + static_cast<std::ptrdiff_t>(n_test));
  std::vector<StanceRow> train(rows.begin() + static_cast<std::ptrdiff_t>(n_test), rows.end());
  return {std::move(train), std::move(test)};
}

int cmd_synth(const SynthArgs& a) {
  fs::create_directories(a.out);
  const fs::path dir(a.out);
  if (a.kind == "topic") {
    TopicCorpusOptions o;
    o.seed = a.seed;
    if (a.users) o.users = a.users;
    if (a.history) o.messages_per_user = a.history;
    const auto messages = synthetic_topic_corpus(o);
    write_corpus_jsonl(dir / "corpus.jsonl", messages);
    std::cout << "wrote " << messages.size() << " messages to " << (dir / "corpus.jsonl").string()
              << "\n";
    return 0;
  }
  SyntheticStanceData data;
  if (a.kind == "stance") {
    StanceCorpusOptions o;
    o.seed = a.seed;
    if (a.users) o.users = a.users;
    if (a.history) o.history = a.history;
    data = synthetic_stance_corpus(o);
  } else if (a.kind == "imbalanced") {
    ImbalancedCorpusOptions o;
    o.seed = a.seed;
    if (a.users) o.users = a.users;
    if (a.history) o.history = a.history;
    data = synthetic_imbalanced_corpus(o);
  } else {
    throw InputError("--kind must be topic, stance or imbalanced");
  }
  auto [train, test] = split_rows(data.rows, a.test_fraction, a.seed);
  write_corpus_jsonl(dir / "history.jsonl", data.messages);
  write_stance_jsonl(dir / "train.jsonl", train);
  write_stance_jsonl(dir / "test.jsonl", test);
  std::cout << "wrote " << data.messages.size() << " messages, " << train.size() << " train and "
            << test.size() << " test rows to " << dir.string() << "\n";
  return 0;
}

// ---------------------------------------------------------------------------
// prep

struct PrepArgs {
  std::string corpus;
  std::string out;
  std::size_t length = kMaxHistory;
};

int cmd_prep(const PrepArgs& a) {
  const Corpus corpus = ingest_jsonl(a.corpus);
  if (corpus.messages.empty()) throw InputError(a.corpus + ": no messages");
  const auto chunks = build_all_chunks(corpus, a.length);

  std::ostringstream lines;
  std::size_t pads = 0;
  for (const auto& c : chunks) {
    json slots = json::array();
    for (const auto& s : c.slots) {
      if (s) {
        slots.push_back(corpus.messages[*s].message_id);
      } else {
        slots.push_back(nullptr);
        ++pads;
      }
    }
    lines << json{{"user_id", c.user_id}, {"origin", c.origin}, {"slots", slots}}.dump() << "\n";
  }
  const json stats{{"users", corpus.users.size()},
                   {"messages", corpus.messages.size()},
                   {"chunks", chunks.size()},
                   {"pad_slots", pads}};
  const json manifest{{"corpus", fs::absolute(a.corpus).lexically_normal().string()},
                      {"length", a.length},
                      {"chunks_file", "chunks.jsonl"},
                      {"stats", stats}};
  fs::create_directories(a.out);
  write_atomically(fs::path(a.out) / "chunks.jsonl", lines.str());
  write_atomically(fs::path(a.out) / "manifest.json", manifest.dump(2) + "\n");
  std::cout << "users " << stats["users"] << ", messages " << stats["messages"] << ", chunks "
            << stats["chunks"] << ", PAD slots " << stats["pad_slots"] << "\n";
  return 0;
}

// ---------------------------------------------------------------------------
// pretrain

struct PretrainArgs {
  std::string manifest;
  std::string out;
  ModelFlags model;
  PretrainConfig train;
  double clip = 0.0;
  double dev_fraction = 0.5;
  std::size_t dev_holdout = 20;
};

int cmd_pretrain(PretrainArgs a) {
  const json manifest = read_json_file(a.manifest);
  const Corpus corpus = ingest_jsonl(manifest.at("corpus").get<std::string>());
  if (corpus.messages.size() != manifest.at("stats").at("messages").get<std::size_t>()) {
    throw InputError(a.manifest + ": corpus changed since prep (message count differs)");
  }
  const auto length = manifest.at("length").get<std::size_t>();
  if (static_cast<Index>(length) != a.model.config.max_seq) {
    throw InputError("manifest chunk length " + std::to_string(length) + " differs from --max-seq " +
                     std::to_string(a.model.config.max_seq));
  }
  if (a.clip > 0.0) a.train.clip_norm = a.clip;
  a.train.validate();
  a.model.config = a.model.resolved();
  a.model.config.validate();

  const auto encoder = make_encoder(a.model, a.train.seed);
  if (encoder->dim() != a.model.config.d_model) {
    throw DimensionError("encoder width " + std::to_string(encoder->dim()) + " vs --d-model " +
                         std::to_string(a.model.config.d_model));
  }
  const Matrix<float> vectors = encode_all(*encoder, corpus.messages);
  DevSplitOptions split_options;
  split_options.user_fraction = a.dev_fraction;
  split_options.holdout = a.dev_holdout;
  split_options.length = length;
  split_options.seed = a.train.seed;
  const DevSplit split = split_dev(corpus, split_options);
  if (split.dev_chunks.empty()) {
    throw InputError("no user has more than " + std::to_string(a.dev_holdout) +
                     " messages, so there is no dev set");
  }

  const fs::path dir(a.out);
  fs::create_directories(dir);
  std::ostringstream steps;
  steps << "step,lr,loss\n" << std::setprecision(9);
  Rng init(a.train.seed);
  PretrainResult result =
      pretrain(MeltModel<float>(a.model.config, init), vectors, split.train_chunks,
               split.dev_chunks, a.train, [&](const StepRecord& r) {
                 steps << r.step << "," << r.lr << "," << r.loss << "\n";
               });

  std::ostringstream epochs;
  epochs << "epoch,dev_mse\n" << std::setprecision(9);
  for (const auto& e : result.epochs) epochs << e.epoch << "," << e.dev_mse << "\n";
  json pretrain_json;
  to_json(pretrain_json, a.train);
  json meta{{"encoder", encoder->describe()},
            {"pretrain", pretrain_json},
            {"best_epoch", result.best_epoch},
            {"dev_mse", result.best_dev_mse},
            {"seed", a.train.seed},
            {"dev_users", split.dev_users}};
  save_checkpoint(make_model_checkpoint(result.model, meta), dir / "model.ckpt");
  write_atomically(dir / "steps.csv", steps.str());
  write_atomically(dir / "epochs.csv", epochs.str());
  std::cout << "best epoch " << result.best_epoch << ", dev MSE " << std::setprecision(6)
            << result.best_dev_mse << ", checkpoint " << (dir / "model.ckpt").string() << "\n";
  return 0;
}

// ---------------------------------------------------------------------------
// finetune

struct FinetuneArgs {
  std::string checkpoint;
  std::string train;
  std::string dev;
  std::string test;
  std::string history;
  std::string out;
  std::string model_kind = "melt";
  std::string history_lens = "40";
  bool rand_init = false;
  bool pooled = false;
  int trials = 1;
  int jobs = 1;
  double dev_fraction = 0.2;
  ModelFlags model;
  FinetuneConfig tune;
  StanceHeadConfig head;
};

/// One fully assembled, untrained classifier per target (cloned from this).
std::unique_ptr<StanceClassifier<float>> base_classifier(const FinetuneArgs& a,
                                                         std::size_t history_len) {
  Rng rng(a.tune.seed ^ 0x4eadULL);
  if (a.model_kind == "word" || a.model_kind == "word-hist") {
    const bool with_history = a.model_kind == "word-hist";
    auto encoder = make_encoder(a.model, a.tune.seed);
    const Index d = encoder->dim();
    StanceHead<float> head(with_history ? 2 * d : d, a.head, rng);
    return std::make_unique<WordStanceClassifier<float>>(std::move(encoder), std::move(head),
                                                         with_history, history_len);
  }
  if (a.model_kind != "melt") {
    throw InputError("--model must be melt, word, word-hist or mfc");
  }
  if (a.rand_init) {
    const MeltConfig config = a.model.resolved();
    config.validate();
    Rng init(a.tune.seed);
    MeltModel<float> model(config, init);
    StanceHead<float> head(a.model.config.d_model, a.head, rng);
    return std::make_unique<MeltStanceClassifier<float>>(
        std::move(model), make_encoder(a.model, a.tune.seed), std::move(head), history_len);
  }
  if (a.checkpoint.empty()) throw InputError("--checkpoint is required unless --rand-init is set");
  const Checkpoint ckpt = load_checkpoint(a.checkpoint);
  MeltModel<float> model = model_from_checkpoint(ckpt);
  if (!ckpt.meta.contains("encoder")) {
    throw CheckpointError(a.checkpoint + ": no word encoder description in header");
  }
  auto encoder = make_message_encoder(ckpt.meta.at("encoder"));
  StanceHead<float> head(model.config().d_model, a.head, rng);
  return std::make_unique<MeltStanceClassifier<float>>(std::move(model), std::move(encoder),
                                                       std::move(head), history_len);
}

struct TargetData {
  std::string target;
  std::vector<StanceExample> train, dev, test;
};

std::vector<StanceExample> load_examples(const std::string& path, const Corpus* history) {
  const auto rows = load_stance_jsonl(path);
  return attach_history(rows, history, kMaxHistory);
}

/// Groups train/dev/test by target (or pools them under "all"). Without a
/// dev file, a seeded slice of each target's training examples is held out.
std::vector<TargetData> arrange(const FinetuneArgs& a, const Corpus* history) {
  auto train = load_examples(a.train, history);
  auto test = load_examples(a.test, history);
  std::vector<StanceExample> dev;
  if (!a.dev.empty()) dev = load_examples(a.dev, history);

  auto by_target = [&](const std::vector<StanceExample>& v) {
    if (a.pooled) return std::map<std::string, std::vector<StanceExample>>{{"all", v}};
    return group_by_target(v);
  };
  const auto train_groups = by_target(train);
  const auto test_groups = by_target(test);
  const auto dev_groups = by_target(dev);

  std::vector<TargetData> out;
  for (const auto& [target, examples] : train_groups) {
    TargetData t;
    t.target = target;
    if (a.dev.empty()) {
      std::vector<StanceExample> shuffled = examples;
      Rng rng(a.tune.seed ^ 0xde5ULL);
      rng.shuffle(shuffled.begin(), shuffled.end());
      const auto n_dev = std::max<std::size_t>(
          1, static_cast<std::size_t>(a.dev_fraction * static_cast<double>(shuffled.size())));
      if (n_dev >= shuffled.size()) {
        throw InputError("target '" + target + "' has too few training examples to hold out dev");
      }
      t.dev.assign(shuffled.begin(), shuffled.begin() + static_cast<std::ptrdiff_t>(n_dev));
      t.train.assign(shuffled.begin() + static_cast<std::ptrdiff_t>(n_dev), shuffled.end());
    } else {
      t.train = examples;
      if (auto it = dev_groups.find(target); it != dev_groups.end()) t.dev = it->second;
      if (t.dev.empty()) throw InputError("no dev examples for target '" + target + "'");
    }
    if (auto it = test_groups.find(target); it != test_groups.end()) t.test = it->second;
    out.push_back(std::move(t));
  }
  for (const auto& [target, examples] : test_groups) {
    if (!train_groups.count(target)) {
      throw InputError("target '" + target + "' appears in test but not in train");
    }
  }
  return out;
}

struct TargetOutcome {
  std::vector<Prediction> predictions;
  json summary;
};

TargetOutcome run_target(const FinetuneArgs& a, const StanceClassifier<float>& base,
                         const TargetData& t, const fs::path& snapshot) {
  TargetOutcome out;
  if (a.model_kind == "mfc") {
    std::vector<Stance> labels;
    for (const auto& ex : t.train) labels.push_back(ex.label);
    for (const auto& ex : t.dev) labels.push_back(ex.label);
    const Stance label = mfc_label(labels);
    out.predictions = predict_constant(t.test, label);
    out.summary = {{"target", t.target}, {"mfc", std::string(stance_name(label))}};
    return out;
  }
  auto classifier = base.clone();
  const FinetuneResult r = search_finetune(classifier, std::span<const StanceExample>(t.train),
                                           std::span<const StanceExample>(t.dev), a.tune, a.trials);
  out.predictions = predict(*classifier, std::span<const StanceExample>(t.test));
  json cfg;
  to_json(cfg, r.config);
  out.summary = {{"target", t.target},
                 {"train", t.train.size()},
                 {"dev", t.dev.size()},
                 {"test", t.test.size()},
                 {"best_epoch", r.best_epoch},
                 {"best_dev_loss", r.best_dev_loss},
                 {"config", cfg}};
  if (!snapshot.empty()) {
    Checkpoint ckpt;
    ckpt.meta = {{"kind", classifier->kind()}, {"target", t.target}, {"finetune", cfg}};
    if (const auto* m = dynamic_cast<const MeltStanceClassifier<float>*>(classifier.get())) {
      ckpt.meta["config"] = m->model().config();
      ckpt.meta["encoder"] = m->encoder().describe();
      append_tensors(ckpt, m->model().named_parameters());
    }
    auto params = classifier->trainable_parameters();
    std::vector<NamedTensor<float>> extra;
    for (auto& np : params) {
      if (!ckpt.find(np.name)) extra.push_back(np);
    }
    append_tensors(ckpt, extra);
    save_checkpoint(ckpt, snapshot);
  }
  return out;
}

/// Runs every target, at most `jobs` at a time; output order follows `targets`.
std::vector<TargetOutcome> run_targets(const FinetuneArgs& a, const StanceClassifier<float>& base,
                                       const std::vector<TargetData>& targets,
                                       const fs::path& dir, const std::string& tag) {
  std::vector<TargetOutcome> outcomes(targets.size());
  std::vector<std::exception_ptr> errors(targets.size());
  std::atomic<std::size_t> next{0};
  auto worker = [&] {
    for (std::size_t i = next++; i < targets.size(); i = next++) {
      try {
        const fs::path snap =
            a.model_kind == "mfc" ? fs::path() : dir / ("tuned_" + targets[i].target + tag + ".ckpt");
        outcomes[i] = run_target(a, base, targets[i], snap);
      } catch (...) {
        errors[i] = std::current_exception();
      }
    }
  };
  const auto workers = static_cast<std::size_t>(std::max(1, a.jobs));
  std::vector<std::thread> pool;
  for (std::size_t w = 1; w < std::min(workers, targets.size()); ++w) pool.emplace_back(worker);
  worker();
  for (auto& t : pool) t.join();
  for (auto& e : errors) {
    if (e) std::rethrow_exception(e);
  }
  return outcomes;
}

std::vector<LabeledPrediction> labeled(std::span<const Prediction> predictions) {
  std::vector<LabeledPrediction> out;
  for (const auto& p : predictions) out.push_back({p.example_id, p.target, p.gold, p.predicted});
  return out;
}

int cmd_finetune(const FinetuneArgs& a) {
  a.tune.validate();
  if (a.trials < 1) throw InputError("--trials must be at least 1");
  const auto lengths = parse_lengths(a.history_lens);
  std::optional<Corpus> history;
  if (!a.history.empty()) history = ingest_jsonl(a.history);
  const auto targets = arrange(a, history ? &*history : nullptr);

  const fs::path dir(a.out);
  fs::create_directories(dir);
  std::ostringstream sweep;
  sweep << "history_len,weighted_f1,semeval_f1,examples\n" << std::setprecision(9);
  json summary{{"model", a.model_kind}, {"runs", json::array()}};

  for (const std::size_t len : lengths) {
    // Build (and validate against the checkpoint) before any training.
    std::unique_ptr<StanceClassifier<float>> base;
    if (a.model_kind != "mfc") base = base_classifier(a, len);
    const std::string tag = lengths.size() > 1 ? "_h" + std::to_string(len) : "";
    const auto outcomes = run_targets(a, *base, targets, dir, tag);

    std::vector<Prediction> all;
    json runs = json::array();
    for (const auto& o : outcomes) {
      all.insert(all.end(), o.predictions.begin(), o.predictions.end());
      runs.push_back(o.summary);
    }
    std::ostringstream csv;
    write_predictions_csv(csv, all);
    write_atomically(dir / ("predictions" + tag + ".csv"), csv.str());
    summary["runs"].push_back({{"history_len", len}, {"targets", runs}});

    if (!all.empty()) {
      const auto rows = labeled(all);
      const TargetTable table = per_target_report(rows);
      const double f1 = a.pooled ? table.pooled.weighted.f1 : table.average_f1;
      const double sem = a.pooled ? table.pooled.semeval_f1 : table.average_semeval_f1;
      sweep << len << "," << f1 << "," << sem << "," << all.size() << "\n";
      std::cout << "history " << len << ": weighted F1 " << std::fixed << std::setprecision(4)
                << f1 << ", SemEval F1 " << sem << std::defaultfloat << "\n";
    }
  }
  if (lengths.size() > 1) write_atomically(dir / "history_sweep.csv", sweep.str());
  write_atomically(dir / "finetune.json", summary.dump(2) + "\n");
  return 0;
}

// ---------------------------------------------------------------------------
// evaluate

struct EvaluateArgs {
  std::string predictions;
  std::string gold;
  std::string out;
  bool pooled = false;
};

int cmd_evaluate(const EvaluateArgs& a) {
  std::ifstream in(a.predictions);
  if (!in) throw InputError("cannot open " + a.predictions);
  const auto preds = read_predictions_csv(in, a.predictions);
  const auto gold_rows = load_stance_jsonl(a.gold);

  std::map<std::string, const StanceRow*> gold;
  for (const auto& r : gold_rows) gold[r.message.message_id] = &r;
  std::set<std::string> seen;
  std::vector<std::string> unknown;
  std::vector<LabeledPrediction> rows;
  for (const auto& p : preds) {
    auto it = gold.find(p.example_id);
    if (it == gold.end()) {
      unknown.push_back(p.example_id);
      continue;
    }
    if (it->second->stance_target != p.target) {
      throw InputError("example '" + p.example_id + "': target '" + p.target +
                       "' in predictions, '" + it->second->stance_target + "' in gold");
    }
    seen.insert(p.example_id);
    rows.push_back({p.example_id, p.target, it->second->label, p.predicted});
  }
  std::vector<std::string> missing;
  for (const auto& [id, row] : gold) {
    if (!seen.count(id)) missing.push_back(id);
  }
  if (!unknown.empty() || !missing.empty()) {
    std::string msg = "prediction ids do not match gold ids";
    auto list = [&](const char* what, const std::vector<std::string>& ids) {
      if (ids.empty()) return;
      msg += std::string("; ") + what + ":";
      for (std::size_t i = 0; i < ids.size() && i < 20; ++i) msg += " " + ids[i];
      if (ids.size() > 20) msg += " ... (" + std::to_string(ids.size()) + " total)";
    };
    list("missing from predictions", missing);
    list("not in gold", unknown);
    throw InputError(msg);
  }

  const TargetTable table = per_target_report(rows);
  print_target_table(std::cout, table, a.pooled);
  if (!a.out.empty()) {
    const fs::path dir(a.out);
    fs::create_directories(dir);
    std::ostringstream csv;
    write_target_csv(csv, table);
    write_atomically(dir / "metrics.csv", csv.str());
  }
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Message-level transformer: pre-training and stance fine-tuning"};
  app.require_subcommand(1);
  app.set_config("--config", "", "config file of section.key = value lines; flags win");
  app.allow_config_extras(CLI::config_extras_mode::error);
  bool quiet = false;
  app.add_flag("--quiet", quiet, "do not print the resolved config");

  SynthArgs synth;
  Echo s(app.add_subcommand("synth", "write a generated corpus"));
  s.option("--kind", synth.kind, "topic | stance | imbalanced");
  s.option("--out", synth.out, "output directory")->required();
  s.option("--users", synth.users, "number of users (0: generator default)");
  s.option("--history", synth.history, "messages per user (0: generator default)");
  s.option("--test-fraction", synth.test_fraction, "share of stance rows held out");
  s.option("--seed", synth.seed);

  PrepArgs prep;
  Echo p(app.add_subcommand("prep", "chunk a corpus and write the manifest"));
  p.option("--corpus", prep.corpus, "corpus JSONL")->required();
  p.option("--out", prep.out, "output directory")->required();
  p.option("--length", prep.length, "chunk length");

  PretrainArgs pre;
  Echo t(app.add_subcommand("pretrain", "masked-document pre-training"));
  t.option("--manifest", pre.manifest, "manifest.json from prep")->required();
  t.option("--out", pre.out, "output directory")->required();
  add_model_flags(t, pre.model);
  t.option("--lr", pre.train.base_lr, "peak learning rate");
  t.option("--weight-decay", pre.train.weight_decay);
  t.option("--warmup", pre.train.warmup_steps, "linear warm-up steps");
  t.option("--epochs", pre.train.epochs);
  t.option("--batch-size", pre.train.batch_size, "chunks per step");
  t.option("--clip-norm", pre.clip, "gradient norm clip (0: off)");
  t.option("--dev-fraction", pre.dev_fraction, "share of eligible users with dev messages");
  t.option("--dev-holdout", pre.dev_holdout, "messages per dev user");
  t.option("--seed", pre.train.seed);

  FinetuneArgs fin;
  Echo f(app.add_subcommand("finetune", "fine-tune and predict stance"));
  f.option("--checkpoint", fin.checkpoint, "pre-trained model");
  f.option("--train", fin.train, "training stance JSONL")->required();
  f.option("--test", fin.test, "test stance JSONL")->required();
  f.option("--dev", fin.dev, "dev stance JSONL (default: held out from train)");
  f.option("--history", fin.history, "corpus JSONL with the authors' earlier messages");
  f.option("--out", fin.out, "output directory")->required();
  f.option("--model", fin.model_kind, "melt | word | word-hist | mfc");
  f.flag("--rand-init", fin.rand_init, "random MeLT weights instead of a checkpoint");
  f.flag("--unfreeze-word", fin.tune.unfreeze_word, "train the word level too (default)");
  f.app()
      ->add_flag_callback("--freeze-word", [&fin] { fin.tune.unfreeze_word = false; },
                          "keep the word level fixed")
      ->excludes("--unfreeze-word");
  f.option("--history-len", fin.history_lens,
           "sequence length incl. the target (melt) or history count (word-hist); "
           "a comma list runs a sweep");
  f.option("--lr", fin.tune.lr);
  f.option("--weight-decay", fin.tune.weight_decay);
  f.option("--dropout", fin.tune.dropout, "dropout on the classifier input");
  f.option("--batch-size", fin.tune.batch_size);
  f.option("--max-epochs", fin.tune.max_epochs);
  f.option("--patience", fin.tune.patience, "early-stopping patience");
  f.option("--trials", fin.trials, "random-search trials (the first uses the given values)");
  f.option("--jobs", fin.jobs, "targets fine-tuned in parallel");
  f.flag("--pooled", fin.pooled, "one model over all targets");
  f.option("--dev-fraction", fin.dev_fraction, "held-out share when --dev is absent");
  f.option("--head-hidden1", fin.head.hidden1);
  f.option("--head-hidden2", fin.head.hidden2);
  f.option("--seed", fin.tune.seed);
  add_model_flags(f, fin.model);

  EvaluateArgs eval;
  Echo e(app.add_subcommand("evaluate", "score predictions against gold labels"));
  e.option("--predictions", eval.predictions, "predictions CSV")->required();
  e.option("--gold", eval.gold, "gold stance JSONL")->required();
  e.option("--out", eval.out, "directory for metrics.csv");
  e.flag("--pooled", eval.pooled, "aggregate row over pooled examples");

  for (const Echo* cmd : {&s, &p, &t, &f, &e}) bind_env(cmd->app());

  try {
    app.parse(argc, argv);
  } catch (const CLI::Success& done) {
    return app.exit(done);
  } catch (const CLI::ParseError& err) {
    app.exit(err);
    return kExitInput;
  }

  try {
    for (const Echo* cmd : {&s, &p, &t, &f, &e}) {
      if (!cmd->app()->parsed()) continue;
      if (!quiet) std::cout << "# resolved config\n" << cmd->str() << "# end\n";
    }
    if (s.app()->parsed()) return cmd_synth(synth);
    if (p.app()->parsed()) return cmd_prep(prep);
    if (t.app()->parsed()) return cmd_pretrain(pre);
    if (f.app()->parsed()) return cmd_finetune(fin);
    if (e.app()->parsed()) return cmd_evaluate(eval);
  } catch (const NumericError& err) {
    std::cerr << "numeric failure: " << err.what() << "\n";
    return kExitNumeric;
  } catch (const InputError& err) {
    std::cerr << "input error: " << err.what() << "\n";
    return kExitInput;
  } catch (const DimensionError& err) {
    std::cerr << "dimension error: " << err.what() << "\n";
    return kExitInput;
  } catch (const json::exception& err) {
    std::cerr << "input error: " << err.what() << "\n";
    return kExitInput;
  } catch (const fs::filesystem_error& err) {
    std::cerr << "input error: " << err.what() << "\n";
    return kExitInput;
  }
  return 0;
}
