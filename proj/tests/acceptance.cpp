// Acceptance runner: one PASS/FAIL line per criterion, nonzero exit on any FAIL.

#include <sys/wait.h>

#include <CLI11.hpp>

#include <algorithm>
#include <chrono>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <sstream>
#include <string>

#include "experiments.hpp"
#include "gradient_suite.hpp"
#include "oracles.hpp"

using namespace melt;
namespace fs = std::filesystem;
namespace ex = melt::experiments;

namespace {

struct Outcome {
  bool pass = false;
  std::string detail;
};

std::string fmt(const char* f, auto... args) {
  char buf[512];
  std::snprintf(buf, sizeof buf, f, args...);
  return buf;
}

// -- 1 ----------------------------------------------------------------------

Outcome gradients() {
  const auto start = std::chrono::steady_clock::now();
  const auto suite = testing::gradient_suite();
  double worst = 0.0;
  std::string where;
  for (const auto& e : suite) {
    if (e.relative_error > worst) {
      worst = e.relative_error;
      where = e.check;
    }
  }
  const double secs = ex::seconds_since(start);
  return {worst < 1e-4 && secs < 60.0,
          fmt("%zu checks, worst relative error %.2e (%s), %.1fs", suite.size(), worst,
              where.c_str(), secs)};
}

// -- 2 ----------------------------------------------------------------------

Outcome masking() {
  constexpr std::size_t kChunks = 4000, kReal = 30, kLen = 40;
  Rng fill(11);
  Matrix<float> vectors(kChunks * kReal, 4);
  for (Index i = 0; i < vectors.size(); ++i) vectors.data()[i] = static_cast<float>(fill.normal());
  std::vector<std::size_t> pool(static_cast<std::size_t>(vectors.rows()));
  for (std::size_t i = 0; i < pool.size(); ++i) pool[i] = i;

  Rng rng(1337);
  std::size_t real = 0, selected = 0, pad_selected = 0;
  std::map<MaskAction, std::size_t> actions;
  for (std::size_t c = 0; c < kChunks; ++c) {
    SequenceChunk chunk{"u", {}, 0};
    for (std::size_t s = 0; s < kReal; ++s) chunk.slots.push_back(c * kReal + s);
    chunk.slots.resize(kLen);
    const auto plan = apply_masking<float>(chunk, pool, vectors, rng);
    real += kReal;
    for (std::size_t s : plan.selected) {
      if (!chunk.slots[s]) ++pad_selected;
      ++actions[plan.slots[s].action];
      ++selected;
    }
  }
  const double rate = static_cast<double>(selected) / static_cast<double>(real);
  auto share = [&](MaskAction a) {
    return static_cast<double>(actions[a]) / static_cast<double>(selected);
  };
  const double m = share(MaskAction::MaskToken), u = share(MaskAction::UnchangedPredict),
               r = share(MaskAction::RandomReplace);
  const bool ok = real >= 100000 && rate >= 0.145 && rate <= 0.155 && std::abs(m - 0.8) <= 0.01 &&
                  std::abs(u - 0.1) <= 0.01 && std::abs(r - 0.1) <= 0.01 && pad_selected == 0;
  return {ok, fmt("%zu real slots, selected %.4f, mask/unchanged/random %.4f/%.4f/%.4f, "
                  "PAD selected %zu",
                  real, rate, m, u, r, pad_selected)};
}

// -- 3 ----------------------------------------------------------------------

testing::ChunkLayout layout_of(const std::vector<SequenceChunk>& chunks) {
  testing::ChunkLayout out;
  for (const auto& c : chunks) out.emplace_back(c.slots.begin(), c.slots.end());
  return out;
}

Outcome chunking() {
  Rng rng(2024);
  std::size_t mismatches = 0;
  for (int user = 0; user < 1000; ++user) {
    const std::size_t n = rng.index(201);
    std::vector<std::size_t> history(n);
    for (std::size_t i = 0; i < n; ++i) history[i] = i;
    if (layout_of(build_chunks("u", history, 40)) != testing::reference_chunks(n, 40)) ++mismatches;
  }
  std::vector<std::size_t> h95(95);
  for (std::size_t i = 0; i < 95; ++i) h95[i] = i;
  const auto c95 = build_chunks("u", h95, 40);
  const bool case95 = c95.size() == 3 && c95[0].slots.front() == 0u && c95[1].slots.front() == 40u &&
                      c95[2].slots.front() == 55u && c95[2].slots.back() == 94u;
  return {mismatches == 0 && case95,
          fmt("1000 random users, %zu mismatches; 95 messages -> %s", mismatches,
              case95 ? "[1..40],[41..80],[56..95]" : "wrong windows")};
}

// -- 4 ----------------------------------------------------------------------

Outcome metric_oracle() {
  Rng rng(77);
  std::size_t mismatches = 0;
  for (int trial = 0; trial < 1000; ++trial) {
    const std::size_t n = 1 + rng.index(80);
    std::vector<Stance> gold(n), pred(n);
    const std::size_t classes = 1 + rng.index(3);
    for (std::size_t i = 0; i < n; ++i) {
      gold[i] = static_cast<Stance>(rng.index(classes));
      pred[i] = static_cast<Stance>(rng.index(3));
    }
    const auto r = metrics_report(confusion(gold, pred));
    const auto o = testing::oracle_scores(gold, pred);
    if (r.weighted.precision != testing::to_double(o.weighted_precision) ||
        r.weighted.recall != testing::to_double(o.weighted_recall) ||
        r.weighted.f1 != testing::to_double(o.weighted_f1) ||
        r.semeval_f1 != testing::to_double(o.semeval_f1)) {
      ++mismatches;
    }
  }
  auto skewed = [](std::size_t a, std::size_t n, std::size_t f) {
    std::vector<Stance> g(a, Stance::Against);
    g.insert(g.end(), n, Stance::None);
    g.insert(g.end(), f, Stance::Favor);
    return g;
  };
  const auto hand_gold = skewed(8, 1, 1);
  const std::vector<Stance> hand_pred(hand_gold.size(), Stance::Against);
  const double hand = weighted_scores(confusion(hand_gold, hand_pred)).f1;

  const auto mfc_gold = skewed(80, 10, 10);
  const std::vector<Stance> mfc_pred(mfc_gold.size(), Stance::Against);
  const auto mfc = metrics_report(confusion(mfc_gold, mfc_pred));
  const double gap = std::abs(mfc.weighted.f1 - mfc.semeval_f1);

  const bool ok = mismatches == 0 && std::abs(hand - 0.711) <= 1e-3 &&
                  std::abs(hand - 0.8 * 1.6 / 1.8) <= 1e-9 && gap >= 0.10;
  return {ok, fmt("1000 random sets, %zu mismatches; hand case %.9f; MFC on 80/10/10 weighted "
                  "%.3f vs SemEval %.3f (gap %.1f points)",
                  mismatches, hand, mfc.weighted.f1, mfc.semeval_f1, 100.0 * gap)};
}

// -- 5 ----------------------------------------------------------------------

Outcome reconstruction() {
  const auto s = ex::run_reconstruction_experiment();
  const bool ok = s.model < s.global_mean && s.model < s.chunk_mean && s.epochs.size() <= 5 &&
                  s.seconds < 600.0;
  return {ok, fmt("held-out MSE %.5f vs global mean %.5f, chunk mean %.5f over %zu slots, "
                  "%zu epochs, %.0fs",
                  s.model, s.global_mean, s.chunk_mean, s.selected, s.epochs.size(), s.seconds)};
}

// -- 6 ----------------------------------------------------------------------

Outcome learnability() {
  const auto s = ex::run_learnability_experiment();
  const bool ok = s.melt >= 0.95 && s.melt > s.word && s.word_history > s.word && s.seconds < 600.0;
  return {ok, fmt("weighted F1 MeLT %.4f, word+history %.4f, word only %.4f, %.0fs", s.melt,
                  s.word_history, s.word, s.seconds)};
}

// -- 7 ----------------------------------------------------------------------

Outcome collapse() {
  const auto s = ex::run_collapse_experiment();
  // "converges to the majority class": at least 95% of test predictions
  const bool ok = s.majority_share >= 0.95;
  return {ok, fmt("%.1f%% of %zu test predictions are the training majority; weighted F1 %.4f "
                  "vs MFC %.4f",
                  100.0 * s.majority_share, s.test_examples, s.weighted_f1, s.mfc_weighted_f1)};
}

// -- 8 ----------------------------------------------------------------------

Outcome parameter_count() {
  MeltConfig c;
  c.n_layers = 2;
  const auto two = melt_parameter_count(c);
  c.n_layers = 6;
  const auto six = melt_parameter_count(c);
  const double e2 = (static_cast<double>(two) - 11621632.0) / 11621632.0;
  const double e6 = (static_cast<double>(six) - 33677568.0) / 33677568.0;
  return {std::abs(e2) < 0.02 && std::abs(e6) < 0.02,
          fmt("2 layers %lld (%+.3f%%), 6 layers %lld (%+.3f%%)", static_cast<long long>(two),
              100.0 * e2, static_cast<long long>(six), 100.0 * e6)};
}

// -- 9 ----------------------------------------------------------------------

Outcome determinism() {
  TopicCorpusOptions data;
  data.users = 16;
  data.messages_per_user = 50;
  const Corpus corpus = make_corpus(synthetic_topic_corpus(data));
  const auto encoder = ex::small_encoder();
  const Matrix<float> vectors = encode_all(encoder, corpus.messages);
  const DevSplit split = split_dev(corpus, {});
  MeltConfig config = ex::small_config();
  config.n_layers = 1;
  PretrainConfig pc = ex::small_pretrain_config();
  pc.epochs = 1;
  pc.batch_size = 4;

  auto run = [&] {
    Rng init(pc.seed);
    PretrainResult r = pretrain(MeltModel<float>(config, init), vectors, split.train_chunks,
                                split.dev_chunks, pc);
    nlohmann::json meta;
    meta["config"] = r.model.config();
    meta["dev_mse"] = r.best_dev_mse;
    return make_model_checkpoint(r.model, meta);
  };
  const std::string a = serialize_checkpoint(run());
  const std::string b = serialize_checkpoint(run());

  const Checkpoint loaded = deserialize_checkpoint(a);
  const MeltModel<float> original = model_from_checkpoint(deserialize_checkpoint(b));
  const MeltModel<float> back = model_from_checkpoint(loaded);
  bool forward_equal = true;
  for (const auto& chunk : split.dev_chunks) {
    const auto plan = keep_all_plan<float>(chunk, vectors.cols());
    const auto in = slot_inputs(chunk, plan, vectors);
    const std::span<const SlotInput<float>> view(in);
    const auto mask = attention_mask(view);
    forward_equal = forward_equal &&
                    encoder_forward(original, embed_sequence(original, view), mask).value() ==
                        encoder_forward(back, embed_sequence(back, view), mask).value();
  }
  const auto plans = dev_mask_plans(split.dev_chunks, vectors, pc);
  const double again = evaluate_dev(back, split.dev_chunks, plans, vectors);
  const double stored = loaded.meta["dev_mse"].get<double>();
  const bool ok = a == b && forward_equal && std::abs(again - stored) < 1e-6;
  return {ok, fmt("two runs %s (%zu bytes); round-trip forward %s; dev MSE header %.8f vs "
                  "re-evaluated %.8f",
                  a == b ? "bit-identical" : "differ", a.size(),
                  forward_equal ? "bit-exact" : "differs", stored, again)};
}

// -- 10 ---------------------------------------------------------------------

int shell(const std::string& cmd) {
  const int status = std::system(cmd.c_str());
  return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

Outcome history_sweep(const std::string& melt, const fs::path& work) {
  fs::remove_all(work);
  fs::create_directories(work);
  const std::string w = "\"" + work.string() + "\"";
  const std::string m = "\"" + melt + "\" --quiet ";
  const std::string model =
      " --layers 2 --d-model 32 --ff-dim 64 --heads 4 --hash-buckets 4096 --hash-scale 1";
  const std::string quiet = " > " + w + "/log.txt 2>&1";
  const std::vector<std::string> steps{
      m + "synth --kind stance --out " + w + "/data",
      m + "prep --corpus " + w + "/data/history.jsonl --out " + w + "/prep",
      m + "pretrain --manifest " + w + "/prep/manifest.json --out " + w + "/pre" + model +
          " --lr 2e-3 --warmup 100 --batch-size 1 --weight-decay 0.1",
      m + "finetune --checkpoint " + w + "/pre/model.ckpt --train " + w + "/data/train.jsonl --test " +
          w + "/data/test.jsonl --history " + w + "/data/history.jsonl --out " + w +
          "/ft --hash-scale 1 --head-hidden1 64 --head-hidden2 32 --lr 3e-3 --max-epochs 30 "
          "--trials 4 --history-len 1,10,20,30,40",
  };
  const auto start = std::chrono::steady_clock::now();
  for (const auto& s : steps) {
    if (const int code = shell(s + quiet); code != 0) {
      return {false, fmt("command exited %d, see %s/log.txt", code, work.string().c_str())};
    }
  }
  std::ifstream csv(work / "ft" / "history_sweep.csv");
  std::string line;
  std::getline(csv, line);
  std::vector<std::pair<int, double>> curve;
  while (std::getline(csv, line)) {
    std::istringstream fields(line);
    std::string len, f1;
    std::getline(fields, len, ',');
    std::getline(fields, f1, ',');
    curve.emplace_back(std::stoi(len), std::stod(f1));
  }
  // monotone up to a 0.02 wobble
  bool ok = curve.size() == 5;
  const int lengths[] = {1, 10, 20, 30, 40};
  std::string shape;
  for (std::size_t i = 0; i < curve.size(); ++i) {
    ok = ok && i < 5 && curve[i].first == lengths[i];
    if (i > 0) ok = ok && curve[i].second >= curve[i - 1].second - 0.02;
    shape += fmt("%s%d:%.3f", i ? " " : "", curve[i].first, curve[i].second);
  }
  return {ok, fmt("F1 by history length %s, %.0fs", shape.c_str(), ex::seconds_since(start))};
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"acceptance checks"};
  std::vector<int> only;
  std::string melt = MELT_CLI;
  std::string work = (fs::temp_directory_path() / "melt_acceptance").string();
  app.add_option("--only", only, "criteria to run (default: all)")->check(CLI::Range(1, 10));
  app.add_option("--melt", melt, "path to the melt binary");
  app.add_option("--work", work, "scratch directory for the CLI sweep");
  CLI11_PARSE(app, argc, argv);

  const std::vector<std::pair<std::string, std::function<Outcome()>>> criteria{
      {"gradient suite", gradients},
      {"masking statistics", masking},
      {"chunking oracle", chunking},
      {"metric oracle", metric_oracle},
      {"synthetic pre-training", reconstruction},
      {"fine-tuning learnability", learnability},
      {"random-init collapse", collapse},
      {"parameter count", parameter_count},
      {"determinism and persistence", determinism},
      {"history sweep", [&] { return history_sweep(melt, work); }},
  };
  int failed = 0;
  for (std::size_t i = 0; i < criteria.size(); ++i) {
    const int n = static_cast<int>(i) + 1;
    if (!only.empty() && std::find(only.begin(), only.end(), n) == only.end()) continue;
    Outcome o;
    try {
      o = criteria[i].second();
    } catch (const std::exception& e) {
      o = {false, std::string("threw: ") + e.what()};
    }
    failed += !o.pass;
    std::printf("%s %2d %s: %s\n", o.pass ? "PASS" : "FAIL", n, criteria[i].first.c_str(),
                o.detail.c_str());
    std::fflush(stdout);
  }
  return failed ? 1 : 0;
}
