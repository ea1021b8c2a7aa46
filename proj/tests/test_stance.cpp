#include <doctest.h>

#include <algorithm>
#include <sstream>

#include "melt/metrics.hpp"
#include "melt/stance.hpp"

using namespace melt;

namespace {

constexpr Index kDim = 16;

std::unique_ptr<MessageEncoder<float>> encoder(std::uint64_t seed = 21) {
  return std::make_unique<PooledHashEncoder<float>>(kDim, 2048, seed, kDefaultTokenLimit, 1.0);
}

StanceHead<float> head(Index input, std::uint64_t seed = 5) {
  Rng rng(seed);
  return StanceHead<float>(input, StanceHeadConfig{32, 16}, rng);
}

MeltConfig tiny_melt() {
  MeltConfig c;
  c.n_layers = 1;
  c.d_model = kDim;
  c.ff_dim = 32;
  c.n_heads = 2;
  c.max_seq = 6;
  return c;
}

RawMessage message(const std::string& user, int i, const std::string& text) {
  return {user, user + "_" + std::to_string(i), i, text};
}

std::string random_text(Rng& rng, std::size_t tokens = 6) {
  std::string out;
  for (std::size_t t = 0; t < tokens; ++t) out += "w" + std::to_string(rng.index(40)) + " ";
  return out;
}

std::vector<StanceExample> small_examples(std::size_t n, std::uint64_t seed) {
  Rng rng(seed);
  std::vector<StanceExample> out;
  for (std::size_t i = 0; i < n; ++i) {
    StanceExample ex;
    const std::string user = "u" + std::to_string(i);
    for (int h = 0; h < 3; ++h) ex.history.push_back(message(user, h, random_text(rng)));
    ex.target = message(user, 10, random_text(rng));
    ex.label = static_cast<Stance>(rng.index(3));
    ex.stance_target = "abortion";
    out.push_back(ex);
  }
  return out;
}

std::unique_ptr<StanceClassifier<float>> melt_classifier() {
  Rng rng(3);
  return std::make_unique<MeltStanceClassifier<float>>(MeltModel<float>(tiny_melt(), rng),
                                                       encoder(), head(kDim), 6);
}

FinetuneConfig quick(std::int64_t epochs = 1) {
  FinetuneConfig c;
  c.lr = 3e-3;
  c.max_epochs = epochs;
  return c;
}

Matrix<float> word_table(const StanceClassifier<float>& c) {
  const auto& m = dynamic_cast<const MeltStanceClassifier<float>&>(c);
  return m.encoder().parameters().front().value();
}

}  // namespace

TEST_CASE("argmax and probabilities") {
  Matrix<double> z(1, 3);
  z << 2, 0, 0;
  CHECK(argmax_stance(z) == Stance::Against);
  z << 1, 1, 1;
  CHECK(argmax_stance(z) == Stance::Against);
  z << 0, 3, 3;
  CHECK(argmax_stance(z) == Stance::None);
  z << -1, 0.5, 2;
  CHECK(argmax_stance(z) == Stance::Favor);
  Matrix<double> shifted = z.array() + 100.0;
  CHECK(argmax_stance(shifted) == argmax_stance(z));
  const auto p = stance_probabilities(z);
  CHECK(p[0] + p[1] + p[2] == doctest::Approx(1.0).epsilon(1e-12));
  CHECK(p[2] > p[1]);
}

TEST_CASE("most frequent class") {
  const auto labels = [](int a, int n, int f) {
    std::vector<Stance> out;
    out.insert(out.end(), a, Stance::Against);
    out.insert(out.end(), n, Stance::None);
    out.insert(out.end(), f, Stance::Favor);
    return out;
  };
  CHECK(mfc_label(labels(5, 3, 2)) == Stance::Against);
  CHECK(mfc_label(labels(0, 0, 4)) == Stance::Favor);
  CHECK(mfc_label(labels(0, 2, 2)) == Stance::None);
  CHECK_THROWS_AS(mfc_label(std::vector<Stance>{}), InputError);
  const auto ex = small_examples(4, 1);
  for (const auto& p : predict_constant(ex, Stance::Favor)) CHECK(p.predicted == Stance::Favor);
}

TEST_CASE("head shape") {
  const auto h = head(kDim);
  Rng rng(1);
  const auto x = Tensor<float>::constant(Matrix<float>::Random(1, kDim));
  CHECK(h(x, 0.0, {}).cols() == 3);
  CHECK_THROWS_AS(h(x, 0.05, ForwardMode{true, nullptr}), DimensionError);
  CHECK(h(x, 0.05, ForwardMode{true, &rng}).cols() == 3);
}

TEST_CASE("word baseline features") {
  WordStanceClassifier<float> clf(encoder(), head(2 * kDim), true, 40);
  StanceExample ex;
  ex.target = message("u", 5, "the target text");
  SUBCASE("no history gives a zero half") {
    const auto f = clf.features(ex).value();
    REQUIRE(f.cols() == 2 * kDim);
    CHECK(f.rightCols(kDim).isZero(0));
    CHECK(f.leftCols(kDim) == clf.encoder().encode(ex.target).value());
  }
  SUBCASE("one history message is its own mean") {
    ex.history.push_back(message("u", 1, "an older message"));
    const auto f = clf.features(ex).value();
    CHECK(f.rightCols(kDim).isApprox(clf.encoder().encode(ex.history[0]).value()));
  }
  SUBCASE("wrong head width") {
    CHECK_THROWS_AS(WordStanceClassifier<float>(encoder(), head(kDim), true), DimensionError);
  }
}

TEST_CASE("melt classifier construction") {
  Rng rng(3);
  CHECK_THROWS_AS(MeltStanceClassifier<float>(MeltModel<float>(tiny_melt(), rng), encoder(),
                                              head(kDim), 7),
                  InputError);
  Rng rng2(3);
  CHECK_THROWS_AS(MeltStanceClassifier<float>(MeltModel<float>(tiny_melt(), rng2), encoder(),
                                              head(kDim + 1), 6),
                  DimensionError);
  auto clf = melt_classifier();
  bool has_recon_head = false, has_positions = false;
  for (const auto& np : clf->trainable_parameters()) {
    has_recon_head |= np.name.rfind("head.", 0) == 0;
    has_positions |= np.name.find("position") != std::string::npos;
  }
  CHECK_FALSE(has_recon_head);
  CHECK(has_positions);
}

TEST_CASE("prediction is repeatable and probabilities are normalised") {
  auto clf = melt_classifier();
  const auto ex = small_examples(12, 2);
  const auto a = predict(*clf, ex);
  const auto b = predict(*clf, ex);
  REQUIRE(a.size() == 12);
  for (std::size_t i = 0; i < a.size(); ++i) {
    CHECK(a[i].predicted == b[i].predicted);
    CHECK(a[i].probabilities == b[i].probabilities);
    CHECK(a[i].probabilities[0] + a[i].probabilities[1] + a[i].probabilities[2] ==
          doctest::Approx(1.0).epsilon(1e-6));
  }
}

TEST_CASE("word level is frozen or trained as configured") {
  const auto train = small_examples(20, 3);
  const auto dev = small_examples(6, 4);
  SUBCASE("frozen") {
    auto clf = melt_classifier();
    const Matrix<float> before = word_table(*clf);
    FinetuneConfig cfg = quick(2);
    cfg.unfreeze_word = false;
    finetune(*clf, train, dev, cfg);
    CHECK(word_table(*clf) == before);
  }
  SUBCASE("unfrozen") {
    auto clf = melt_classifier();
    const Matrix<float> before = word_table(*clf);
    FinetuneConfig cfg = quick(1);
    cfg.unfreeze_word = true;
    cfg.batch_size = train.size();
    finetune(*clf, train, dev, cfg);
    CHECK(word_table(*clf) != before);
  }
}

TEST_CASE("message layers move during fine-tuning, the reconstruction head does not") {
  auto clf = melt_classifier();
  const auto& m = dynamic_cast<const MeltStanceClassifier<float>&>(*clf);
  const auto before = m.model().clone();
  finetune(*clf, small_examples(20, 5), small_examples(6, 6), quick(1));
  const auto pa = before.named_parameters();
  const auto pb = m.model().named_parameters();
  for (std::size_t i = 0; i < pa.size(); ++i) {
    if (pa[i].name.rfind("head.", 0) == 0) {
      CHECK(pa[i].tensor.value() == pb[i].tensor.value());
    } else {
      CHECK(pa[i].tensor.value() != pb[i].tensor.value());
    }
  }
}

TEST_CASE("early stopping keeps the best dev snapshot") {
  auto clf = melt_classifier();
  const auto dev = small_examples(8, 8);
  FinetuneConfig cfg = quick(12);
  cfg.patience = 2;
  const auto r = finetune(*clf, small_examples(30, 7), dev, cfg);
  double best = r.epochs.front().dev_loss;
  for (const auto& e : r.epochs) best = std::min(best, e.dev_loss);
  CHECK(r.best_dev_loss == best);
  CHECK(mean_loss(*clf, dev) == doctest::Approx(best).epsilon(1e-9));
  if (static_cast<std::int64_t>(r.epochs.size()) < cfg.max_epochs) {
    CHECK(r.epochs.size() - static_cast<std::size_t>(r.best_epoch) == 2);
  }
}

TEST_CASE("fine-tuning input errors") {
  auto clf = melt_classifier();
  const auto ex = small_examples(4, 9);
  CHECK_THROWS_AS(finetune(*clf, {}, ex, quick()), InputError);
  CHECK_THROWS_AS(finetune(*clf, ex, {}, quick()), InputError);
  FinetuneConfig bad = quick();
  bad.lr = 1e-2;
  CHECK_THROWS_AS(finetune(*clf, ex, ex, bad), InputError);
  bad = quick();
  bad.dropout = 0.1;
  CHECK_THROWS_AS(finetune(*clf, ex, ex, bad), InputError);
}

TEST_CASE("search trials stay in range and use their own seeds") {
  FinetuneConfig base = quick();
  const auto cfgs = sample_finetune_configs(base, 6);
  REQUIRE(cfgs.size() == 6);
  CHECK(cfgs[0].lr == base.lr);
  for (std::size_t i = 1; i < cfgs.size(); ++i) {
    CHECK_NOTHROW(cfgs[i].validate());
    CHECK(cfgs[i].seed != cfgs[0].seed);
  }
}

TEST_CASE("predictions CSV round trip") {
  std::vector<Prediction> preds{{"a1", "abortion", Stance::Favor, Stance::None, {0.25, 0.5, 0.25}},
                                {"b2", "climate", Stance::Against, Stance::Against, {0.9, 0.05, 0.05}}};
  std::stringstream io;
  write_predictions_csv(io, preds);
  const auto back = read_predictions_csv(io, "mem");
  REQUIRE(back.size() == 2);
  CHECK(back[1].example_id == "b2");
  CHECK(back[0].gold == Stance::Favor);
  CHECK(back[0].predicted == Stance::None);
  CHECK(back[1].probabilities == preds[1].probabilities);
  std::stringstream bad("nope\n");
  CHECK_THROWS_AS(read_predictions_csv(bad, "mem"), InputError);
}

TEST_CASE("linearly separable stance is learnable") {
  // Label = argmax of a fixed random linear map of the message vector;
  // messages within a small margin of a class boundary are skipped.
  const auto enc = encoder(33);
  Rng rng(404);
  Matrix<float> w(kDim, 3);
  for (Index i = 0; i < w.size(); ++i) w.data()[i] = static_cast<float>(rng.normal());
  std::vector<StanceExample> all;
  for (int i = 0; all.size() < 1000; ++i) {
    StanceExample ex;
    ex.target = message("u" + std::to_string(i), 0, random_text(rng));
    RowVector<float> score = enc->encode(ex.target).value() * w;
    std::sort(score.data(), score.data() + 3);
    if (score(2) - score(1) < 0.5f) continue;
    ex.label = argmax_stance(enc->encode(ex.target).value() * w);
    ex.stance_target = "atheism";
    all.push_back(ex);
  }
  const std::span<const StanceExample> view(all);
  const auto train = view.subspan(0, 700), dev = view.subspan(700, 150), test = view.subspan(850);
  WordStanceClassifier<float> clf(enc->clone(), head(kDim), false);
  FinetuneConfig cfg = quick(80);
  cfg.patience = 10;
  finetune(clf, train, dev, cfg);
  std::vector<Stance> gold, pred;
  for (const auto& p : predict(clf, test)) {
    gold.push_back(p.gold);
    pred.push_back(p.predicted);
  }
  CHECK(weighted_scores(confusion(gold, pred)).f1 >= 0.95);
}
