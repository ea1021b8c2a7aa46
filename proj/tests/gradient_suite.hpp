#pragma once

// Finite-difference checks over every differentiable op plus the full
// masked-reconstruction loss of a tiny model, all in double.

#include <string>
#include <vector>

#include "gradcheck.hpp"
#include "melt/corpus.hpp"
#include "melt/melt_model.hpp"
#include "melt/ops.hpp"
#include "melt/pretrain.hpp"

namespace melt::testing {

struct SuiteEntry {
  std::string check;
  double relative_error = 0.0;
};

namespace suite_detail {

using T = Tensor<double>;

inline T random_param(Index r, Index c, Rng& rng, const std::string& name) {
  Matrix<double> m(r, c);
  for (Index i = 0; i < m.size(); ++i) m.data()[i] = rng.normal();
  return T::parameter(m, name);
}

inline T weighted_sum(const T& y) {
  Rng rng(99);
  Matrix<double> w(y.rows(), y.cols());
  for (Index i = 0; i < w.size(); ++i) w.data()[i] = rng.normal();
  return sum(hadamard(y, T::constant(w)));
}

}  // namespace suite_detail

/// The tiny model: sequence length 4, d 8, one layer, two heads, no dropout.
inline MeltConfig tiny_config() {
  MeltConfig c;
  c.n_layers = 1;
  c.d_model = 8;
  c.ff_dim = 16;
  c.n_heads = 2;
  c.dropout = 0.0;
  c.max_seq = 4;
  return c;
}

/// One chunk of three messages and a PAD, with one slot of each masking
/// action selected.
inline double tiny_reconstruction_loss_check(std::vector<SuiteEntry>& out) {
  using suite_detail::T;
  Rng rng(5);
  MeltModel<double> model(tiny_config(), rng);
  Matrix<double> vectors(5, 8);
  for (Index i = 0; i < vectors.size(); ++i) vectors.data()[i] = rng.normal() * 0.5;

  SequenceChunk chunk{"u", {0, 1, 2, std::nullopt}, 0};
  MaskPlan<double> plan;
  plan.slots.resize(4);
  plan.slots[0].action = MaskAction::MaskToken;
  plan.slots[1].action = MaskAction::UnchangedPredict;
  plan.slots[2].action = MaskAction::RandomReplace;
  plan.slots[2].replacement = 4;
  plan.selected = {0, 1, 2};
  plan.targets = vectors.topRows(3);

  const std::vector<SequenceChunk> chunks{chunk};
  const std::vector<MaskPlan<double>> plans{plan};
  auto loss = [&] {
    auto out = predict_masked<double>(model, chunks, plans, vectors);
    return masked_loss(out.predictions, out.targets);
  };
  const auto checks = gradient_check(model.parameters(), loss);
  double w = 0.0;
  for (const auto& c : checks) {
    out.push_back({"reconstruction loss / " + c.name, c.relative_error});
    w = std::max(w, c.relative_error);
  }
  return w;
}

inline std::vector<SuiteEntry> gradient_suite() {
  using namespace suite_detail;
  std::vector<SuiteEntry> out;
  Rng rng(7);
  T a = random_param(3, 4, rng, "a");
  T b = random_param(4, 2, rng, "b");
  T c = random_param(3, 4, rng, "c");
  T row = random_param(1, 4, rng, "row");
  T sq = random_param(4, 4, rng, "sq");
  T gamma = random_param(1, 4, rng, "gamma");
  T beta = random_param(1, 4, rng, "beta");
  T z = random_param(1, 3, rng, "z");
  const std::vector<Index> rows{2, 0, 2, 1};
  const std::vector<bool> allowed{true, false, true, true};

  auto run = [&](const std::string& name, std::vector<T> params, std::function<T()> f) {
    out.push_back({name, worst(gradient_check(std::move(params), f))});
  };
  run("matmul", {a, b}, [&] { return weighted_sum(matmul(a, b)); });
  run("transpose", {a}, [&] { return weighted_sum(transpose(a)); });
  run("add", {a, c}, [&] { return weighted_sum(add(a, c)); });
  run("add (row broadcast)", {a, row}, [&] { return weighted_sum(add(a, row)); });
  run("sub", {a, c}, [&] { return weighted_sum(sub(a, c)); });
  run("hadamard", {a, c}, [&] { return weighted_sum(hadamard(a, c)); });
  run("scale", {a}, [&] { return weighted_sum(scale(a, -1.5)); });
  run("gelu", {a}, [&] { return weighted_sum(gelu(a)); });
  run("sigmoid", {a}, [&] { return weighted_sum(sigmoid(a)); });
  run("softmax (rows)", {a}, [&] { return weighted_sum(softmax(a, 1)); });
  run("softmax (columns)", {a}, [&] { return weighted_sum(softmax(a, 0)); });
  run("masked softmax", {sq}, [&] { return weighted_sum(masked_softmax(sq, allowed)); });
  run("layer norm", {a, gamma, beta}, [&] { return weighted_sum(layer_norm(a, gamma, beta)); });
  run("sum", {a}, [&] { return sum(hadamard(a, a)); });
  run("mean", {a}, [&] { return mean(hadamard(a, c)); });
  run("mse loss", {a, c}, [&] { return mse_loss(a, c); });
  run("cross entropy", {z}, [&] { return cross_entropy(z, 2); });
  run("slice cols", {a}, [&] { return weighted_sum(slice_cols(a, 1, 2)); });
  run("concat cols", {a, c}, [&] { return weighted_sum(concat_cols<double>({a, c})); });
  run("concat rows", {a, c}, [&] { return weighted_sum(concat_rows<double>({a, c})); });
  run("gather rows", {a}, [&] { return weighted_sum(gather_rows(a, std::span<const Index>(rows))); });
  run("mean rows", {a}, [&] { return weighted_sum(mean_rows(a)); });
  tiny_reconstruction_loss_check(out);
  return out;
}

}  // namespace melt::testing
