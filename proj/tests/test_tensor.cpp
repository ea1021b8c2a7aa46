#include <doctest.h>

#include <cmath>
#include <vector>

#include "gradcheck.hpp"
#include "melt/ops.hpp"
#include "melt/optim.hpp"
#include "melt/random.hpp"

using namespace melt;
using melt::testing::gradient_check;
using melt::testing::worst;

namespace {

using T = Tensor<double>;

T random_param(Index r, Index c, Rng& rng, const std::string& name, double sd = 1.0) {
  Matrix<double> m(r, c);
  for (Index i = 0; i < m.size(); ++i) m.data()[i] = rng.normal() * sd;
  return T::parameter(m, name);
}

// Reduces any output to a scalar with fixed random weights, so every output
// element reaches the loss with a distinct coefficient.
T weighted_sum(const T& y, std::uint64_t seed = 99) {
  Rng rng(seed);
  Matrix<double> w(y.rows(), y.cols());
  for (Index i = 0; i < w.size(); ++i) w.data()[i] = rng.normal();
  return sum(hadamard(y, T::constant(w)));
}

constexpr double kTol = 1e-4;

}  // namespace

TEST_CASE("constant tensors do not record a graph") {
  T a = T::constant(Matrix<double>::Ones(2, 2));
  T b = matmul(a, a);
  CHECK_FALSE(b.requires_grad());
  CHECK(b.value()(0, 0) == doctest::Approx(2.0));
}

TEST_CASE("backward needs a scalar") {
  Rng rng(1);
  T x = random_param(2, 3, rng, "x");
  CHECK_THROWS_AS(backward(x), DimensionError);
}

TEST_CASE("shape mismatches are reported") {
  Rng rng(1);
  T a = random_param(2, 3, rng, "a");
  T b = random_param(2, 3, rng, "b");
  CHECK_THROWS_AS(matmul(a, b), DimensionError);
  CHECK_THROWS_AS(add(a, random_param(3, 3, rng, "c")), DimensionError);
  CHECK_THROWS_AS(cross_entropy(random_param(1, 3, rng, "z"), 3), DimensionError);
}

TEST_CASE("gradients accumulate across uses of one tensor") {
  T x = T::parameter(Matrix<double>::Constant(1, 1, 3.0), "x");
  backward(sum(hadamard(x, x)));
  CHECK(x.grad()(0, 0) == doctest::Approx(6.0));
}

TEST_CASE("finite differences: elementwise and linear ops") {
  Rng rng(7);
  T a = random_param(3, 4, rng, "a");
  T b = random_param(4, 2, rng, "b");
  T c = random_param(3, 4, rng, "c");
  T row = random_param(1, 4, rng, "row");

  SUBCASE("matmul") { CHECK(worst(gradient_check({a, b}, [&] { return weighted_sum(matmul(a, b)); })) < kTol); }
  SUBCASE("transpose") { CHECK(worst(gradient_check({a}, [&] { return weighted_sum(transpose(a)); })) < kTol); }
  SUBCASE("add with row broadcast") {
    CHECK(worst(gradient_check({a, row}, [&] { return weighted_sum(add(a, row)); })) < kTol);
  }
  SUBCASE("sub") { CHECK(worst(gradient_check({a, c}, [&] { return weighted_sum(sub(a, c)); })) < kTol); }
  SUBCASE("hadamard") {
    CHECK(worst(gradient_check({a, c}, [&] { return weighted_sum(hadamard(a, c)); })) < kTol);
  }
  SUBCASE("scale") { CHECK(worst(gradient_check({a}, [&] { return weighted_sum(scale(a, -2.5)); })) < kTol); }
  SUBCASE("gelu") { CHECK(worst(gradient_check({a}, [&] { return weighted_sum(gelu(a)); })) < kTol); }
  SUBCASE("sigmoid") { CHECK(worst(gradient_check({a}, [&] { return weighted_sum(sigmoid(a)); })) < kTol); }
  SUBCASE("sum and mean") {
    CHECK(worst(gradient_check({a}, [&] { return add(sum(hadamard(a, a)), mean(c)); })) < kTol);
  }
}

TEST_CASE("finite differences: normalisation and softmax") {
  Rng rng(11);
  T x = random_param(4, 6, rng, "x");
  T gamma = random_param(1, 6, rng, "gamma");
  T beta = random_param(1, 6, rng, "beta");

  SUBCASE("softmax rows") { CHECK(worst(gradient_check({x}, [&] { return weighted_sum(softmax(x, 1)); })) < kTol); }
  SUBCASE("softmax columns") { CHECK(worst(gradient_check({x}, [&] { return weighted_sum(softmax(x, 0)); })) < kTol); }
  SUBCASE("masked softmax") {
    T s = random_param(4, 4, rng, "s");
    const std::vector<bool> allowed{true, false, true, true};
    CHECK(worst(gradient_check({s}, [&] { return weighted_sum(masked_softmax(s, allowed)); })) < kTol);
  }
  SUBCASE("layer norm") {
    CHECK(worst(gradient_check({x, gamma, beta},
                               [&] { return weighted_sum(layer_norm(x, gamma, beta)); })) < kTol);
  }
}

TEST_CASE("finite differences: losses") {
  Rng rng(13);
  T p = random_param(3, 5, rng, "p");
  T t = random_param(3, 5, rng, "t");
  T z = random_param(1, 3, rng, "z");
  CHECK(worst(gradient_check({p, t}, [&] { return mse_loss(p, t); })) < kTol);
  for (Index label = 0; label < 3; ++label) {
    CHECK(worst(gradient_check({z}, [&] { return cross_entropy(z, label); })) < kTol);
  }
}

TEST_CASE("finite differences: slicing, stacking, gathering") {
  Rng rng(17);
  T a = random_param(3, 6, rng, "a");
  T b = random_param(3, 2, rng, "b");
  T c = random_param(2, 6, rng, "c");
  const std::vector<Index> rows{2, 0, 2, 1};

  CHECK(worst(gradient_check({a}, [&] { return weighted_sum(slice_cols(a, 1, 3)); })) < kTol);
  CHECK(worst(gradient_check({a, b}, [&] { return weighted_sum(concat_cols<double>({a, b})); })) < kTol);
  CHECK(worst(gradient_check({a, c}, [&] { return weighted_sum(concat_rows<double>({a, c})); })) < kTol);
  CHECK(worst(gradient_check({a}, [&] {
          return weighted_sum(gather_rows(a, std::span<const Index>(rows)));
        })) < kTol);
  CHECK(worst(gradient_check({a}, [&] { return weighted_sum(mean_rows(a)); })) < kTol);
}

TEST_CASE("dropout") {
  Rng rng(3);
  T x = T::parameter(Matrix<double>::Ones(20, 50), "x");

  SUBCASE("is the identity in eval mode") {
    T y = dropout(x, 0.5, rng, false);
    CHECK(y.value() == x.value());
  }
  SUBCASE("keeps the expectation in training mode") {
    T y = dropout(x, 0.2, rng, true);
    const double kept = (y.value().array() != 0.0).cast<double>().mean();
    CHECK(kept == doctest::Approx(0.8).epsilon(0.05));
    CHECK(y.value().mean() == doctest::Approx(1.0).epsilon(0.08));
  }
  SUBCASE("routes gradient through kept units only") {
    T y = dropout(x, 0.5, rng, true);
    backward(sum(y));
    CHECK(x.grad() == y.value());
  }
}

TEST_CASE("masked softmax gives disallowed keys zero weight") {
  T s = T::constant(Matrix<double>::Random(3, 4));
  T p = masked_softmax(s, std::vector<bool>{true, false, true, false});
  for (Index r = 0; r < 3; ++r) {
    CHECK(p.value()(r, 1) == 0.0);
    CHECK(p.value()(r, 3) == 0.0);
    CHECK(p.value().row(r).sum() == doctest::Approx(1.0));
  }
}

TEST_CASE("AdamW first step moves each weight by about lr") {
  Matrix<double> init(1, 3);
  init << 1.0, -2.0, 0.5;
  T w = T::parameter(init, "w");
  std::vector<T> params{w};
  AdamWOptions opts;
  opts.weight_decay = 0.0;
  auto state = AdamWState<double>::for_parameters(params, opts);
  backward(sum(w));
  adamw_step(std::span<T>(params), state, 0.01);
  for (Index i = 0; i < 3; ++i) CHECK(w.value()(0, i) == doctest::Approx(init(0, i) - 0.01).epsilon(1e-6));
}

TEST_CASE("AdamW decay is decoupled from the gradient") {
  T w = T::parameter(Matrix<double>::Constant(1, 1, 2.0), "w");
  std::vector<T> params{w};
  AdamWOptions opts;
  opts.weight_decay = 0.5;
  auto state = AdamWState<double>::for_parameters(params, opts);
  w.zero_grad();
  adamw_step(std::span<T>(params), state, 0.1);
  // Zero gradient: only the decay acts.
  CHECK(w.value()(0, 0) == doctest::Approx(2.0 * (1.0 - 0.1 * 0.5)));
}

TEST_CASE("AdamW refuses a parameter without a gradient") {
  T w = T::parameter(Matrix<double>::Ones(1, 1), "lonely");
  std::vector<T> params{w};
  auto state = AdamWState<double>::for_parameters(params, {});
  CHECK_THROWS_WITH_AS(adamw_step(std::span<T>(params), state, 0.1), doctest::Contains("lonely"),
                       DimensionError);
}

TEST_CASE("warm-up schedule") {
  CHECK(warmup_lr(1, 4e-3, 2000) == doctest::Approx(2e-6));
  CHECK(warmup_lr(1000, 4e-3, 2000) == doctest::Approx(2e-3));
  CHECK(warmup_lr(2000, 4e-3, 2000) == doctest::Approx(4e-3));
  CHECK(warmup_lr(5000, 4e-3, 2000) == doctest::Approx(4e-3));
  CHECK(warmup_lr(3, 1e-3, 0) == doctest::Approx(1e-3));
}
